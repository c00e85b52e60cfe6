"""Substep position-based solver.

One outer step: refresh the instrument and its grasp, run ``substeps``
sub-iterations of predict / project-all-constraints / average / velocity
update, then resolve tool contacts once. Constraint projections within a
substep all read the same position snapshot; per-vertex corrections are
summed and divided by the number of contributing constraints.

The per-constraint functions here are the reference semantics (and what the
unit tests exercise); ``Simulation`` drives the batched backend kernels,
which implement the same arithmetic over whole constraint arrays.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import backends, collision, tool as tool_mod
from .errors import SimulationDiverged, ValidationError
from .mesh import RestState, SceneConfig, TetMesh

COINCIDENT_EPS = 1e-12   # m, coincident-endpoint guard
DEGENERATE_GRAD_EPS = 1e-18


@dataclass
class ParticleState:
    """Positions, velocities, inverse masses, and the per-vertex grasp flag."""

    x: np.ndarray        # (V, 3) m
    v: np.ndarray        # (V, 3) m/s
    w: np.ndarray        # (V,) 1/kg, 0 for pinned
    grasped: np.ndarray  # (V,) uint8

    @classmethod
    def from_mesh(cls, mesh: TetMesh, rest: RestState):
        nv = mesh.vertex_count
        return cls(
            x=mesh.positions_rest.copy(),
            v=np.zeros((nv, 3)),
            w=rest.inverse_mass.copy(),
            grasped=np.zeros(nv, dtype=np.uint8),
        )


@dataclass
class DistanceConstraint:
    a: int
    b: int
    rest_length: float
    stiffness: float = 1.0


@dataclass
class VolumeConstraint:
    a: int
    b: int
    c: int
    d: int
    rest_volume: float
    stiffness: float = 1.0


@dataclass
class AttachmentConstraint:
    """Vertex tied to a triangle centroid (face_vertices) or a static anchor point."""

    vertex: int
    face_vertices: tuple | None = None
    anchor: np.ndarray | None = None
    rest: float = 0.0
    stiffness: float = 1.0


@dataclass
class SolverParams:
    dt: float
    substeps: int
    gravity: np.ndarray
    damping: float = 0.0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValidationError("dt must be positive")
        if self.substeps < 1:
            raise ValidationError("substeps must be >= 1")
        self.gravity = np.asarray(self.gravity, dtype=np.float64)

    @property
    def h(self):
        return self.dt / self.substeps


class CorrectionAccumulator:
    """Per-vertex correction sums and contribution counts for one substep."""

    def __init__(self, vertex_count: int):
        self.dx = np.zeros((vertex_count, 3))
        self.n = np.zeros(vertex_count, dtype=np.int64)

    def reset(self):
        self.dx[:] = 0.0
        self.n[:] = 0


def integrate_predict(x, v, w, h, gravity):
    """Explicit gravity kick and drift; pinned vertices stay put with zero velocity."""
    free = (w > 0.0)[:, None]
    v_pred = np.where(free, v + h * np.asarray(gravity), 0.0)
    return x + h * v_pred, v_pred


def project_distance(c: DistanceConstraint, x, w, acc: CorrectionAccumulator):
    """Accumulate the stretch correction for one edge; both endpoint counts advance."""
    diff = x[c.a] - x[c.b]
    dist = float(np.sqrt(diff @ diff))
    wa, wb = w[c.a], w[c.b]
    wsum = wa + wb
    if dist <= COINCIDENT_EPS or wsum <= 0.0:
        return
    scale = c.stiffness * (dist - c.rest_length) / (dist * wsum)
    acc.dx[c.a] += -wa * scale * diff
    acc.dx[c.b] += wb * scale * diff
    acc.n[c.a] += 1
    acc.n[c.b] += 1


def tet_volume_gradients(x, indices):
    """Signed volume of a tet and its analytic per-vertex gradients (4, 3)."""
    a, b, c, d = indices
    ba = x[b] - x[a]
    ca = x[c] - x[a]
    da = x[d] - x[a]
    grad_b = np.cross(ca, da) / 6.0
    grad_c = np.cross(da, ba) / 6.0
    grad_d = np.cross(ba, ca) / 6.0
    grad_a = -(grad_b + grad_c + grad_d)
    volume = float(grad_d @ da)
    return volume, np.stack([grad_a, grad_b, grad_c, grad_d])


def project_volume(c: VolumeConstraint, x, acc: CorrectionAccumulator):
    """Volume restoration scaled by constraint value over squared gradient norm.

    No inverse-mass weighting enters here; pinning is enforced when the
    averaged corrections are applied.
    """
    indices = (c.a, c.b, c.c, c.d)
    volume, grads = tet_volume_gradients(x, indices)
    denom = float(np.sum(grads * grads))
    if denom <= DEGENERATE_GRAD_EPS:
        return
    s = (volume - c.rest_volume) / denom
    for vid, grad in zip(indices, grads):
        acc.dx[vid] += -s * c.stiffness * grad
        acc.n[vid] += 1


def project_attachment(c: AttachmentConstraint, x, w, acc: CorrectionAccumulator):
    """Stretch correction between a vertex and a face centroid or static anchor.

    The centroid's share is split equally between the face's vertices; a
    static anchor has zero inverse mass, so the vertex absorbs everything.
    """
    if c.face_vertices is not None:
        f = list(c.face_vertices)
        centroid = x[f].mean(axis=0)
        wc = float(w[f].sum()) / 3.0
    else:
        centroid = np.asarray(c.anchor, dtype=np.float64)
        wc = 0.0
    wv = w[c.vertex]
    wsum = wv + wc
    diff = x[c.vertex] - centroid
    dist = float(np.sqrt(diff @ diff))
    if dist <= COINCIDENT_EPS or wsum <= 0.0:
        return
    scale = c.stiffness * (dist - c.rest) / (dist * wsum)
    acc.dx[c.vertex] += -wv * scale * diff
    acc.n[c.vertex] += 1
    if c.face_vertices is not None:
        share = (wc * scale / 3.0) * diff
        for vid in f:
            acc.dx[vid] += share
            acc.n[vid] += 1


def project_grasp(vertex, drag_point, x, w, acc: CorrectionAccumulator,
                  rest=0.0, stiffness=1.0):
    """Drag constraint toward the tool's drag point, which acts as infinite mass."""
    if w[vertex] <= 0.0:
        return
    diff = x[vertex] - np.asarray(drag_point, dtype=np.float64)
    dist = float(np.sqrt(diff @ diff))
    if dist <= COINCIDENT_EPS:
        return
    acc.dx[vertex] += -stiffness * (dist - rest) / dist * diff
    acc.n[vertex] += 1


def apply_accumulated_corrections(acc: CorrectionAccumulator, x, w):
    """Average each vertex's summed corrections; untouched and pinned vertices stay."""
    mask = (acc.n > 0) & (w > 0.0)
    x[mask] += acc.dx[mask] / acc.n[mask, None]


def update_velocities(x_new, x_prev, h):
    return (x_new - x_prev) / h


def run_substeps_reference(state: ParticleState, distance, volume, attachments, grasps,
                           params: SolverParams):
    """Loop-of-constraints ground truth for one outer step's substep phase.

    Same constraint ordering as the batched kernels: distance, grasp,
    attachment, then volume. Used by equivalence tests; quadratic-ish cost.
    """
    acc = CorrectionAccumulator(len(state.x))
    damp = 1.0 if params.damping == 0.0 else max(0.0, 1.0 - params.damping * params.h)
    for _ in range(params.substeps):
        x_tilde, _ = integrate_predict(state.x, state.v, state.w, params.h, params.gravity)
        acc.reset()
        for c in distance:
            project_distance(c, x_tilde, state.w, acc)
        for vertex, point, rest, k in grasps:
            project_grasp(vertex, point, x_tilde, state.w, acc, rest, k)
        for c in attachments:
            project_attachment(c, x_tilde, state.w, acc)
        for c in volume:
            project_volume(c, x_tilde, acc)
        apply_accumulated_corrections(acc, x_tilde, state.w)
        state.v = update_velocities(x_tilde, state.x, params.h)
        if damp != 1.0:
            state.v *= damp
        state.x = x_tilde
    return state


# --------------------------------------------------------------------------
# batched engine
# --------------------------------------------------------------------------


class Simulation:
    """N independent scene instances stepped together through a backend.

    Instances share the read-only mesh, rest state, and config; per-instance
    mutable state lives in stacked arrays, so instance i of a batch evolves
    bitwise identically to a batch of one.
    """

    def __init__(self, mesh: TetMesh, rest: RestState, cfg: SceneConfig,
                 num_instances: int = 1, backend: str = "auto",
                 mode: str = "deterministic", threads: int | None = None,
                 k_contact: float = 1.0, contact_iterations: int = 8):
        if mode not in ("deterministic", "parallel"):
            raise ValidationError(f"unknown execution mode {mode!r}")
        self.mesh = mesh
        self.rest = rest
        self.cfg = cfg
        self.params = SolverParams(cfg.dt, cfg.substeps, cfg.gravity, cfg.damping)
        self.backend = backends.get_backend(backend)
        self.mode = mode
        self.threads = threads if threads else min(num_instances, os.cpu_count() or 1)
        self.k_contact = k_contact
        self.contact_iterations = contact_iterations

        n, nv = num_instances, mesh.vertex_count
        self.num_instances = n
        self.x = np.ascontiguousarray(np.tile(mesh.positions_rest, (n, 1, 1)))
        self.v = np.zeros((n, nv, 3))
        self.w = rest.inverse_mass.copy()
        self.grasped = np.zeros((n, nv), dtype=np.uint8)
        self.grasp_vertex = np.full(n, -1, dtype=np.int64)
        self.tool = tool_mod.ToolBatch.from_config(cfg, n)

        self.edges = np.ascontiguousarray(mesh.edges, dtype=np.int32)
        self.tets = np.ascontiguousarray(mesh.tets, dtype=np.int32)
        self.faces = np.ascontiguousarray(mesh.surface_faces, dtype=np.int32)
        self.rest_length = np.ascontiguousarray(rest.rest_length)
        self.rest_volume = np.ascontiguousarray(rest.rest_volume)

        n_att = len(cfg.attachments)
        self.att_vertex = np.zeros(n_att, dtype=np.int32)
        self.att_faces = np.zeros((n_att, 3), dtype=np.int32)
        self.att_is_face = np.zeros(n_att, dtype=np.uint8)
        self.att_anchor = np.zeros((n_att, 3))
        self.att_rest = np.zeros(n_att)
        self.att_k = np.zeros(n_att)
        for i, spec in enumerate(cfg.attachments):
            self.att_vertex[i] = spec.vertex
            self.att_rest[i] = spec.rest
            self.att_k[i] = spec.stiffness
            if spec.face is not None:
                self.att_faces[i] = mesh.surface_faces[spec.face]
                self.att_is_face[i] = 1
            else:
                self.att_anchor[i] = spec.anchor

        self._acc = np.zeros((n, nv, 3))
        self._cnt = np.zeros((n, nv), dtype=np.int64)
        self._scratch = self.backend.make_scratch(n, nv)
        self.step_count = 0

    @classmethod
    def from_scene(cls, path: str, **kwargs):
        from .mesh import load_scene
        mesh, rest, cfg = load_scene(path)
        return cls(mesh, rest, cfg, **kwargs)

    def reset_instances(self, idx=None):
        idx = np.arange(self.num_instances) if idx is None else np.atleast_1d(idx)
        self.x[idx] = self.mesh.positions_rest
        self.v[idx] = 0.0
        self.grasped[idx] = 0
        self.grasp_vertex[idx] = -1
        self.tool.reset_instances(idx, self.cfg)

    def step(self, targets=None, angles=None, raise_on_divergence=True):
        """One outer step. Returns per-instance flags; optionally raises on divergence."""
        info = {}
        if targets is not None:
            if angles is None:
                angles = self.tool.clamp_angle
            info["clipped"], info["rejected"] = self.tool.apply_commands(targets, angles)
        self.tool.update_grasps(self.x, self.w, self.grasped, self.grasp_vertex)

        self.backend.run_substeps(
            self.x, self.v, self.w,
            self.edges, self.rest_length, self.cfg.k_s,
            self.tets, self.rest_volume, self.cfg.k_v,
            self.att_vertex, self.att_faces, self.att_is_face,
            self.att_anchor, self.att_rest, self.att_k,
            self.grasp_vertex, self.tool.drag_points(),
            self.params.gravity, self.params.h, self.params.substeps,
            self.params.damping, self._acc, self._cnt,
            self.threads, self.mode == "parallel", self._scratch,
        )

        contacts = 0
        if len(self.faces):
            caps = self.tool.capsule_rows()
            for i in range(self.num_instances):
                found = self.backend.detect_contacts(
                    self.x[i], self.faces, caps[i], self.contact_iterations
                )
                if len(found[0]):
                    collision.resolve_contact_arrays(
                        self.x[i], self.w, self.faces, *found, k_c=self.k_contact
                    )
                    contacts += len(found[0])
        info["contacts"] = contacts

        self.step_count += 1
        finite = np.isfinite(self.x).all(axis=(1, 2))
        info["diverged"] = ~finite
        if raise_on_divergence and not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise SimulationDiverged(
                f"instance {bad} produced non-finite positions at step {self.step_count}",
                step=self.step_count,
            )
        return info

    def kinetic_energy(self):
        """Total kinetic energy per instance, joules."""
        speed2 = np.einsum("nvq,nvq->nv", self.v, self.v)
        return 0.5 * speed2 @ self.mesh.vertex_mass

    def instance_state(self, i) -> ParticleState:
        """Array views of instance i (shared memory, mutate with care)."""
        return ParticleState(x=self.x[i], v=self.v[i], w=self.w, grasped=self.grasped[i])

    def tool_model(self, i) -> tool_mod.ToolModel:
        model = self.tool.tool_model(i)
        model.grasp_vertex = int(self.grasp_vertex[i])
        return model
