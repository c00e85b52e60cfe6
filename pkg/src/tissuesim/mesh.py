"""Tetrahedral mesh ingestion, derived topology, rest state, and scene configuration.

The mesh file format is a small plain-text format (see ``parse_mesh_text``);
a built-in generator produces regular tissue-slab meshes so benchmark scenes
do not need external assets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ParseError, ValidationError

MIN_TET_VOLUME = 1e-12  # m^3, below this a tet counts as degenerate


@dataclass
class TetMesh:
    """Tetrahedral topology with derived edges and surface faces.

    Read-only after construction; shared freely between environment instances.
    """

    vertex_count: int
    positions_rest: np.ndarray  # (V, 3) float64, meters
    tets: np.ndarray            # (T, 4) int32
    edges: np.ndarray           # (E, 2) int32, each pair sorted, rows unique
    surface_faces: np.ndarray   # (F, 3) int32, outward winding
    pinned: np.ndarray          # (P,) int32, sorted
    vertex_mass: np.ndarray     # (V,) float64, kg


@dataclass
class RestState:
    rest_length: np.ndarray   # (E,) float64, m
    rest_volume: np.ndarray   # (T,) float64, m^3
    inverse_mass: np.ndarray  # (V,) float64, 1/kg; 0 exactly for pinned


@dataclass
class AttachmentSpec:
    """A vertex tied to a face centroid of the same mesh or to a static anchor point."""

    vertex: int
    face: int | None = None
    anchor: np.ndarray | None = None  # (3,) when face is None
    rest: float = 0.0
    stiffness: float = 1.0


def _vec3(x=0.0, y=0.0, z=0.0):
    return np.array([x, y, z], dtype=np.float64)


@dataclass
class SceneConfig:
    """Every tunable of a scene: mesh source, solver, tool, and task parameters."""

    mesh_path: str = ""
    total_mass: float = 0.08

    # solver
    dt: float = 0.01
    substeps: int = 10
    gravity: np.ndarray = field(default_factory=lambda: _vec3(0.0, -9.81, 0.0))
    k_s: float = 1.0
    k_v: float = 0.9
    damping: float = 0.0

    # tool
    rcm: np.ndarray = field(default_factory=lambda: _vec3(0.04875, 0.09, 0.0225))
    tool_start: np.ndarray = field(default_factory=lambda: _vec3(0.04875, 0.03, 0.0225))
    shaft_radius: float = 0.003
    clamp_radius: float = 0.002
    clamp_length: float = 0.008
    clamp_angle: float = 2.0   # degrees, initial jaw opening
    grasp_radius: float = 0.005

    # task
    target: np.ndarray = field(default_factory=lambda: _vec3(0.075, 0.0, 0.030))
    action_scale: float = 0.004
    max_episode_steps: int = 100
    success_threshold: float = 0.003
    reward_distance_weight: float = -1.0
    reward_delta_weight: float = -10.0
    reward_success_weight: float = 100.0
    reward_scale: float = 1.0
    workspace_low: np.ndarray = field(default_factory=lambda: _vec3(-0.01, -0.01, -0.01))
    workspace_high: np.ndarray = field(default_factory=lambda: _vec3(0.11, 0.08, 0.055))

    attachments: list[AttachmentSpec] = field(default_factory=list)

    def validate(self):
        if self.dt <= 0.0:
            raise ValidationError("dt must be positive")
        if self.substeps < 1:
            raise ValidationError("substeps must be >= 1")
        for name in ("k_s", "k_v"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.damping < 0.0:
            raise ValidationError("damping must be >= 0")
        if self.total_mass <= 0.0:
            raise ValidationError("total_mass must be positive")
        if not 0.0 < self.clamp_angle < 30.0:
            raise ValidationError("clamp_angle must lie in (0, 30) degrees")
        if self.grasp_radius <= 0.0:
            raise ValidationError("grasp_radius must be positive")
        if self.shaft_radius <= 0.0 or self.clamp_radius <= 0.0 or self.clamp_length <= 0.0:
            raise ValidationError("tool capsule dimensions must be positive")
        if self.success_threshold <= 0.0:
            raise ValidationError("success_threshold must be positive")
        if self.max_episode_steps < 1:
            raise ValidationError("max_episode_steps must be >= 1")
        if self.action_scale <= 0.0:
            raise ValidationError("action_scale must be positive")
        if not np.all(self.workspace_low < self.workspace_high):
            raise ValidationError("workspace_low must be strictly below workspace_high")
        for att in self.attachments:
            if att.rest < 0.0:
                raise ValidationError("attachment rest distance must be >= 0")
            if not 0.0 <= att.stiffness <= 1.0:
                raise ValidationError("attachment stiffness must lie in [0, 1]")
        return self


# --------------------------------------------------------------------------
# topology
# --------------------------------------------------------------------------

# Faces of tet (a, b, c, d) wound outward when the tet has positive signed volume.
_TET_FACES = ((0, 2, 1), (0, 1, 3), (0, 3, 2), (1, 2, 3))


def derive_topology(tets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges and the boundary faces of a tet soup.

    A face is on the surface iff its (unordered) vertex triple belongs to
    exactly one tetrahedron. Output rows are sorted for reproducibility.
    """
    tets = np.asarray(tets, dtype=np.int32).reshape(-1, 4)
    if len(tets) == 0:
        return np.zeros((0, 2), np.int32), np.zeros((0, 3), np.int32)

    pair_idx = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    pairs = np.concatenate([tets[:, p] for p in pair_idx], axis=0)
    pairs = np.sort(pairs, axis=1)
    edges = np.unique(pairs, axis=0)

    faces = np.concatenate([tets[:, f] for f in _TET_FACES], axis=0)
    keys = np.sort(faces, axis=1)
    _, first, counts = np.unique(keys, axis=0, return_index=True, return_counts=True)
    surface = faces[first[counts == 1]]
    order = np.lexsort(np.sort(surface, axis=1).T[::-1])
    return edges.astype(np.int32), surface[order].astype(np.int32)


def signed_volumes(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    a, b, c, d = (positions[tets[:, i]] for i in range(4))
    return np.einsum("ij,ij->i", np.cross(b - a, c - a), d - a) / 6.0


def fix_orientation(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Swap two indices of every tet whose signed rest volume is negative."""
    tets = np.asarray(tets, dtype=np.int32).reshape(-1, 4).copy()
    if len(tets):
        flip = signed_volumes(positions, tets) < 0.0
        tets[flip] = tets[flip][:, [0, 1, 3, 2]]
    return tets


def compute_rest_state(mesh: TetMesh) -> RestState:
    pos = mesh.positions_rest
    if len(mesh.edges):
        rest_length = np.linalg.norm(pos[mesh.edges[:, 0]] - pos[mesh.edges[:, 1]], axis=1)
        if np.any(rest_length <= 0.0):
            raise ValidationError("degenerate edge with zero rest length")
    else:
        rest_length = np.zeros(0)

    rest_volume = signed_volumes(pos, mesh.tets) if len(mesh.tets) else np.zeros(0)
    if np.any(np.abs(rest_volume) < MIN_TET_VOLUME):
        bad = int(np.argmin(np.abs(rest_volume)))
        raise ValidationError(f"degenerate tetrahedron {bad} (|volume| < {MIN_TET_VOLUME})")
    if np.any(rest_volume <= 0.0):
        raise ValidationError("negatively oriented tetrahedron; run fix_orientation first")

    if np.any(mesh.vertex_mass <= 0.0):
        free_zero = np.setdiff1d(np.where(mesh.vertex_mass <= 0.0)[0], mesh.pinned)
        if len(free_zero):
            raise ValidationError(f"free vertex {int(free_zero[0])} has non-positive mass")
    inverse_mass = np.zeros(mesh.vertex_count)
    ok = mesh.vertex_mass > 0.0
    inverse_mass[ok] = 1.0 / mesh.vertex_mass[ok]
    inverse_mass[mesh.pinned] = 0.0
    return RestState(rest_length, rest_volume, inverse_mass)


def build_mesh(positions, tets, pinned=(), total_mass=0.08) -> TetMesh:
    """Validate raw arrays, fix tet orientation, and derive topology."""
    positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    nv = len(positions)
    tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
    if len(tets) and (tets.min() < 0 or tets.max() >= nv):
        raise ValidationError(f"tet vertex index out of range [0, {nv})")
    if np.any([len(set(t)) != 4 for t in tets.tolist()]):
        raise ValidationError("tetrahedron with repeated vertex index")
    pinned = np.array(sorted(set(int(i) for i in pinned)), dtype=np.int32)
    if len(pinned) and (pinned.min() < 0 or pinned.max() >= nv):
        raise ValidationError(f"pinned vertex index out of range [0, {nv})")
    tets = fix_orientation(positions, np.asarray(tets, dtype=np.int32))
    edges, surface = derive_topology(tets)
    mass = np.full(nv, total_mass / nv) if nv else np.zeros(0)
    return TetMesh(nv, positions, tets, edges, surface, pinned, mass)


# --------------------------------------------------------------------------
# mesh file i/o
# --------------------------------------------------------------------------


def _content_lines(text):
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield ln, line


def parse_mesh_text(text: str):
    """Parse the plain-text tet mesh format.

    Layout: header ``tetmesh 1``; a counts line whose first integer is V and
    last is T (edge/face counts in between are ignored); V vertex lines
    ``x y z`` in meters; T tet lines ``i0 i1 i2 i3``; optionally one line
    ``pinned k i...``. ``#`` starts a comment.
    """
    lines = list(_content_lines(text))
    if not lines or lines[0][1].split() != ["tetmesh", "1"]:
        raise ParseError("mesh file must start with header 'tetmesh 1'")
    if len(lines) < 2:
        raise ParseError("mesh file missing counts line")
    counts = lines[1][1].split()
    if not 2 <= len(counts) <= 4:
        raise ParseError(f"line {lines[1][0]}: counts line needs 2-4 integers")
    try:
        nv, nt = int(counts[0]), int(counts[-1])
    except ValueError as exc:
        raise ParseError(f"line {lines[1][0]}: bad counts line") from exc
    if nv < 0 or nt < 0:
        raise ParseError("negative counts")

    body = lines[2:]
    if len(body) < nv + nt:
        raise ParseError(f"expected {nv} vertex and {nt} tet lines, found {len(body)}")
    try:
        positions = np.array(
            [[float(t) for t in body[i][1].split()] for i in range(nv)], dtype=np.float64
        ).reshape(nv, 3)
    except ValueError as exc:
        raise ParseError("bad vertex line (need 3 floats)") from exc
    try:
        tets = np.array(
            [[int(t) for t in body[nv + i][1].split()] for i in range(nt)], dtype=np.int64
        ).reshape(nt, 4)
    except ValueError as exc:
        raise ParseError("bad tet line (need 4 indices)") from exc

    pinned: list[int] = []
    for ln, line in body[nv + nt:]:
        tok = line.split()
        if tok[0] != "pinned":
            raise ParseError(f"line {ln}: unexpected trailing line {tok[0]!r}")
        try:
            k = int(tok[1])
            ids = [int(t) for t in tok[2:]]
        except (IndexError, ValueError) as exc:
            raise ParseError(f"line {ln}: bad pinned line") from exc
        if len(ids) != k:
            raise ParseError(f"line {ln}: pinned count {k} != {len(ids)} indices")
        pinned.extend(ids)
    return positions, tets, pinned


def load_mesh(path: str, total_mass: float = 0.08) -> TetMesh:
    if not os.path.exists(path):
        raise ParseError(f"mesh file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        positions, tets, pinned = parse_mesh_text(fh.read())
    return build_mesh(positions, tets, pinned, total_mass)


def write_mesh(path: str, positions, tets, pinned=()):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("tetmesh 1\n")
        fh.write(f"{len(positions)} {len(tets)}\n")
        for p in positions:
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        for t in tets:
            fh.write(f"{t[0]} {t[1]} {t[2]} {t[3]}\n")
        pinned = sorted(set(int(i) for i in pinned))
        if pinned:
            fh.write(f"pinned {len(pinned)} " + " ".join(str(i) for i in pinned) + "\n")


# --------------------------------------------------------------------------
# slab generator
# --------------------------------------------------------------------------

# cells (nx, ny, nz) whose 5-tet decomposition lands near the benchmark sizes
SLAB_PRESETS = {
    1170: (13, 3, 6),
    1431: (13, 2, 11),   # 1430 tets
    2880: (12, 4, 12),
    9729: (18, 6, 18),   # 9720 tets
    52359: (34, 11, 28),  # 52360 tets
}

_EVEN_TETS = (
    (0b100, 0b010, 0b001, 0b111),
    (0b000, 0b100, 0b010, 0b001),
    (0b110, 0b100, 0b010, 0b111),
    (0b101, 0b100, 0b001, 0b111),
    (0b011, 0b010, 0b001, 0b111),
)
_ODD_TETS = tuple(tuple(c ^ 0b100 for c in tet) for tet in _EVEN_TETS)


def make_slab(nx: int, ny: int, nz: int, spacing: float, origin=(0.0, 0.0, 0.0)):
    """Regular slab of nx*ny*nz cube cells, 5 tets per cell.

    The decomposition parity alternates per cell so the diagonals of shared
    faces coincide and the mesh is conforming.
    """
    if min(nx, ny, nz) < 1 or spacing <= 0.0:
        raise ValidationError("slab dimensions must be positive")
    gx, gy, gz = nx + 1, ny + 1, nz + 1
    ii, jj, kk = np.meshgrid(np.arange(gx), np.arange(gy), np.arange(gz), indexing="ij")
    positions = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) * spacing + np.asarray(origin)

    def vid(i, j, k):
        return (i * gy + j) * gz + k

    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                corners = {
                    bits: vid(i + (bits >> 2 & 1), j + (bits >> 1 & 1), k + (bits & 1))
                    for bits in range(8)
                }
                pattern = _EVEN_TETS if (i + j + k) % 2 == 0 else _ODD_TETS
                tets.extend(tuple(corners[c] for c in tet) for tet in pattern)
    return positions.astype(np.float64), np.asarray(tets, dtype=np.int64)


def slab_pins(nx, ny, nz, side="x0"):
    """Vertex ids of one slab face: ``x0``/``x1`` side walls, ``y0`` bottom, ``y1`` top."""
    gx, gy, gz = nx + 1, ny + 1, nz + 1
    sel = {
        "x0": lambda i, j, k: i == 0,
        "x1": lambda i, j, k: i == gx - 1,
        "y0": lambda i, j, k: j == 0,
        "y1": lambda i, j, k: j == gy - 1,
    }[side]
    return [
        (i * gy + j) * gz + k
        for i in range(gx)
        for j in range(gy)
        for k in range(gz)
        if sel(i, j, k)
    ]


def slab_preset(target_tets: int):
    if target_tets not in SLAB_PRESETS:
        raise ValidationError(f"no slab preset near {target_tets} tets; have {sorted(SLAB_PRESETS)}")
    return SLAB_PRESETS[target_tets]


TISSUE_DENSITY = 1050.0  # kg/m^3


def make_slab_scene(out_dir: str, tets: int = 1170, spacing: float = 0.0075,
                    pin: str = "y0", name: str | None = None, **overrides) -> str:
    """Write a ready-to-run slab scene (mesh + config) and return the scene path.

    The slab's top surface sits at y = 0, pinned along one face. Trocar,
    start pose, target, and workspace scale with the slab length so every
    preset size yields a well-posed reach task.
    """
    nx, ny, nz = slab_preset(tets)
    positions, tet_arr = make_slab(nx, ny, nz, spacing, origin=(0.0, -ny * spacing, 0.0))
    pins = slab_pins(nx, ny, nz, pin)

    name = name or f"slab_{5 * nx * ny * nz}"
    os.makedirs(out_dir, exist_ok=True)
    mesh_path = os.path.join(out_dir, f"{name}.mesh")
    write_mesh(mesh_path, positions, tet_arr, pins)

    length = nx * spacing
    width = nz * spacing
    depth = ny * spacing
    margin = 0.15 * length
    cx, cz = 0.5 * length, 0.5 * width
    cfg = SceneConfig(
        mesh_path=mesh_path,
        total_mass=length * width * depth * TISSUE_DENSITY,
        rcm=_vec3(cx, 0.9 * length, cz),
        tool_start=_vec3(cx, 0.3 * length, cz),
        target=_vec3(0.75 * length, 0.0, 2.0 * width / 3.0),
        workspace_low=_vec3(-margin, -depth - margin, -margin),
        workspace_high=_vec3(length + margin, 0.675 * length, width + margin),
        damping=1.0,
    )
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ValidationError(f"unknown scene override {key!r}")
        setattr(cfg, key, value)
    cfg.validate()
    scene_path = os.path.join(out_dir, f"{name}.scene")
    write_scene(scene_path, cfg, mesh_name=os.path.basename(mesh_path))
    return scene_path


# --------------------------------------------------------------------------
# scene config i/o
# --------------------------------------------------------------------------

_SCALAR_FLOAT = {
    "total_mass", "dt", "k_s", "k_v", "damping", "shaft_radius", "clamp_radius",
    "clamp_length", "clamp_angle", "grasp_radius", "action_scale",
    "success_threshold", "reward_distance_weight", "reward_delta_weight",
    "reward_success_weight", "reward_scale",
}
_SCALAR_INT = {"substeps", "max_episode_steps"}
_VEC3 = {"gravity", "rcm", "tool_start", "target", "workspace_low", "workspace_high"}


def parse_scene_text(text: str, base_dir: str = ".") -> SceneConfig:
    """Parse ``key = value`` scene text. Unknown keys are rejected."""
    cfg = SceneConfig()
    for ln, line in _content_lines(text):
        if "=" not in line:
            raise ParseError(f"line {ln}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key == "mesh":
                cfg.mesh_path = os.path.normpath(os.path.join(base_dir, value))
            elif key in _SCALAR_FLOAT:
                setattr(cfg, key, float(value))
            elif key in _SCALAR_INT:
                setattr(cfg, key, int(value))
            elif key in _VEC3:
                parts = [float(t) for t in value.split()]
                if len(parts) != 3:
                    raise ParseError(f"line {ln}: {key} needs 3 components")
                setattr(cfg, key, np.array(parts))
            elif key == "attach_anchor":
                v, x, y, z, rest, k = value.split()
                cfg.attachments.append(AttachmentSpec(
                    vertex=int(v), anchor=np.array([float(x), float(y), float(z)]),
                    rest=float(rest), stiffness=float(k)))
            elif key == "attach_face":
                v, f, rest, k = value.split()
                cfg.attachments.append(AttachmentSpec(
                    vertex=int(v), face=int(f), rest=float(rest), stiffness=float(k)))
            else:
                raise ParseError(f"line {ln}: unknown key {key!r}")
        except ParseError:
            raise
        except ValueError as exc:
            raise ParseError(f"line {ln}: bad value for {key!r}: {value!r}") from exc
    return cfg


def write_scene(path: str, cfg: SceneConfig, mesh_name: str | None = None):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        rel = mesh_name if mesh_name is not None else os.path.relpath(cfg.mesh_path, base)
        fh.write(f"mesh = {rel}\n")
        for f in fields(SceneConfig):
            if f.name in ("mesh_path", "attachments"):
                continue
            v = getattr(cfg, f.name)
            if f.name in _VEC3:
                fh.write(f"{f.name} = {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
            elif f.name in _SCALAR_INT:
                fh.write(f"{f.name} = {v}\n")
            else:
                fh.write(f"{f.name} = {float(v)!r}\n")
        for att in cfg.attachments:
            if att.face is not None:
                fh.write(f"attach_face = {att.vertex} {att.face} {float(att.rest)!r} {float(att.stiffness)!r}\n")
            else:
                a = att.anchor
                fh.write(
                    f"attach_anchor = {att.vertex} {float(a[0])!r} {float(a[1])!r} {float(a[2])!r} "
                    f"{float(att.rest)!r} {float(att.stiffness)!r}\n"
                )


def load_scene(path: str) -> tuple[TetMesh, RestState, SceneConfig]:
    """Load a scene file, its mesh, and the derived rest state."""
    if not os.path.exists(path):
        raise ParseError(f"scene file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        cfg = parse_scene_text(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))
    cfg.validate()
    if not cfg.mesh_path:
        raise ParseError("scene file does not name a mesh")
    mesh = load_mesh(cfg.mesh_path, cfg.total_mass)
    for att in cfg.attachments:
        if not 0 <= att.vertex < mesh.vertex_count:
            raise ValidationError(f"attachment vertex {att.vertex} out of range")
        if att.face is not None and not 0 <= att.face < len(mesh.surface_faces):
            raise ValidationError(f"attachment face {att.face} out of range")
    rest = compute_rest_state(mesh)
    return mesh, rest, cfg
