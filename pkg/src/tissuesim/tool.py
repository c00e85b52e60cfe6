"""Capsule-based surgical instrument.

The tool is kinematic: a shaft sliding through a fixed trocar point, two
clamp capsules pivoting at the shaft tip, and a drag point at the closed
clamp tips. Cartesian commands for the distal point are mapped to a rotation
about the trocar plus a signed advance along the shaft, so the shaft line
always passes through the trocar.

All math helpers broadcast over a leading instance axis; the scalar
``ToolModel`` API and the batched engine path share them, which keeps a
batch-of-one bitwise identical to a single instance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

GRASP_ENGAGE_DEG = 3.0   # jaws closer than this may grab the nearest vertex
MIN_LEVER_ARM = 1e-9     # m, a distal point this close to the trocar is singular
MIN_ROTATION = 1e-9      # rad, below this the rotation axis is arbitrary


def dot3(u, v):
    return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] + u[..., 2] * v[..., 2]


def norm3(u):
    return np.sqrt(dot3(u, u))


def cross3(u, v):
    return np.stack(
        [
            u[..., 1] * v[..., 2] - u[..., 2] * v[..., 1],
            u[..., 2] * v[..., 0] - u[..., 0] * v[..., 2],
            u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0],
        ],
        axis=-1,
    )


def rotate_about_axis(vec, axis, angle):
    """Rodrigues rotation of vec about a unit axis; broadcasts elementwise."""
    c = np.cos(angle)[..., None]
    s = np.sin(angle)[..., None]
    k_dot_v = dot3(axis, vec)[..., None]
    return vec * c + cross3(axis, vec) * s + axis * k_dot_v * (1.0 - c)


def perpendicular_unit(axis):
    """Some unit vector perpendicular to each axis row."""
    ref = np.zeros_like(axis)
    use_z = np.abs(axis[..., 0]) > 0.9
    ref[..., 0] = np.where(use_z, 0.0, 1.0)
    ref[..., 2] = np.where(use_z, 1.0, 0.0)
    out = ref - axis * dot3(axis, ref)[..., None]
    return out / norm3(out)[..., None]


@dataclass
class Capsule:
    p0: np.ndarray
    p1: np.ndarray
    radius: float

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=np.float64)
        self.p1 = np.asarray(self.p1, dtype=np.float64)
        if self.radius <= 0.0:
            raise ValidationError("capsule radius must be positive")
        if float(norm3(self.p1 - self.p0)) == 0.0:
            raise ValidationError("capsule endpoints must be distinct")

    def as_row(self):
        return np.concatenate([self.p0, self.p1, [self.radius]])


@dataclass
class ToolCommand:
    target: np.ndarray          # desired distal (drag) point, meters
    clamp_angle: float          # desired jaw opening, degrees

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if not 0.0 < self.clamp_angle < 30.0:
            raise ValidationError("clamp angle must lie in (0, 30) degrees")


def rcm_transform(p1, p2, p_rcm):
    """Rotation angle/axis about the trocar and signed shaft advance from distal point p1 to p2.

    The advance is the lever-arm length change; rotating first and then
    advancing reaches p2 exactly, and reduces to a pure translation of
    magnitude |p1 - p2| in the collinear case.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    p_rcm = np.asarray(p_rcm, dtype=np.float64)
    v1 = p1 - p_rcm
    v2 = p2 - p_rcm
    n1 = float(norm3(v1))
    n2 = float(norm3(v2))
    if n1 < MIN_LEVER_ARM or n2 < MIN_LEVER_ARM:
        raise ValidationError("distal point coincides with the trocar point")
    cosang = float(dot3(v1, v2)) / (n1 * n2)
    theta = math.acos(min(1.0, max(-1.0, cosang)))
    axis = cross3(v1, v2)
    cn = float(norm3(axis))
    if theta <= MIN_ROTATION or cn == 0.0:
        if theta > MIN_ROTATION:
            # v1 and v2 anti-parallel: any perpendicular works
            axis = perpendicular_unit(v1 / n1)
        else:
            theta = 0.0
            axis = np.array([1.0, 0.0, 0.0])
    else:
        axis = axis / cn
    return theta, axis, n2 - n1


@dataclass
class ToolModel:
    """Instrument pose plus grasp state. Derived capsules are rebuilt on demand."""

    rcm: np.ndarray
    axis: np.ndarray            # unit, trocar -> tip
    reach: float                # m, trocar to drag point
    jaw_dir: np.ndarray | None = None   # unit, perpendicular to axis; jaw opening plane
    clamp_angle: float = 2.0    # degrees
    shaft_radius: float = 0.003
    clamp_radius: float = 0.002
    clamp_length: float = 0.008
    grasp_radius: float = 0.005
    grasp_vertex: int = -1
    workspace_low: np.ndarray | None = None
    workspace_high: np.ndarray | None = None

    def __post_init__(self):
        self.rcm = np.asarray(self.rcm, dtype=np.float64)
        self.axis = np.asarray(self.axis, dtype=np.float64)
        n = float(norm3(self.axis))
        if n == 0.0:
            raise ValidationError("tool axis must be nonzero")
        self.axis = self.axis / n
        if self.reach <= 0.0:
            raise ValidationError("tool reach must be positive")
        if self.jaw_dir is None:
            self.jaw_dir = perpendicular_unit(self.axis)
        else:
            self.jaw_dir = np.asarray(self.jaw_dir, dtype=np.float64)
            self.jaw_dir = self.jaw_dir - self.axis * float(dot3(self.axis, self.jaw_dir))
            self.jaw_dir = self.jaw_dir / float(norm3(self.jaw_dir))
        if not 0.0 < self.clamp_angle < 30.0:
            raise ValidationError("clamp angle must lie in (0, 30) degrees")

    @classmethod
    def from_config(cls, cfg):
        """Pose the tool at the scene's start point, pointing away from the trocar."""
        offset = np.asarray(cfg.tool_start) - np.asarray(cfg.rcm)
        reach = float(np.linalg.norm(offset))
        return cls(
            rcm=cfg.rcm, axis=offset / reach, reach=reach,
            clamp_angle=cfg.clamp_angle, shaft_radius=cfg.shaft_radius,
            clamp_radius=cfg.clamp_radius, clamp_length=cfg.clamp_length,
            grasp_radius=cfg.grasp_radius,
            workspace_low=np.asarray(cfg.workspace_low),
            workspace_high=np.asarray(cfg.workspace_high),
        )

    @property
    def drag_point(self):
        return self.rcm + self.reach * self.axis

    @property
    def jaw_pivot(self):
        return self.rcm + (self.reach - self.clamp_length) * self.axis

    @property
    def shaft(self):
        return Capsule(self.rcm, self.jaw_pivot, self.shaft_radius)

    def _clamp(self, sign):
        alpha = math.radians(self.clamp_angle)
        direction = math.cos(alpha) * self.axis + sign * math.sin(alpha) * self.jaw_dir
        pivot = self.jaw_pivot
        return Capsule(pivot, pivot + self.clamp_length * direction, self.clamp_radius)

    @property
    def clamp_a(self):
        return self._clamp(+1.0)

    @property
    def clamp_b(self):
        return self._clamp(-1.0)

    def capsules(self):
        return [self.shaft, self.clamp_a, self.clamp_b]

    @property
    def grasp_constraints(self):
        if self.grasp_vertex < 0:
            return []
        return [(self.grasp_vertex, self.drag_point.copy(), 0.0, 1.0)]


def apply_tool_command(tool: ToolModel, cmd: ToolCommand):
    """Move the distal point to the commanded target, preserving the trocar constraint.

    Returns (tool, clipped): clipped is True when the target was pulled back
    to the workspace box before the motion was applied.
    """
    target = cmd.target
    clipped = False
    if tool.workspace_low is not None:
        bounded = np.minimum(np.maximum(target, tool.workspace_low), tool.workspace_high)
        clipped = bool(np.any(bounded != target))
        target = bounded
    theta, rot_axis, advance = rcm_transform(tool.drag_point, target, tool.rcm)
    if theta > 0.0:
        tool.axis = rotate_about_axis(tool.axis, rot_axis, np.float64(theta))
        tool.axis = tool.axis / float(norm3(tool.axis))
        jaw = rotate_about_axis(tool.jaw_dir, rot_axis, np.float64(theta))
        jaw = jaw - tool.axis * float(dot3(tool.axis, jaw))
        tool.jaw_dir = jaw / float(norm3(jaw))
    tool.reach = tool.reach + advance
    tool.clamp_angle = cmd.clamp_angle
    return tool, clipped


def update_grasp(tool: ToolModel, state):
    """Attach or release the drag constraint from the jaw angle and proximity rule.

    Below the engage angle the nearest free vertex within the grasp radius is
    tied to the drag point; at or above it every drag constraint is dropped.
    """
    if tool.clamp_angle >= GRASP_ENGAGE_DEG:
        if tool.grasp_vertex >= 0:
            state.grasped[tool.grasp_vertex] = 0
            tool.grasp_vertex = -1
        return tool
    if tool.grasp_vertex >= 0:
        return tool
    drag = tool.drag_point
    d2 = dot3(state.x - drag, state.x - drag)
    d2 = np.where(state.w > 0.0, d2, np.inf)
    best = int(np.argmin(d2))
    if d2[best] <= tool.grasp_radius * tool.grasp_radius:
        tool.grasp_vertex = best
        state.grasped[best] = 1
    return tool


# --------------------------------------------------------------------------
# batched pose arrays (engine path)
# --------------------------------------------------------------------------


@dataclass
class ToolBatch:
    """Stacked tool poses for N instances, sharing one geometry config."""

    rcm: np.ndarray        # (3,)
    axis: np.ndarray       # (N, 3)
    jaw_dir: np.ndarray    # (N, 3)
    reach: np.ndarray      # (N,)
    clamp_angle: np.ndarray  # (N,) degrees
    shaft_radius: float
    clamp_radius: float
    clamp_length: float
    grasp_radius: float
    workspace_low: np.ndarray = field(default=None)
    workspace_high: np.ndarray = field(default=None)

    @classmethod
    def from_config(cls, cfg, num_instances):
        proto = ToolModel.from_config(cfg)
        n = num_instances
        return cls(
            rcm=proto.rcm.copy(),
            axis=np.tile(proto.axis, (n, 1)),
            jaw_dir=np.tile(proto.jaw_dir, (n, 1)),
            reach=np.full(n, proto.reach),
            clamp_angle=np.full(n, proto.clamp_angle),
            shaft_radius=proto.shaft_radius,
            clamp_radius=proto.clamp_radius,
            clamp_length=proto.clamp_length,
            grasp_radius=proto.grasp_radius,
            workspace_low=proto.workspace_low,
            workspace_high=proto.workspace_high,
        )

    def reset_instances(self, idx, cfg):
        proto = ToolModel.from_config(cfg)
        self.axis[idx] = proto.axis
        self.jaw_dir[idx] = proto.jaw_dir
        self.reach[idx] = proto.reach
        self.clamp_angle[idx] = proto.clamp_angle

    def drag_points(self):
        return self.rcm[None, :] + self.reach[:, None] * self.axis

    def apply_commands(self, targets, angles):
        """Batched command application; rows failing the trocar-singularity guard hold pose.

        Returns (clipped, rejected) boolean masks.
        """
        targets = np.asarray(targets, dtype=np.float64)
        bounded = np.minimum(np.maximum(targets, self.workspace_low), self.workspace_high)
        clipped = np.any(bounded != targets, axis=1)

        v1 = self.drag_points() - self.rcm[None, :]
        v2 = bounded - self.rcm[None, :]
        n1 = norm3(v1)
        n2 = norm3(v2)
        rejected = n2 < MIN_LEVER_ARM
        safe_n2 = np.where(rejected, 1.0, n2)

        cosang = np.clip(dot3(v1, v2) / (n1 * safe_n2), -1.0, 1.0)
        theta = np.arccos(cosang)
        raxis = cross3(v1, v2)
        cn = norm3(raxis)
        rotating = (theta > MIN_ROTATION) & (cn > 0.0) & ~rejected
        raxis = np.where(rotating[:, None], raxis / np.where(cn > 0.0, cn, 1.0)[:, None], 0.0)
        flip = (theta > MIN_ROTATION) & (cn == 0.0) & ~rejected
        if np.any(flip):
            raxis[flip] = perpendicular_unit(v1[flip] / n1[flip][:, None])
            rotating = rotating | flip
        theta = np.where(rotating, theta, 0.0)

        axis_new = rotate_about_axis(self.axis, raxis, theta)
        axis_new = axis_new / norm3(axis_new)[:, None]
        jaw_new = rotate_about_axis(self.jaw_dir, raxis, theta)
        jaw_new = jaw_new - axis_new * dot3(axis_new, jaw_new)[:, None]
        jaw_new = jaw_new / norm3(jaw_new)[:, None]
        upd = ~rejected
        self.axis[upd] = np.where(rotating[upd, None], axis_new[upd], self.axis[upd])
        self.jaw_dir[upd] = np.where(rotating[upd, None], jaw_new[upd], self.jaw_dir[upd])
        self.reach[upd] = self.reach[upd] + (n2 - n1)[upd]
        self.clamp_angle[upd] = np.asarray(angles, dtype=np.float64)[upd]
        return clipped, rejected

    def capsule_rows(self):
        """Capsule endpoints/radii as an (N, 3, 7) array: shaft, clamp a, clamp b."""
        n = len(self.reach)
        pivot = self.rcm[None, :] + (self.reach - self.clamp_length)[:, None] * self.axis
        alpha = np.radians(self.clamp_angle)
        ca = np.cos(alpha)[:, None]
        sa = np.sin(alpha)[:, None]
        dir_a = ca * self.axis + sa * self.jaw_dir
        dir_b = ca * self.axis - sa * self.jaw_dir
        rows = np.empty((n, 3, 7))
        shaft_base = np.tile(self.rcm, (n, 1))
        degenerate = norm3(pivot - shaft_base) < 1e-9
        if np.any(degenerate):
            shaft_base[degenerate] = pivot[degenerate] - 1e-6 * self.axis[degenerate]
        rows[:, 0, 0:3] = shaft_base
        rows[:, 0, 3:6] = pivot
        rows[:, 0, 6] = self.shaft_radius
        rows[:, 1, 0:3] = pivot
        rows[:, 1, 3:6] = pivot + self.clamp_length * dir_a
        rows[:, 1, 6] = self.clamp_radius
        rows[:, 2, 0:3] = pivot
        rows[:, 2, 3:6] = pivot + self.clamp_length * dir_b
        rows[:, 2, 6] = self.clamp_radius
        return rows

    def update_grasps(self, x, w, grasped, grasp_vertex):
        """Batched attach/release pass over every instance."""
        release = self.clamp_angle >= GRASP_ENGAGE_DEG
        for i in np.where(release & (grasp_vertex >= 0))[0]:
            grasped[i, grasp_vertex[i]] = 0
            grasp_vertex[i] = -1
        candidates = np.where(~release & (grasp_vertex < 0))[0]
        if len(candidates) == 0:
            return
        drag = self.drag_points()[candidates]
        rel = x[candidates] - drag[:, None, :]
        d2 = np.where(w[None, :] > 0.0, dot3(rel, rel), np.inf)
        best = np.argmin(d2, axis=1)
        hit = d2[np.arange(len(candidates)), best] <= self.grasp_radius ** 2
        for row, i in enumerate(candidates):
            if hit[row]:
                grasp_vertex[i] = best[row]
                grasped[i, best[row]] = 1

    def tool_model(self, i) -> ToolModel:
        """Scalar view of instance i, for inspection and tests."""
        return ToolModel(
            rcm=self.rcm.copy(), axis=self.axis[i].copy(), reach=float(self.reach[i]),
            jaw_dir=self.jaw_dir[i].copy(), clamp_angle=float(self.clamp_angle[i]),
            shaft_radius=self.shaft_radius, clamp_radius=self.clamp_radius,
            clamp_length=self.clamp_length, grasp_radius=self.grasp_radius,
            workspace_low=self.workspace_low, workspace_high=self.workspace_high,
        )
