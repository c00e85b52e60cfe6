"""Capsule SDF queries and tissue-face contact resolution against the tool."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backends
from .tool import Capsule, ToolModel


@dataclass
class Contact:
    face: int                 # surface face index
    capsule: int              # which tool capsule
    depth: float              # m, >= 0
    direction: np.ndarray     # unit, pointing out of the capsule
    bary: np.ndarray          # witness point barycentric coords on the face


def capsule_signed_distance(point, capsule: Capsule) -> float:
    """Distance to the capsule surface; negative inside."""
    from .backends import numpy_backend
    p = np.asarray(point, dtype=np.float64)
    return float(numpy_backend.capsule_distance(p, capsule.p0, capsule.p1, capsule.radius))


def _capsule_rows(tool_or_capsules):
    if isinstance(tool_or_capsules, ToolModel):
        caps = tool_or_capsules.capsules()
    else:
        caps = list(tool_or_capsules)
    return np.stack([c.as_row() for c in caps])


def detect_face_contacts(positions, faces, tool_or_capsules, iterations: int = 8,
                         backend: str = "auto") -> list[Contact]:
    """Contacts of every surface face against every tool capsule.

    Witness points come from a fixed-budget projected gradient descent on
    barycentric coordinates (best-vertex warm start, best-vertex fallback).
    """
    rows = _capsule_rows(tool_or_capsules)
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int32)
    mod = backends.get_backend(backend)
    fidx, cidx, depth, direction, bary = mod.detect_contacts(positions, faces, rows, iterations)
    return [
        Contact(int(fidx[k]), int(cidx[k]), float(depth[k]), direction[k].copy(), bary[k].copy())
        for k in range(len(fidx))
    ]


def resolve_contact_arrays(positions, inverse_mass, faces, face_idx, cap_idx,
                           depth, direction, bary, k_c: float = 1.0):
    """Push penetrating faces out along their contact directions, in place.

    Corrections are applied directly (no averaging with the deformation
    pass). Vertex shares are barycentric weights normalized by their squared
    sum, so the witness point moves by exactly k_c * depth; pinned vertices
    take nothing.
    """
    for k in range(len(face_idx)):
        verts = faces[face_idx[k]]
        b = bary[k]
        b2 = float(b @ b)
        if b2 <= 0.0:
            continue
        push = (k_c * depth[k] / b2) * direction[k]
        for j in range(3):
            if inverse_mass[verts[j]] > 0.0:
                positions[verts[j]] += b[j] * push


def resolve_contacts(contacts: list[Contact], positions, inverse_mass, faces, k_c: float = 1.0):
    """List-of-Contact front end over resolve_contact_arrays."""
    if not contacts:
        return
    resolve_contact_arrays(
        positions, inverse_mass, faces,
        np.array([c.face for c in contacts], dtype=np.int32),
        np.array([c.capsule for c in contacts], dtype=np.int32),
        np.array([c.depth for c in contacts]),
        np.stack([c.direction for c in contacts]),
        np.stack([c.bary for c in contacts]),
        k_c=k_c,
    )
