import numpy as np
import pytest

from tissuesim import backends
from tissuesim.mesh import (
    SceneConfig, build_mesh, compute_rest_state, make_slab, make_slab_scene, slab_pins,
)


def build_slab_scene(nx=3, ny=2, nz=2, spacing=0.01, pin="x0", total_mass=0.05,
                     with_attachments=False, **overrides):
    """Small in-memory scene for fast tests; tool parked above the slab."""
    origin = (0.0, -ny * spacing, 0.0)
    positions, tets = make_slab(nx, ny, nz, spacing, origin=origin)
    pins = slab_pins(nx, ny, nz, pin) if pin else []
    mesh = build_mesh(positions, tets, pins, total_mass=total_mass)
    length = nx * spacing
    cfg = SceneConfig(
        total_mass=total_mass,
        rcm=np.array([length / 2, 0.9 * length, nz * spacing / 2]),
        tool_start=np.array([length / 2, 0.3 * length, nz * spacing / 2]),
        target=np.array([0.75 * length, 0.0, nz * spacing / 2]),
        workspace_low=np.array([-0.2 * length, -ny * spacing - 0.2 * length, -0.2 * length]),
        workspace_high=np.array([1.2 * length, 0.675 * length, nz * spacing * 1.4]),
        damping=1.0,
    )
    if with_attachments:
        from tissuesim.mesh import AttachmentSpec
        free = int(np.setdiff1d(np.arange(mesh.vertex_count), mesh.pinned)[0])
        cfg.attachments = [
            AttachmentSpec(vertex=free, anchor=positions[free] + [0.0, 0.004, 0.0],
                           rest=0.002, stiffness=0.6),
            AttachmentSpec(vertex=int(mesh.surface_faces[0, 0]), face=len(mesh.surface_faces) - 1,
                           rest=0.01, stiffness=0.4),
        ]
    for key, value in overrides.items():
        setattr(cfg, key, value)
    cfg.validate()
    return mesh, compute_rest_state(mesh), cfg


def free_particles_scene(positions, gravity=(0.0, -9.81, 0.0), dt=0.01, substeps=5,
                         total_mass=1.0, damping=0.0):
    """Constraint-free particle cloud (no tets, no edges), tool far away."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    mesh = build_mesh(positions, np.zeros((0, 4)), total_mass=total_mass)
    cfg = SceneConfig(
        dt=dt, substeps=substeps, gravity=np.asarray(gravity, dtype=np.float64),
        damping=damping, total_mass=total_mass,
        rcm=np.array([50.0, 50.0, 50.0]),
        tool_start=np.array([50.0, 49.0, 50.0]),
        target=np.array([50.0, 48.9, 50.0]),
        workspace_low=np.array([40.0, 40.0, 40.0]),
        workspace_high=np.array([60.0, 49.5, 60.0]),
    )
    cfg.validate()
    return mesh, compute_rest_state(mesh), cfg


@pytest.fixture(scope="session")
def default_scene_path(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenes")
    return make_slab_scene(str(out), tets=1170)


@pytest.fixture(scope="session")
def small_scene():
    return build_slab_scene()


@pytest.fixture(params=backends.available_backends())
def backend_name(request):
    return request.param
