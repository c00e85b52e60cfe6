import collections

import numpy as np
import pytest

from tissuesim.errors import ParseError, ValidationError
from tissuesim.mesh import (
    AttachmentSpec, SceneConfig, build_mesh, compute_rest_state, derive_topology,
    fix_orientation, load_mesh, load_scene, make_slab, make_slab_scene,
    parse_mesh_text, parse_scene_text, signed_volumes, slab_pins, write_mesh,
    write_scene,
)

RIGHT_TET = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)


def surface_faces_oracle(tets):
    """Face-multiset count over sorted triples; boundary faces appear once."""
    counts = collections.Counter()
    for a, b, c, d in np.asarray(tets).tolist():
        for tri in ((a, b, c), (a, b, d), (a, c, d), (b, c, d)):
            counts[tuple(sorted(tri))] += 1
    return {tri for tri, n in counts.items() if n == 1}


def regular_tetrahedron(edge=1.0):
    a = 1.0 / np.sqrt(2.0)
    pts = np.array([[a, 0, -a / np.sqrt(2)], [-a, 0, -a / np.sqrt(2)],
                    [0, a, a / np.sqrt(2)], [0, -a, a / np.sqrt(2)]])
    return pts * (edge / np.linalg.norm(pts[0] - pts[1]))


class TestTopology:
    def test_single_tet(self):
        edges, faces = derive_topology(np.array([[0, 1, 2, 3]]))
        assert len(edges) == 6
        assert len(faces) == 4

    def test_two_tets_sharing_face(self):
        tets = np.array([[0, 1, 2, 3], [1, 2, 3, 4]])
        edges, faces = derive_topology(tets)
        assert len(edges) == 9
        assert len(faces) == 6
        shared = (1, 2, 3)
        assert shared not in {tuple(sorted(f)) for f in faces.tolist()}

    def test_empty(self):
        edges, faces = derive_topology(np.zeros((0, 4), dtype=int))
        assert len(edges) == 0 and len(faces) == 0

    def test_edge_uniqueness_and_order(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            tets = rng.integers(0, 30, size=(rng.integers(1, 40), 4))
            tets = tets[np.array([len(set(t)) == 4 for t in tets.tolist()])]
            if len(tets) == 0:
                continue
            edges, faces = derive_topology(tets)
            pairs = {tuple(e) for e in edges.tolist()}
            assert len(pairs) == len(edges)
            assert all(a < b for a, b in pairs)
            assert {tuple(sorted(f)) for f in faces.tolist()} == surface_faces_oracle(tets)

    def test_slab_face_count(self):
        nx, ny, nz = 4, 2, 3
        _, tets = make_slab(nx, ny, nz, 0.01)
        _, faces = derive_topology(fix_orientation(make_slab(nx, ny, nz, 0.01)[0], tets))
        assert len(faces) == 4 * (nx * ny + ny * nz + nz * nx)

    def test_outward_winding(self):
        positions, tets = make_slab(2, 2, 2, 1.0)
        tets = fix_orientation(positions, tets)
        _, faces = derive_topology(tets)
        centroid = positions.mean(axis=0)
        tri = positions[faces]
        normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        outward = np.einsum("fk,fk->f", normals, tri.mean(axis=1) - centroid)
        assert np.all(outward > 0)


class TestRestState:
    def test_unit_right_tet_volume(self):
        mesh = build_mesh(RIGHT_TET, [[0, 1, 2, 3]], total_mass=1.0)
        rest = compute_rest_state(mesh)
        assert rest.rest_volume[0] == pytest.approx(1.0 / 6.0, rel=1e-12)

    def test_regular_tet_volume(self):
        mesh = build_mesh(regular_tetrahedron(), [[0, 1, 2, 3]], total_mass=1.0)
        rest = compute_rest_state(mesh)
        assert rest.rest_volume[0] == pytest.approx(1.0 / (6.0 * np.sqrt(2.0)), rel=1e-10)

    def test_rest_lengths(self):
        mesh = build_mesh(regular_tetrahedron(2.5), [[0, 1, 2, 3]], total_mass=1.0)
        rest = compute_rest_state(mesh)
        assert np.allclose(rest.rest_length, 2.5, rtol=1e-10)

    def test_pinned_inverse_mass(self):
        mesh = build_mesh(RIGHT_TET, [[0, 1, 2, 3]], pinned=[2], total_mass=2.0)
        rest = compute_rest_state(mesh)
        assert rest.inverse_mass[2] == 0.0
        assert np.allclose(np.delete(rest.inverse_mass, 2), 4.0 / 2.0)

    def test_orientation_fix(self):
        flipped = [[0, 1, 3, 2]]
        assert signed_volumes(RIGHT_TET, np.array(flipped, dtype=np.int32))[0] < 0
        mesh = build_mesh(RIGHT_TET, flipped, total_mass=1.0)
        rest = compute_rest_state(mesh)
        assert rest.rest_volume[0] > 0

    def test_degenerate_tet_rejected(self):
        flat = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.5, 0.5, 0]], dtype=float)
        mesh_args = (flat, [[0, 1, 2, 3]])
        with pytest.raises(ValidationError):
            compute_rest_state(build_mesh(*mesh_args, total_mass=1.0))

    def test_random_volumes_positive(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pts = rng.normal(size=(4, 3))
            if abs(signed_volumes(pts, np.array([[0, 1, 2, 3]], dtype=np.int32))[0]) < 1e-6:
                continue
            mesh = build_mesh(pts, [[0, 1, 2, 3]], total_mass=1.0)
            assert compute_rest_state(mesh).rest_volume[0] > 0


class TestMeshFile:
    def test_round_trip(self, tmp_path):
        positions, tets = make_slab(2, 1, 2, 0.01)
        path = tmp_path / "m.mesh"
        write_mesh(path, positions, tets, pinned=[0, 3])
        mesh = load_mesh(str(path), total_mass=0.5)
        assert mesh.vertex_count == len(positions)
        assert np.array_equal(mesh.pinned, [0, 3])
        assert np.allclose(mesh.positions_rest, positions)

    def test_simplex_file(self, tmp_path):
        path = tmp_path / "simplex.mesh"
        write_mesh(path, RIGHT_TET, [[0, 1, 2, 3]])
        mesh = load_mesh(str(path))
        assert mesh.vertex_count == 4
        assert len(mesh.edges) == 6
        assert len(mesh.surface_faces) == 4

    def test_counts_line_with_optional_fields(self):
        text = "tetmesh 1\n4 6 4 1\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n0 1 2 3\n"
        positions, tets, pinned = parse_mesh_text(text)
        assert len(positions) == 4 and len(tets) == 1 and pinned == []

    def test_index_out_of_range(self):
        text = "tetmesh 1\n4 1\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n0 1 2 4\n"
        positions, tets, _ = parse_mesh_text(text)
        with pytest.raises(ValidationError):
            build_mesh(positions, tets)

    @pytest.mark.parametrize("text", [
        "notamesh\n",
        "tetmesh 2\n4 1\n",
        "tetmesh 1\n",
        "tetmesh 1\n4 1\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n",          # missing tet line
        "tetmesh 1\n1 0\nx y z\n",                                  # bad floats
        "tetmesh 1\n4 1\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n0 1 2 3\npinned 2 0\n",
        "tetmesh 1\n4 1\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n0 1 2 3\nstray line\n",
    ])
    def test_malformed_files(self, text):
        with pytest.raises(ParseError):
            parse_mesh_text(text)


class TestSceneConfig:
    def test_scene_round_trip(self, tmp_path):
        positions, tets = make_slab(2, 1, 2, 0.02)
        mesh_path = tmp_path / "m.mesh"
        write_mesh(mesh_path, positions, tets, pinned=slab_pins(2, 1, 2, "y0"))
        cfg = SceneConfig(mesh_path=str(mesh_path), k_v=0.75, substeps=6, damping=0.5)
        cfg.attachments.append(AttachmentSpec(vertex=1, anchor=np.array([0.0, 0.1, 0.0]),
                                              rest=0.01, stiffness=0.5))
        cfg.attachments.append(AttachmentSpec(vertex=2, face=0, rest=0.0, stiffness=1.0))
        scene_path = tmp_path / "s.scene"
        write_scene(str(scene_path), cfg)
        mesh, rest, loaded = load_scene(str(scene_path))
        assert loaded.k_v == 0.75
        assert loaded.substeps == 6
        assert loaded.damping == 0.5
        assert len(loaded.attachments) == 2
        assert loaded.attachments[0].anchor[1] == 0.1
        assert loaded.attachments[1].face == 0
        assert rest.inverse_mass[mesh.pinned].max() == 0.0

    def test_unknown_key_rejected(self):
        with pytest.raises(ParseError, match="unknown key"):
            parse_scene_text("wibble = 3\n")

    def test_bad_value(self):
        with pytest.raises(ParseError):
            parse_scene_text("dt = fast\n")

    def test_missing_scene_file(self):
        with pytest.raises(ParseError, match="no/such"):
            load_scene("no/such.scene")

    @pytest.mark.parametrize("field,value", [
        ("k_s", 1.5), ("k_v", -0.1), ("substeps", 0), ("dt", 0.0),
        ("clamp_angle", 45.0), ("action_scale", 0.0), ("total_mass", 0.0),
    ])
    def test_validation(self, field, value):
        cfg = SceneConfig()
        setattr(cfg, field, value)
        with pytest.raises(ValidationError):
            cfg.validate()

    def test_zero_mass_free_vertex(self):
        mesh = build_mesh(RIGHT_TET, [[0, 1, 2, 3]], total_mass=1.0)
        mesh.vertex_mass[1] = 0.0
        with pytest.raises(ValidationError, match="free vertex"):
            compute_rest_state(mesh)


class TestSlabGenerator:
    def test_preset_sizes(self, tmp_path):
        scene = make_slab_scene(str(tmp_path), tets=1170)
        mesh, _, _ = load_scene(scene)
        assert len(mesh.tets) == 1170
        assert mesh.vertex_count == 14 * 4 * 7

    @pytest.mark.parametrize("target,expected", [
        (1170, 1170), (1431, 1430), (2880, 2880), (9729, 9720), (52359, 52360),
    ])
    def test_all_presets_build(self, target, expected):
        from tissuesim.mesh import SLAB_PRESETS, build_mesh
        nx, ny, nz = SLAB_PRESETS[target]
        positions, tets = make_slab(nx, ny, nz, 0.0075)
        mesh = build_mesh(positions, tets, total_mass=0.1)
        assert len(mesh.tets) == expected
        assert len(mesh.surface_faces) == 4 * (nx * ny + ny * nz + nz * nx)

    def test_cells_fill_volume(self):
        positions, tets = make_slab(3, 2, 2, 0.5)
        tets = fix_orientation(positions, tets)
        total = signed_volumes(positions, tets).sum()
        assert total == pytest.approx(3 * 2 * 2 * 0.5 ** 3, rel=1e-12)

    def test_pin_sides(self):
        pins = slab_pins(2, 1, 2, "x0")
        assert len(pins) == 2 * 3  # (ny+1)*(nz+1)
        positions, _ = make_slab(2, 1, 2, 1.0)
        assert np.allclose(positions[pins][:, 0], 0.0)
