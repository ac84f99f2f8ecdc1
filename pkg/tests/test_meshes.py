"""Mesh utilities: counts, subdivision laws, normals, chamfer, file IO."""

import numpy as np
import pytest

from neuralmesh import meshes
from neuralmesh.meshes import (
    TriangleMesh,
    adjacent_face_pairs,
    build_topology,
    chamfer_distance,
    laplacian_deltas,
    load_mesh,
    loop_subdivide,
    make_icosphere,
    sample_surface,
    save_mesh,
    vertex_normals,
)


def regular_tetrahedron():
    v = np.array(
        [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64
    ) / np.sqrt(3.0)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriangleMesh(v, f)


class TestIcosphere:
    @pytest.mark.parametrize(
        "level,nv", [(0, 12), (1, 42), (2, 162), (3, 642), (4, 2562), (7, 163842)]
    )
    def test_vertex_counts(self, level, nv):
        mesh = make_icosphere(level)
        assert mesh.num_vertices == nv == 10 * 4**level + 2

    def test_level0_faces(self):
        assert make_icosphere(0).num_faces == 20

    def test_unit_radius(self):
        for level in (0, 2, 4):
            r = np.linalg.norm(make_icosphere(level).vertices, axis=1)
            assert np.abs(r - 1.0).max() < 1e-6

    def test_closed_manifold_and_outward(self):
        mesh = make_icosphere(2)
        topo = build_topology(mesh)
        assert topo.is_closed
        assert len(topo.edges) == 3 * mesh.num_faces // 2
        centers = mesh.vertices[mesh.faces].mean(axis=1)
        fn = meshes.face_normals(mesh)
        assert (np.einsum("ij,ij->i", fn, centers) > 0).all()

    def test_level_cap(self):
        with pytest.raises(meshes.MeshError, match="cap"):
            make_icosphere(9)
        with pytest.raises(meshes.MeshError):
            make_icosphere(-1)


class TestLoopSubdivision:
    def test_icosahedron_counts(self):
        out = loop_subdivide(make_icosphere(0))
        assert out.num_vertices == 42  # V + E = 12 + 30
        assert out.num_faces == 80

    def test_three_rounds_reach_paper_resolution(self):
        mesh = make_icosphere(4)
        for _ in range(3):
            mesh = loop_subdivide(mesh)
        assert mesh.num_vertices == 163842

    def test_count_law_on_random_closed_meshes(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            base = make_icosphere(int(rng.integers(0, 3)))
            jitter = rng.normal(scale=0.05, size=base.vertices.shape)
            mesh = TriangleMesh(base.vertices + jitter, base.faces)
            topo = build_topology(mesh)
            out = loop_subdivide(mesh, topo)
            assert out.num_vertices == mesh.num_vertices + len(topo.edges)
            assert out.num_faces == 4 * mesh.num_faces

    def test_constant_attributes_preserved(self):
        mesh = make_icosphere(1)
        mesh.features = np.full((mesh.num_vertices, 4), 0.25)
        mesh.diffuse = np.full((mesh.num_vertices, 3), 0.5)
        out = loop_subdivide(mesh)
        np.testing.assert_allclose(out.features, 0.25, atol=1e-12)
        np.testing.assert_allclose(out.diffuse, 0.5, atol=1e-12)

    def test_non_manifold_rejected(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1.0]])
        f = np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]])
        with pytest.raises(meshes.MeshError, match="non-manifold"):
            loop_subdivide(TriangleMesh(v, f))

    def test_subdivided_mesh_stays_closed(self):
        out = loop_subdivide(make_icosphere(1))
        assert build_topology(out).is_closed


class TestNormals:
    def test_icosphere_normals_radial(self):
        mesh = make_icosphere(3)
        n = vertex_normals(mesh)
        cosine = np.einsum("ij,ij->i", n, mesh.vertices)
        assert np.abs(cosine - 1.0).max() < 1e-3

    def test_unit_length(self):
        mesh = make_icosphere(2)
        n = vertex_normals(mesh)
        assert np.abs(np.linalg.norm(n, axis=1) - 1.0).max() < 1e-6

    def test_flat_ccw_triangle(self):
        mesh = TriangleMesh(
            np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]])
        )
        np.testing.assert_allclose(vertex_normals(mesh), [[0, 0, 1]] * 3, atol=1e-12)

    def test_flipped_winding_negates(self):
        mesh = TriangleMesh(
            np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 2, 1]])
        )
        np.testing.assert_allclose(vertex_normals(mesh), [[0, 0, -1]] * 3, atol=1e-12)


class TestLaplacian:
    def test_tetrahedron_deltas(self):
        mesh = regular_tetrahedron()
        deltas = laplacian_deltas(mesh)
        np.testing.assert_allclose(deltas, (4.0 / 3.0) * mesh.vertices, atol=1e-12)

    def test_translation_invariance(self):
        mesh = make_icosphere(1)
        d0 = laplacian_deltas(mesh)
        shifted = TriangleMesh(mesh.vertices + np.array([3.0, -2.0, 0.5]), mesh.faces)
        np.testing.assert_allclose(laplacian_deltas(shifted), d0, atol=1e-12)

    def test_rotation_equivariance(self):
        mesh = make_icosphere(1)
        theta = 0.7
        rot = np.array(
            [
                [np.cos(theta), -np.sin(theta), 0],
                [np.sin(theta), np.cos(theta), 0],
                [0, 0, 1.0],
            ]
        )
        d0 = laplacian_deltas(mesh)
        rotated = TriangleMesh(mesh.vertices @ rot.T, mesh.faces)
        np.testing.assert_allclose(laplacian_deltas(rotated), d0 @ rot.T, atol=1e-12)

    def test_flat_grid_interior_is_zero(self):
        # hexagonal one-ring around a center vertex in the plane
        angles = np.linspace(0, 2 * np.pi, 7)[:-1]
        ring = np.stack([np.cos(angles), np.sin(angles), np.zeros(6)], axis=1)
        v = np.concatenate([[[0.0, 0, 0]], ring])
        f = np.array([[0, 1 + i, 1 + (i + 1) % 6] for i in range(6)])
        deltas = laplacian_deltas(TriangleMesh(v, f))
        np.testing.assert_allclose(deltas[0], [0, 0, 0], atol=1e-12)


class TestAdjacency:
    def test_icosahedron_pair_count(self):
        assert len(adjacent_face_pairs(make_icosphere(0))) == 30

    def test_two_triangles_share_one_edge(self):
        v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
        f = np.array([[0, 1, 2], [2, 1, 3]])
        assert len(adjacent_face_pairs(TriangleMesh(v, f))) == 1

    def test_closed_mesh_identity(self):
        mesh = make_icosphere(2)
        assert len(adjacent_face_pairs(mesh)) == 3 * mesh.num_faces // 2


class TestSampling:
    def test_single_triangle_contains_points(self):
        mesh = TriangleMesh(
            np.array([[0.0, 0, 0], [2, 0, 0], [0, 2, 0]]), np.array([[0, 1, 2]])
        )
        pts = sample_surface(mesh, 500, seed=1)
        assert (pts[:, 0] >= -1e-12).all() and (pts[:, 1] >= -1e-12).all()
        assert (pts[:, 0] + pts[:, 1] <= 2 + 1e-9).all()
        assert np.abs(pts[:, 2]).max() < 1e-12

    def test_area_proportional_face_choice(self):
        v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [-3, 0, 0], [0, -3, 0]])
        f = np.array([[0, 1, 2], [0, 4, 3]])  # areas 0.5 and 4.5 -> 0.9 share
        pts = sample_surface(TriangleMesh(v, f), 10000, seed=3)
        share = float((pts[:, 0] + pts[:, 1] < 0).mean())
        assert abs(share - 0.9) < 0.02

    def test_one_vs_three_area_split(self):
        v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0], [3, 0, 0], [0, -2, 0]])
        f = np.array([[0, 1, 2], [0, 4, 3]])  # areas 1 and 3
        pts = sample_surface(TriangleMesh(v, f), 10000, seed=5)
        share = float((pts[:, 1] < 0).mean())
        assert abs(share - 0.75) < 0.02

    def test_seed_determinism(self):
        mesh = make_icosphere(1)
        assert np.array_equal(sample_surface(mesh, 64, 9), sample_surface(mesh, 64, 9))

    def test_zero_area_rejected(self):
        degenerate = TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
        with pytest.raises(meshes.MeshError, match="area"):
            sample_surface(degenerate, 10, seed=0)


class TestChamfer:
    def test_identical_meshes(self):
        mesh = make_icosphere(3)
        assert chamfer_distance(mesh, mesh, n=5000, seed=4) <= 1e-9

    def test_concentric_spheres(self):
        a = make_icosphere(5)
        b = TriangleMesh(a.vertices * 1.1, a.faces)
        cd = chamfer_distance(a, b, n=20000, seed=123)
        assert abs(cd - 0.1) < 0.005

    def test_symmetry(self):
        a = make_icosphere(2)
        b = TriangleMesh(a.vertices * 1.3 + 0.1, a.faces)
        assert chamfer_distance(a, b, n=4000, seed=7) == chamfer_distance(
            b, a, n=4000, seed=7
        )


class TestMeshIO:
    def test_ply_round_trip(self, tmp_path):
        mesh = make_icosphere(2)
        rng = np.random.default_rng(0)
        mesh.diffuse = rng.random((mesh.num_vertices, 3))
        path = tmp_path / "ico.ply"
        save_mesh(mesh, path)
        back = load_mesh(path)
        assert np.array_equal(back.faces, mesh.faces)
        assert np.abs(back.vertices - mesh.vertices).max() < 1e-6
        assert np.abs(back.diffuse - mesh.diffuse).max() <= 1.0 / 255.0 + 1e-9

    def test_ply_bad_face_index(self, tmp_path):
        mesh = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
        path = tmp_path / "bad.ply"
        save_mesh(mesh, path)
        blob = bytearray(path.read_bytes())
        blob[-4:] = (99).to_bytes(4, "little")  # corrupt last face index
        path.write_bytes(bytes(blob))
        with pytest.raises(meshes.MeshError, match="face 0"):
            load_mesh(path)

    def test_ply_truncated(self, tmp_path):
        mesh = make_icosphere(0)
        path = tmp_path / "trunc.ply"
        save_mesh(mesh, path)
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(meshes.MeshError, match="truncated"):
            load_mesh(path)

    def test_obj_load_with_fan_triangulation(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        mesh = load_mesh(path)
        assert mesh.num_vertices == 4 and mesh.num_faces == 2

    def test_obj_bad_index_named_line(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nf 1 2 9\n")
        with pytest.raises(meshes.MeshError, match="face 0"):
            load_mesh(path)

    def test_obj_bad_float_has_line_number(self, tmp_path):
        path = tmp_path / "bad2.obj"
        path.write_text("v 0 zero 0\n")
        with pytest.raises(meshes.MeshError, match=":1:"):
            load_mesh(path)
