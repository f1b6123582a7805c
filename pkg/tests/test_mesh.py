import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meshglm import (
    SurfaceMesh,
    assemble_fem,
    edge_distance_distortion,
    make_grid_mesh,
    make_icosphere,
    read_mesh,
    surface_smooth,
    vertex_adjacency,
    write_mesh,
)
from meshglm.mesh import MeshError, smoothing_weights


class TestSurfaceMesh:
    def test_rejects_out_of_range_index(self):
        with pytest.raises(MeshError, match="out of range"):
            SurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])

    def test_rejects_degenerate_triangle_with_index(self):
        verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]]
        tris = [[0, 1, 2], [0, 1, 3]]  # second triangle is collinear
        with pytest.raises(MeshError, match="triangle at index 1"):
            SurfaceMesh(verts, tris)

    def test_rejects_edge_in_three_triangles(self):
        verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]]
        tris = [[0, 1, 2], [0, 1, 3], [0, 1, 4]]
        with pytest.raises(MeshError, match="more than two"):
            SurfaceMesh(verts, tris)


class TestAssembleFem:
    def test_equilateral_lumped_mass(self):
        # hand FEM assembly: one equilateral triangle of side 1 has area
        # sqrt(3)/4; each lumped mass entry is a third of that
        verts = [[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]]
        fem = assemble_fem(SurfaceMesh(verts, [[0, 1, 2]]))
        expected = (np.sqrt(3) / 4) / 3
        assert np.allclose(fem.C.diagonal(), expected, rtol=1e-12)

    def test_stiffness_null_space(self, grid_fem, icosphere):
        for fem in (grid_fem, assemble_fem(icosphere)):
            ones = np.ones(fem.n)
            assert np.abs(fem.G @ ones).max() < 1e-12

    def test_unit_right_triangle_cotangent_values(self):
        # hand cotangent computation: angles are 90/45/45 degrees, so the
        # edge opposite the right angle gets weight 0 and the others 1/2
        fem = assemble_fem(
            SurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        )
        g = fem.G.toarray()
        assert np.allclose(np.diag(g), [1.0, 0.5, 0.5])
        assert np.allclose(g[0, 1], -0.5)
        assert np.allclose(g[0, 2], -0.5)
        assert np.allclose(g[1, 2], 0.0)

    def test_total_mass_equals_area(self, grid_mesh, icosphere):
        for mesh in (grid_mesh, icosphere):
            fem = assemble_fem(mesh)
            total = fem.C.diagonal().sum()
            assert abs(total - mesh.total_area()) < 1e-10 * mesh.total_area()

    def test_stiffness_positive_semidefinite_dense_oracle(self, icosphere):
        # dense eigendecomposition oracle on meshes below 200 vertices
        for mesh in (make_grid_mesh(5, 6), icosphere):
            assert mesh.N <= 200
            g = assemble_fem(mesh).G.toarray()
            eig = np.linalg.eigvalsh(g)
            assert eig.min() >= -1e-10 * np.abs(g).max()

    def test_sparsity_within_adjacency(self, grid_mesh, grid_fem):
        adj = vertex_adjacency(grid_mesh).toarray()
        g = grid_fem.G.toarray()
        outside = ~(adj | np.eye(grid_mesh.N, dtype=bool))
        assert np.all(g[outside] == 0.0)


class TestVertexAdjacency:
    def test_single_triangle_all_pairs(self):
        mesh = SurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        a = vertex_adjacency(mesh).toarray()
        assert a.sum() == 6 and not a.diagonal().any()

    def test_two_triangles_shared_edge_only(self):
        verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]
        mesh = SurfaceMesh(verts, [[0, 1, 2], [1, 3, 2]])
        a = vertex_adjacency(mesh).toarray()
        assert not a[0, 3] and not a[3, 0]  # no triangle joins 0 and 3
        assert a[1, 2]

    def test_icosahedron_degree_five(self):
        # oracle: enumerate undirected edges straight from the triangle list
        mesh = make_icosphere(0)
        edges = set()
        for i, j, k in mesh.triangles:
            edges |= {frozenset((i, j)), frozenset((j, k)), frozenset((k, i))}
        degree = np.zeros(mesh.N, dtype=int)
        for e in edges:
            for v in e:
                degree[v] += 1
        assert np.all(degree == 5)
        a = vertex_adjacency(mesh)
        assert np.array_equal(np.asarray(a.sum(axis=1)).ravel(), degree)

    def test_symmetric_zero_diagonal(self, grid_mesh):
        a = vertex_adjacency(grid_mesh)
        assert (a != a.T).nnz == 0
        assert not a.diagonal().any()


class TestSurfaceSmooth:
    def test_fwhm_zero_is_identity(self, grid_mesh):
        f = np.random.default_rng(0).normal(size=grid_mesh.N)
        out = surface_smooth(grid_mesh, f, 0.0)
        assert np.array_equal(out, f)

    def test_constant_field_preserved(self, grid_mesh):
        out = surface_smooth(grid_mesh, np.full(grid_mesh.N, 3.25), 4.0)
        assert np.abs(out - 3.25).max() < 1e-12

    @given(st.floats(min_value=0.5, max_value=8.0))
    def test_linear_in_field(self, fwhm):
        mesh = make_grid_mesh(4, 4)
        r = np.random.default_rng(1)
        f1 = r.normal(size=mesh.N)
        f2 = r.normal(size=mesh.N)
        lhs = surface_smooth(mesh, 2.0 * f1 - f2, fwhm)
        rhs = 2.0 * surface_smooth(mesh, f1, fwhm) - surface_smooth(mesh, f2, fwhm)
        assert np.abs(lhs - rhs).max() < 1e-10

    def test_delta_approaches_uniform_for_large_fwhm(self):
        # limit of row-normalized constant weights on a connected mesh
        mesh = make_grid_mesh(4, 4)
        delta = np.zeros(mesh.N)
        delta[5] = 1.0
        out = surface_smooth(mesh, delta, 1e4)
        assert np.abs(out - 1.0 / mesh.N).max() < 1e-6

    def test_disconnected_mesh_warns_and_stays_within_components(self):
        verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0],
                 [10, 0, 0], [11, 0, 0], [10, 1, 0]]
        mesh = SurfaceMesh(verts, [[0, 1, 2], [3, 4, 5]])
        f = np.array([1.0, 1.0, 1.0, 5.0, 5.0, 5.0])
        with pytest.warns(UserWarning, match="connected components"):
            out = surface_smooth(mesh, f, 3.0)
        assert np.allclose(out[:3], 1.0)
        assert np.allclose(out[3:], 5.0)

    def test_rows_normalized(self, grid_mesh):
        w = smoothing_weights(grid_mesh, 2.5)
        assert np.abs(np.asarray(w.sum(axis=1)).ravel() - 1.0).max() < 1e-12


class TestEdgeDistortion:
    def test_identical_meshes_ratio_one(self, icosphere):
        res = edge_distance_distortion(icosphere, icosphere)
        assert np.allclose(res.ratios, 1.0)

    def test_double_scale_ratio_two(self, icosphere):
        scaled = SurfaceMesh(2.0 * icosphere.vertices, icosphere.triangles)
        res = edge_distance_distortion(scaled, icosphere)
        assert np.allclose(res.ratios, 2.0)
        assert res.quantiles["median"] == pytest.approx(2.0)

    def test_radial_perturbation_matches_per_edge_oracle(self):
        sphere = make_icosphere(1, radius=10.0)
        bump = 1.0 + 0.2 * np.sin(3.0 * sphere.vertices[:, 2] / 10.0)
        warped = SurfaceMesh(sphere.vertices * bump[:, None], sphere.triangles)
        res = edge_distance_distortion(sphere, warped)
        # independent per-edge computation in plain python
        for (u, v), ratio in zip(res.edges, res.ratios):
            la = np.sqrt(sum((sphere.vertices[u][i] - sphere.vertices[v][i]) ** 2
                             for i in range(3)))
            lb = np.sqrt(sum((warped.vertices[u][i] - warped.vertices[v][i]) ** 2
                             for i in range(3)))
            assert ratio == pytest.approx(la / lb, rel=1e-12)

    def test_topology_mismatch_rejected(self, icosphere):
        other = make_grid_mesh(3, 4)
        with pytest.raises(MeshError, match="identical triangle list"):
            edge_distance_distortion(icosphere, other)


class TestMeshIO:
    def test_roundtrip(self, tmp_path, icosphere):
        path = tmp_path / "mesh.txt"
        write_mesh(path, icosphere)
        back = read_mesh(path)
        assert np.allclose(back.vertices, icosphere.vertices)
        assert np.array_equal(back.triangles, icosphere.triangles)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("vertices 3 1\n")
        with pytest.raises(MeshError, match="bad header"):
            read_mesh(path)

    def test_wrong_line_count(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("mesh 3 1\n0 0 0\n1 0 0\n")
        with pytest.raises(MeshError, match="expected 5 lines"):
            read_mesh(path)

    def test_malformed_row(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("mesh 3 1\n0 0 0\n1 0 x\n0 1 0\n0 1 2\n")
        with pytest.raises(MeshError, match="malformed"):
            read_mesh(path)
