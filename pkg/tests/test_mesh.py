import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshdeform.errors import DegenerateGeometryError, DegenerateTopologyError, InvalidArgumentError
from meshdeform.gcn import unpool_edge
from meshdeform.mesh import (
    Mesh,
    TargetShape,
    make_ellipsoid,
    make_uv_ellipsoid,
    self_intersection_spot_check,
    triangles_intersect,
)


def star_mesh(center, nbrs):
    """Vertex 0 joined by edges (no faces) to every other vertex."""
    v = np.vstack([center, nbrs])
    edges = [(0, k) for k in range(1, len(v))]
    return Mesh(v, np.zeros((0, 3), dtype=int), edges)


class TestEllipsoid:
    def test_paper_placement_inside_box(self):
        for m in (make_ellipsoid((0.2, 0.2, 0.4), (0, 0, 0.8)), make_uv_ellipsoid((0.2, 0.2, 0.4), (0, 0, 0.8))):
            assert m.euler_characteristic() == 2
            lo, hi = np.array([-0.2, -0.2, 0.4]), np.array([0.2, 0.2, 1.2])
            assert np.all(m.vertices >= lo - 1e-12) and np.all(m.vertices <= hi + 1e-12)

    @pytest.mark.parametrize("level", [0, 1, 2, 3])
    def test_unit_sphere(self, level):
        m = make_ellipsoid((1, 1, 1), (0, 0, 0), level)
        np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.0, atol=1e-9)
        assert 3 * m.num_faces == 2 * m.num_edges
        assert m.is_closed_manifold()

    def test_uv_unit_sphere(self):
        m = make_uv_ellipsoid((1, 1, 1), (0, 0, 0))
        np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.0, atol=1e-9)

    def test_default_icosphere_count_is_near_156(self):
        m = make_ellipsoid()
        assert m.num_vertices == 162

    def test_paper_matching_configuration(self, ellipsoid):
        assert (ellipsoid.num_vertices, ellipsoid.num_edges, ellipsoid.num_faces) == (156, 462, 308)
        m = make_uv_ellipsoid()
        assert (m.num_vertices, m.num_edges, m.num_faces) == (156, 462, 308)
        np.testing.assert_array_equal(m.vertices, ellipsoid.vertices)
        np.testing.assert_array_equal(m.faces, ellipsoid.faces)

    def test_initial_features_are_coordinates(self, ellipsoid):
        np.testing.assert_array_equal(ellipsoid.features, ellipsoid.vertices)

    def test_outward_winding(self, ellipsoid):
        _, n = ellipsoid.face_areas_and_normals()
        c = ellipsoid.vertices[ellipsoid.faces].mean(axis=1) - (0, 0, 0.8)
        assert np.all(np.einsum("ij,ij->i", n, c) > 0)

    def test_deterministic(self):
        a, b = make_ellipsoid(subdivision_level=2), make_ellipsoid(subdivision_level=2)
        assert a.vertices.tobytes() == b.vertices.tobytes()
        assert a.faces.tobytes() == b.faces.tobytes()

    @pytest.mark.parametrize("radii", [(0, 1, 1), (1, -1, 1), (1, 1, float("nan"))])
    def test_bad_radius(self, radii):
        with pytest.raises(InvalidArgumentError):
            make_ellipsoid(radii)
        with pytest.raises(InvalidArgumentError):
            make_uv_ellipsoid(radii)


class TestMeshInvariants:
    def test_index_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            Mesh(np.zeros((3, 3)), [[0, 1, 3]])

    def test_duplicate_edge(self):
        with pytest.raises(InvalidArgumentError):
            Mesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=int), [(0, 1), (1, 0)])

    def test_degenerate_face(self):
        with pytest.raises(InvalidArgumentError):
            Mesh(np.zeros((3, 3)), [[0, 1, 1]])

    def test_face_edge_missing_from_edge_list(self):
        with pytest.raises(InvalidArgumentError):
            Mesh(np.eye(3), [[0, 1, 2]], [(0, 1), (1, 2)])

    def test_feature_rows(self):
        with pytest.raises(InvalidArgumentError):
            Mesh(np.eye(3), [[0, 1, 2]], features=np.zeros((2, 4)))

    def test_immutable(self, tetra):
        with pytest.raises(ValueError):
            tetra.vertices[0, 0] = 5.0

    def test_target_shape_rejects_non_unit_normals(self):
        with pytest.raises(InvalidArgumentError):
            TargetShape([[0, 0, 0]], [[0, 0, 2.0]])
        with pytest.raises(InvalidArgumentError):
            TargetShape(np.zeros((0, 3)), np.zeros((0, 3)))


class TestNeighbors:
    def test_tetrahedron(self, tetra):
        for i in range(4):
            assert tetra.neighbors(i) == [j for j in range(4) if j != i]

    def test_default_ellipsoid_degree(self, ellipsoid):
        assert min(len(ellipsoid.neighbors(i)) for i in range(ellipsoid.num_vertices)) >= 3

    def test_isolated_vertex(self):
        m = Mesh(np.zeros((4, 3)), [[0, 1, 2]])
        assert m.neighbors(3) == []

    def test_out_of_range(self, tetra):
        with pytest.raises(InvalidArgumentError):
            tetra.neighbors(4)
        with pytest.raises(InvalidArgumentError):
            tetra.neighbors(-1)

    def test_symmetric(self, ellipsoid):
        m = unpool_edge(ellipsoid)
        for i in range(m.num_vertices):
            for j in m.neighbors(i):
                assert i in m.neighbors(j)


class TestLaplacianCoordinate:
    def test_vertex_at_centroid(self):
        m = star_mesh([0, 0, 0], [[1, 0, 0], [-1, 0, 0], [0, 2, 0], [0, -2, 0]])
        np.testing.assert_array_equal(m.laplacian_coordinate(0), [0, 0, 0])

    def test_mean_equals_vertex(self):
        m = star_mesh([1, 0, 0], [[0, 0, 0], [2, 0, 0], [0, 0, 0], [2, 0, 0]])
        np.testing.assert_array_equal(m.laplacian_coordinate(0), [0, 0, 0])

    def test_hand_value(self):
        m = star_mesh([1, 1, 1], [[0, 0, 0], [2, 0, 0]])
        np.testing.assert_allclose(m.laplacian_coordinate(0), [0, 1, 1])

    def test_isolated_vertex_raises(self):
        m = Mesh(np.zeros((4, 3)), [[0, 1, 2]])
        with pytest.raises(DegenerateTopologyError):
            m.laplacian_coordinate(3)
        with pytest.raises(DegenerateTopologyError):
            m.laplacian_coordinates()

    def test_matrix_form_matches_per_vertex(self, ellipsoid):
        batch = ellipsoid.laplacian_coordinates()
        for i in range(0, ellipsoid.num_vertices, 7):
            np.testing.assert_allclose(batch[i], ellipsoid.laplacian_coordinate(i), atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_translation_invariance(self, t):
        m = make_ellipsoid(subdivision_level=1)
        moved = m.with_vertices(m.vertices + np.array(t))
        np.testing.assert_allclose(moved.laplacian_coordinates(), m.laplacian_coordinates(), atol=1e-12)


class TestSampleSurface:
    def test_single_triangle(self):
        tri = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
        m = Mesh(tri, [[0, 1, 2]])
        p, n = m.sample_surface(10000, seed=3)
        assert p.shape == (10000, 3)
        # barycentric coordinates of (x, y, 0) in this triangle are (1-x-y, x, y)
        assert np.all(p[:, 0] >= 0) and np.all(p[:, 1] >= 0) and np.all(p[:, 0] + p[:, 1] <= 1 + 1e-12)
        assert np.all(p[:, 2] == 0)
        edge = 1.0
        assert np.linalg.norm(p.mean(axis=0) - tri.mean(axis=0)) < 0.01 * edge
        np.testing.assert_array_equal(n, np.tile([0, 0, 1.0], (10000, 1)))

    def test_area_weighting_on_unit_square(self):
        v = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
        m = Mesh(v, [[0, 1, 2], [0, 2, 3]])
        p, _ = m.sample_surface(100000, seed=0)
        lower = np.mean(p[:, 1] < p[:, 0])
        assert abs(lower - 0.5) <= 0.01

    def test_area_weighting_unequal_triangles(self):
        # areas 1.5 and 0.5: a long and a short triangle sharing an edge
        v = np.array([[0.0, 0, 0], [3, 0, 0], [0, 1, 0], [-1, 0, 0]])
        m = Mesh(v, [[0, 1, 2], [0, 2, 3]])
        p, _ = m.sample_surface(100000, seed=1)
        assert abs(np.mean(p[:, 0] >= 0) - 0.75) < 0.01

    def test_zero_count(self, tetra):
        p, n = tetra.sample_surface(0, seed=0)
        assert p.shape == (0, 3) and n.shape == (0, 3)

    def test_zero_area_raises(self):
        m = Mesh(np.zeros((3, 3)), [[0, 1, 2]])
        with pytest.raises(DegenerateGeometryError):
            m.sample_surface(5, seed=0)

    def test_degenerate_face_warns_and_gets_no_samples(self):
        v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]])
        m = Mesh(v, [[0, 1, 2], [0, 1, 3]])
        with pytest.warns(RuntimeWarning, match="zero-area"):
            p, n = m.sample_surface(200, seed=0)
        np.testing.assert_array_equal(n, np.tile([0, 0, 1.0], (200, 1)))
        _, normals = m.face_areas_and_normals()
        np.testing.assert_array_equal(normals[1], [0, 0, 1.0])

    def test_deterministic(self, ellipsoid):
        a = ellipsoid.sample_surface(500, seed=9)[0]
        b = ellipsoid.sample_surface(500, seed=9)[0]
        assert a.tobytes() == b.tobytes()

    def test_points_lie_on_faces(self, ellipsoid):
        p, n = ellipsoid.sample_surface(2000, seed=4)
        # distance to the plane of the face each point was drawn from -- recover that face by normal match
        _, fn = ellipsoid.face_areas_and_normals()
        v0 = ellipsoid.vertices[ellipsoid.faces[:, 0]]
        dist = np.abs(np.einsum("ij,kj->ik", p, fn) - np.einsum("kj,kj->k", v0, fn)[None, :])
        same_normal = np.all(np.abs(n[:, None, :] - fn[None, :, :]) < 1e-15, axis=-1)
        assert np.all(np.where(same_normal, dist, np.inf).min(axis=1) < 1e-9)


class TestSelfIntersection:
    def test_crossing_triangles(self):
        a = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
        b = np.array([[0.2, 0.2, -0.5], [0.2, 0.2, 0.5], [0.3, -1, 0.0]])
        assert triangles_intersect(a, b)

    def test_separated_triangles(self):
        a = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
        assert not triangles_intersect(a, a + (0, 0, 1.0))

    def test_ellipsoid_is_clean(self, ellipsoid):
        assert self_intersection_spot_check(unpool_edge(unpool_edge(ellipsoid)), pairs=1000) == 0
