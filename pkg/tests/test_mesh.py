"""Base meshes, bisection, graded partitions, and the tensor cylinder."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fracafem import mesh as mesh_mod
from fracafem.mesh import (
    BaseMesh, aspect_ratio_stats, bisect, build_base_mesh,
    build_graded_partition, check_mesh_condition, dump_mesh, extrude,
    gamma_for, parse_mesh, star, stars, uniform_refine,
)


def conforming(mesh):
    """No hanging nodes: every element edge is matched or on the boundary."""
    if mesh.dim == 1:
        counts = np.bincount(mesh.elements.ravel(), minlength=mesh.n_vertices)
        return np.all((counts == 1) | (counts == 2))
    coords = {tuple(np.round(c, 12)) for c in mesh.vertices}
    cnt = {}
    for tri in mesh.elements:
        for i in range(3):
            a, b = int(tri[(i + 1) % 3]), int(tri[(i + 2) % 3])
            k = (a, b) if a < b else (b, a)
            cnt[k] = cnt.get(k, 0) + 1
            mid = tuple(np.round(0.5 * (mesh.vertices[a] + mesh.vertices[b]),
                                 12))
            if mid in coords:
                return False
    return all(c <= 2 for c in cnt.values())


class TestGradedPartition:
    def test_direct_evaluation(self):
        p = build_graded_partition(2, 1.0, 2.0)
        assert np.allclose(p.nodes, [0.0, 0.25, 1.0])

    def test_single_interval_forces_endpoints(self):
        p = build_graded_partition(1, 3.0, 7.3)
        assert np.allclose(p.nodes, [0.0, 3.0])

    def test_top_width_value_and_bound(self):
        p = build_graded_partition(8, 1.0, 5.0)
        assert p.h_top == pytest.approx(1.0 - (7.0 / 8.0) ** 5, rel=1e-15)
        assert p.h_top <= 5.0 * 1.0 / 8.0

    def test_invalid_inputs(self):
        for bad in [(0, 1.0, 2.0), (4, -1.0, 2.0), (4, float("inf"), 2.0),
                    (4, 1.0, 0.5), (4, 1.0, float("nan"))]:
            with pytest.raises(ValueError):
                build_graded_partition(*bad)

    @given(st.integers(1, 60), st.floats(0.1, 9.0), st.floats(1.0, 9.0))
    def test_invariants(self, M, Y, gamma):
        p = build_graded_partition(M, Y, gamma)
        widths = p.widths()
        assert np.all(widths > 0)
        assert p.nodes[0] == 0.0 and p.nodes[-1] == Y
        # convex grading: the widest interval is the top one
        assert widths.max() == pytest.approx(p.h_top, rel=1e-12)
        assert p.h_top <= gamma * Y / M * (1 + 1e-12)

    def test_gamma_policies(self):
        assert gamma_for(0.3) == pytest.approx(3 / 0.6 + 0.1)
        assert gamma_for(0.8, "strong") == pytest.approx(3 / 0.4 + 0.1)
        with pytest.raises(ValueError):
            gamma_for(0.5, "mystery")


class TestBuildBaseMesh:
    def test_unit_interval(self):
        m = build_base_mesh("unit_interval", 0.5)
        assert m.n_elements == 2 and m.n_vertices == 3
        assert m.boundary_vertex_mask().sum() == 2

    def test_unit_square_minimal(self):
        m = build_base_mesh("unit_square", 1.0)
        assert m.n_elements == 2
        assert conforming(m)

    def test_l_shape_macro(self):
        m = build_base_mesh("l_shape", 1.0)
        assert m.n_elements == 6
        assert conforming(m)
        assert m.element_measures().sum() == pytest.approx(3.0)

    def test_unknown_domain(self):
        with pytest.raises(ValueError):
            build_base_mesh("moebius", 0.5)

    def test_pitch_controls_size(self):
        m = build_base_mesh("unit_square", 0.25)
        assert m.n_elements == 32
        # diameters at most sqrt(2) * pitch
        assert m.element_diameters().max() <= np.sqrt(2) * 0.25 + 1e-12


class TestBisect:
    def test_mark_both_triangles(self):
        m = build_base_mesh("unit_square", 1.0)
        b = bisect(m, [0, 1])
        assert b.n_elements == 4
        assert conforming(b)

    def test_empty_mark_is_identity(self):
        m = build_base_mesh("unit_square", 1.0)
        assert bisect(m, []) is m

    def test_mark_one_closure(self):
        # both triangles share the diagonal refinement edge, so marking one
        # bisects both
        m = build_base_mesh("unit_square", 1.0)
        b = bisect(m, [0])
        assert b.n_elements == 4
        assert conforming(b)

    def test_invalid_ids(self):
        m = build_base_mesh("unit_square", 1.0)
        with pytest.raises(ValueError):
            bisect(m, [5])

    def test_midpoint_property(self):
        m = uniform_refine(build_base_mesh("unit_square", 0.5), 1)
        b = bisect(m, [0, 3, 5])
        for v in range(m.n_vertices, b.n_vertices):
            pa, pb = b.vertex_parents[v]
            mid = 0.5 * (b.vertices[pa] + b.vertices[pb])
            assert np.allclose(b.vertices[v], mid)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 5))
    @settings(max_examples=25, deadline=None)
    def test_random_marks_stay_conforming(self, seed, rounds):
        m = build_base_mesh("l_shape", 1.0)
        rng = np.random.default_rng(seed)
        for _ in range(rounds):
            k = rng.integers(1, m.n_elements + 1)
            marked = rng.choice(m.n_elements, size=k, replace=False)
            m = bisect(m, marked)
        assert conforming(m)
        assert m.element_measures().sum() == pytest.approx(3.0)

    def test_similarity_classes_bounded(self):
        m0 = build_base_mesh("unit_square", 1.0)
        m = uniform_refine(m0, 6)
        triples = np.unique(np.round(m.angle_triples(), 9), axis=0)
        assert len(triples) <= 4 * m0.n_elements
        assert m.min_angle() >= m0.min_angle() / 2.0 - 1e-12

    def test_1d_bisect(self):
        m = build_base_mesh("unit_interval", 0.5)
        b = bisect(m, [0])
        assert b.n_elements == 3
        assert conforming(b)
        widths = np.sort(b.element_measures())
        assert np.allclose(widths, [0.25, 0.25, 0.5])


class TestStars:
    def test_interior_interval_star(self):
        m = build_base_mesh("unit_interval", 0.25)
        s = star(m, 2)
        assert s.n_elements == 2
        assert s.h_star == pytest.approx(0.25)

    def test_corner_star(self):
        m = build_base_mesh("unit_square", 1.0)
        corner = int(np.argmin(np.abs(m.vertices - [1.0, 0.0]).sum(axis=1)))
        s = star(m, corner)
        assert s.n_elements == 1

    def test_crisscross_center(self):
        verts = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]],
                         dtype=float)
        elems = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
        m = BaseMesh(2, verts, elems)
        s = star(m, 4)
        assert list(s.element_ids) == [0, 1, 2, 3]

    def test_invalid_vertex(self):
        m = build_base_mesh("unit_interval", 0.5)
        with pytest.raises(ValueError):
            star(m, 99)


class TestCylinder:
    def test_cell_counts(self):
        m = build_base_mesh("unit_interval", 0.5)
        cyl = extrude(m, build_graded_partition(3, 1.0, 2.0))
        assert cyl.n_cells == 6
        sq = build_base_mesh("unit_square", 1.0)
        assert extrude(sq, build_graded_partition(8, 1.0, 2.0)).n_cells == 16

    def test_product_count_49_by_8(self):
        m = build_base_mesh("unit_interval", 1.0 / 49.0)
        assert m.n_elements == 49
        cyl = extrude(m, build_graded_partition(8, 1.0, 2.0))
        assert cyl.n_cells == 392

    def test_node_indexing_bijective(self):
        m = build_base_mesh("unit_square", 0.5)
        cyl = extrude(m, build_graded_partition(4, 1.0, 2.0))
        seen = set()
        for v in range(m.n_vertices):
            for k in range(5):
                seen.add(cyl.node_index(v, k))
        assert seen == set(range(cyl.n_nodes))

    def test_star_cells_match_prism_columns(self):
        m = uniform_refine(build_base_mesh("unit_square", 0.5), 2)
        cyl = extrude(m, build_graded_partition(5, 1.0, 2.0))
        for s in stars(m):
            cells = set(s.cylinder_cells(cyl))
            direct = {cyl.cell_index(e, k)
                      for e in s.element_ids for k in range(5)}
            assert cells == direct

    def test_mesh_condition(self):
        m = build_base_mesh("unit_interval", 0.25)
        nodes = np.linspace(0.0, 1.0, 6)
        yp = mesh_mod.YPartition(M=5, Y=1.0, gamma=1.0, nodes=nodes)
        ok, _, ratio = check_mesh_condition(extrude(m, yp), 1.0)
        assert ok and ratio == pytest.approx(0.2 / 0.25)
        yp2 = mesh_mod.YPartition(M=2, Y=1.0, gamma=1.0,
                                  nodes=np.linspace(0, 1, 3))
        ok2, worst, ratio2 = check_mesh_condition(extrude(m, yp2), 1.0)
        assert not ok2 and ratio2 == pytest.approx(0.5 / 0.25)
        assert worst in m.interior_vertices()

    def test_mesh_condition_vacuous_without_interior(self):
        m = build_base_mesh("unit_square", 1.0)
        ok, node, ratio = check_mesh_condition(
            extrude(m, build_graded_partition(2, 1.0, 2.0)), 1.0)
        assert ok and node == -1 and ratio == 0.0

    def test_aspect_ratio(self):
        m = build_base_mesh("unit_interval", 0.5)
        yp = mesh_mod.YPartition(M=2, Y=1.0, gamma=1.0,
                                 nodes=np.linspace(0, 1, 3))
        stats = aspect_ratio_stats(extrude(m, yp))
        assert stats["bottom_layer_mean"] == pytest.approx(1.0)
        yp2 = mesh_mod.YPartition(M=2, Y=1.0, gamma=1.0,
                                  nodes=np.array([0.0, 0.001, 1.0]))
        stats2 = aspect_ratio_stats(extrude(m, yp2))
        assert stats2["bottom_layer_mean"] == pytest.approx(500.0)


class TestDump:
    def test_round_trip(self):
        m = bisect(build_base_mesh("l_shape", 0.5), [0, 4, 7])
        text = dump_mesh(m)
        back = parse_mesh(text)
        assert back.dim == m.dim
        assert np.array_equal(back.elements, m.elements)
        assert np.array_equal(back.refedge, m.refedge)
        assert np.allclose(back.vertices, m.vertices)
        assert np.array_equal(back.boundary_vertex_mask(),
                              m.boundary_vertex_mask())

    def test_header_checked(self):
        with pytest.raises(ValueError):
            parse_mesh("NOPE 1 2 3")

    def test_1d_round_trip(self):
        m = build_base_mesh("unit_interval", 0.3)
        back = parse_mesh(dump_mesh(m))
        assert np.allclose(back.vertices, m.vertices)
        assert np.array_equal(back.elements, m.elements)
