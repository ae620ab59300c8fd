import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlsflow import nodeset as nsm
from mlsflow.nodeset import (BoundaryTag, ChannelGeom, GeometryError, GridSpec,
                             NodeSet, TagKind, generate_cavity_2d,
                             generate_cavity_3d_half, generate_channel,
                             stretch_coordinate)


# oracle: high-precision evaluation of the tanh stretching map
def stretch_oracle(xr: float) -> float:
    return 0.5 * (1.0 + math.tanh(2.0 * xr - 1.0) / math.tanh(1.0))


class TestStretchCoordinate:
    def test_midpoint_fixed(self):
        assert stretch_coordinate(0.5) == pytest.approx(0.5, abs=1e-15)

    def test_endpoints_fixed(self):
        assert stretch_coordinate(0.0) == pytest.approx(0.0, abs=1e-15)
        assert stretch_coordinate(1.0) == pytest.approx(1.0, abs=1e-15)

    def test_quarter_point(self):
        # frozen from the oracle (mpmath agrees to 20 digits)
        assert stretch_coordinate(0.25) == pytest.approx(0.19661193324148185, abs=1e-7)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            stretch_coordinate(-0.01)
        with pytest.raises(ValueError):
            stretch_coordinate(1.01)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    @settings(max_examples=200)
    def test_strictly_monotone(self, a, b):
        if a == b:
            return
        lo, hi = min(a, b), max(a, b)
        assert stretch_coordinate(lo) < stretch_coordinate(hi)

    @given(st.floats(0.0, 1.0))
    @settings(max_examples=200)
    def test_antisymmetric_about_half(self, x):
        assert stretch_coordinate(x) + stretch_coordinate(1.0 - x) == pytest.approx(
            1.0, abs=1e-12)

    def test_matches_oracle_on_grid(self):
        for xr in np.linspace(0, 1, 101):
            assert stretch_coordinate(float(xr)) == pytest.approx(
                stretch_oracle(float(xr)), abs=1e-14)


class TestGridSpec:
    def test_too_small_count_rejected(self):
        with pytest.raises(GeometryError):
            GridSpec((2, 5))

    def test_unknown_stretching_rejected(self):
        with pytest.raises(GeometryError):
            GridSpec((5, 5), "geometric")


class TestCavity2D:
    def test_node_and_boundary_counts(self):
        ns = generate_cavity_2d(GridSpec((31, 31)))
        assert ns.n == 961
        assert int(ns.boundary_mask.sum()) == 120  # 4*31 - 4

    def test_corners_preserved(self):
        ns = generate_cavity_2d(GridSpec((5, 5)))
        pos = ns.positions
        for corner in [(0, 0), (1, 1), (0, 1), (1, 0)]:
            assert np.any(np.all(pos == corner, axis=1))

    def test_stretched_row_coordinate(self):
        ns = generate_cavity_2d(GridSpec((5, 5), "tanh"))
        xs = np.unique(ns.positions[:, 0])
        assert xs[1] == pytest.approx(stretch_oracle(0.25), abs=1e-12)

    def test_lid_tag_and_velocity(self):
        ns = generate_cavity_2d(GridSpec((7, 7)))
        lid = ns.mask(TagKind.MOVING_LID)
        assert int(lid.sum()) == 7  # corners included
        assert np.all(ns.positions[lid, 1] == 1.0)
        assert np.all(ns.bc_velocity[lid] == (1.0, 0.0))

    def test_every_node_tagged_once(self):
        ns = generate_cavity_2d(GridSpec((9, 9)))
        assert len(ns.tags) == ns.n
        n_int = int(ns.interior_mask.sum())
        assert n_int == 7 * 7

    def test_no_duplicates(self):
        ns = generate_cavity_2d(GridSpec((12, 12), "tanh"))
        assert len(np.unique(ns.positions, axis=0)) == ns.n

    def test_structured_shape_product(self):
        ns = generate_cavity_2d(GridSpec((8, 8)))
        assert np.prod(ns.structured_shape) == ns.n


class TestCavity3DHalf:
    def test_node_count_41_41_21(self):
        ns = generate_cavity_3d_half(GridSpec((41, 41, 21)))
        assert ns.n == 35301

    def test_symmetry_face_owns_25_nodes(self):
        ns = generate_cavity_3d_half(GridSpec((5, 5, 3)))
        sym = ns.mask(TagKind.SYMMETRY_PLANE)
        assert int(sym.sum()) == 25
        assert np.all(ns.positions[sym, 2] == ns.positions[:, 2].max())

    def test_lid_nodes_carry_unit_x_velocity(self):
        ns = generate_cavity_3d_half(GridSpec((5, 5, 3)))
        lid = ns.mask(TagKind.MOVING_LID)
        assert int(lid.sum()) > 0
        assert np.all(ns.positions[lid, 1] == 1.0)
        assert np.all(ns.bc_velocity[lid] == (1.0, 0.0, 0.0))
        for i in np.where(lid)[0]:
            assert ns.tags[i].velocity == (1.0, 0.0, 0.0)

    def test_z_axis_spans_half_domain(self):
        ns = generate_cavity_3d_half(GridSpec((5, 5, 3), "tanh"))
        zs = np.unique(ns.positions[:, 2])
        assert zs[0] == 0.0
        assert zs[-1] == pytest.approx(0.5, abs=1e-15)
        # half grid matches the full-cavity stretched axis
        assert zs[1] == pytest.approx(stretch_oracle(0.25), abs=1e-12)


class TestChannel:
    def test_obstacle_nodes_removed(self):
        ns = generate_channel(GridSpec((361, 21)), ChannelGeom())
        assert ns.n < 361 * 21
        assert ns.n == 361 * 21 - 90  # 9 x 10 strictly-inside lattice points

    def test_no_nodes_inside_obstacle(self):
        geom = ChannelGeom()
        ns = generate_channel(GridSpec((91, 11)), geom)
        x, y = ns.positions.T
        inside = ((x > geom.obstacle_offset + 1e-9) & (x < geom.obstacle_rear - 1e-9)
                  & (y < geom.obstacle_height - 1e-9))
        assert not inside.any()

    def test_inlet_column_tag_and_profile(self):
        ns = generate_channel(GridSpec((91, 11)), ChannelGeom())
        inlet = ns.mask(TagKind.INLET)
        assert np.all(ns.positions[inlet, 0] == 0.0)
        for i in np.where(inlet)[0]:
            assert ns.tags[i].profile == "parabolic"
        y = ns.positions[inlet, 1]
        assert np.allclose(ns.bc_velocity[inlet, 0], 4 * y * (1 - y), atol=1e-12)

    def test_obstacle_perimeter_is_wall(self):
        geom = ChannelGeom()
        ns = generate_channel(GridSpec((181, 11)), geom)
        x, y = ns.positions.T
        on_top = (np.abs(y - geom.obstacle_height) < 1e-9) & \
                 (x >= geom.obstacle_offset - 1e-9) & (x <= geom.obstacle_rear + 1e-9)
        assert int(on_top.sum()) > 0
        assert np.all(ns.kinds[on_top] == TagKind.WALL)

    def test_too_tall_obstacle_rejected(self):
        with pytest.raises(GeometryError):
            ChannelGeom(obstacle_height=1.0)
        with pytest.raises(GeometryError):
            ChannelGeom(obstacle_height=1.5)

    def test_obstacle_outside_channel_rejected(self):
        with pytest.raises(GeometryError):
            ChannelGeom(obstacle_offset=17.9, obstacle_length=0.5)


def brute_force_knn(ns: NodeSet, center: int, k: int):
    d = np.linalg.norm(ns.positions - ns.positions[center], axis=1)
    order = np.lexsort((np.arange(ns.n), d))
    return order[:k], d[order[:k]]


class TestKNearest:
    def test_interior_node_gets_3x3_patch(self):
        ns = generate_cavity_2d(GridSpec((9, 9)))
        center = 4 * 9 + 4
        ids, dists = ns.k_nearest(center, 9)
        gi = ns.grid_index[ids]
        assert set(map(tuple, gi)) == {(i, j) for i in (3, 4, 5) for j in (3, 4, 5)}
        assert np.all(np.diff(dists) >= 0)

    def test_corner_node_one_sided_patch(self):
        ns = generate_cavity_2d(GridSpec((9, 9)))
        ids, dists = ns.k_nearest(0, 9)
        oracle_ids, oracle_d = brute_force_knn(ns, 0, 9)
        assert np.array_equal(ids, oracle_ids)
        assert np.allclose(dists, oracle_d)

    def test_k1_is_center(self):
        ns = generate_cavity_2d(GridSpec((6, 6)))
        ids, dists = ns.k_nearest(17, 1)
        assert list(ids) == [17]
        assert dists[0] == 0.0

    def test_k_too_large(self):
        ns = generate_cavity_2d(GridSpec((4, 4)))
        with pytest.raises(ValueError):
            ns.k_nearest(0, 17)

    def test_matches_brute_force_everywhere_20x20(self):
        ns = generate_cavity_2d(GridSpec((20, 20), "tanh"))
        for center in range(ns.n):
            ids, _ = ns.k_nearest(center, 9)
            oracle_ids, _ = brute_force_knn(ns, center, 9)
            assert np.array_equal(ids, oracle_ids), f"mismatch at node {center}"

    def test_all_k_nearest_consistent(self):
        ns = generate_cavity_2d(GridSpec((10, 10)))
        ids, dists = ns.all_k_nearest(6)
        for c in (0, 37, 99):
            one_ids, one_d = ns.k_nearest(c, 6)
            assert np.array_equal(ids[c], one_ids)
            assert np.allclose(dists[c], one_d)


class TestNodeSetInvariants:
    def test_duplicate_positions_rejected(self):
        pos = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
        tags = [BoundaryTag(TagKind.INTERIOR)] * 3
        with pytest.raises(GeometryError):
            NodeSet(2, pos, tags)

    def test_tag_count_mismatch_rejected(self):
        pos = np.array([[0.0, 0.0], [1.0, 1.0]])
        with pytest.raises(GeometryError):
            NodeSet(2, pos, [BoundaryTag(TagKind.INTERIOR)])

    def test_structured_shape_mismatch_rejected(self):
        pos = np.array([[0.0, 0.0], [1.0, 1.0]])
        tags = [BoundaryTag(TagKind.INTERIOR)] * 2
        with pytest.raises(GeometryError):
            NodeSet(2, pos, tags, structured_shape=(3, 3))

    def test_positions_frozen(self):
        ns = generate_cavity_2d(GridSpec((5, 5)))
        with pytest.raises(ValueError):
            ns.positions[0, 0] = 9.9

    @pytest.mark.parametrize("maker,spec", [
        (generate_cavity_2d, GridSpec((7, 7))),
        (generate_cavity_2d, GridSpec((7, 7), "tanh")),
        (generate_cavity_3d_half, GridSpec((5, 5, 3), "tanh")),
    ])
    def test_generated_sets_satisfy_invariants(self, maker, spec):
        ns = maker(spec)
        assert np.all(np.isfinite(ns.positions))
        assert len(np.unique(ns.positions, axis=0)) == ns.n
        assert len(ns.tags) == ns.n
        if ns.structured_shape:
            assert np.prod(ns.structured_shape) == ns.n
