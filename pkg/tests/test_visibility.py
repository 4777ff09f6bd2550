import logging

import numpy as np
import pytest
from scipy.spatial import cKDTree

from conftest import unit_directions
from errors import EmptyVisibilityError, ParameterError
from pointcloud import PointCloud
from visibility import (
    DEFAULT_GAMMA,
    VisibleSet,
    build_covis_graph,
    compute_visible_sets,
    hidden_point_removal,
    naive_covisibility,
    read_visible_sets,
    write_visible_sets,
)
from voxel import VoxelMap, VoxelParams, build_voxel_map


def _shells(rng, inner=2000, outer=3000):
    positions = np.vstack([5.0 * unit_directions(rng, inner), 10.0 * unit_directions(rng, outer)])
    return PointCloud(positions)


def _ray_cast_oracle(positions, viewpoint, surfel_radius=0.8, tolerance=0.5):
    """Visible points by ray casting through 1 degree (azimuth, polar) bins.

    Each point is a disc of ``surfel_radius`` meters facing the viewpoint; a
    bin's depth is the nearest disc its centre ray hits. A point is visible
    when its range is within ``tolerance`` of the depth of its own bin.
    """
    step = np.radians(1.0)
    relative = positions - viewpoint
    ranges = np.linalg.norm(relative, axis=1)
    directions = relative / ranges[:, None]

    cols = np.floor((np.arctan2(directions[:, 1], directions[:, 0]) + np.pi) / step).astype(int) % 360
    rows = np.minimum(np.floor(np.arccos(np.clip(directions[:, 2], -1.0, 1.0)) / step).astype(int), 179)
    own_bin = rows * 360 + cols

    polar, azimuth = np.meshgrid((np.arange(180) + 0.5) * step, (np.arange(360) + 0.5) * step - np.pi,
                                 indexing='ij')
    rays = np.column_stack([(np.sin(polar) * np.cos(azimuth)).ravel(),
                            (np.sin(polar) * np.sin(azimuth)).ravel(), np.cos(polar).ravel()])
    footprint = 2.0 * np.sin(np.minimum(surfel_radius / ranges, np.pi / 2) / 2.0)
    hits = cKDTree(rays).query_ball_point(directions, footprint)
    owners = np.repeat(np.arange(len(positions)), [len(h) for h in hits])
    covered = np.concatenate([np.asarray(h, dtype=np.int64) for h in hits])

    depth = np.full(len(rays), np.inf)
    np.minimum.at(depth, covered, ranges[owners])
    np.minimum.at(depth, own_bin, ranges)
    return np.flatnonzero(ranges <= depth[own_bin] + tolerance)


def _jaccard(a, b):
    a, b = set(np.asarray(a).tolist()), set(np.asarray(b).tolist())
    return len(a & b) / len(a | b)


def _thin_ring(rng, count=2000, radius=5.0, noise=0.05):
    angles = rng.uniform(0.0, 2.0 * np.pi, count)
    ranges = radius + rng.normal(0.0, noise, count)
    return PointCloud(np.column_stack([ranges * np.cos(angles), ranges * np.sin(angles),
                                       rng.uniform(-0.1, 0.1, count)]))


def _hand_map():
    # 12 points in 4 leaves of 3 points each
    return VoxelMap(VoxelParams(), [], np.array([0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]))


def _hand_sets(voxel_map):
    return (VisibleSet.from_indices(0, [0, 1, 3, 4, 6], voxel_map),
            VisibleSet.from_indices(1, [2, 5, 9, 10], voxel_map),
            VisibleSet.from_indices(2, [7, 11], voxel_map))


class TestHiddenPointRemoval:
    def test_inner_shell_hides_outer_shell(self, rng):
        cloud = _shells(rng)
        voxel_map = build_voxel_map(cloud)
        visible = hidden_point_removal(cloud, voxel_map, np.zeros(3), gamma=1.0)
        np.testing.assert_array_equal(visible.indices, np.arange(2000))

    def test_agrees_with_ray_casting(self, rng):
        cloud = _shells(rng)
        voxel_map = build_voxel_map(cloud)
        visible = hidden_point_removal(cloud, voxel_map, np.zeros(3), gamma=1.0)
        expected = _ray_cast_oracle(cloud.positions, np.zeros(3))
        assert np.count_nonzero(expected >= 2000) < 0.02 * 3000
        assert _jaccard(visible.indices, expected) >= 0.95

    def test_default_gamma_keeps_noisy_surface(self, rng):
        # small flip radii hide the far side of noisy samples on a single surface
        directions = unit_directions(rng, 5000)
        cloud = PointCloud(directions * rng.normal(10.0, 0.1, size=(5000, 1)))
        voxel_map = build_voxel_map(cloud)
        assert len(hidden_point_removal(cloud, voxel_map, np.zeros(3))) >= 0.99 * 5000
        assert len(hidden_point_removal(cloud, voxel_map, np.zeros(3), gamma=1.0)) < 0.99 * 5000

    def test_default_gamma_leaks_through_nested_shells(self, rng):
        # nested surfaces need a small gamma; the robust color average absorbs the leak at the default
        cloud = _shells(rng)
        visible = hidden_point_removal(cloud, build_voxel_map(cloud), np.zeros(3))
        assert DEFAULT_GAMMA == 3.5
        assert np.count_nonzero(visible.indices < 2000) >= 0.99 * 2000
        assert np.count_nonzero(visible.indices >= 2000) > 0.5 * 3000

    def test_gamma_never_removes_points_on_a_sphere(self, rng):
        cloud = PointCloud(10.0 * unit_directions(rng, 3000))
        voxel_map = build_voxel_map(cloud)
        previous = set()
        for gamma in (0.5, 1.0, 2.0, 3.5):
            visible = set(hidden_point_removal(cloud, voxel_map, np.zeros(3), gamma=gamma).indices.tolist())
            assert previous <= visible
            previous = visible
        assert len(previous) == 3000

    def test_visible_count_grows_with_gamma_on_shells(self, rng):
        cloud = _shells(rng)
        voxel_map = build_voxel_map(cloud)
        counts = [len(hidden_point_removal(cloud, voxel_map, np.zeros(3), gamma=gamma))
                  for gamma in (1.0, 2.0, 3.5)]
        assert counts == sorted(counts)
        assert counts[0] < counts[-1]

    def test_leaf_histogram_matches_indices(self, rng):
        cloud = _shells(rng, 300, 300)
        voxel_map = build_voxel_map(cloud)
        visible = hidden_point_removal(cloud, voxel_map, np.zeros(3), gamma=1.0)
        hist = visible.leaf_hist
        assert sum(hist.values()) == len(visible)
        for leaf_id, count in hist.items():
            assert count == np.count_nonzero(voxel_map.point_leaf[visible.indices] == leaf_id)

    def test_range_limit(self, rng):
        cloud = _shells(rng, 500, 500)
        voxel_map = build_voxel_map(cloud)
        visible = hidden_point_removal(cloud, voxel_map, np.zeros(3), gamma=1.0, max_range=7.0)
        assert np.all(visible.indices < 500)
        assert len(visible) == 500

    def test_few_points_all_visible(self):
        cloud = PointCloud([[1.0, 0, 0], [2.0, 0, 0], [0, 3.0, 0]])
        visible = hidden_point_removal(cloud, build_voxel_map(cloud), np.zeros(3))
        np.testing.assert_array_equal(visible.indices, [0, 1, 2])

    def test_flat_scene_seen_edge_on_is_all_visible(self, rng):
        positions = np.column_stack([rng.uniform(-5, 5, size=(200, 2)), np.zeros(200)])
        positions = positions[np.linalg.norm(positions, axis=1) > 0.5]
        cloud = PointCloud(positions)
        visible = hidden_point_removal(cloud, build_voxel_map(cloud), np.zeros(3))
        assert len(visible) == len(cloud)

    def test_nothing_in_range(self):
        cloud = PointCloud([[100.0, 0.0, 0.0]])
        with pytest.raises(EmptyVisibilityError):
            hidden_point_removal(cloud, build_voxel_map(cloud), np.zeros(3), max_range=10.0)

    @pytest.mark.parametrize('kwargs', [{'gamma': 0.0}, {'max_range': -1.0}, {'viewpoint': [np.nan, 0, 0]}])
    def test_invalid_arguments(self, kwargs):
        cloud = PointCloud([[1.0, 0.0, 0.0]])
        arguments = {'viewpoint': np.zeros(3), **kwargs}
        with pytest.raises(ParameterError):
            hidden_point_removal(cloud, build_voxel_map(cloud), **arguments)


class TestComputeVisibleSets:
    def test_out_of_range_frame_gets_empty_set(self, rng, caplog):
        cloud = _shells(rng, 200, 0)
        voxel_map = build_voxel_map(cloud)
        with caplog.at_level(logging.WARNING):
            sets = compute_visible_sets(cloud, voxel_map, [(0, np.zeros(3)), (1, np.array([500.0, 0, 0]))],
                                        gamma=1.0)
        assert len(sets[0]) == 200
        assert len(sets[1]) == 0
        assert 'Frame 1' in caplog.text

    def test_threads_do_not_change_result(self, rng):
        cloud = _shells(rng, 400, 400)
        voxel_map = build_voxel_map(cloud)
        viewpoints = [(k, rng.normal(size=3)) for k in range(4)]
        serial = compute_visible_sets(cloud, voxel_map, viewpoints, threads=1)
        threaded = compute_visible_sets(cloud, voxel_map, viewpoints, threads=4)
        for a, b in zip(serial, threaded):
            assert a.frame_id == b.frame_id
            np.testing.assert_array_equal(a.indices, b.indices)


class TestCovisGraph:
    def test_shared_leaves_create_edge(self):
        voxel_map = _hand_map()
        a, b, _ = _hand_sets(voxel_map)
        graph = build_covis_graph([a, b], voxel_map)
        assert graph.has_edge(0, 1) and graph.has_edge(1, 0)
        assert graph.shared(0, 1) == 6
        np.testing.assert_array_equal(graph.augmented[0], np.arange(7))
        np.testing.assert_array_equal(graph.augmented[1], [0, 1, 2, 3, 4, 5, 9, 10])
        np.testing.assert_array_equal(graph.covisible[0], np.arange(6))
        np.testing.assert_array_equal(graph.covisible[1], np.arange(6))

    def test_threshold_fraction(self):
        voxel_map = _hand_map()
        a, _, c = _hand_sets(voxel_map)
        assert build_covis_graph([a, c], voxel_map, 0.5).shared(0, 2) == 2
        strict = build_covis_graph([a, c], voxel_map, 1.0)
        assert strict.num_edges == 0
        assert len(strict.covisible[0]) == 0
        np.testing.assert_array_equal(strict.augmented[2], [7, 11])

    def test_neighbors_and_union(self):
        voxel_map = _hand_map()
        graph = build_covis_graph(list(_hand_sets(voxel_map)), voxel_map)
        assert graph.neighbors(0) == [1, 2]
        assert set(graph.covisible_union().tolist()) >= set(range(6))

    def test_augmented_contains_own_points(self):
        voxel_map = _hand_map()
        sets = _hand_sets(voxel_map)
        graph = build_covis_graph(list(sets), voxel_map)
        for visible in sets:
            assert set(visible.indices.tolist()) <= set(graph.augmented[visible.frame_id].tolist())
            assert set(graph.covisible[visible.frame_id].tolist()) <= set(
                graph.augmented[visible.frame_id].tolist())

    def test_naive_mode_needs_identical_points(self):
        voxel_map = _hand_map()
        a, b, _ = _hand_sets(voxel_map)
        assert naive_covisibility([a, b]).num_edges == 0
        overlapping = VisibleSet.from_indices(3, [1, 3, 8], voxel_map)
        graph = naive_covisibility([a, overlapping])
        assert graph.shared(0, 3) == 2
        np.testing.assert_array_equal(graph.covisible[0], [1, 3])

    def test_shared_leaves_beat_point_intersection_on_noisy_ring(self, rng):
        cloud = _thin_ring(rng)
        voxel_map = build_voxel_map(cloud)
        turned = 9.0 * np.array([np.cos(np.pi / 6), np.sin(np.pi / 6), 0.0])
        sets = compute_visible_sets(cloud, voxel_map, [(0, np.array([9.0, 0.0, 0.0])), (1, turned)])
        graph = build_covis_graph(sets, voxel_map)
        naive = naive_covisibility(sets)
        assert graph.has_edge(0, 1)
        for frame_id in (0, 1):
            assert set(naive.covisible[frame_id].tolist()) <= set(graph.covisible[frame_id].tolist())
            assert len(graph.covisible[frame_id]) > len(naive.covisible[frame_id])

    def test_empty_set_never_links(self):
        voxel_map = _hand_map()
        a, _, _ = _hand_sets(voxel_map)
        graph = build_covis_graph([a, VisibleSet.empty(5)], voxel_map)
        assert graph.num_edges == 0

    def test_rejects_bad_input(self):
        voxel_map = _hand_map()
        a, b, _ = _hand_sets(voxel_map)
        with pytest.raises(ParameterError):
            build_covis_graph([a], voxel_map)
        with pytest.raises(ParameterError):
            build_covis_graph([a, a], voxel_map)
        with pytest.raises(ParameterError):
            build_covis_graph([a, b], voxel_map, threshold_fraction=0.0)


class TestVisibleSetDump:
    def test_round_trip(self, tmp_path):
        voxel_map = _hand_map()
        sets = list(_hand_sets(voxel_map)) + [VisibleSet.empty(9)]
        write_visible_sets(sets, tmp_path / 'visible.txt')
        loaded = read_visible_sets(tmp_path / 'visible.txt', voxel_map)
        assert [v.frame_id for v in loaded] == [0, 1, 2, 9]
        for a, b in zip(sets, loaded):
            np.testing.assert_array_equal(a.indices, b.indices)
            assert a.leaf_hist == b.leaf_hist
