import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from bench import evaluate_poses, generate_sphere_scene, perturb_poses
from conftest import constant_panorama
from errors import NoCovisibilityError, ParameterError
from geometry import Pose, Twist, exp_update
from imaging import Panorama
from optimizer import (
    ColorState,
    OptimizerParams,
    colorize,
    colorize_points,
    combine_candidates,
    descend_frame,
    frame_loss,
    frame_loss_and_gradient,
    global_loss,
    optimize_poses,
    update_colors,
)
from pointcloud import PointCloud
from visibility import CoVisGraph, VisibleSet, build_covis_graph, compute_visible_sets
from voxel import build_voxel_map


def _full_graph(n_frames, n_points, covisible=None):
    """Every frame linked to every other, all frames co-seeing every point unless overridden"""
    frame_ids = tuple(range(n_frames))
    everything = np.arange(n_points)
    covisible = covisible or {}
    sets = {k: np.asarray(covisible.get(k, everything)) for k in frame_ids}
    edges = {(a, b): n_points for a in frame_ids for b in frame_ids if a < b}
    return CoVisGraph(frame_ids, edges, sets, sets)


def _ramp_image():
    rows, cols = np.mgrid[0:64, 0:96]
    return Panorama(np.stack([rows + 2 * cols, 2 * rows + cols, 100 + rows], axis=2).astype(np.uint8))


def _camera_points(rng, count):
    """Camera-frame points that project away from the poles and the longitude seam"""
    z = rng.uniform(-0.7, 0.7, count)
    theta = rng.uniform(-2.4, 2.4, count)
    ring = np.sqrt(1.0 - z ** 2)
    directions = np.column_stack([ring * np.cos(theta), ring * np.sin(theta), z])
    return directions * rng.uniform(5.0, 15.0, count)[:, None]


def _scene_graph(scene, poses):
    voxel_map = build_voxel_map(scene.cloud)
    viewpoints = [(k, pose.center) for k, pose in enumerate(poses)]
    visible = compute_visible_sets(scene.cloud, voxel_map, viewpoints)
    return build_covis_graph(visible, voxel_map), visible


class TestCombineCandidates:
    def test_mean(self):
        values, counts, *_ = combine_candidates([0, 0, 1], [0, 1, 0], [[1.0], [3.0], [5.0]], 3)
        np.testing.assert_array_equal(values[:, 0], [2.0, 5.0, 0.0])
        np.testing.assert_array_equal(counts, [2, 1, 0])

    def test_robust_drops_outlier(self):
        values, counts, candidates, frames, kept = combine_candidates(
            [0, 0, 0, 0], [0, 1, 2, 3], [[100.0], [102.0], [98.0], [250.0]], 1, mode='robust')
        assert values[0, 0] == pytest.approx(100.0)
        np.testing.assert_array_equal(kept[0], [True, True, True, False])
        np.testing.assert_array_equal(frames[0], [0, 1, 2, 3])

    def test_robust_zero_spread_keeps_majority(self):
        values, *_ = combine_candidates([0, 0, 0, 0], [0, 1, 2, 3], [[5.0], [5.0], [5.0], [9.0]], 1,
                                        mode='robust')
        assert values[0, 0] == 5.0

    def test_robust_rgb_uses_luma_for_trimming(self):
        samples = [[200.0, 10.0, 10.0], [202.0, 12.0, 10.0], [198.0, 8.0, 10.0], [0.0, 0.0, 0.0]]
        values, *_ = combine_candidates([0] * 4, [0, 1, 2, 3], samples, 1, mode='robust', channel='rgb')
        np.testing.assert_allclose(values[0], [200.0, 10.0, 10.0])

    def test_unknown_mode(self):
        with pytest.raises(ParameterError):
            combine_candidates([0], [0], [[1.0]], 1, mode='median')


class TestFrameLoss:
    def _single_point(self, value):
        colors = ColorState(np.array([0]), np.array([[value]]), np.array([1]))
        return PointCloud([[10.0, 0.0, 0.0]]), colors

    def test_squared_single_term(self):
        cloud, colors = self._single_point(0.5)
        result = frame_loss(cloud, [0], constant_panorama(204), Pose.identity(), colors)
        assert result.loss == pytest.approx(0.09)
        assert result.terms == 1

    def test_abs_single_term(self):
        cloud, colors = self._single_point(0.5)
        loss = frame_loss(cloud, [0], constant_panorama(204), Pose.identity(), colors, norm='abs').loss
        assert loss == pytest.approx(0.3)

    def test_untracked_points_contribute_nothing(self):
        cloud, colors = self._single_point(0.5)
        result = frame_loss(cloud, [3], constant_panorama(204), Pose.identity(), colors)
        assert result == (0.0, 0, 0)

    def test_constant_image_has_zero_gradient(self, rng):
        cloud = PointCloud(_camera_points(rng, 50))
        colors = ColorState(np.arange(50), rng.uniform(size=(50, 1)), np.ones(50, dtype=np.int64))
        image = constant_panorama(90, 64, 128)
        loss, gradient = frame_loss_and_gradient(cloud, np.arange(50), image, Pose.identity(), colors)
        assert loss > 0
        np.testing.assert_array_equal(gradient, 0.0)
        step = descend_frame(cloud, np.arange(50), image, Pose.identity(), colors, OptimizerParams())
        assert step.accepted == 0
        np.testing.assert_array_equal(step.pose.as_matrix(), Pose.identity().as_matrix())

    @pytest.mark.parametrize('channel', ['gray', 'rgb'])
    def test_gradient_matches_finite_differences(self, rng, channel):
        image = _ramp_image()
        h = 1e-6
        for _ in range(100):
            pose = Pose.from_rotation(Rotation.random(random_state=rng), rng.normal(size=3))
            positions = pose.inverse().transform(_camera_points(rng, 20))
            width = 1 if channel == 'gray' else 3
            scale = 1.0 if channel == 'gray' else 255.0
            colors = ColorState(np.arange(20), scale * rng.uniform(size=(20, width)),
                                np.ones(20, dtype=np.int64), channel)
            indices = np.arange(20)
            _, gradient = frame_loss_and_gradient(positions, indices, image, pose, colors)

            numeric = np.zeros(6)
            for k in range(6):
                delta = np.zeros(6)
                delta[k] = h
                plus = frame_loss(positions, indices, image, exp_update(pose, Twist.from_vector(delta)), colors)
                minus = frame_loss(positions, indices, image, exp_update(pose, Twist.from_vector(-delta)), colors)
                assert plus.terms == minus.terms == 20
                numeric[k] = (plus.loss - minus.loss) / (2 * h)
            assert np.linalg.norm(numeric - gradient) <= 1e-3 * np.linalg.norm(gradient)


class TestColorStep:
    def test_mean_colors_minimize_loss(self, small_scene):
        graph = _full_graph(3, len(small_scene.cloud))
        colors = update_colors(small_scene.cloud, graph, small_scene.images, small_scene.poses)
        best = global_loss(small_scene.cloud, graph, small_scene.images, small_scene.poses, colors)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            row = int(rng.integers(len(colors)))
            nudged = colors.with_values([row], colors.values[row] + rng.normal(scale=0.05, size=1))
            loss = global_loss(small_scene.cloud, graph, small_scene.images, small_scene.poses, nudged)
            assert loss >= best - 1e-12 * max(best, 1.0)

    def test_counts_follow_observations(self, small_scene):
        covisible = {0: np.arange(100), 1: np.arange(50, 150), 2: np.arange(0)}
        graph = _full_graph(3, len(small_scene.cloud), covisible)
        colors = update_colors(small_scene.cloud, graph, small_scene.images, small_scene.poses)
        np.testing.assert_array_equal(colors.point_index, np.arange(150))
        np.testing.assert_array_equal(colors.counts, np.r_[np.ones(50), 2 * np.ones(50), np.ones(50)])
        assert len(colors.uncolored) == 0


class TestOptimizePoses:
    def test_consistent_views_are_a_fixed_point(self, rolled_views):
        cloud, poses, images = rolled_views
        graph = _full_graph(3, len(cloud))
        final, colors, report = optimize_poses(cloud, graph, images, poses, OptimizerParams(max_outer=5))
        for before, after in zip(poses, final):
            assert (before.rotation.inv() * after.rotation).magnitude() < 1e-6
            assert np.linalg.norm(before.center - after.center) < 1e-4
        assert report.trace(0)[-1] < 1e-12
        assert report.converged

    def test_frame_without_covisible_points_is_frozen(self, rolled_views, caplog):
        cloud, poses, images = rolled_views
        nudged = poses[:2] + [exp_update(poses[2], Twist((0.0, 0.02, 0.0), (0.0, 0.0, 0.0)))]
        graph = _full_graph(3, len(cloud), {2: np.arange(0)})
        final, _, report = optimize_poses(cloud, graph, images, nudged, OptimizerParams(max_outer=3))
        assert report.frozen == [2]
        assert final[2] is nudged[2]
        assert 'Frame 2' in caplog.text

    def test_thread_count_does_not_change_result(self, small_scene):
        start = perturb_poses(small_scene.poses, 1.0, 2.0, seed=4)
        graph = _full_graph(3, len(small_scene.cloud))
        runs = [optimize_poses(small_scene.cloud, graph, small_scene.images, start,
                               OptimizerParams(max_outer=3, threads=threads)) for threads in (1, 4)]
        for a, b in zip(runs[0][0], runs[1][0]):
            np.testing.assert_array_equal(a.as_matrix(), b.as_matrix())
        assert runs[0][2].trace() == runs[1][2].trace()

    def test_perturbed_poses_improve(self):
        scene = generate_sphere_scene(radius=10.0, n_points=5000, n_views=4, seed=11, image_size=(128, 256))
        start = perturb_poses(scene.poses, 2.0, 5.0, seed=12)
        graph, _ = _scene_graph(scene, start)
        params = OptimizerParams(max_outer=15)
        before = global_loss(scene.cloud, graph, scene.images, start,
                             update_colors(scene.cloud, graph, scene.images, start, params.mode))
        final, _, report = optimize_poses(scene.cloud, graph, scene.images, start, params)

        initial = np.mean([e.rotation_deg for e in evaluate_poses(start, scene.poses)])
        refined = np.mean([e.rotation_deg for e in evaluate_poses(final, scene.poses)])
        assert refined < initial
        assert report.trace(0)[-1] < before
        assert report.is_monotone()
        assert report.levels() == [2, 1, 0]

    def test_covisible_sets_are_unchanged_by_optimization(self, small_scene):
        start = perturb_poses(small_scene.poses, 1.0, 2.0, seed=6)
        graph, _ = _scene_graph(small_scene, start)

        def serialized():
            return [(k, graph.augmented[k].tobytes(), graph.covisible[k].tobytes()) for k in graph.frame_ids]

        before, edges = serialized(), dict(graph.edges)
        optimize_poses(small_scene.cloud, graph, small_scene.images, start, OptimizerParams(max_outer=3))
        assert serialized() == before
        assert dict(graph.edges) == edges

    def test_needs_an_edge(self, small_scene):
        graph = CoVisGraph((0, 1), {}, {0: np.arange(5), 1: np.arange(5)}, {0: np.arange(0), 1: np.arange(0)})
        with pytest.raises(NoCovisibilityError):
            optimize_poses(small_scene.cloud, graph, small_scene.images[:2], small_scene.poses[:2])

    def test_lengths_must_match(self, small_scene):
        graph = _full_graph(3, len(small_scene.cloud))
        with pytest.raises(ParameterError):
            optimize_poses(small_scene.cloud, graph, small_scene.images[:2], small_scene.poses)

    @pytest.mark.parametrize('params', [OptimizerParams(mode='vote'), OptimizerParams(norm='huber'),
                                        OptimizerParams(max_outer=0), OptimizerParams(step_growth=0.5)])
    def test_invalid_params(self, small_scene, params):
        graph = _full_graph(3, len(small_scene.cloud))
        with pytest.raises(ParameterError):
            optimize_poses(small_scene.cloud, graph, small_scene.images, small_scene.poses, params)


class TestReportFiles:
    def test_csv_and_log(self, rolled_views, tmp_path):
        cloud, poses, images = rolled_views
        _, _, report = optimize_poses(cloud, _full_graph(3, len(cloud)), images, poses,
                                      OptimizerParams(max_outer=2, pyramid_levels=2))
        report.write_csv(tmp_path / 'trace.csv')
        report.write_log(tmp_path / 'trace.log')
        lines = (tmp_path / 'trace.csv').read_text().splitlines()
        assert lines[0].startswith('level,outer,accepted,global_loss')
        assert len(lines) == 1 + len(report.records)
        assert 'converged=True' in (tmp_path / 'trace.log').read_text()


class TestColorize:
    def test_constant_image_colors_every_visible_point(self):
        cloud = PointCloud([[5.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, -5.0]])
        voxel_map = build_voxel_map(cloud)
        visible = [VisibleSet.from_indices(0, [0, 1], voxel_map)]
        colors, colored = colorize_points(cloud, visible, [constant_panorama(77)], [Pose.identity()])
        np.testing.assert_array_equal(colors[:2], 77)
        np.testing.assert_array_equal(colors[2], [128, 128, 128])
        np.testing.assert_array_equal(colored, [True, True, False])

    def test_ground_truth_poses_reproduce_texture(self, small_scene):
        _, visible = _scene_graph(small_scene, small_scene.poses)
        colored = colorize(small_scene.cloud.with_colors(None), visible, small_scene.images, small_scene.poses)
        expected = small_scene.texture.evaluate(small_scene.clean_positions / small_scene.radius)
        error = np.abs(colored.colors.astype(np.float64) - expected)
        assert error.mean() < 2.0

    def test_robust_mode_ignores_one_bad_view(self):
        cloud = PointCloud([[5.0, 0.0, 0.0]])
        voxel_map = build_voxel_map(cloud)
        visible = [VisibleSet.from_indices(k, [0], voxel_map) for k in range(4)]
        images = [constant_panorama(value) for value in (100, 102, 98, 250)]
        colors, _ = colorize_points(cloud, visible, images, [Pose.identity()] * 4, mode='robust')
        np.testing.assert_array_equal(colors[0], 100)
