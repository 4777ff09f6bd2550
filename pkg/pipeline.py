"""
Pipeline Module
Orchestrates sync, voxelization, visibility, pose optimization and colorization for one run
"""

import logging
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from config import PipelineConfig
from errors import ConfigError, DegenerateSignalError, ParameterError, SpanTooShortError
from geometry import Pose
from imaging import Panorama, discover_images, save_image, write_image_index
from optimizer import ColorState, OptimizationReport, OptimizerParams, colorize_points, optimize_poses
from pointcloud import PointCloud, Trajectory, load_ply, load_trajectory, save_ply, save_trajectory
from sync import KeyframeSet, estimate_offset_from_trajectories, select_keyframes
from utils import StageTimer, WarningCounter, available_threads, log_performance
from visibility import (
    CoVisGraph,
    VisibleSet,
    build_covis_graph,
    compute_visible_sets,
    naive_covisibility,
    write_visible_sets,
)
from voxel import VoxelMap, VoxelParams, build_voxel_map

logger = logging.getLogger(__name__)

VERSION = '0.1.0'
VERSIONED_PACKAGES = ('numpy', 'scipy', 'opencv-python', 'plyfile', 'python-dotenv')


@dataclass
class Dataset:
    cloud: PointCloud
    frames: List[Tuple[int, float, Path]]
    lio: Trajectory
    vo_keyframes: List[Tuple[int, float]]
    vo_trajectory: Optional[Trajectory] = None


@dataclass
class Prepared:
    voxel_map: VoxelMap
    visible_sets: List[VisibleSet]
    covis: CoVisGraph


@dataclass
class SceneResult:
    poses: List[Pose]
    colors: ColorState
    report: OptimizationReport
    prepared: Prepared


@dataclass
class RunResult:
    keyframes: KeyframeSet
    time_offset: float
    poses: List[Pose]
    report: OptimizationReport
    uncolored: int = 0
    outputs: List[Path] = field(default_factory=list)


def _required(paths, name):
    value = getattr(paths, name)
    if not value:
        raise ConfigError(f"paths.{name} is not set (set it or paths.dataset)")
    return Path(value)


def load_dataset(config: PipelineConfig) -> Dataset:
    """Read cloud, image list, LIO trajectory and VO keyframes named by the configuration"""
    paths = config.resolve_paths()
    cloud = load_ply(_required(paths, 'cloud'))
    images = discover_images(_required(paths, 'images'))
    if not images:
        raise FileNotFoundError(f"No images found in {paths.images}")
    frames = [(frame_id, timestamp, image_path) for frame_id, (timestamp, image_path) in enumerate(images)]
    lio = load_trajectory(_required(paths, 'lio_trajectory'))
    vo = load_trajectory(_required(paths, 'vo_keyframes'))
    vo_keyframes = [(k, float(t)) for k, t in enumerate(vo.timestamps)]
    logger.info(f"Dataset: {len(cloud)} points, {len(frames)} frames, {len(lio)} LIO poses, "
                f"{len(vo_keyframes)} VO keyframes")
    return Dataset(cloud, frames, lio, vo_keyframes, vo)


def write_dataset(scene, directory, lio_poses: Optional[Sequence[Pose]] = None, manifest_lines=()):
    """Write a synthetic scene in the dataset layout.

    The LIO trajectory holds ``lio_poses`` (world-to-camera, e.g. perturbed)
    inverted to camera-to-world; VO keyframes carry timestamps only.
    """
    directory = Path(directory)
    (directory / 'images').mkdir(parents=True, exist_ok=True)
    timestamps = [image.timestamp for image in scene.images]

    save_ply(scene.cloud, directory / 'cloud.ply')
    entries = []
    for image in scene.images:
        name = f"{image.timestamp:.6f}.png"
        save_image(image, directory / 'images' / name)
        entries.append((image.timestamp, name))
    write_image_index(entries, directory / 'images' / 'index.txt')

    save_trajectory(Trajectory.from_extrinsics(timestamps, scene.poses), directory / 'ground_truth.txt',
                    header="ground-truth camera poses, camera-to-world")
    lio_poses = scene.poses if lio_poses is None else lio_poses
    save_trajectory(Trajectory.from_extrinsics(timestamps, lio_poses), directory / 'lio_trajectory.txt',
                    header="device poses, device-to-world")
    save_trajectory(Trajectory(timestamps, [Pose.identity()] * len(timestamps)),
                    directory / 'vo_keyframes.txt', header="VO keyframe timestamps")
    with open(directory / 'manifest.txt', 'w') as f:
        for line in manifest_lines:
            f.write(line + '\n')
    logger.info(f"Wrote dataset with {len(scene.images)} panoramas to {directory}")


def package_versions() -> List[str]:
    lines = [f"panocolor {VERSION}"]
    for name in VERSIONED_PACKAGES:
        try:
            lines.append(f"{name} {metadata.version(name)}")
        except metadata.PackageNotFoundError:
            lines.append(f"{name} unknown")
    return lines


class ColorizationPipeline:
    """Runs every stage with one configuration and records stage timings"""

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config or PipelineConfig()
        self.timer = StageTimer()
        self.threads = self.config.run.threads or available_threads()

    @property
    def voxel_params(self) -> VoxelParams:
        v = self.config.voxel
        return VoxelParams(v.root_size, v.min_voxel_size, v.plane_ratio_max, v.min_points)

    @property
    def optimizer_params(self) -> OptimizerParams:
        o = self.config.optimizer
        return OptimizerParams(
            max_outer=o.max_outer, max_inner=o.max_inner, initial_step=o.initial_step,
            step_growth=o.step_growth, max_backtracks=o.max_backtracks, rel_tol=o.rel_tol,
            mode=o.mode, trim_sigma=o.trim_sigma, pyramid_levels=o.pyramid_levels,
            channel=o.channel, norm=o.norm, threads=self.threads)

    @property
    def extrinsic(self) -> Pose:
        e = self.config.sync.extrinsic
        return Pose(e[3:7], e[0:3])

    @log_performance('sync')
    def select(self, dataset: Dataset) -> Tuple[KeyframeSet, float]:
        """Clock offset and the sharpest frame around each VO keyframe"""
        sync = self.config.sync
        time_offset = sync.time_offset
        if sync.estimate_offset and dataset.vo_trajectory is not None:
            try:
                time_offset = estimate_offset_from_trajectories(
                    dataset.vo_trajectory, dataset.lio, sync.dt, sync.max_offset)
            except (DegenerateSignalError, SpanTooShortError, ParameterError) as e:
                logger.warning(f"Clock offset estimation failed ({e}); using sync.time_offset = {time_offset}")
        keyframes = select_keyframes(dataset.vo_keyframes, dataset.frames, dataset.lio, time_offset,
                                     (sync.window_minus, sync.window_plus), self.extrinsic, self.threads,
                                     self.config.run.zenith_up)
        if len(keyframes) < 2:
            raise ParameterError(f"Only {len(keyframes)} keyframe(s) selected; at least 2 are needed")
        return keyframes, time_offset

    @log_performance('voxelize')
    def build_map(self, cloud: PointCloud) -> VoxelMap:
        return build_voxel_map(cloud, self.voxel_params)

    @log_performance('visibility')
    def visible_sets(self, cloud: PointCloud, voxel_map: VoxelMap, frame_ids: Sequence[int],
                     poses: Sequence[Pose]) -> List[VisibleSet]:
        visibility = self.config.visibility
        viewpoints = [(frame_id, pose.center) for frame_id, pose in zip(frame_ids, poses)]
        return compute_visible_sets(cloud, voxel_map, viewpoints, visibility.gamma,
                                    visibility.max_range, self.threads)

    def prepare(self, cloud: PointCloud, frame_ids: Sequence[int], poses: Sequence[Pose],
                method: Optional[str] = None) -> Prepared:
        """Voxel map, per-frame hidden point removal and the co-visibility structure"""
        voxel_map = self.build_map(cloud)
        visible_sets = self.visible_sets(cloud, voxel_map, frame_ids, poses)
        method = method or self.config.covis.method
        if method == 'naive':
            covis = naive_covisibility(visible_sets)
        else:
            covis = build_covis_graph(visible_sets, voxel_map, self.config.covis.threshold_fraction)
        return Prepared(voxel_map, visible_sets, covis)

    @log_performance('optimize')
    def optimize(self, cloud, covis: CoVisGraph, images: Sequence[Panorama], poses: Sequence[Pose]):
        return optimize_poses(cloud, covis, images, poses, self.optimizer_params)

    @log_performance('colorize')
    def colorize(self, cloud: PointCloud, visible_sets, images, poses) -> Tuple[PointCloud, int]:
        c = self.config.colorize
        colors, colored = colorize_points(cloud, visible_sets, images, poses, c.mode, c.trim_sigma, c.sentinel)
        uncolored = int((~colored).sum())
        if uncolored:
            logger.info(f"{uncolored} of {len(cloud)} points are visible in no keyframe")
        return cloud.with_colors(colors), uncolored

    def run_scene(self, scene, initial_poses: Sequence[Pose], method: Optional[str] = None) -> SceneResult:
        """Optimize a synthetic scene's poses starting from ``initial_poses``"""
        try:
            frame_ids = list(range(len(scene.images)))
            prepared = self.prepare(scene.cloud, frame_ids, initial_poses, method)
            poses, colors, report = self.optimize(scene.cloud, prepared.covis, scene.images, initial_poses)
            return SceneResult(poses, colors, report, prepared)
        except Exception as e:
            logger.error(f"Scene optimization failed: {str(e)}")
            raise

    def run(self, dataset: Dataset, output_dir, colorize=True) -> RunResult:
        """Full run over a dataset; writes poses, report, manifest and (optionally) colored clouds"""
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        ply_format = self.config.run.ply_format
        outputs = []

        with WarningCounter() as warnings:
            try:
                keyframes, time_offset = self.select(dataset)
                frame_ids = keyframes.frame_ids
                images = [k.image for k in keyframes]
                coarse = keyframes.poses
                timestamps = [k.timestamp for k in keyframes]

                prepared = self.prepare(dataset.cloud, frame_ids, coarse)
                if self.config.visibility.dump:
                    write_visible_sets(prepared.visible_sets, output_dir / 'visible_sets.txt')
                    outputs.append(output_dir / 'visible_sets.txt')

                uncolored = 0
                if colorize:
                    initial, _ = self.colorize(dataset.cloud, prepared.visible_sets, images, coarse)
                    save_ply(initial, output_dir / 'colored_initial.ply', ply_format)
                    outputs.append(output_dir / 'colored_initial.ply')

                poses, _, report = self.optimize(dataset.cloud, prepared.covis, images, coarse)

                if colorize:
                    colored, uncolored = self.colorize(dataset.cloud, prepared.visible_sets, images, poses)
                    save_ply(colored, output_dir / 'colored.ply', ply_format)
                    outputs.append(output_dir / 'colored.ply')

                save_trajectory(Trajectory.from_extrinsics(timestamps, poses), output_dir / 'optimized_poses.txt',
                                header="optimized camera poses, camera-to-world")
                report.write_csv(output_dir / 'report.csv')
                report.write_log(output_dir / 'report.log')
                outputs += [output_dir / 'optimized_poses.txt', output_dir / 'report.csv',
                            output_dir / 'report.log']
            except Exception as e:
                logger.error(f"Pipeline run failed: {str(e)}")
                raise

        result = RunResult(keyframes, time_offset, poses, report, uncolored, outputs)
        summary = [
            f"time_offset = {time_offset!r}",
            f"keyframes = {len(keyframes)} (skipped {keyframes.skipped})",
            f"frozen_frames = {report.frozen}",
            f"final_loss = {report.trace(0)[-1]!r}",
            f"uncolored_points = {uncolored}",
            f"warnings = {warnings.count}",
        ]
        self.write_manifest(output_dir / 'manifest.txt', summary)
        result.outputs.append(output_dir / 'manifest.txt')
        return result

    def write_manifest(self, path, summary_lines=()):
        """The resolved configuration, readable by --config, with run facts as comments"""
        lines = [f"# {line}" for line in package_versions()]
        lines += [f"# {line}" for line in summary_lines]
        lines += [f"# timing {line}" for line in self.timer.lines()]
        lines += self.config.to_lines()
        with open(path, 'w') as f:
            f.write('\n'.join(lines) + '\n')
        logger.info(f"Wrote run manifest to {path}")
