"""
Sync Module
Camera/LiDAR time offset from rotation-rate cross-correlation and blur-based keyframe selection
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from errors import DegenerateSignalError, OutOfRangeError, ParameterError, SpanTooShortError
from geometry import Pose
from imaging import Panorama, blurriness, load_image
from pointcloud import Trajectory
from utils import parallel_map

logger = logging.getLogger(__name__)

DEFAULT_DT = 0.01
DEFAULT_MAX_OFFSET = 2.0
DEFAULT_WINDOW = (-0.2, 0.2)
MIN_OVERLAP = 8


@dataclass(frozen=True, eq=False)
class MotionSignal:
    """Uniformly sampled rotation-rate magnitude (rad/s) starting at ``t0``"""

    t0: float
    dt: float
    values: np.ndarray

    def __post_init__(self):
        if self.dt <= 0:
            raise ParameterError(f"Signal step must be positive, got {self.dt}")
        values = np.asarray(self.values, dtype=np.float64).reshape(-1).copy()
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 't0', float(self.t0))
        object.__setattr__(self, 'dt', float(self.dt))

    def __len__(self):
        return len(self.values)

    @property
    def timestamps(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.values))

    @property
    def span(self):
        return self.dt * max(len(self.values) - 1, 0)


def motion_signal_from_trajectory(trajectory: Trajectory, dt=DEFAULT_DT) -> MotionSignal:
    """Resample at step ``dt``; each value is the angle between consecutive rotations over dt"""
    if dt <= 0:
        raise ParameterError(f"Resampling step must be positive, got {dt}")
    if len(trajectory) < 2 or trajectory.span < 2 * dt:
        raise SpanTooShortError(
            f"Trajectory span {trajectory.span:.3f}s is shorter than twice the step {dt}s")

    start = float(trajectory.timestamps[0])
    count = int(math.floor(trajectory.span / dt + 1e-9)) + 1
    times = np.minimum(start + dt * np.arange(count), trajectory.timestamps[-1])
    rotations = Rotation.from_quat(np.array([pose.quat for pose in trajectory.poses]))
    resampled = Slerp(trajectory.timestamps, rotations)(times)
    angles = (resampled[:-1].inv() * resampled[1:]).magnitude()
    # each value describes the interval between two samples
    return MotionSignal(start + dt / 2.0, dt, angles / dt)


def _pearson(x, y):
    x = x - x.mean()
    y = y - y.mean()
    denominator = math.sqrt(float(x @ x) * float(y @ y))
    if denominator == 0.0:
        return -np.inf
    return float(x @ y) / denominator


def _check_variance(signal: MotionSignal, name):
    if len(signal) < 2 or np.ptp(signal.values) == 0.0:
        raise DegenerateSignalError(f"{name} motion signal has zero variance; correlation is undefined")


def estimate_time_offset(a: MotionSignal, b: MotionSignal, max_offset=DEFAULT_MAX_OFFSET) -> float:
    """Offset dt with ``a_time + dt = b_time`` maximizing normalized cross-correlation"""
    if abs(a.dt - b.dt) > 1e-9:
        raise ParameterError(f"Signals must share a step, got {a.dt} and {b.dt}")
    shorter_span = min(a.span, b.span)
    if max_offset <= 0 or max_offset > shorter_span / 2.0 + 1e-9:
        raise ParameterError(
            f"max_offset {max_offset}s must lie in (0, {shorter_span / 2.0:.3f}] (half the shorter span)")
    _check_variance(a, 'First')
    _check_variance(b, 'Second')

    dt = a.dt
    base = b.t0 - a.t0
    lags = np.arange(int(math.ceil((-max_offset - base) / dt - 1e-9)),
                     int(math.floor((max_offset - base) / dt + 1e-9)) + 1)
    if len(lags) == 0:
        raise ParameterError(f"No lag within +/-{max_offset}s for signals starting {base:.3f}s apart")

    correlations = np.full(len(lags), -np.inf)
    for n, lag in enumerate(lags):
        # a[i] pairs with b[i + lag]
        first = max(0, -lag)
        last = min(len(a), len(b) - lag)
        if last - first < MIN_OVERLAP:
            continue
        correlations[n] = _pearson(a.values[first:last], b.values[first + lag:last + lag])
    if not np.any(np.isfinite(correlations)):
        raise DegenerateSignalError("Signals have no overlapping window with non-zero variance")

    peak = int(np.argmax(correlations))
    shift = 0.0
    if 0 < peak < len(lags) - 1 and np.all(np.isfinite(correlations[peak - 1:peak + 2])):
        left, centre, right = correlations[peak - 1:peak + 2]
        curvature = left - 2.0 * centre + right
        if curvature < 0.0:
            shift = float(np.clip(0.5 * (left - right) / curvature, -0.5, 0.5))

    offset = base + (lags[peak] + shift) * dt
    logger.info(f"Estimated time offset {offset:+.4f}s (peak correlation {correlations[peak]:.3f})")
    return float(offset)


def estimate_offset_from_trajectories(camera: Trajectory, lidar: Trajectory, dt=DEFAULT_DT,
                                      max_offset=DEFAULT_MAX_OFFSET) -> float:
    """Camera clock + offset = LiDAR clock, from the two trajectories' rotation rates"""
    camera_signal = motion_signal_from_trajectory(camera, dt)
    lidar_signal = motion_signal_from_trajectory(lidar, dt)
    limit = min(camera_signal.span, lidar_signal.span) / 2.0
    if max_offset > limit:
        logger.warning(f"max_offset {max_offset}s exceeds half the shorter span, clamping to {limit:.3f}s")
        max_offset = limit
    return estimate_time_offset(camera_signal, lidar_signal, max_offset)


@dataclass(frozen=True, eq=False)
class Keyframe:
    frame_id: int
    timestamp: float
    blur: float
    pose: Pose            # coarse world-to-camera extrinsic
    image: Panorama


@dataclass(frozen=True)
class KeyframeSet:
    keyframes: Tuple[Keyframe, ...]
    skipped: int = 0

    def __len__(self):
        return len(self.keyframes)

    def __iter__(self):
        return iter(self.keyframes)

    def __getitem__(self, item):
        return self.keyframes[item]

    @property
    def frame_ids(self) -> List[int]:
        return [k.frame_id for k in self.keyframes]

    @property
    def poses(self) -> List[Pose]:
        return [k.pose for k in self.keyframes]


FrameSource = Union[Panorama, str, Path]


def _as_panorama(source: FrameSource, timestamp, zenith_up=False) -> Panorama:
    if isinstance(source, Panorama):
        return source
    return load_image(source, timestamp, zenith_up)


def coarse_pose(trajectory: Trajectory, timestamp, time_offset=0.0, extrinsic: Optional[Pose] = None) -> Pose:
    """World-to-camera pose from the device trajectory at the offset-corrected time"""
    device_to_world = trajectory.interpolate(timestamp + time_offset)
    world_to_device = device_to_world.inverse()
    return world_to_device if extrinsic is None else extrinsic.compose(world_to_device)


def select_keyframes(vo_keyframes: Sequence[Tuple[int, float]],
                     all_frames: Sequence[Tuple[int, float, FrameSource]],
                     trajectory: Trajectory, time_offset=0.0, window=DEFAULT_WINDOW,
                     extrinsic: Optional[Pose] = None, threads=1, zenith_up=False) -> KeyframeSet:
    """Sharpest frame around every VO keyframe, deduplicated, each with its coarse pose"""
    t_minus, t_plus = window
    if not t_minus <= 0.0 <= t_plus:
        raise ParameterError(f"Window ({t_minus}, {t_plus}) must straddle zero")
    frame_times = np.array([float(t) for _, t, _ in all_frames])
    if np.any(np.diff(frame_times) < 0):
        raise ParameterError("Frames must be sorted by timestamp")

    windows = []
    skipped = 0
    for vo_id, vo_time in vo_keyframes:
        lo = int(np.searchsorted(frame_times, vo_time + t_minus, side='left'))
        hi = int(np.searchsorted(frame_times, vo_time + t_plus, side='right'))
        if hi <= lo:
            logger.warning(f"No frame within [{t_minus:+.3f}, {t_plus:+.3f}]s of VO keyframe {vo_id} "
                           f"at {vo_time:.3f}s; skipping it")
            skipped += 1
            continue
        windows.append(range(lo, hi))

    needed = sorted({index for indices in windows for index in indices})

    def score(index):
        frame_id, timestamp, source = all_frames[index]
        image = _as_panorama(source, timestamp, zenith_up)
        return blurriness(image), (image if isinstance(source, Panorama) else None)

    scored = dict(zip(needed, parallel_map(score, needed, threads)))

    chosen = []
    for indices in windows:
        best = min(indices, key=lambda index: (scored[index][0], frame_times[index]))
        if best not in chosen:
            chosen.append(best)

    keyframes = []
    for index in sorted(chosen):
        frame_id, timestamp, source = all_frames[index]
        try:
            pose = coarse_pose(trajectory, timestamp, time_offset, extrinsic)
        except OutOfRangeError as e:
            logger.warning(f"Frame {frame_id}: {e}; skipping it")
            skipped += 1
            continue
        image = scored[index][1] or _as_panorama(source, timestamp, zenith_up)
        keyframes.append(Keyframe(int(frame_id), float(timestamp), scored[index][0], pose, image))

    logger.info(f"Selected {len(keyframes)} keyframes from {len(all_frames)} frames "
                f"({len(vo_keyframes)} VO keyframes, {skipped} skipped)")
    return KeyframeSet(tuple(keyframes), skipped)
