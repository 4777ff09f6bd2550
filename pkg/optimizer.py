"""
Optimizer Module
Alternating photometric refinement of keyframe poses and point colors over the co-visible points
"""

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from errors import NoCovisibilityError, ParameterError
from geometry import Pose, Twist, exp_update, project_points, projection_jacobian
from imaging import GRAY_WEIGHTS, Panorama, build_pyramid, sample_plane, sample_plane_with_gradient
from pointcloud import PointCloud
from utils import parallel_map
from visibility import CoVisGraph, VisibleSet

logger = logging.getLogger(__name__)

MODES = ('mean', 'robust')
CHANNELS = ('gray', 'rgb')
NORMS = ('squared', 'abs')
SENTINEL_COLOR = (128, 128, 128)


@dataclass(frozen=True)
class OptimizerParams:
    max_outer: int = 50
    max_inner: int = 10
    initial_step: float = 1e-3
    step_growth: float = 2.0
    max_backtracks: int = 20
    rel_tol: float = 1e-4
    mode: str = 'robust'
    trim_sigma: float = 3.0
    pyramid_levels: int = 3
    channel: str = 'gray'
    norm: str = 'squared'
    threads: int = 1

    def validate(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.channel not in CHANNELS:
            raise ParameterError(f"channel must be one of {CHANNELS}, got '{self.channel}'")
        if self.norm not in NORMS:
            raise ParameterError(f"norm must be one of {NORMS}, got '{self.norm}'")
        if self.max_outer < 1 or self.max_inner < 1 or self.pyramid_levels < 1:
            raise ParameterError("max_outer, max_inner and pyramid_levels must be at least 1")
        if self.initial_step <= 0 or self.step_growth < 1.0 or self.max_backtracks < 0:
            raise ParameterError("initial_step must be positive, step_growth >= 1, max_backtracks >= 0")
        if self.rel_tol < 0 or self.trim_sigma <= 0:
            raise ParameterError("rel_tol must be >= 0 and trim_sigma > 0")


def _positions(cloud) -> np.ndarray:
    return cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


# Color state

@dataclass(frozen=True, eq=False)
class ColorState:
    """Current color per tracked point with its candidate observations"""

    point_index: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    channel: str = 'gray'
    candidates: Optional[np.ndarray] = None
    candidate_frames: Optional[np.ndarray] = None
    kept: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.point_index)

    def rows(self, indices) -> Tuple[np.ndarray, np.ndarray]:
        """Row of each global point index and whether it is tracked and colored"""
        indices = np.asarray(indices, dtype=np.int64)
        rows = np.searchsorted(self.point_index, indices)
        rows = np.minimum(rows, max(len(self.point_index) - 1, 0))
        if len(self.point_index) == 0:
            return rows, np.zeros(len(indices), dtype=bool)
        found = (self.point_index[rows] == indices) & (self.counts[rows] > 0)
        return rows, found

    @property
    def gray(self) -> np.ndarray:
        if self.channel == 'gray':
            return self.values[:, 0]
        return self.values @ GRAY_WEIGHTS / 255.0

    @property
    def uncolored(self) -> np.ndarray:
        return self.point_index[self.counts == 0]

    def with_values(self, rows, values) -> 'ColorState':
        """Copy with some rows replaced; used to test loss optimality"""
        updated = self.values.copy()
        updated[rows] = values
        return ColorState(self.point_index, updated, self.counts, self.channel)


def combine_candidates(rows, frames, samples, n_rows, mode='mean', trim_sigma=3.0, channel='gray'):
    """Per-row mean (or median/MAD trimmed mean) of candidate samples.

    Returns values (n_rows, C), counts, and in robust mode the NaN-padded
    candidate matrix, its frame ids and the kept mask.
    """
    rows = np.asarray(rows, dtype=np.int64)
    samples = np.asarray(samples, dtype=np.float64).reshape(len(rows), -1)
    n_channels = samples.shape[1]
    counts = np.bincount(rows, minlength=n_rows).astype(np.int64)
    values = np.zeros((n_rows, n_channels))

    if mode == 'mean':
        nonzero = counts > 0
        for c in range(n_channels):
            sums = np.bincount(rows, weights=samples[:, c], minlength=n_rows)
            values[nonzero, c] = sums[nonzero] / counts[nonzero]
        return values, counts, None, None, None
    if mode != 'robust':
        raise ParameterError(f"mode must be one of {MODES}, got '{mode}'")

    # pad ragged candidate groups into an (n_rows, k_max) matrix
    order = np.argsort(rows, kind='stable')
    sorted_rows = rows[order]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slots = np.arange(len(rows)) - starts[sorted_rows]
    k_max = int(counts.max()) if len(rows) else 0
    candidates = np.full((n_rows, k_max, n_channels), np.nan)
    candidate_frames = np.full((n_rows, k_max), -1, dtype=np.int64)
    candidates[sorted_rows, slots] = samples[order]
    candidate_frames[sorted_rows, slots] = np.asarray(frames, dtype=np.int64)[order]

    kept = np.zeros((n_rows, k_max), dtype=bool)
    observed = counts > 0
    if np.any(observed):
        obs = candidates[observed]
        intensity = obs[:, :, 0] if channel == 'gray' or n_channels == 1 else obs @ GRAY_WEIGHTS
        median = np.nanmedian(intensity, axis=1)
        deviation = np.abs(intensity - median[:, None])
        mad = np.nanmedian(deviation, axis=1)
        keep = deviation <= trim_sigma * mad[:, None]
        empty = ~keep.any(axis=1)
        if np.any(empty):
            closest = np.nanargmin(deviation[empty], axis=1)
            keep[np.flatnonzero(empty), closest] = True
        kept[observed] = keep
        masked = np.where(keep[:, :, None], obs, 0.0)
        values[observed] = masked.sum(axis=1) / keep.sum(axis=1)[:, None]
    return values, counts, candidates, candidate_frames, kept


def _observe(positions, point_sets: Sequence[np.ndarray], images: Sequence[Panorama],
             poses: Sequence[Pose], channel):
    """Sample every frame at its points; returns global ids, frame slots and samples of in-domain hits"""
    ids, slots, samples = [], [], []
    for slot, (indices, image, pose) in enumerate(zip(point_sets, images, poses)):
        if len(indices) == 0:
            continue
        values, valid, _ = _sample_frame(positions[indices], image, pose, channel)
        ids.append(np.asarray(indices)[valid])
        slots.append(np.full(int(valid.sum()), slot, dtype=np.int64))
        samples.append(values[valid])
    width = 1 if channel == 'gray' else 3
    if not ids:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty((0, width))
    return np.concatenate(ids), np.concatenate(slots), np.concatenate(samples).reshape(-1, width)


def _sample_frame(points, image: Panorama, pose: Pose, channel, gradient=False):
    camera_points = pose.transform(points)
    full_h, full_w = image.full_size
    u, v, valid = project_points(camera_points, full_h, full_w, image.zenith_up)
    lu, lv = image.level_coordinates(u, v)
    plane = image.plane(channel)
    if gradient:
        values, grad_u, grad_v, ok = sample_plane_with_gradient(plane, lu, lv)
        valid = valid & ok
        return values.reshape(len(points), -1), valid, camera_points, grad_u, grad_v
    values, ok = sample_plane(plane, lu, lv)
    return values.reshape(len(points), -1), valid & ok, camera_points


def build_color_state(cloud, point_sets: Sequence[np.ndarray], images, poses, mode='mean',
                      channel='gray', trim_sigma=3.0) -> ColorState:
    positions = _positions(cloud)
    nonempty = [np.asarray(s, dtype=np.int64) for s in point_sets if len(s)]
    point_index = np.unique(np.concatenate(nonempty)) if nonempty else np.empty(0, dtype=np.int64)
    ids, slots, samples = _observe(positions, point_sets, images, poses, channel)
    rows = np.searchsorted(point_index, ids)
    values, counts, candidates, candidate_frames, kept = combine_candidates(
        rows, slots, samples, len(point_index), mode, trim_sigma, channel)
    return ColorState(point_index, values, counts, channel, candidates, candidate_frames, kept)


def update_colors(cloud, covis: CoVisGraph, images: Sequence[Panorama], poses: Sequence[Pose],
                  mode='mean', channel='gray', trim_sigma=3.0) -> ColorState:
    """Closed-form color step over the co-visible points; images and poses follow ``covis.frame_ids``"""
    point_sets = [covis.covisible[frame_id] for frame_id in covis.frame_ids]
    return build_color_state(cloud, point_sets, images, poses, mode, channel, trim_sigma)


# Loss and gradient

def _term_losses(residuals, norm):
    if norm == 'squared':
        return np.einsum('ij,ij->i', residuals, residuals)
    return np.linalg.norm(residuals, axis=1)


def _term_weights(residuals, norm):
    """dLoss/dResidual per term"""
    if norm == 'squared':
        return 2.0 * residuals
    magnitude = np.linalg.norm(residuals, axis=1, keepdims=True)
    return np.divide(residuals, magnitude, out=np.zeros_like(residuals), where=magnitude > 0)


def frame_residuals(cloud, indices, image: Panorama, pose: Pose, colors: ColorState):
    """Sampled value minus current color for the frame's points that land in-domain"""
    positions = _positions(cloud)
    rows, found = colors.rows(indices)
    indices = np.asarray(indices, dtype=np.int64)[found]
    rows = rows[found]
    values, valid, _ = _sample_frame(positions[indices], image, pose, colors.channel)
    return values[valid] - colors.values[rows[valid]], indices[valid]


class FrameLoss(NamedTuple):
    loss: float
    terms: int
    out_of_domain: int


def frame_loss(cloud, indices, image: Panorama, pose: Pose, colors: ColorState, norm='squared') -> FrameLoss:
    positions = _positions(cloud)
    rows, found = colors.rows(indices)
    if not np.any(found):
        return FrameLoss(0.0, 0, 0)
    values, valid, _ = _sample_frame(positions[np.asarray(indices)[found]], image, pose, colors.channel)
    residuals = values[valid] - colors.values[rows[found][valid]]
    return FrameLoss(float(_term_losses(residuals, norm).sum()), int(valid.sum()), int((~valid).sum()))


def frame_loss_and_gradient(cloud, indices, image: Panorama, pose: Pose, colors: ColorState,
                            norm='squared') -> Tuple[float, np.ndarray]:
    """Frame loss and its gradient in left-perturbation twist coordinates (omega, rho)"""
    positions = _positions(cloud)
    rows, found = colors.rows(indices)
    if not np.any(found):
        return 0.0, np.zeros(6)
    points = positions[np.asarray(indices)[found]]
    values, valid, camera_points, grad_u, grad_v = _sample_frame(
        points, image, pose, colors.channel, gradient=True)
    if not np.any(valid):
        return 0.0, np.zeros(6)

    camera_points = camera_points[valid]
    residuals = values[valid] - colors.values[rows[found][valid]]
    weights = _term_weights(residuals, norm)
    n_channels = residuals.shape[1]
    grad_u = grad_u[valid].reshape(-1, n_channels)
    grad_v = grad_v[valid].reshape(-1, n_channels)

    full_h, full_w = image.full_size
    jacobian = projection_jacobian(camera_points, full_h, full_w, image.zenith_up) / image.scale
    d_u = np.einsum('ij,ij->i', weights, grad_u)
    d_v = np.einsum('ij,ij->i', weights, grad_v)
    d_point = d_u[:, None] * jacobian[:, 0, :] + d_v[:, None] * jacobian[:, 1, :]

    # d p_c / d(omega, rho) = [-[p_c]x | I]
    grad_omega = np.cross(camera_points, d_point).sum(axis=0)
    grad_rho = d_point.sum(axis=0)
    loss = float(_term_losses(residuals, norm).sum())
    return loss, np.concatenate([grad_omega, grad_rho])


class LossSummary(NamedTuple):
    total: float
    per_frame: Dict[int, float]
    terms: int
    out_of_domain: int


def loss_summary(cloud, covis: CoVisGraph, images, poses, colors: ColorState, norm='squared') -> LossSummary:
    per_frame, terms, out_of_domain = {}, 0, 0
    for frame_id, image, pose in zip(covis.frame_ids, images, poses):
        result = frame_loss(cloud, covis.covisible[frame_id], image, pose, colors, norm)
        per_frame[frame_id] = result.loss
        terms += result.terms
        out_of_domain += result.out_of_domain
    return LossSummary(float(sum(per_frame.values())), per_frame, terms, out_of_domain)


def global_loss(cloud, covis: CoVisGraph, images, poses, colors: ColorState, norm='squared') -> float:
    """Sum over frames and their co-visible points of the sampling loss"""
    return loss_summary(cloud, covis, images, poses, colors, norm).total


# Pose descent

@dataclass
class FrameStep:
    pose: Pose
    loss: float
    accepted: int = 0
    rejected: int = 0
    step_total: float = 0.0


def descend_frame(cloud, indices, image: Panorama, pose: Pose, colors: ColorState,
                  params: OptimizerParams) -> FrameStep:
    """Backtracking descent on one frame's loss with colors held fixed"""
    positions = _positions(cloud)
    camera_ranges = np.linalg.norm(pose.transform(positions[indices]), axis=1)
    # translation measured in units of the typical range so pixels move alike for both parts
    scale = float(np.median(camera_ranges)) if len(camera_ranges) else 1.0
    scale = max(scale, 1e-3)

    step = params.initial_step
    loss, gradient = frame_loss_and_gradient(positions, indices, image, pose, colors, params.norm)
    result = FrameStep(pose, loss)
    for _ in range(params.max_inner):
        scaled = np.concatenate([gradient[:3], scale * gradient[3:]])
        magnitude = np.linalg.norm(scaled)
        if magnitude == 0.0 or not np.isfinite(magnitude):
            break
        direction = -scaled / magnitude
        direction[3:] *= scale

        accepted = False
        for _ in range(params.max_backtracks + 1):
            candidate = exp_update(result.pose, Twist.from_vector(step * direction))
            trial = frame_loss(positions, indices, image, candidate, colors, params.norm).loss
            if trial < result.loss:
                result.pose, result.loss = candidate, trial
                result.accepted += 1
                result.step_total += step
                step *= params.step_growth
                accepted = True
                break
            result.rejected += 1
            step /= 2.0
        if not accepted:
            break
        loss, gradient = frame_loss_and_gradient(positions, indices, image, result.pose, colors, params.norm)
    return result


# Report

@dataclass
class IterationRecord:
    level: int
    outer: int
    accepted: bool
    global_loss: float
    mean_frame_loss: float
    max_frame_loss: float
    steps_accepted: int
    steps_rejected: int
    mean_step: float
    terms: int
    out_of_domain: int
    seconds: float


CSV_COLUMNS = ('level', 'outer', 'accepted', 'global_loss', 'mean_frame_loss', 'max_frame_loss',
               'steps_accepted', 'steps_rejected', 'mean_step', 'terms', 'out_of_domain', 'seconds')


@dataclass
class OptimizationReport:
    records: List[IterationRecord] = field(default_factory=list)
    poses: List[Pose] = field(default_factory=list)
    frozen: List[int] = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0

    def trace(self, level=None) -> List[float]:
        """Global loss of accepted iterations, optionally for one pyramid level"""
        return [r.global_loss for r in self.records
                if r.accepted and (level is None or r.level == level)]

    def levels(self) -> List[int]:
        return sorted({r.level for r in self.records}, reverse=True)

    def outer_iterations(self, level=0) -> int:
        return sum(1 for r in self.records if r.level == level and r.outer > 0)

    def is_monotone(self) -> bool:
        for level in self.levels():
            trace = self.trace(level)
            if any(b > a for a, b in zip(trace, trace[1:])):
                return False
        return True

    def write_csv(self, path):
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for r in self.records:
                writer.writerow([r.level, r.outer, int(r.accepted), f"{r.global_loss:.10g}",
                                 f"{r.mean_frame_loss:.10g}", f"{r.max_frame_loss:.10g}",
                                 r.steps_accepted, r.steps_rejected, f"{r.mean_step:.6g}",
                                 r.terms, r.out_of_domain, f"{r.seconds:.3f}"])

    def write_log(self, path):
        with open(path, 'w') as f:
            for r in self.records:
                status = 'accepted' if r.accepted else 'rejected'
                f.write(f"level={r.level} iter={r.outer} E={r.global_loss:.8g} "
                        f"E_i(mean={r.mean_frame_loss:.6g}, max={r.max_frame_loss:.6g}) "
                        f"steps={r.steps_accepted}/{r.steps_rejected} {status}\n")
            f.write(f"converged={self.converged} frozen={self.frozen} wall_time={self.wall_time:.3f}s\n")


def _record(level, outer, accepted, summary: LossSummary, steps: Sequence[FrameStep], started):
    frame_losses = list(summary.per_frame.values()) or [0.0]
    n_accepted = sum(s.accepted for s in steps)
    return IterationRecord(
        level=level, outer=outer, accepted=accepted, global_loss=summary.total,
        mean_frame_loss=float(np.mean(frame_losses)), max_frame_loss=float(np.max(frame_losses)),
        steps_accepted=n_accepted, steps_rejected=sum(s.rejected for s in steps),
        mean_step=sum(s.step_total for s in steps) / n_accepted if n_accepted else 0.0,
        terms=summary.terms, out_of_domain=summary.out_of_domain,
        seconds=time.perf_counter() - started)


def _optimize_level(cloud, covis, images, poses, frozen, params, level, report, started):
    colors = update_colors(cloud, covis, images, poses, params.mode, params.channel, params.trim_sigma)
    summary = loss_summary(cloud, covis, images, poses, colors, params.norm)
    report.records.append(_record(level, 0, True, summary, [], started))
    logger.info(f"Level {level}: initial loss {summary.total:.6g} over {summary.terms} terms")

    for outer in range(1, params.max_outer + 1):
        def step_frame(slot):
            frame_id = covis.frame_ids[slot]
            if frame_id in frozen:
                return FrameStep(poses[slot], summary.per_frame.get(frame_id, 0.0))
            return descend_frame(cloud, covis.covisible[frame_id], images[slot], poses[slot], colors, params)

        steps = parallel_map(step_frame, range(len(poses)), params.threads)
        new_poses = [s.pose for s in steps]
        new_colors = update_colors(cloud, covis, images, new_poses, params.mode, params.channel, params.trim_sigma)
        new_summary = loss_summary(cloud, covis, images, new_poses, new_colors, params.norm)

        if new_summary.total > summary.total:
            report.records.append(_record(level, outer, False, new_summary, steps, started))
            logger.info(f"Level {level} iteration {outer}: loss rose to {new_summary.total:.6g}, reverting")
            return poses, colors, False

        decrease = (summary.total - new_summary.total) / max(summary.total, 1e-300)
        poses, colors, summary = new_poses, new_colors, new_summary
        report.records.append(_record(level, outer, True, summary, steps, started))
        logger.debug(f"Level {level} iteration {outer}: loss {summary.total:.8g} "
                     f"(relative decrease {decrease:.2e})")
        if decrease < params.rel_tol:
            logger.info(f"Level {level} converged after {outer} iterations, loss {summary.total:.6g}")
            return poses, colors, True
    logger.info(f"Level {level} stopped at max_outer={params.max_outer}, loss {summary.total:.6g}")
    return poses, colors, False


def optimize_poses(cloud, covis: CoVisGraph, images: Sequence[Panorama], initial_poses: Sequence[Pose],
                   params: OptimizerParams = OptimizerParams()):
    """Alternate the closed-form color step with per-frame pose descent, coarse to fine.

    ``images`` and ``initial_poses`` follow ``covis.frame_ids``. Returns the
    final poses, the color state at full resolution and the report.
    """
    params.validate()
    if len(images) != len(covis.frame_ids) or len(initial_poses) != len(covis.frame_ids):
        raise ParameterError(f"Expected {len(covis.frame_ids)} images and poses, "
                             f"got {len(images)} and {len(initial_poses)}")
    if covis.num_edges == 0:
        raise NoCovisibilityError("Co-visibility graph has no edges; no pose is observable")

    started = time.perf_counter()
    frozen = [frame_id for frame_id in covis.frame_ids if len(covis.covisible[frame_id]) == 0]
    for frame_id in frozen:
        logger.warning(f"Frame {frame_id} has no co-visible points; its pose stays fixed")

    pyramids = [build_pyramid(image, params.pyramid_levels) for image in images]
    n_levels = min(len(p) for p in pyramids)
    if n_levels < params.pyramid_levels:
        logger.warning(f"Images support only {n_levels} pyramid levels of {params.pyramid_levels} requested")

    report = OptimizationReport(frozen=frozen)
    poses = list(initial_poses)
    converged = False
    colors = None
    for level in range(n_levels - 1, -1, -1):
        level_images = [p[level] for p in pyramids]
        poses, colors, converged = _optimize_level(
            cloud, covis, level_images, poses, set(frozen), params, level, report, started)

    report.poses = poses
    report.converged = converged
    report.wall_time = time.perf_counter() - started
    logger.info(f"Pose optimization finished in {report.wall_time:.2f}s, final loss {report.trace(0)[-1]:.6g}")
    return poses, colors, report


# Final colorization

def colorize_points(cloud, visible_sets: Sequence[VisibleSet], images: Sequence[Panorama],
                    poses: Sequence[Pose], mode='mean', trim_sigma=3.0, sentinel=SENTINEL_COLOR):
    """RGB per point from its visible frames; returns uint8 colors and the colored mask"""
    positions = _positions(cloud)
    point_sets = [v.indices for v in visible_sets]
    state = build_color_state(positions, point_sets, images, poses, mode, 'rgb', trim_sigma)
    colors = np.tile(np.asarray(sentinel, dtype=np.uint8), (len(positions), 1))
    colored = np.zeros(len(positions), dtype=bool)
    has = state.counts > 0
    ids = state.point_index[has]
    colors[ids] = np.clip(np.rint(state.values[has]), 0, 255).astype(np.uint8)
    colored[ids] = True
    return colors, colored


def colorize(cloud: PointCloud, visible_sets: Sequence[VisibleSet], images: Sequence[Panorama],
             poses: Sequence[Pose], mode='mean', trim_sigma=3.0, sentinel=SENTINEL_COLOR) -> PointCloud:
    """Colored copy of the cloud; points seen by no frame keep the sentinel color"""
    colors, colored = colorize_points(cloud, visible_sets, images, poses, mode, trim_sigma, sentinel)
    uncolored = int((~colored).sum())
    if uncolored:
        logger.info(f"{uncolored} of {len(cloud)} points are visible in no frame and keep the sentinel color")
    return cloud.with_colors(colors)
