"""
Bench Module
Synthetic textured-sphere scenes, pose perturbation, pose error metrics and the co-visibility ablation
"""

import csv
import logging
import time
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from config import PipelineConfig
from errors import DegenerateTextureError, PanoColorError, ParameterError
from geometry import Pose, unproject
from imaging import Panorama
from pointcloud import PointCloud
from pipeline import ColorizationPipeline
from utils import parallel_map

logger = logging.getLogger(__name__)

MAX_TEXTURE_FREQUENCY = 8.0


class TextureTerm(NamedTuple):
    amplitude: Tuple[float, float, float]   # per RGB channel
    wavevector: Tuple[float, float, float]  # rad per unit of direction
    phase: float


@dataclass(frozen=True)
class TextureSpec:
    """RGB = base + sum of amplitude * sin(wavevector . n + phase) over unit directions n"""

    base: Tuple[float, float, float] = (128.0, 128.0, 128.0)
    terms: Tuple[TextureTerm, ...] = (
        TextureTerm((60.0, 50.0, 40.0), (2.0, 1.0, 0.5), 0.3),
        TextureTerm((35.0, 45.0, 50.0), (-0.5, 2.5, 1.5), 1.1),
        TextureTerm((25.0, 25.0, 30.0), (1.0, -1.5, 2.5), 2.0),
    )
    max_frequency: float = MAX_TEXTURE_FREQUENCY

    def validate(self):
        active = [t for t in self.terms
                  if np.any(np.asarray(t.amplitude) != 0) and np.any(np.asarray(t.wavevector) != 0)]
        if not active:
            raise DegenerateTextureError("Texture is constant; pose optimization would be unobservable")
        for term in self.terms:
            frequency = float(np.linalg.norm(term.wavevector))
            if frequency > self.max_frequency:
                raise DegenerateTextureError(
                    f"Texture frequency {frequency:.2f} exceeds {self.max_frequency}; it must stay smooth")

    def evaluate(self, directions) -> np.ndarray:
        """Float RGB in [0, 255] for (N, 3) unit directions"""
        directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        colors = np.tile(np.asarray(self.base, dtype=np.float64), (len(directions), 1))
        for term in self.terms:
            wave = np.sin(directions @ np.asarray(term.wavevector, dtype=np.float64) + term.phase)
            colors += wave[:, None] * np.asarray(term.amplitude, dtype=np.float64)
        return np.clip(colors, 0.0, 255.0)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    cloud: PointCloud
    clean_positions: np.ndarray
    poses: List[Pose]               # ground-truth world-to-camera
    images: List[Panorama]
    radius: float
    noise_sigma: float
    seed: int
    texture: TextureSpec


class PoseError(NamedTuple):
    rotation_deg: float
    translation_cm: float


def _uniform_directions(rng, count):
    directions = rng.normal(size=(count, 3))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def render_sphere_view(pose: Pose, radius, texture: TextureSpec, image_size, zenith_up=False) -> np.ndarray:
    """Panorama of the textured sphere seen from inside.

    Each pixel-centre ray is cast onto the noise-free sphere and the pixel
    takes the texture at the hit point.
    """
    height, width = image_size
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64),
                             indexing='ij')
    camera_dirs = unproject(rows.ravel(), cols.ravel(), height, width, zenith_up)
    camera_to_world = pose.inverse()
    centre = camera_to_world.translation
    world_dirs = camera_dirs @ camera_to_world.rotation_matrix.T

    # ray/sphere intersection from inside: the positive root
    along = world_dirs @ centre
    reach = -along + np.sqrt(along ** 2 - (centre @ centre - radius ** 2))
    colors = texture.evaluate(centre / radius + (reach / radius)[:, None] * world_dirs)
    return np.clip(np.rint(colors.reshape(height, width, 3)), 0, 255).astype(np.uint8)


def generate_sphere_scene(radius=10.0, n_points=50000, n_views=8, texture: Optional[TextureSpec] = None,
                          noise_sigma=0.0, seed=0, image_size=(512, 1024), view_spread=0.2,
                          time_step=1.0, zenith_up=False) -> SyntheticScene:
    """Textured sphere sampled as a point cloud plus panoramas rendered from views near its centre"""
    if radius <= 0:
        raise ParameterError(f"radius must be positive, got {radius}")
    if n_points < 100:
        raise ParameterError(f"n_points must be at least 100, got {n_points}")
    if n_views < 2:
        raise ParameterError(f"n_views must be at least 2, got {n_views}")
    if noise_sigma < 0 or not 0.0 <= view_spread < 1.0:
        raise ParameterError("noise_sigma must be >= 0 and view_spread in [0, 1)")
    texture = texture or TextureSpec()
    texture.validate()

    rng = np.random.default_rng(seed)
    directions = _uniform_directions(rng, n_points)
    clean = radius * directions
    colors = np.clip(np.rint(texture.evaluate(directions)), 0, 255).astype(np.uint8)
    noisy = clean + (noise_sigma * rng.normal(size=n_points))[:, None] * directions

    poses, images = [], []
    for k in range(n_views):
        offset = _uniform_directions(rng, 1)[0] * radius * view_spread * rng.uniform() ** (1.0 / 3.0)
        orientation = Rotation.random(random_state=rng)
        camera_to_world = Pose.from_rotation(orientation, offset)
        pose = camera_to_world.inverse()
        pixels = render_sphere_view(pose, radius, texture, image_size, zenith_up)
        poses.append(pose)
        images.append(Panorama(pixels, timestamp=k * time_step, zenith_up=zenith_up))

    clean.setflags(write=False)
    logger.info(f"Generated sphere scene: {n_points} points, {n_views} views, "
                f"{image_size[0]} x {image_size[1]} panoramas, noise {noise_sigma} m, seed {seed}")
    return SyntheticScene(PointCloud(noisy, colors), clean, poses, images, float(radius), float(noise_sigma),
                          int(seed), texture)


def scene_from_config(config: PipelineConfig, seed=None, noise_sigma=None) -> SyntheticScene:
    b = config.bench
    return generate_sphere_scene(
        radius=b.radius, n_points=b.n_points, n_views=b.n_views,
        noise_sigma=b.noise_sigma if noise_sigma is None else noise_sigma,
        seed=config.run.seed if seed is None else seed,
        image_size=(b.image_height, b.image_width), view_spread=b.view_spread,
        zenith_up=config.run.zenith_up)


def perturb_poses(poses: Sequence[Pose], rot_deg, trans_cm, seed=0) -> List[Pose]:
    """Rotate each pose by exactly ``rot_deg`` about a random axis and shift it by exactly ``trans_cm``"""
    if rot_deg < 0 or trans_cm < 0:
        raise ParameterError(f"Perturbation magnitudes must be >= 0, got {rot_deg} deg and {trans_cm} cm")
    rng = np.random.default_rng(seed)
    perturbed = []
    for pose in poses:
        axis = _uniform_directions(rng, 1)[0]
        shift = _uniform_directions(rng, 1)[0] * trans_cm / 100.0
        delta = Rotation.from_rotvec(axis * np.deg2rad(rot_deg))
        perturbed.append(Pose.from_rotation(delta * pose.rotation, pose.translation + shift))
    return perturbed


def pose_error(a: Pose, b: Pose) -> PoseError:
    """Geodesic rotation angle (deg) and translation distance (cm)"""
    rotation = (a.rotation * b.rotation.inv()).magnitude()
    return PoseError(float(np.rad2deg(rotation)), float(np.linalg.norm(a.translation - b.translation) * 100.0))


def mean_pose_error(estimates: Sequence[Pose], references: Sequence[Pose]) -> PoseError:
    return summarize_errors([pose_error(a, b) for a, b in zip(estimates, references)])


def summarize_errors(errors: Sequence[PoseError]) -> PoseError:
    if not errors:
        raise ParameterError("No pose errors to summarize")
    return PoseError(float(np.mean([e.rotation_deg for e in errors])),
                     float(np.mean([e.translation_cm for e in errors])))


def align_to_reference(estimates: Sequence[Pose], references: Sequence[Pose]) -> List[Pose]:
    """Rotate every estimate about the world origin by the common R minimizing sum ||R_i R - R_ref_i||.

    Only a rotation about the sphere centre leaves the photometric loss
    unchanged, so translations are compared as estimated.
    """
    if len(estimates) != len(references) or not estimates:
        raise ParameterError(f"Cannot align {len(estimates)} estimates to {len(references)} references")
    correlation = sum(est.rotation_matrix.T @ ref.rotation_matrix for est, ref in zip(estimates, references))
    u, _, vt = np.linalg.svd(correlation)
    fix = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    common = Pose.from_rotation(Rotation.from_matrix(u @ fix @ vt))
    return [est.compose(common) for est in estimates]


def evaluate_poses(estimates, references, align=True) -> List[PoseError]:
    if align:
        estimates = align_to_reference(estimates, references)
    return [pose_error(a, b) for a, b in zip(estimates, references)]


# Ablation

ABLATION_COLUMNS = (
    'sigma_m',
    'graph_rot_mean_deg', 'graph_rot_std_deg', 'graph_trans_mean_cm', 'graph_trans_std_cm', 'graph_runtime_s',
    'naive_rot_mean_deg', 'naive_rot_std_deg', 'naive_trans_mean_cm', 'naive_trans_std_cm', 'naive_runtime_s',
    'failures',
)
VARIANTS = ('graph', 'naive')


@dataclass
class AblationRow:
    sigma: float
    rotation: dict            # variant -> per-seed mean rotation errors (deg)
    translation: dict         # variant -> per-seed mean translation errors (cm)
    runtime: dict             # variant -> total seconds
    failures: int = 0

    def as_csv_row(self):
        row = [f"{self.sigma:.4f}"]
        for variant in VARIANTS:
            rot = self.rotation.get(variant) or [float('nan')]
            trans = self.translation.get(variant) or [float('nan')]
            row += [f"{np.mean(rot):.6f}", f"{np.std(rot):.6f}", f"{np.mean(trans):.6f}",
                    f"{np.std(trans):.6f}", f"{self.runtime.get(variant, 0.0):.3f}"]
        return row + [self.failures]


def _ablation_cell(config: PipelineConfig, sigma, seed):
    """Mean errors of both co-visibility variants on one scene; failures are reported, not raised"""
    b = config.bench
    scene = scene_from_config(config, seed=seed, noise_sigma=sigma)
    initial = perturb_poses(scene.poses, b.rot_deg, b.trans_cm, seed=seed + 1)
    results = {}
    for variant in VARIANTS:
        started = time.perf_counter()
        try:
            outcome = ColorizationPipeline(config).run_scene(scene, initial, method=variant)
            errors = evaluate_poses(outcome.poses, scene.poses, b.align)
            results[variant] = (float(np.mean([e.rotation_deg for e in errors])),
                                float(np.mean([e.translation_cm for e in errors])),
                                time.perf_counter() - started)
        except PanoColorError as e:
            logger.warning(f"Ablation cell sigma={sigma} seed={seed} variant={variant} failed: {e}")
            results[variant] = None
    return sigma, results


def run_ablation(noise_sigmas: Sequence[float], config: Optional[PipelineConfig] = None, seed=0,
                 threads=1) -> List[AblationRow]:
    """Pose errors with and without the co-visibility graph, averaged over seeds per noise level"""
    config = config or PipelineConfig()
    if threads > 1:
        # cells run in parallel; each pipeline keeps to one worker
        config = config.with_overrides(run__threads=1)
    cells = [(sigma, seed + k) for sigma in noise_sigmas for k in range(config.bench.seeds)]
    outcomes = parallel_map(lambda cell: _ablation_cell(config, *cell), cells, threads)

    rows = []
    for sigma in noise_sigmas:
        row = AblationRow(float(sigma), {v: [] for v in VARIANTS}, {v: [] for v in VARIANTS},
                          {v: 0.0 for v in VARIANTS})
        for cell_sigma, results in outcomes:
            if cell_sigma != sigma:
                continue
            for variant, result in results.items():
                if result is None:
                    row.failures += 1
                    continue
                row.rotation[variant].append(result[0])
                row.translation[variant].append(result[1])
                row.runtime[variant] += result[2]
        logger.info(f"sigma={sigma}: graph {np.mean(row.rotation['graph'] or [np.nan]):.3f} deg / "
                    f"naive {np.mean(row.rotation['naive'] or [np.nan]):.3f} deg")
        rows.append(row)
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv_row())


def write_pose_errors_csv(errors: Sequence[PoseError], path, timestamps=None):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(('frame', 'timestamp', 'rotation_deg', 'translation_cm'))
        for k, error in enumerate(errors):
            stamp = '' if timestamps is None else f"{timestamps[k]:.6f}"
            writer.writerow((k, stamp, f"{error.rotation_deg:.6f}", f"{error.translation_cm:.6f}"))
        writer.writerow(('mean', '', f"{np.mean([e.rotation_deg for e in errors]):.6f}",
                         f"{np.mean([e.translation_cm for e in errors]):.6f}"))
