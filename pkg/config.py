"""
Configuration Module
Manages the pipeline configuration file, command-line overrides and the dataset layout
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

from dotenv import dotenv_values

from errors import ConfigError


def _opt(default, help):
    return field(default=default, metadata={'help': help})


@dataclass(frozen=True)
class PathsConfig:
    dataset: str = _opt('', "dataset directory; empty file paths below default to its layout")
    cloud: str = _opt('', "input point cloud (PLY)")
    images: str = _opt('', "image index file ('t path' lines) or directory of <t>.png|jpg")
    lio_trajectory: str = _opt('', "LIO trajectory, TUM format, device-to-world")
    vo_keyframes: str = _opt('', "VO keyframes, TUM format; only timestamps are required")
    ground_truth: str = _opt('', "ground-truth camera trajectory for evaluate")
    estimate: str = _opt('', "optimized camera trajectory for evaluate")
    output: str = _opt('output', "output directory")


@dataclass(frozen=True)
class RunConfig:
    threads: int = _opt(0, "worker threads; 0 uses every core, 1 is the deterministic mode")
    seed: int = _opt(0, "random seed for simulate and the benchmark")
    zenith_up: bool = _opt(False, "image row 0 looks straight up")
    ply_format: str = _opt('binary', "output PLY encoding: binary or ascii")


@dataclass(frozen=True)
class VoxelConfig:
    root_size: float = _opt(4.0, "root cell edge (m)")
    min_voxel_size: float = _opt(0.25, "smallest leaf edge (m)")
    plane_ratio_max: float = _opt(0.05, "largest smallest/largest eigenvalue ratio for a planar leaf")
    min_points: int = _opt(10, "points needed before a planar cell may stop splitting")


@dataclass(frozen=True)
class VisibilityConfig:
    gamma: float = _opt(3.5, "spherical flip exponent; flip radius is 10^gamma times the farthest range")
    max_range: float = _opt(60.0, "maximum visibility distance (m)")
    dump: bool = _opt(False, "write per-frame visible sets to visible_sets.txt")


@dataclass(frozen=True)
class CovisConfig:
    threshold_fraction: float = _opt(0.5, "edge threshold as a fraction of the smaller visible set")
    method: str = _opt('graph', "graph (leaf sharing with augmentation) or naive (raw intersections)")


@dataclass(frozen=True)
class SyncConfig:
    dt: float = _opt(0.01, "motion signal step (s)")
    max_offset: float = _opt(2.0, "largest camera/LiDAR clock offset searched (s)")
    estimate_offset: bool = _opt(True, "estimate the clock offset from rotation rates")
    time_offset: float = _opt(0.0, "clock offset used when estimation is off or fails (s)")
    window_minus: float = _opt(-0.2, "keyframe window start relative to the VO keyframe (s)")
    window_plus: float = _opt(0.2, "keyframe window end relative to the VO keyframe (s)")
    extrinsic: Tuple[float, ...] = _opt((0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0),
                                        "device-to-camera transform: tx, ty, tz, qx, qy, qz, qw")


@dataclass(frozen=True)
class OptimizerConfig:
    max_outer: int = _opt(50, "outer alternation iterations per pyramid level")
    max_inner: int = _opt(10, "gradient steps per frame per outer iteration")
    initial_step: float = _opt(1e-3, "first step length (rad, or median ranges for translation)")
    step_growth: float = _opt(2.0, "step multiplier after an accepted step")
    max_backtracks: int = _opt(20, "step halvings before a frame gives up for the iteration")
    rel_tol: float = _opt(1e-4, "stop when the relative loss decrease falls below this")
    mode: str = _opt('robust', "color aggregation: mean or robust")
    trim_sigma: float = _opt(3.0, "robust mode keeps candidates within trim_sigma MADs of the median")
    pyramid_levels: int = _opt(3, "coarse-to-fine image levels")
    channel: str = _opt('gray', "residual channel: gray or rgb")
    norm: str = _opt('squared', "per-term loss: squared or abs")


@dataclass(frozen=True)
class ColorizeConfig:
    mode: str = _opt('robust', "color aggregation for the output cloud: mean or robust")
    trim_sigma: float = _opt(3.0, "robust trimming width in MADs")
    sentinel: Tuple[int, ...] = _opt((128, 128, 128), "RGB given to points no frame sees")


@dataclass(frozen=True)
class BenchConfig:
    radius: float = _opt(10.0, "sphere radius (m)")
    n_points: int = _opt(50000, "cloud points")
    n_views: int = _opt(8, "panoramas")
    image_height: int = _opt(512, "panorama rows")
    image_width: int = _opt(1024, "panorama columns")
    view_spread: float = _opt(0.2, "camera centres lie within this fraction of the radius")
    noise_sigma: float = _opt(0.02, "radial noise on the cloud (m)")
    rot_deg: float = _opt(5.0, "initial rotation error (deg)")
    trans_cm: float = _opt(10.0, "initial translation error (cm)")
    seeds: int = _opt(5, "scenes per ablation cell")
    sigmas: Tuple[float, ...] = _opt((0.01, 0.02, 0.05, 0.10), "ablation noise levels (m)")
    align: bool = _opt(True, "remove the common rigid motion before measuring pose error")
    ablation: bool = _opt(False, "evaluate also runs the co-visibility ablation")


SECTIONS = {
    'paths': PathsConfig,
    'run': RunConfig,
    'voxel': VoxelConfig,
    'visibility': VisibilityConfig,
    'covis': CovisConfig,
    'sync': SyncConfig,
    'optimizer': OptimizerConfig,
    'colorize': ColorizeConfig,
    'bench': BenchConfig,
}

DATASET_LAYOUT = {
    'cloud': 'cloud.ply',
    'images': 'images/index.txt',
    'lio_trajectory': 'lio_trajectory.txt',
    'vo_keyframes': 'vo_keyframes.txt',
    'ground_truth': 'ground_truth.txt',
}

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


def _convert(key, raw, default):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got '{raw}'")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            element = type(default[0]) if default else float
            parts = [p for p in text.replace(',', ' ').split() if p]
            return tuple(element(p) for p in parts)
        return text
    except ValueError as e:
        raise ConfigError(f"Invalid value for '{key}': {e}") from e


def _format(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ', '.join(_format(v) for v in value)
    return str(value)


class PipelineConfig:
    """Configuration for every stage, one frozen section per concern"""

    def __init__(self, **sections):
        for name, section_type in SECTIONS.items():
            setattr(self, name, sections.pop(name, None) or section_type())
        if sections:
            raise ConfigError(f"Unknown configuration section(s): {', '.join(sorted(sections))}")
        self._validate_config()

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> 'PipelineConfig':
        """Read a ``section.key = value`` file, then apply ``key=value`` overrides"""
        values: Dict[str, str] = {}
        if path:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"Configuration file not found: {path}")
            for key, value in dotenv_values(path, interpolate=False).items():
                if value is None:
                    raise ConfigError(f"{path}: key '{key}' has no value")
                values[key] = value
        for item in overrides:
            key, sep, value = item.partition('=')
            if not sep:
                raise ConfigError(f"Override '{item}' is not of the form key=value")
            values[key.strip()] = value
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> 'PipelineConfig':
        changes: Dict[str, Dict[str, object]] = {name: {} for name in SECTIONS}
        for key, raw in values.items():
            section, _, name = key.partition('.')
            if section not in SECTIONS or not name:
                raise ConfigError(f"Unknown configuration key '{key}'")
            fields = {f.name: f for f in dataclasses.fields(SECTIONS[section])}
            if name not in fields:
                raise ConfigError(f"Unknown configuration key '{key}'")
            changes[section][name] = _convert(key, str(raw), fields[name].default)
        return cls(**{name: SECTIONS[name](**changes[name]) for name in SECTIONS})

    def with_overrides(self, **values) -> 'PipelineConfig':
        """Copy with ``section__key=value`` replacements"""
        sections = {name: getattr(self, name) for name in SECTIONS}
        for key, value in values.items():
            section, _, name = key.partition('__')
            if section not in sections:
                raise ConfigError(f"Unknown configuration key '{section}.{name}'")
            try:
                sections[section] = dataclasses.replace(sections[section], **{name: value})
            except TypeError as e:
                raise ConfigError(f"Unknown configuration key '{section}.{name}'") from e
        return PipelineConfig(**sections)

    def _validate_config(self):
        """Reject values no stage can run with"""
        problems = []
        if self.run.threads < 0:
            problems.append("run.threads must be >= 0")
        if self.run.ply_format not in ('binary', 'ascii'):
            problems.append("run.ply_format must be binary or ascii")
        if self.voxel.min_voxel_size <= 0 or self.voxel.root_size < self.voxel.min_voxel_size:
            problems.append("voxel sizes must satisfy 0 < min_voxel_size <= root_size")
        if self.visibility.gamma <= 0 or self.visibility.max_range <= 0:
            problems.append("visibility.gamma and visibility.max_range must be positive")
        if not 0.0 < self.covis.threshold_fraction <= 1.0:
            problems.append("covis.threshold_fraction must lie in (0, 1]")
        if self.covis.method not in ('graph', 'naive'):
            problems.append("covis.method must be graph or naive")
        if self.sync.dt <= 0 or self.sync.max_offset <= 0:
            problems.append("sync.dt and sync.max_offset must be positive")
        if not self.sync.window_minus <= 0.0 <= self.sync.window_plus:
            problems.append("sync window must satisfy window_minus <= 0 <= window_plus")
        if len(self.sync.extrinsic) != 7:
            problems.append("sync.extrinsic needs 7 numbers: tx, ty, tz, qx, qy, qz, qw")
        if self.optimizer.mode not in ('mean', 'robust') or self.colorize.mode not in ('mean', 'robust'):
            problems.append("optimizer.mode and colorize.mode must be mean or robust")
        if self.optimizer.channel not in ('gray', 'rgb'):
            problems.append("optimizer.channel must be gray or rgb")
        if self.optimizer.norm not in ('squared', 'abs'):
            problems.append("optimizer.norm must be squared or abs")
        if min(self.optimizer.max_outer, self.optimizer.max_inner, self.optimizer.pyramid_levels) < 1:
            problems.append("optimizer.max_outer, max_inner and pyramid_levels must be >= 1")
        if self.optimizer.initial_step <= 0 or self.optimizer.trim_sigma <= 0:
            problems.append("optimizer.initial_step and optimizer.trim_sigma must be positive")
        if len(self.colorize.sentinel) != 3 or not all(0 <= c <= 255 for c in self.colorize.sentinel):
            problems.append("colorize.sentinel needs 3 values in [0, 255]")
        if self.bench.radius <= 0 or self.bench.n_points < 100 or self.bench.n_views < 2:
            problems.append("bench needs radius > 0, n_points >= 100 and n_views >= 2")
        if self.bench.seeds < 1:
            problems.append("bench.seeds must be >= 1")
        if problems:
            raise ConfigError("Invalid configuration: " + '; '.join(problems))

    def resolve_paths(self) -> PathsConfig:
        """Per-file paths with empty entries filled from the dataset layout"""
        paths = self.paths
        if not paths.dataset:
            return paths
        root = Path(paths.dataset)
        filled = {name: str(root / relative) for name, relative in DATASET_LAYOUT.items()
                  if not getattr(paths, name)}
        return dataclasses.replace(paths, **filled)

    def items(self) -> List[Tuple[str, object]]:
        return [(f"{name}.{f.name}", getattr(getattr(self, name), f.name))
                for name in SECTIONS for f in dataclasses.fields(SECTIONS[name])]

    def to_lines(self, with_help=False) -> List[str]:
        """The fully resolved configuration in the file format it is read from"""
        lines = []
        for name in SECTIONS:
            lines.append(f"# [{name}]")
            for f in dataclasses.fields(SECTIONS[name]):
                if with_help:
                    lines.append(f"# {f.metadata['help']}")
                lines.append(f"{name}.{f.name} = {_format(getattr(getattr(self, name), f.name))}")
        return lines

    def __str__(self):
        """String representation of configuration"""
        return '\n'.join(self.to_lines())
