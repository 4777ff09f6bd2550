"""
Point Cloud Module
Point cloud and trajectory data model with PLY and TUM file I/O
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError

from errors import (
    CloudShapeError,
    EmptyCloudError,
    MalformedTrajectoryError,
    NonFiniteError,
    NonMonotonicTimestampError,
    ParameterError,
    PlyFormatError,
    TrajectoryFormatError,
    UnsupportedPropertyError,
)
from geometry import Pose, interpolate_sorted

logger = logging.getLogger(__name__)

COLOR_PROPERTIES = ('red', 'green', 'blue')
PLY_SCALARS = {'float': '<f4', 'double': '<f8'}
QUAT_WARN_TOLERANCE = 1e-3
QUAT_ERROR_TOLERANCE = 1e-1


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Positions in the map frame plus optional 8-bit colors and voxel leaf ids"""

    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    leaf_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        if positions.size % 3:
            raise CloudShapeError(f"positions has {positions.size} values, not a multiple of 3")
        positions = positions.reshape(-1, 3)
        positions.setflags(write=False)
        object.__setattr__(self, 'positions', positions)
        if self.colors is not None:
            colors = np.asarray(self.colors, dtype=np.uint8)
            if colors.size != positions.size:
                raise CloudShapeError(f"colors has {colors.size} values but cloud has {len(positions)} points")
            colors = colors.reshape(-1, 3)
            colors.setflags(write=False)
            object.__setattr__(self, 'colors', colors)
        if self.leaf_ids is not None:
            leaf_ids = np.asarray(self.leaf_ids, dtype=np.int64).reshape(-1)
            if len(leaf_ids) != len(positions):
                raise CloudShapeError(f"leaf_ids has {len(leaf_ids)} entries but cloud has {len(positions)} points")
            object.__setattr__(self, 'leaf_ids', leaf_ids)

    def __len__(self):
        return len(self.positions)

    @property
    def has_colors(self):
        return self.colors is not None

    def with_colors(self, colors) -> 'PointCloud':
        return PointCloud(self.positions, colors, self.leaf_ids)


def _check_finite(positions, source):
    bad = np.flatnonzero(~np.all(np.isfinite(positions), axis=1))
    if len(bad):
        shown = ', '.join(str(i) for i in bad[:10])
        more = f" (+{len(bad) - 10} more)" if len(bad) > 10 else ''
        raise NonFiniteError(f"{source}: non-finite coordinates at point indices {shown}{more}", bad)


def load_ply(path) -> PointCloud:
    """Read an ASCII or binary little-endian PLY with float x, y, z and optional uchar colors"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Point cloud not found: {path}")
    try:
        ply = PlyData.read(str(path))
    except PlyParseError as e:
        raise PlyFormatError(f"{path}: {e}") from e
    except (ValueError, EOFError) as e:
        raise PlyFormatError(f"{path}: malformed PLY body: {e}") from e

    if not ply.text and ply.byte_order == '>':
        raise PlyFormatError(f"{path}: binary_big_endian PLY is not supported")

    names = [element.name for element in ply.elements]
    if 'vertex' not in names:
        raise PlyFormatError(f"{path}: no 'vertex' element in header")
    vertex = ply['vertex']
    data = vertex.data

    for axis in ('x', 'y', 'z'):
        if axis not in data.dtype.names:
            raise PlyFormatError(f"{path}: vertex property '{axis}' missing")
        if data.dtype[axis].kind != 'f':
            raise UnsupportedPropertyError(
                f"{path}: vertex property '{axis}' has type {data.dtype[axis]}, expected float or double")

    if len(data) != vertex.count:
        raise PlyFormatError(f"{path}: header declares {vertex.count} vertices, read {len(data)}")
    if len(data) == 0:
        raise EmptyCloudError(f"{path}: point cloud is empty")

    positions = np.stack([data['x'], data['y'], data['z']], axis=1).astype(np.float64)
    _check_finite(positions, path)

    colors = None
    if all(name in data.dtype.names for name in COLOR_PROPERTIES):
        for name in COLOR_PROPERTIES:
            if data.dtype[name] != np.uint8:
                raise UnsupportedPropertyError(
                    f"{path}: color property '{name}' has type {data.dtype[name]}, expected uchar")
        colors = np.stack([data[name] for name in COLOR_PROPERTIES], axis=1)

    logger.info(f"Loaded {len(positions)} points from {path}{' with colors' if colors is not None else ''}")
    return PointCloud(positions, colors)


def save_ply(cloud: PointCloud, path, format='binary', precision='double'):
    """Write a PLY; color properties are emitted iff the cloud has colors.

    ``precision='float'`` halves the file but rounds positions to float32.
    """
    if len(cloud) == 0:
        raise EmptyCloudError("Refusing to write an empty point cloud")
    if format not in ('ascii', 'binary'):
        raise ParameterError(f"Unknown PLY format '{format}', expected ascii or binary")
    if precision not in PLY_SCALARS:
        raise ParameterError(f"Unknown PLY precision '{precision}', expected float or double")
    scalar = PLY_SCALARS[precision]

    fields = [('x', scalar), ('y', scalar), ('z', scalar)]
    if cloud.has_colors:
        fields += [(name, 'u1') for name in COLOR_PROPERTIES]
    vertices = np.empty(len(cloud), dtype=fields)
    vertices['x'] = cloud.positions[:, 0]
    vertices['y'] = cloud.positions[:, 1]
    vertices['z'] = cloud.positions[:, 2]
    if cloud.has_colors:
        for channel, name in enumerate(COLOR_PROPERTIES):
            vertices[name] = cloud.colors[:, channel]

    element = PlyElement.describe(vertices, 'vertex')
    PlyData([element], text=(format == 'ascii'), byte_order='<').write(str(path))
    logger.debug(f"Wrote {len(cloud)} points to {path} ({format})")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-ordered poses; in files these are sensor-to-world transforms (TUM convention)"""

    timestamps: np.ndarray
    poses: Tuple[Pose, ...]

    def __post_init__(self):
        timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        poses = tuple(self.poses)
        if len(timestamps) != len(poses):
            raise TrajectoryFormatError(f"{len(timestamps)} timestamps for {len(poses)} poses")
        steps = np.diff(timestamps)
        if np.any(steps <= 0):
            k = int(np.flatnonzero(steps <= 0)[0]) + 1
            raise NonMonotonicTimestampError(
                f"Timestamps not strictly increasing at sample {k}: {timestamps[k - 1]} -> {timestamps[k]}")
        timestamps.setflags(write=False)
        object.__setattr__(self, 'timestamps', timestamps)
        object.__setattr__(self, 'poses', poses)

    def __len__(self):
        return len(self.poses)

    @property
    def samples(self):
        return list(zip(self.timestamps.tolist(), self.poses))

    @property
    def span(self):
        return float(self.timestamps[-1] - self.timestamps[0]) if len(self) else 0.0

    def interpolate(self, query_time) -> Pose:
        if len(self) < 2:
            raise MalformedTrajectoryError(f"Trajectory needs at least 2 samples, got {len(self)}")
        return interpolate_sorted(self.timestamps, self.poses, query_time)

    @classmethod
    def from_extrinsics(cls, timestamps: Sequence[float], extrinsics: Sequence[Pose]) -> 'Trajectory':
        """Build from world-to-camera poses; stored inverted as camera-to-world"""
        return cls(timestamps, [pose.inverse() for pose in extrinsics])

    def extrinsics(self):
        """World-to-camera poses (inverse of the stored sensor-to-world poses)"""
        return [pose.inverse() for pose in self.poses]


def load_trajectory(path) -> Trajectory:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines; '#' starts a comment line"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Trajectory not found: {path}")

    timestamps, poses = [], []
    with open(path, 'r') as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise TrajectoryFormatError(
                    f"{path}:{line_number}: expected 8 fields 't tx ty tz qx qy qz qw', got {len(fields)}",
                    line_number)
            try:
                values = [float(field) for field in fields]
            except ValueError as e:
                raise TrajectoryFormatError(f"{path}:{line_number}: {e}", line_number) from e

            quat = np.array(values[4:8])
            deviation = abs(np.linalg.norm(quat) - 1.0)
            if deviation > QUAT_ERROR_TOLERANCE:
                raise TrajectoryFormatError(
                    f"{path}:{line_number}: quaternion norm {np.linalg.norm(quat):.6f} is not unit", line_number)
            if deviation > QUAT_WARN_TOLERANCE:
                logger.warning(f"{path}:{line_number}: quaternion norm {np.linalg.norm(quat):.6f}, renormalizing")

            timestamps.append(values[0])
            poses.append(Pose(quat, values[1:4]))

    if timestamps and any(b <= a for a, b in zip(timestamps, timestamps[1:])):
        k = next(i for i in range(1, len(timestamps)) if timestamps[i] <= timestamps[i - 1])
        raise NonMonotonicTimestampError(
            f"{path}: timestamps not strictly increasing at sample {k}: {timestamps[k - 1]} -> {timestamps[k]}")

    logger.info(f"Loaded {len(timestamps)} trajectory samples from {path}")
    return Trajectory(timestamps, poses)


def save_trajectory(trajectory: Trajectory, path, header=None):
    """Write TUM lines with round-trip precision"""
    with open(path, 'w') as f:
        if header:
            for line in header.splitlines():
                f.write(f"# {line}\n")
        for t, pose in zip(trajectory.timestamps, trajectory.poses):
            values = [t, *pose.translation, *pose.quat]
            f.write(' '.join(f"{value:.17g}" for value in values) + '\n')
