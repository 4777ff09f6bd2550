"""
Geometry Module
Rigid transforms, the equirectangular camera model and trajectory interpolation
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from errors import MalformedTrajectoryError, OutOfRangeError, ParameterError

logger = logging.getLogger(__name__)

# Points closer than this to the camera centre cannot be projected (meters)
EPSILON_RANGE = 1e-6

_SMALL_ANGLE = 1e-8


class SphericalCoord(NamedTuple):
    phi: float    # latitude, (-pi/2, pi/2)
    theta: float  # longitude, [-pi, pi]


class PixelCoord(NamedTuple):
    u: float  # row, [0, H)
    v: float  # column, [0, W)


def _normalized_quat(quat):
    q = np.asarray(quat, dtype=np.float64).reshape(4)
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm == 0.0:
        raise ParameterError(f"Quaternion {q.tolist()} cannot be normalized")
    q = q / norm
    # q and -q are the same rotation; keep w >= 0 so equal poses compare equal
    if q[3] < 0.0:
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x -> R x + t with R stored as a unit quaternion (x, y, z, w)"""

    quat: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        quat = _normalized_quat(self.quat)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        quat.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, 'quat', quat)
        object.__setattr__(self, 'translation', translation)

    @classmethod
    def identity(cls):
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_rotation(cls, rotation: Rotation, translation=(0.0, 0.0, 0.0)):
        return cls(rotation.as_quat(), translation)

    @classmethod
    def from_matrix(cls, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(Rotation.from_matrix(matrix[:3, :3]).as_quat(), matrix[:3, 3])

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.quat)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return self.rotation.as_matrix()

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation_matrix
        matrix[:3, 3] = self.translation
        return matrix

    @property
    def center(self) -> np.ndarray:
        """Origin of the target frame expressed in the source frame: -R^T t"""
        return -self.rotation_matrix.T @ self.translation

    def inverse(self) -> 'Pose':
        inv_rotation = self.rotation.inv()
        return Pose.from_rotation(inv_rotation, -inv_rotation.apply(self.translation))

    def compose(self, other: 'Pose') -> 'Pose':
        """self ∘ other: apply ``other`` first"""
        rotation = self.rotation * other.rotation
        return Pose.from_rotation(rotation, self.rotation.apply(other.translation) + self.translation)

    def __matmul__(self, other: 'Pose') -> 'Pose':
        return self.compose(other)

    def transform(self, points) -> np.ndarray:
        """Apply to a single 3-vector or an (N, 3) array"""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix.T + self.translation

    def __repr__(self):
        q = ', '.join(f"{x:.6f}" for x in self.quat)
        t = ', '.join(f"{x:.6f}" for x in self.translation)
        return f"Pose(quat=[{q}], translation=[{t}])"


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(pose: Pose) -> Pose:
    return pose.inverse()


def transform_point(pose: Pose, point) -> np.ndarray:
    """World-frame point(s) into the camera frame: R p + t"""
    return pose.transform(point)


def _skew(w):
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def _left_jacobian(omega):
    theta = np.linalg.norm(omega)
    W = _skew(omega)
    if theta < _SMALL_ANGLE:
        a = 0.5 - theta ** 2 / 24.0
        b = 1.0 / 6.0 - theta ** 2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta ** 2
        b = (theta - np.sin(theta)) / theta ** 3
    return np.eye(3) + a * W + b * (W @ W)


def _left_jacobian_inverse(omega):
    theta = np.linalg.norm(omega)
    W = _skew(omega)
    if theta < 1e-5:
        c = 1.0 / 12.0 + theta ** 2 / 720.0
    else:
        c = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta ** 2
    return np.eye(3) - 0.5 * W + c * (W @ W)


@dataclass(frozen=True, eq=False)
class Twist:
    """se(3) local coordinates: axis-angle rotation (radians) and translation part (meters)"""

    omega: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'omega', np.asarray(self.omega, dtype=np.float64).reshape(3).copy())
        object.__setattr__(self, 'rho', np.asarray(self.rho, dtype=np.float64).reshape(3).copy())

    @classmethod
    def zero(cls):
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, vector):
        vector = np.asarray(vector, dtype=np.float64).reshape(6)
        return cls(vector[:3], vector[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.rho])

    def __neg__(self):
        return Twist(-self.omega, -self.rho)

    def exp(self) -> Pose:
        rotation = Rotation.from_rotvec(self.omega)
        return Pose.from_rotation(rotation, _left_jacobian(self.omega) @ self.rho)

    @classmethod
    def log(cls, pose: Pose) -> 'Twist':
        omega = pose.rotation.as_rotvec()
        return cls(omega, _left_jacobian_inverse(omega) @ pose.translation)


def exp_update(pose: Pose, delta: Twist) -> Pose:
    """Left-multiplicative retraction exp(delta) ∘ pose"""
    return delta.exp().compose(pose)


# Equirectangular camera model

def _check_image_size(image_h, image_w):
    if image_h <= 0 or image_w <= 0:
        raise ParameterError(f"Image size must be positive, got {image_h}x{image_w}")


def project_points(points, image_h, image_w, zenith_up=False) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) camera-frame points.

    Returns row ``u``, column ``v`` and a validity mask; invalid entries (points
    within EPSILON_RANGE of the centre) hold 0.
    """
    _check_image_size(image_h, image_w)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    r = np.sqrt(x * x + y * y + z * z)
    valid = r > EPSILON_RANGE
    safe_r = np.where(valid, r, 1.0)
    phi = np.arcsin(np.clip(z / safe_r, -1.0, 1.0))
    theta = np.arctan2(y, x)

    if zenith_up:
        u = (np.pi / 2.0 - phi) / np.pi * image_h
    else:
        u = (phi + np.pi / 2.0) / np.pi * image_h
    v = (theta + np.pi) / (2.0 * np.pi) * image_w

    u = np.minimum(u, np.nextafter(float(image_h), 0.0))
    v = np.where(v >= image_w, v - image_w, v)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    return u, v, valid


def project(point, image_h, image_w, zenith_up=False) -> Optional[PixelCoord]:
    """Equirectangular pixel of a camera-frame point, or None at the camera centre"""
    u, v, valid = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), image_h, image_w, zenith_up)
    if not valid[0]:
        return None
    return PixelCoord(float(u[0]), float(v[0]))


def to_spherical(point) -> Optional[SphericalCoord]:
    point = np.asarray(point, dtype=np.float64).reshape(3)
    r = np.linalg.norm(point)
    if r <= EPSILON_RANGE:
        return None
    return SphericalCoord(float(np.arcsin(np.clip(point[2] / r, -1.0, 1.0))),
                          float(np.arctan2(point[1], point[0])))


def unproject(u, v, image_h, image_w, zenith_up=False) -> np.ndarray:
    """Unit viewing directions for pixel coordinates; inverse of ``project_points``"""
    _check_image_size(image_h, image_w)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if zenith_up:
        phi = np.pi / 2.0 - u / image_h * np.pi
    else:
        phi = u / image_h * np.pi - np.pi / 2.0
    theta = v / image_w * 2.0 * np.pi - np.pi
    cos_phi = np.cos(phi)
    return np.stack([cos_phi * np.cos(theta), cos_phi * np.sin(theta), np.sin(phi)], axis=-1)


def projection_jacobian(points, image_h, image_w, zenith_up=False) -> np.ndarray:
    """d(u, v)/d(point) as an (N, 2, 3) array; rows on the polar axis are zero"""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    rho2 = x * x + y * y
    r2 = rho2 + z * z
    rho = np.sqrt(rho2)
    ok = (rho > EPSILON_RANGE) & (r2 > EPSILON_RANGE ** 2)
    rho_s = np.where(ok, rho, 1.0)
    rho2_s = np.where(ok, rho2, 1.0)
    r2_s = np.where(ok, r2, 1.0)

    jac = np.zeros((points.shape[0], 2, 3))
    du = image_h / np.pi * (-1.0 if zenith_up else 1.0)
    jac[:, 0, 0] = du * (-x * z / (r2_s * rho_s))
    jac[:, 0, 1] = du * (-y * z / (r2_s * rho_s))
    jac[:, 0, 2] = du * (rho_s / r2_s)
    dv = image_w / (2.0 * np.pi)
    jac[:, 1, 0] = dv * (-y / rho2_s)
    jac[:, 1, 1] = dv * (x / rho2_s)
    jac[~ok] = 0.0
    return jac


# Trajectory interpolation

def _samples_of(trajectory):
    return trajectory.samples if hasattr(trajectory, 'samples') else trajectory


def check_trajectory(samples: Sequence[Tuple[float, Pose]]):
    if len(samples) < 2:
        raise MalformedTrajectoryError(f"Trajectory needs at least 2 samples, got {len(samples)}")
    times = [float(t) for t, _ in samples]
    for k in range(1, len(times)):
        if not times[k] > times[k - 1]:
            raise MalformedTrajectoryError(
                f"Timestamps not strictly increasing at sample {k}: {times[k - 1]} -> {times[k]}")
    return times


def slerp(a: Rotation, b: Rotation, alpha: float) -> Rotation:
    """Shortest-arc spherical interpolation between two rotations"""
    delta = (b * a.inv()).as_rotvec()
    return Rotation.from_rotvec(alpha * delta) * a


def interpolate_pose(trajectory, query_time: float) -> Pose:
    """Pose at ``query_time``: linear translation, slerp rotation between bracketing samples"""
    samples = _samples_of(trajectory)
    times = check_trajectory(samples)
    return interpolate_sorted(times, [pose for _, pose in samples], query_time)


def interpolate_sorted(times, poses: Sequence[Pose], query_time: float) -> Pose:
    """``interpolate_pose`` over samples already known to be valid (>= 2, strictly increasing)"""
    times = np.asarray(times, dtype=np.float64)
    query_time = float(query_time)
    if query_time < times[0] or query_time > times[-1]:
        raise OutOfRangeError(
            f"Query time {query_time:.6f}s outside trajectory span [{times[0]:.6f}, {times[-1]:.6f}]")

    k = int(np.searchsorted(times, query_time, side='left'))
    if times[k] == query_time:
        return poses[k]
    t0, p0 = float(times[k - 1]), poses[k - 1]
    t1, p1 = float(times[k]), poses[k]
    alpha = (query_time - t0) / (t1 - t0)
    translation = (1.0 - alpha) * p0.translation + alpha * p1.translation
    return Pose.from_rotation(slerp(p0.rotation, p1.rotation, alpha), translation)
