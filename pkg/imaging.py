"""
Imaging Module
Equirectangular panorama container, bilinear sampling with longitude wrap, and the blur metric
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Tuple

import cv2
import numpy as np

from errors import ImageBoundsError, ImageDecodeError, ParameterError
from geometry import PixelCoord

logger = logging.getLogger(__name__)

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
BLUR_EPSILON = 1e-12
IMAGE_SUFFIXES = ('.png', '.jpg', '.jpeg')


@dataclass(frozen=True, eq=False)
class Panorama:
    """H x W x 3 uint8 RGB panorama.

    ``scale`` is the pixel footprint relative to full resolution; ``zenith_up``
    means row 0 looks straight up.
    """

    pixels: np.ndarray
    timestamp: float = 0.0
    scale: int = 1
    zenith_up: bool = False

    def __post_init__(self):
        pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ParameterError(f"Panorama pixels must be H x W x 3, got shape {pixels.shape}")
        if pixels.shape[0] < 2 or pixels.shape[1] < 2:
            raise ParameterError(f"Panorama must be at least 2 x 2, got {pixels.shape[0]} x {pixels.shape[1]}")
        pixels.setflags(write=False)
        object.__setattr__(self, 'pixels', pixels)
        object.__setattr__(self, 'timestamp', float(self.timestamp))

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def full_size(self) -> Tuple[int, int]:
        """Height and width of the full-resolution image this level came from"""
        return self.height * self.scale, self.width * self.scale

    @cached_property
    def gray(self) -> np.ndarray:
        """Luma in [0, 1]"""
        plane = self.pixels.astype(np.float64) @ GRAY_WEIGHTS / 255.0
        plane.setflags(write=False)
        return plane

    @cached_property
    def rgb(self) -> np.ndarray:
        """Float copy of the pixels in [0, 255]"""
        plane = self.pixels.astype(np.float64)
        plane.setflags(write=False)
        return plane

    def plane(self, channel='gray') -> np.ndarray:
        if channel == 'gray':
            return self.gray
        if channel == 'rgb':
            return self.rgb
        raise ParameterError(f"Unknown channel '{channel}', expected gray or rgb")

    def downsample(self) -> 'Panorama':
        """Half resolution by area averaging"""
        if self.height < 4 or self.width < 4:
            raise ParameterError(f"Cannot downsample a {self.height} x {self.width} panorama")
        smaller = cv2.resize(np.asarray(self.pixels), (self.width // 2, self.height // 2),
                             interpolation=cv2.INTER_AREA)
        return Panorama(smaller, self.timestamp, self.scale * 2, self.zenith_up)

    def level_coordinates(self, u, v):
        """Map full-resolution pixel coordinates onto this level's pixel grid"""
        if self.scale == 1:
            return u, v
        return (np.asarray(u) + 0.5) / self.scale - 0.5, (np.asarray(v) + 0.5) / self.scale - 0.5


def build_pyramid(image: Panorama, levels: int) -> List[Panorama]:
    """Full resolution first, each following level at half the size.

    Stops early once a level has odd dimensions so every level maps exactly
    onto the full-resolution grid.
    """
    pyramid = [image]
    while len(pyramid) < levels:
        top = pyramid[-1]
        if top.height % 2 or top.width % 2 or top.height < 4 or top.width < 4:
            logger.debug(f"Pyramid stops at {len(pyramid)} levels ({top.height} x {top.width})")
            break
        pyramid.append(top.downsample())
    return pyramid


# Bilinear sampling. Pixel centres sit at integer coordinates; columns wrap
# modulo W, rows clamp to [0, H - 1].

def _corners(shape, u, v):
    height, width = shape[0], shape[1]
    u_floor = np.floor(u)
    v_floor = np.floor(v)
    du = u - u_floor
    dv = v - v_floor
    u0 = np.clip(u_floor.astype(np.int64), 0, height - 1)
    u1 = np.clip(u_floor.astype(np.int64) + 1, 0, height - 1)
    v0 = np.mod(v_floor.astype(np.int64), width)
    v1 = np.mod(v0 + 1, width)
    return u0, u1, v0, v1, du, dv


def _valid_mask(shape, u, v):
    return np.isfinite(u) & np.isfinite(v) & (u >= -0.5) & (u < shape[0])


def _weights(values, du, dv):
    # broadcast per-sample weights over a trailing channel axis
    extra = values.ndim - 1
    return du.reshape(du.shape + (1,) * extra), dv.reshape(dv.shape + (1,) * extra)


def sample_plane(plane, u, v) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized bilinear lookup; returns values and a validity mask (invalid rows hold 0)"""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    valid = _valid_mask(plane.shape, u, v)
    us = np.where(valid, u, 0.0)
    vs = np.where(valid, v, 0.0)
    u0, u1, v0, v1, du, dv = _corners(plane.shape, us, vs)
    i00, i01, i10, i11 = plane[u0, v0], plane[u0, v1], plane[u1, v0], plane[u1, v1]
    wu, wv = _weights(i00, du, dv)
    values = (1 - wu) * ((1 - wv) * i00 + wv * i01) + wu * ((1 - wv) * i10 + wv * i11)
    mask = valid.reshape(valid.shape + (1,) * (values.ndim - valid.ndim))
    return np.where(mask, values, 0.0), valid


def sample_plane_with_gradient(plane, u, v):
    """Bilinear value plus its partial derivatives along rows (u) and columns (v)"""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    valid = _valid_mask(plane.shape, u, v)
    us = np.where(valid, u, 0.0)
    vs = np.where(valid, v, 0.0)
    u0, u1, v0, v1, du, dv = _corners(plane.shape, us, vs)
    i00, i01, i10, i11 = plane[u0, v0], plane[u0, v1], plane[u1, v0], plane[u1, v1]
    wu, wv = _weights(i00, du, dv)
    values = (1 - wu) * ((1 - wv) * i00 + wv * i01) + wu * ((1 - wv) * i10 + wv * i11)
    grad_u = (1 - wv) * (i10 - i00) + wv * (i11 - i01)
    grad_v = (1 - wu) * (i01 - i00) + wu * (i11 - i10)
    mask = valid.reshape(valid.shape + (1,) * (values.ndim - valid.ndim))
    return (np.where(mask, values, 0.0), np.where(mask, grad_u, 0.0),
            np.where(mask, grad_v, 0.0), valid)


def _check_pixel(image: Panorama, pixel):
    u, v = float(pixel[0]), float(pixel[1])
    if not (0.0 <= u < image.height) or not (0.0 <= v < image.width):
        raise ImageBoundsError(f"Pixel ({u:.3f}, {v:.3f}) outside {image.height} x {image.width} panorama")
    return u, v


def sample_color(image: Panorama, pixel: PixelCoord) -> np.ndarray:
    """RGB in [0, 255] at a subpixel location"""
    u, v = _check_pixel(image, pixel)
    values, _ = sample_plane(image.rgb, np.array([u]), np.array([v]))
    return values[0]


def sample_colors(image: Panorama, u, v) -> Tuple[np.ndarray, np.ndarray]:
    return sample_plane(image.rgb, u, v)


def sample_gray_with_gradient(image: Panorama, pixel: PixelCoord) -> Tuple[float, float, float]:
    u, v = _check_pixel(image, pixel)
    values, grad_u, grad_v, _ = sample_plane_with_gradient(image.gray, np.array([u]), np.array([v]))
    return float(values[0]), float(grad_u[0]), float(grad_v[0])


def blurriness(image: Panorama) -> float:
    """Inverse variance of the Laplacian of the gray plane; higher means blurrier"""
    if image.height < 3 or image.width < 3:
        raise ParameterError(f"Blurriness needs at least 3 x 3 pixels, got {image.height} x {image.width}")
    variance = cv2.Laplacian(np.asarray(image.gray), cv2.CV_64F).var()
    return float(1.0 / (BLUR_EPSILON + variance))


# File I/O

def timestamp_from_filename(path) -> Optional[float]:
    try:
        return float(Path(path).stem)
    except ValueError:
        return None


def load_image(path, timestamp=None, zenith_up=False) -> Panorama:
    """Decode a PNG or JPEG into an RGB panorama; the timestamp defaults to the filename stem"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Image not found: {path}")
    pixels = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if pixels is None:
        raise ImageDecodeError(f"{path}: could not decode image")
    if timestamp is None:
        timestamp = timestamp_from_filename(path)
        if timestamp is None:
            logger.debug(f"{path}: no timestamp in filename, using 0")
            timestamp = 0.0
    return Panorama(cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB), timestamp, zenith_up=zenith_up)


def save_image(image: Panorama, path):
    """Write a lossless PNG"""
    path = Path(path)
    if path.suffix.lower() != '.png':
        raise ParameterError(f"{path}: panoramas are saved as PNG only")
    if not cv2.imwrite(str(path), cv2.cvtColor(np.asarray(image.pixels), cv2.COLOR_RGB2BGR)):
        raise OSError(f"Could not write image {path}")
    logger.debug(f"Wrote {image.height} x {image.width} panorama to {path}")


def load_image_index(path) -> List[Tuple[float, Path]]:
    """Parse ``t path`` lines; relative paths resolve against the index file's directory"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Image index not found: {path}")
    entries = []
    with open(path, 'r') as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            fields = line.split(maxsplit=1)
            if len(fields) != 2:
                raise ImageDecodeError(f"{path}:{line_number}: expected 't path', got '{line}'")
            try:
                timestamp = float(fields[0])
            except ValueError as e:
                raise ImageDecodeError(f"{path}:{line_number}: bad timestamp '{fields[0]}'") from e
            image_path = Path(fields[1])
            if not image_path.is_absolute():
                image_path = path.parent / image_path
            entries.append((timestamp, image_path))
    entries.sort(key=lambda entry: entry[0])
    return entries


def discover_images(path) -> List[Tuple[float, Path]]:
    """Timestamped image paths from an index file or a directory of ``<t>.png|jpg`` files"""
    path = Path(path)
    if path.is_file():
        return load_image_index(path)
    if not path.is_dir():
        raise FileNotFoundError(f"Image source not found: {path}")
    entries = []
    for image_path in sorted(path.iterdir()):
        if image_path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        timestamp = timestamp_from_filename(image_path)
        if timestamp is None:
            logger.warning(f"Skipping {image_path.name}: filename is not a timestamp")
            continue
        entries.append((timestamp, image_path))
    entries.sort(key=lambda entry: entry[0])
    return entries


def write_image_index(entries, path):
    with open(path, 'w') as f:
        for timestamp, image_path in entries:
            f.write(f"{timestamp:.9f} {image_path}\n")
