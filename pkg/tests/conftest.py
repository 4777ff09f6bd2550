"""Shared fixtures: small synthetic scenes and image helpers"""

import logging

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from bench import TextureSpec, generate_sphere_scene, render_sphere_view
from geometry import Pose
from imaging import Panorama
from pointcloud import PointCloud


def unit_directions(rng, count):
    directions = rng.normal(size=(count, 3))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def checkerboard(height, width, block):
    rows = (np.arange(height) // block)[:, None]
    cols = (np.arange(width) // block)[None, :]
    plane = np.where((rows + cols) % 2 == 0, 230, 25).astype(np.uint8)
    return np.repeat(plane[:, :, None], 3, axis=2)


def constant_panorama(value, height=16, width=32):
    return Panorama(np.full((height, width, 3), value, dtype=np.uint8))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope='session')
def small_scene():
    """Noise-free textured sphere, 3 views at 64 x 128"""
    return generate_sphere_scene(radius=10.0, n_points=3000, n_views=3, seed=7, image_size=(64, 128))


@pytest.fixture(scope='session')
def rolled_views():
    """Views sharing one centre whose panoramas are exact column shifts of each other.

    Rotating a camera about its z axis by 2*pi*k/W shifts its panorama by k
    columns, so at these poses every point samples the same value in every
    view and the photometric loss is zero up to rounding.
    """
    height, width = 64, 128
    rng = np.random.default_rng(3)
    base = Pose.from_rotation(Rotation.random(random_state=rng))
    base_image = render_sphere_view(base, 10.0, TextureSpec(), (height, width))

    poses, images = [], []
    for k in (0, 36, 72):
        spin = Rotation.from_rotvec([0.0, 0.0, 2.0 * np.pi * k / width])
        poses.append(Pose.from_rotation(spin * base.rotation))
        images.append(Panorama(np.roll(base_image, k, axis=1), timestamp=float(len(images))))
    cloud = PointCloud(10.0 * unit_directions(rng, 2000))
    return cloud, poses, images


@pytest.fixture(autouse=True)
def restore_logging():
    """Undo root logger changes made by setup_logging"""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    for handler in root.handlers[:]:
        if handler not in handlers:
            root.removeHandler(handler)
            handler.close()
    for handler in handlers:
        if handler not in root.handlers:
            root.addHandler(handler)
    root.setLevel(level)
