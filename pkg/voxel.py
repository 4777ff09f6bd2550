"""
Voxel Map Module
Adaptive octree voxelization of the map into near-planar leaves with stable ids
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from errors import ParameterError
from pointcloud import PointCloud

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VoxelParams:
    root_size: float = 4.0
    min_voxel_size: float = 0.25
    plane_ratio_max: float = 0.05
    min_points: int = 10

    def validate(self):
        if self.min_voxel_size <= 0:
            raise ParameterError(f"min_voxel_size must be positive, got {self.min_voxel_size}")
        if self.root_size < self.min_voxel_size:
            raise ParameterError(
                f"root_size {self.root_size} is smaller than min_voxel_size {self.min_voxel_size}")
        if not 0.0 <= self.plane_ratio_max <= 1.0:
            raise ParameterError(f"plane_ratio_max must lie in [0, 1], got {self.plane_ratio_max}")


@dataclass
class VoxelLeaf:
    id: int
    point_indices: np.ndarray
    centroid: np.ndarray
    normal: np.ndarray
    planarity: float
    origin: np.ndarray
    size: float
    root_key: Tuple[int, int, int]

    @property
    def count(self):
        return len(self.point_indices)


@dataclass
class VoxelMap:
    params: VoxelParams
    leaves: List[VoxelLeaf]
    point_leaf: np.ndarray
    roots: Dict[Tuple[int, int, int], List[int]] = field(default_factory=dict)

    def __len__(self):
        return len(self.leaves)

    def root_origin(self, key):
        return np.asarray(key, dtype=np.float64) * self.params.root_size

    def leaf_of(self, point_index):
        return leaf_of(self, point_index)


def plane_statistics(points):
    """Centroid, unit normal and smallest/largest scatter eigenvalue ratio"""
    centroid = points.mean(axis=0)
    if len(points) < 3:
        return centroid, np.array([0.0, 0.0, 1.0]), 0.0
    centered = points - centroid
    scatter = centered.T @ centered
    eigenvalues, eigenvectors = np.linalg.eigh(scatter)
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    normal = eigenvectors[:, 0]
    # deterministic sign: largest-magnitude component positive
    if normal[np.argmax(np.abs(normal))] < 0:
        normal = -normal
    normal = normal / np.linalg.norm(normal)
    largest = eigenvalues[-1]
    planarity = float(eigenvalues[0] / largest) if largest > 0 else 0.0
    return centroid, normal, min(max(planarity, 0.0), 1.0)


def _is_leaf(count, planarity, size, params):
    if size <= params.min_voxel_size:
        return True
    return planarity <= params.plane_ratio_max and count >= params.min_points


def _subdivide(positions, indices, origin, size, params, root_key, leaves):
    points = positions[indices]
    centroid, normal, planarity = plane_statistics(points)
    if _is_leaf(len(indices), planarity, size, params):
        leaves.append(VoxelLeaf(
            id=-1,
            point_indices=indices,
            centroid=centroid,
            normal=normal,
            planarity=planarity,
            origin=origin,
            size=size,
            root_key=root_key,
        ))
        return

    half = size / 2.0
    center = origin + half
    octant = ((points[:, 0] >= center[0]).astype(np.int64)
              | ((points[:, 1] >= center[1]).astype(np.int64) << 1)
              | ((points[:, 2] >= center[2]).astype(np.int64) << 2))
    for child in range(8):
        mask = octant == child
        if not np.any(mask):
            continue
        offset = np.array([child & 1, (child >> 1) & 1, (child >> 2) & 1], dtype=np.float64) * half
        _subdivide(positions, indices[mask], origin + offset, half, params, root_key, leaves)


def build_voxel_map(cloud: PointCloud, params: VoxelParams = VoxelParams(), check_partition=False) -> VoxelMap:
    """Hash the cloud into root cells and split each by octant until leaves are planar"""
    params.validate()
    if len(cloud) == 0:
        raise ParameterError("Cannot voxelize an empty point cloud")

    positions = cloud.positions
    keys = np.floor(positions / params.root_size).astype(np.int64)
    unique_keys, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind='stable')
    boundaries = np.searchsorted(inverse[order], np.arange(len(unique_keys) + 1))

    leaves: List[VoxelLeaf] = []
    roots: Dict[Tuple[int, int, int], List[int]] = {}
    for cell, key in enumerate(unique_keys):
        indices = order[boundaries[cell]:boundaries[cell + 1]]
        root_key = tuple(int(k) for k in key)
        first = len(leaves)
        _subdivide(positions, indices, key.astype(np.float64) * params.root_size,
                   params.root_size, params, root_key, leaves)
        roots[root_key] = list(range(first, len(leaves)))

    point_leaf = np.full(len(cloud), -1, dtype=np.int64)
    for leaf_id, leaf in enumerate(leaves):
        leaf.id = leaf_id
        point_leaf[leaf.point_indices] = leaf_id

    voxel_map = VoxelMap(params=params, leaves=leaves, point_leaf=point_leaf, roots=roots)
    if check_partition:
        check_voxel_partition(voxel_map, positions)
    logger.info(f"Voxelized {len(cloud)} points into {len(leaves)} leaves across {len(roots)} root cells")
    return voxel_map


def check_voxel_partition(voxel_map: VoxelMap, positions):
    """Leaves must be disjoint, cover every point, and contain their points spatially"""
    seen = np.zeros(len(positions), dtype=np.int64)
    for leaf in voxel_map.leaves:
        seen[leaf.point_indices] += 1
        points = positions[leaf.point_indices]
        if np.any(points < leaf.origin - 1e-9) or np.any(points > leaf.origin + leaf.size + 1e-9):
            raise AssertionError(f"Leaf {leaf.id} holds points outside its cube")
    if np.any(seen != 1):
        bad = np.flatnonzero(seen != 1)[:10].tolist()
        raise AssertionError(f"Voxel partition broken at points {bad}")
    if np.any(voxel_map.point_leaf < 0):
        raise AssertionError("Point-to-leaf map is not total")


def leaf_of(voxel_map: VoxelMap, point_index) -> int:
    if point_index < 0 or point_index >= len(voxel_map.point_leaf):
        raise IndexError(f"Point index {point_index} out of range for {len(voxel_map.point_leaf)} points")
    return int(voxel_map.point_leaf[point_index])
