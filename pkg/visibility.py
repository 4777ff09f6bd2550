"""
Visibility Module
Hidden point removal per viewpoint and the voxel-level co-visibility graph between keyframes
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from errors import EmptyVisibilityError, ParameterError
from geometry import EPSILON_RANGE
from pointcloud import PointCloud
from utils import parallel_map
from voxel import VoxelMap

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 3.5
DEFAULT_MAX_RANGE = 60.0
DEFAULT_THRESHOLD_FRACTION = 0.5


def _frozen_indices(values) -> np.ndarray:
    array = np.unique(np.asarray(values, dtype=np.int64).reshape(-1))
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class VisibleSet:
    """Sorted point indices visible from one keyframe and their leaf histogram"""

    frame_id: int
    indices: np.ndarray
    leaves: np.ndarray
    leaf_counts: np.ndarray

    @classmethod
    def from_indices(cls, frame_id, indices, voxel_map: VoxelMap) -> 'VisibleSet':
        indices = _frozen_indices(indices)
        leaves, counts = np.unique(voxel_map.point_leaf[indices], return_counts=True)
        leaves = leaves.astype(np.int64)
        counts = counts.astype(np.int64)
        leaves.setflags(write=False)
        counts.setflags(write=False)
        return cls(int(frame_id), indices, leaves, counts)

    @classmethod
    def empty(cls, frame_id) -> 'VisibleSet':
        return cls(int(frame_id), _frozen_indices([]), _frozen_indices([]), _frozen_indices([]))

    def __len__(self):
        return len(self.indices)

    @property
    def leaf_hist(self) -> Dict[int, int]:
        return dict(zip(self.leaves.tolist(), self.leaf_counts.tolist()))


def _range_candidates(cloud: PointCloud, voxel_map: VoxelMap, viewpoint, max_range):
    """Indices within max_range, skipping root cells whose nearest point is already too far"""
    size = voxel_map.params.root_size
    kept = []
    for key, leaf_ids in voxel_map.roots.items():
        origin = voxel_map.root_origin(key)
        nearest = np.clip(viewpoint, origin, origin + size)
        if np.linalg.norm(nearest - viewpoint) > max_range:
            continue
        kept.extend(voxel_map.leaves[leaf_id].point_indices for leaf_id in leaf_ids)
    if not kept:
        return np.empty(0, dtype=np.int64)
    candidates = np.concatenate(kept)
    distances = np.linalg.norm(cloud.positions[candidates] - viewpoint, axis=1)
    return np.sort(candidates[(distances <= max_range) & (distances > EPSILON_RANGE)])


def spherical_flip(relative, gamma):
    """Invert points about a sphere of radius 10^gamma times the farthest range"""
    norms = np.linalg.norm(relative, axis=1)
    radius = (10.0 ** gamma) * norms.max()
    return relative + 2.0 * (radius - norms)[:, None] * relative / norms[:, None]


def hidden_point_removal(cloud: PointCloud, voxel_map: VoxelMap, viewpoint, gamma=DEFAULT_GAMMA,
                         max_range=DEFAULT_MAX_RANGE, frame_id=0) -> VisibleSet:
    """Points of the cloud visible from ``viewpoint`` (map frame)"""
    viewpoint = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(viewpoint)):
        raise ParameterError(f"Viewpoint {viewpoint.tolist()} is not finite")
    if gamma <= 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    if max_range <= 0:
        raise ParameterError(f"max_range must be positive, got {max_range}")

    candidates = _range_candidates(cloud, voxel_map, viewpoint, max_range)
    if len(candidates) == 0:
        raise EmptyVisibilityError(
            f"Frame {frame_id}: no point within {max_range} m of viewpoint {np.round(viewpoint, 3).tolist()}")
    if len(candidates) <= 3:
        return VisibleSet.from_indices(frame_id, candidates, voxel_map)

    flipped = spherical_flip(cloud.positions[candidates] - viewpoint, gamma)
    hull_input = np.vstack([flipped, np.zeros((1, 3))])
    try:
        hull = ConvexHull(hull_input)
    except (QhullError, ValueError) as e:
        # flat or degenerate input: everything in range counts as visible
        logger.debug(f"Frame {frame_id}: degenerate hull over {len(candidates)} points ({str(e).splitlines()[0]})")
        return VisibleSet.from_indices(frame_id, candidates, voxel_map)

    on_hull = np.concatenate([hull.vertices, hull.coplanar[:, 0]]).astype(np.int64)
    on_hull = on_hull[on_hull < len(candidates)]
    visible = VisibleSet.from_indices(frame_id, candidates[on_hull], voxel_map)
    logger.debug(f"Frame {frame_id}: {len(visible)} of {len(candidates)} in-range points visible")
    return visible


def compute_visible_sets(cloud: PointCloud, voxel_map: VoxelMap, viewpoints: Sequence[Tuple[int, np.ndarray]],
                         gamma=DEFAULT_GAMMA, max_range=DEFAULT_MAX_RANGE, threads=1) -> List[VisibleSet]:
    """HPR for every (frame_id, viewpoint); frames that see nothing get an empty set"""
    def run(item):
        frame_id, viewpoint = item
        try:
            return hidden_point_removal(cloud, voxel_map, viewpoint, gamma, max_range, frame_id)
        except EmptyVisibilityError as e:
            logger.warning(f"{e}; frame will be frozen")
            return VisibleSet.empty(frame_id)

    visible_sets = parallel_map(run, list(viewpoints), threads)
    logger.info(f"Computed visibility for {len(visible_sets)} frames "
                f"(mean {np.mean([len(v) for v in visible_sets]):.0f} points per frame)")
    return visible_sets


@dataclass(frozen=True, eq=False)
class CoVisGraph:
    """Keyframe graph with shared-leaf edge weights, augmented sets and co-visible sets"""

    frame_ids: Tuple[int, ...]
    edges: Mapping[Tuple[int, int], int]
    augmented: Mapping[int, np.ndarray]
    covisible: Mapping[int, np.ndarray]

    @staticmethod
    def _key(i, j):
        return (i, j) if i < j else (j, i)

    def has_edge(self, i, j) -> bool:
        return self._key(i, j) in self.edges

    def shared(self, i, j) -> int:
        return self.edges.get(self._key(i, j), 0)

    def neighbors(self, frame_id) -> List[int]:
        return sorted(b if a == frame_id else a for a, b in self.edges if frame_id in (a, b))

    @property
    def num_edges(self):
        return len(self.edges)

    def covisible_union(self) -> np.ndarray:
        """Every point co-visible from at least one frame"""
        if not self.covisible:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate([np.asarray(v) for v in self.covisible.values()]))


def _check_sets(visible_sets):
    if len(visible_sets) < 2:
        raise ParameterError(f"Co-visibility needs at least 2 visible sets, got {len(visible_sets)}")
    ids = [v.frame_id for v in visible_sets]
    if len(set(ids)) != len(ids):
        raise ParameterError(f"Duplicate frame ids in visible sets: {ids}")


def _freeze_graph(frame_ids, edges, augmented, covisible) -> CoVisGraph:
    return CoVisGraph(
        frame_ids=tuple(frame_ids),
        edges=MappingProxyType(dict(edges)),
        augmented=MappingProxyType({k: _frozen_indices(v) for k, v in augmented.items()}),
        covisible=MappingProxyType({k: _frozen_indices(v) for k, v in covisible.items()}),
    )


def _covisible_sets(frame_ids, edges, augmented):
    covisible = {}
    for frame_id in frame_ids:
        others = [augmented[b if a == frame_id else a] for a, b in edges if frame_id in (a, b)]
        if others:
            covisible[frame_id] = np.intersect1d(augmented[frame_id], np.unique(np.concatenate(others)),
                                                 assume_unique=True)
        else:
            covisible[frame_id] = np.empty(0, dtype=np.int64)
    return covisible


def build_covis_graph(visible_sets: Sequence[VisibleSet], voxel_map: VoxelMap,
                      threshold_fraction=DEFAULT_THRESHOLD_FRACTION) -> CoVisGraph:
    """Link frames whose visible points share enough voxel leaves and augment each with its neighbors'"""
    _check_sets(visible_sets)
    if not 0.0 < threshold_fraction <= 1.0:
        raise ParameterError(f"threshold_fraction must lie in (0, 1], got {threshold_fraction}")

    frame_ids = [v.frame_id for v in visible_sets]
    edges: Dict[Tuple[int, int], int] = {}
    additions: Dict[int, List[np.ndarray]] = {frame_id: [] for frame_id in frame_ids}

    for a in range(len(visible_sets)):
        for b in range(a + 1, len(visible_sets)):
            va, vb = visible_sets[a], visible_sets[b]
            if len(va) == 0 or len(vb) == 0:
                continue
            common, ia, ib = np.intersect1d(va.leaves, vb.leaves, assume_unique=True, return_indices=True)
            shared = int(va.leaf_counts[ia].sum() + vb.leaf_counts[ib].sum())
            if shared <= threshold_fraction * min(len(va), len(vb)):
                continue
            edges[CoVisGraph._key(va.frame_id, vb.frame_id)] = shared
            additions[va.frame_id].append(vb.indices[np.isin(voxel_map.point_leaf[vb.indices], common)])
            additions[vb.frame_id].append(va.indices[np.isin(voxel_map.point_leaf[va.indices], common)])

    augmented = {v.frame_id: np.unique(np.concatenate([v.indices, *additions[v.frame_id]]))
                 for v in visible_sets}
    covisible = _covisible_sets(frame_ids, edges, augmented)

    isolated = [frame_id for frame_id in frame_ids if len(covisible[frame_id]) == 0]
    if isolated:
        logger.warning(f"Frames without co-visible points: {isolated}")
    logger.info(f"Co-visibility graph: {len(frame_ids)} frames, {len(edges)} edges, "
                f"{sum(len(c) for c in covisible.values())} co-visible point observations")
    return _freeze_graph(frame_ids, edges, augmented, covisible)


def naive_covisibility(visible_sets: Sequence[VisibleSet]) -> CoVisGraph:
    """Raw pairwise intersections of HPR sets, no leaf sharing or augmentation"""
    _check_sets(visible_sets)
    frame_ids = [v.frame_id for v in visible_sets]
    edges = {}
    for a in range(len(visible_sets)):
        for b in range(a + 1, len(visible_sets)):
            va, vb = visible_sets[a], visible_sets[b]
            overlap = len(np.intersect1d(va.indices, vb.indices, assume_unique=True))
            if overlap:
                edges[CoVisGraph._key(va.frame_id, vb.frame_id)] = overlap
    augmented = {v.frame_id: v.indices for v in visible_sets}
    return _freeze_graph(frame_ids, edges, augmented, _covisible_sets(frame_ids, edges, augmented))


def write_visible_sets(visible_sets: Sequence[VisibleSet], path):
    """One line per frame: the frame id followed by its sorted point indices"""
    with open(path, 'w') as f:
        for visible in visible_sets:
            f.write(' '.join([str(visible.frame_id), *map(str, visible.indices.tolist())]) + '\n')
    logger.debug(f"Wrote {len(visible_sets)} visible sets to {path}")


def read_visible_sets(path, voxel_map: VoxelMap) -> List[VisibleSet]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Visible-set dump not found: {path}")
    visible_sets = []
    with open(path, 'r') as f:
        for line in f:
            fields = line.split()
            if not fields:
                continue
            visible_sets.append(VisibleSet.from_indices(int(fields[0]), [int(x) for x in fields[1:]], voxel_map))
    return visible_sets
