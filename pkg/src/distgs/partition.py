"""Slab decomposition with ghost margins, ownership and merge.

The global AABB is cut along its longest axis at point-count quantiles.
Ownership is half-open on every face (min inclusive, max exclusive) except
faces that coincide with the global maximum, which are inclusive.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import SplatModel
from .errors import EmptyCloud, InvalidConfig, MismatchedCounts, TooManyPartitions
from .isosurface import PointCloud, nearest_neighbor_distances


@dataclass
class Partition:
    id: int
    box_min: np.ndarray
    box_max: np.ndarray
    ghost_margin: float
    owned_indices: np.ndarray
    ghost_indices: np.ndarray
    domain_min: np.ndarray
    domain_max: np.ndarray
    axis: int = 0
    owned_points: PointCloud | None = field(default=None, repr=False)
    ghost_points: PointCloud | None = field(default=None, repr=False)

    @property
    def owned_box(self):
        return self.box_min, self.box_max

    def points(self) -> PointCloud:
        """Owned points followed by ghost points."""
        return PointCloud(np.concatenate([self.owned_points.positions, self.ghost_points.positions]),
                          np.concatenate([self.owned_points.colors, self.ghost_points.colors]),
                          np.concatenate([self.owned_points.normals, self.ghost_points.normals]))

    def to_manifest(self) -> dict:
        return {
            "id": int(self.id),
            "axis": int(self.axis),
            "owned_box": [self.box_min.tolist(), self.box_max.tolist()],
            "domain_box": [self.domain_min.tolist(), self.domain_max.tolist()],
            "ghost_margin": float(self.ghost_margin),
            "owned_indices": self.owned_indices.tolist(),
            "ghost_indices": self.ghost_indices.tolist(),
        }

    @classmethod
    def from_manifest(cls, d: dict, cloud: PointCloud | None = None) -> "Partition":
        p = cls(int(d["id"]), np.array(d["owned_box"][0], dtype=np.float64),
                np.array(d["owned_box"][1], dtype=np.float64), float(d["ghost_margin"]),
                np.array(d["owned_indices"], dtype=np.int64), np.array(d["ghost_indices"], dtype=np.int64),
                np.array(d["domain_box"][0], dtype=np.float64), np.array(d["domain_box"][1], dtype=np.float64),
                int(d.get("axis", 0)))
        if cloud is not None:
            p.owned_points = cloud.subset(p.owned_indices)
            p.ghost_points = cloud.subset(p.ghost_indices)
        return p


def owns_array(p: Partition, positions: np.ndarray) -> np.ndarray:
    x = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    upper_closed = p.box_max >= p.domain_max
    below_max = np.where(upper_closed, x <= p.box_max, x < p.box_max)
    return np.all((x >= p.box_min) & below_max, axis=1)


def owns(p: Partition, position) -> bool:
    return bool(owns_array(p, position)[0])


def default_ghost_margin(pc: PointCloud) -> float:
    """Three times the median nearest-neighbor spacing."""
    if len(pc) < 2:
        return 0.0
    return 3.0 * float(np.median(nearest_neighbor_distances(pc.positions, 1)))


def _box_distance(x, lo, hi):
    d = np.maximum(np.maximum(lo - x, 0.0), np.maximum(x - hi, 0.0))
    return np.linalg.norm(d, axis=1)


def partition_cloud(pc: PointCloud, n: int, ghost_margin: float | None = None) -> list[Partition]:
    if len(pc) == 0:
        raise EmptyCloud("cannot partition an empty point cloud")
    if n < 1:
        raise InvalidConfig(f"partition count {n} < 1")
    if n > len(pc):
        raise TooManyPartitions(f"{n} partitions for {len(pc)} points")
    if ghost_margin is None:
        ghost_margin = default_ghost_margin(pc)
    if ghost_margin < 0:
        raise InvalidConfig(f"ghost margin {ghost_margin} < 0")
    x = pc.positions
    lo, hi = x.min(axis=0), x.max(axis=0)
    axis = int(np.argmax(hi - lo))
    coord = np.sort(x[:, axis], kind="stable")
    N = len(pc)
    cuts = [lo[axis]]
    for k in range(1, n):
        i = (k * N) // n
        cuts.append(0.5 * (coord[i - 1] + coord[i]))
    cuts.append(hi[axis])

    parts = []
    for k in range(n):
        bmin, bmax = lo.copy(), hi.copy()
        bmin[axis], bmax[axis] = cuts[k], cuts[k + 1]
        p = Partition(k, bmin, bmax, float(ghost_margin), np.zeros(0, dtype=np.int64),
                      np.zeros(0, dtype=np.int64), lo.copy(), hi.copy(), axis)
        own = owns_array(p, x)
        p.owned_indices = np.nonzero(own)[0]
        if ghost_margin > 0:
            near = _box_distance(x, bmin, bmax) <= ghost_margin
            p.ghost_indices = np.nonzero(near & ~own)[0]
        p.owned_points = pc.subset(p.owned_indices)
        p.ghost_points = pc.subset(p.ghost_indices)
        parts.append(p)
    return parts


def merge_models(models: list[SplatModel], partitions: list[Partition]) -> SplatModel:
    """Concatenate per-partition models, keeping each Gaussian only if its
    final position is owned by the partition that trained it.

    Positions are clamped into the global domain before the ownership test,
    so Gaussians that drift past the outer faces stay with the nearest slab.
    """
    if len(models) != len(partitions):
        raise MismatchedCounts(f"{len(models)} models for {len(partitions)} partitions")
    by_id = {p.id: p for p in partitions}
    if len(by_id) != len(partitions):
        raise MismatchedCounts("duplicate partition ids")
    seen = set()
    for m in models:
        if m.origin_partition is None or m.origin_partition not in by_id:
            raise MismatchedCounts(f"model has origin_partition={m.origin_partition}")
        if m.origin_partition in seen:
            raise MismatchedCounts(f"two models claim partition {m.origin_partition}")
        seen.add(m.origin_partition)
    kept = []
    for m in sorted(models, key=lambda m: m.origin_partition):
        p = by_id[m.origin_partition]
        pos = np.clip(m.mu, p.domain_min, p.domain_max)
        kept.append(m.subset(np.nonzero(owns_array(p, pos))[0]))
    iteration = max((m.iteration for m in models), default=0)
    return SplatModel.concatenate(kept, iteration=iteration)
