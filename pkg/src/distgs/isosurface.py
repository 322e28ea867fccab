"""Synthetic scalar volumes, isosurface point extraction and Gaussian seeding."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .core import SplatModel, logit
from .errors import EmptyCloud, InvalidConfig, IsovalueOutOfRange, UnknownKind

KINDS = ("sphere", "gyroid", "two-blob")

# Default isovalue per kind; the field definitions below are built around these.
DEFAULT_ISOVALUE = {"sphere": 0.6, "gyroid": 0.0, "two-blob": 0.5}


@dataclass
class Volume:
    dims: tuple
    spacing: float
    origin: tuple
    values: np.ndarray  # shape dims, indexed [i, j, k] along x, y, z

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.origin = tuple(float(o) for o in self.origin)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.dims)
        if min(self.dims) < 2:
            raise InvalidConfig(f"volume dims {self.dims} must be >= 2 per axis")
        if not np.all(np.isfinite(self.values)):
            raise InvalidConfig("volume values must be finite")

    def grid(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        axes = [self.origin[a] + self.spacing * np.arange(self.dims[a]) for a in range(3)]
        return np.meshgrid(*axes, indexing="ij")


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(n, 3)

    def __len__(self):
        return len(self.positions)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        return PointCloud(self.positions[idx], self.colors[idx], self.normals[idx])

    def aabb(self):
        return self.positions.min(axis=0), self.positions.max(axis=0)


def make_volume(kind: str, dims=(32, 32, 32), noise_amplitude: float = 0.0, seed: int = 0) -> Volume:
    """Sample an analytic field on ``[-1, 1]^3`` at voxel centers.

    ``sphere`` is the distance to the origin (surface at 0.6), ``gyroid`` the
    usual trigonometric minimal surface (surface at 0), ``two-blob`` a
    metaball field of two overlapping blobs along x (surface at 0.5).
    """
    if kind not in KINDS:
        raise UnknownKind(f"unknown volume kind {kind!r}; expected one of {KINDS}")
    dims = tuple(int(d) for d in (dims if np.ndim(dims) else (dims,) * 3))
    if min(dims) < 8:
        raise InvalidConfig(f"dims {dims} must each be >= 8")
    spacing = 2.0 / max(dims)
    origin = tuple(-0.5 * spacing * (d - 1) for d in dims)
    vol = Volume(dims, spacing, origin, np.zeros(dims))
    x, y, z = vol.grid()
    if kind == "sphere":
        v = np.sqrt(x * x + y * y + z * z)
    elif kind == "gyroid":
        w = 2.0 * np.pi / 1.0
        v = np.sin(w * x) * np.cos(w * y) + np.sin(w * y) * np.cos(w * z) + np.sin(w * z) * np.cos(w * x)
    else:
        c = 0.42
        r2 = 0.16
        v = (np.exp(-((x - c) ** 2 + y * y + z * z) / r2) + np.exp(-((x + c) ** 2 + y * y + z * z) / r2))
    if noise_amplitude:
        v = v + noise_amplitude * np.random.default_rng(seed).standard_normal(dims)
    vol.values = v
    return vol


def normal_shading(positions: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Default transfer function: matte shading baked to RGB.

    Base color varies smoothly with position; a fixed headlight direction
    adds diffuse shading so images carry structure to learn from.
    """
    base = 0.25 + 0.5 * (0.5 + 0.5 * np.tanh(1.5 * positions[:, [0, 1, 2]]))
    base = base * np.array([1.0, 0.8, 0.6]) + np.array([0.0, 0.1, 0.2])
    light = np.array([0.4, 0.8, 0.45])
    light = light / np.linalg.norm(light)
    diffuse = np.abs(normals @ light)
    return np.clip(base * (0.35 + 0.65 * diffuse[:, None]), 0.0, 1.0)


def constant_color(rgb=(0.2, 0.4, 0.8)) -> Callable:
    def tf(positions, normals):
        return np.broadcast_to(np.asarray(rgb, dtype=np.float64), positions.shape).copy()
    return tf


def extract_isosurface(vol: Volume, isovalue: float, color_map: Callable | None = None) -> PointCloud:
    """Marching-cubes vertices of the level set ``vol == isovalue``.

    Every grid edge whose endpoints straddle the isovalue carries exactly one
    vertex, shared by all triangles that use that edge, so the deduplicated
    vertex set is obtained directly from the sign changes along the three
    edge directions. Positions are linearly interpolated along the edge and
    normals are the interpolated central-difference gradient, oriented
    towards increasing field values.
    """
    v = vol.values
    lo, hi = float(v.min()), float(v.max())
    if not lo < isovalue < hi:
        raise IsovalueOutOfRange(f"isovalue {isovalue} not strictly inside ({lo}, {hi})")
    color_map = color_map or normal_shading
    grad = np.stack(np.gradient(v, vol.spacing), axis=-1)
    inside = v >= isovalue
    origin = np.asarray(vol.origin)
    pos_parts, nrm_parts = [], []
    for axis in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis] = slice(0, -1)
        b[axis] = slice(1, None)
        a, b = tuple(a), tuple(b)
        cross = inside[a] != inside[b]
        ijk = np.argwhere(cross)
        if not len(ijk):
            continue
        v0 = v[a][cross]
        v1 = v[b][cross]
        t = (isovalue - v0) / (v1 - v0)
        p = origin + vol.spacing * ijk.astype(np.float64)
        p[:, axis] += vol.spacing * t
        g = grad[a][cross] * (1.0 - t)[:, None] + grad[b][cross] * t[:, None]
        pos_parts.append(p)
        nrm_parts.append(g)
    positions = np.concatenate(pos_parts)
    normals = np.concatenate(nrm_parts)
    nn = np.linalg.norm(normals, axis=1, keepdims=True)
    fallback = np.zeros_like(normals)
    fallback[:, 0] = 1.0
    normals = np.where(nn > 0, normals / np.where(nn > 0, nn, 1.0), fallback)
    # canonical order: lexicographic on position, so the result is independent of axis order
    order = np.lexsort(positions.T[::-1])
    positions, normals = positions[order], normals[order]
    return PointCloud(positions, color_map(positions, normals), normals)


def nearest_neighbor_distances(points: np.ndarray, k: int = 1) -> np.ndarray:
    """Mean distance to the ``k`` nearest other points, per point."""
    if len(points) < 2:
        return np.zeros(len(points))
    k = min(k, len(points) - 1)
    d, _ = cKDTree(points).query(points, k=k + 1)
    return d[:, 1:].mean(axis=1)


def seed_gaussians(pc: PointCloud, initial_scale_rule: str = "knn", k: int = 3,
                   fixed_scale: float = 0.01, opacity: float = 0.1) -> SplatModel:
    """One isotropic Gaussian per point, identity rotation."""
    n = len(pc)
    if n == 0:
        raise EmptyCloud("cannot seed Gaussians from an empty point cloud")
    if initial_scale_rule == "knn":
        if n == 1:
            scale = np.full(1, fixed_scale)
        else:
            scale = nearest_neighbor_distances(pc.positions, k)
            scale = np.maximum(scale, 1e-7)
    elif initial_scale_rule == "fixed":
        scale = np.full(n, float(fixed_scale))
    else:
        raise InvalidConfig(f"unknown scale rule {initial_scale_rule!r}")
    log_scale = np.repeat(np.log(scale)[:, None], 3, axis=1)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return SplatModel(pc.positions.copy(), log_scale, rot, np.full(n, logit(opacity)), np.clip(pc.colors, 0, 1))
