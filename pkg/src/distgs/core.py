"""Gaussian primitives, cameras, images and the projection math shared by
every other module.

Conventions: right-handed world, y up. Camera space has x to the right,
y down and z along the viewing direction, so pixel rows grow downwards.
Pixel ``(row i, col j)`` has its center at continuous coordinate
``(j + 0.5, i + 0.5)``; the principal point is the image center.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import BehindCamera, InvalidCamera, InvalidRig

LOG_SCALE_MIN = math.log(1e-7)
LOG_SCALE_MAX = math.log(1e3)
SCREEN_DILATION = 0.3  # px^2 added to every projected covariance


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return float(np.log(p) - np.log1p(-p)) if np.ndim(p) == 0 else np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian3D:
    mu: tuple
    log_scale: tuple
    rot: tuple = (1.0, 0.0, 0.0, 0.0)
    opacity_logit: float = 0.0
    color: tuple = (0.5, 0.5, 0.5)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


class SplatModel:
    """A collection of Gaussians stored as parallel arrays.

    Arrays are ``mu (N,3)``, ``log_scale (N,3)``, ``rot (N,4)`` quaternions in
    ``w,x,y,z`` order, ``opacity_logit (N,)`` and ``color (N,3)``.
    """

    PARAMS = ("mu", "log_scale", "rot", "opacity_logit", "color")

    def __init__(self, mu, log_scale, rot, opacity_logit, color,
                 origin_partition: int | None = None, iteration: int = 0):
        self.mu = np.array(mu, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        self.log_scale = np.array(log_scale, dtype=np.float64).reshape(n, 3)
        self.rot = np.array(rot, dtype=np.float64).reshape(n, 4)
        self.opacity_logit = np.array(opacity_logit, dtype=np.float64).reshape(n)
        self.color = np.array(color, dtype=np.float64).reshape(n, 3)
        self.origin_partition = origin_partition
        self.iteration = int(iteration)

    @classmethod
    def empty(cls) -> "SplatModel":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                   np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D], **kw) -> "SplatModel":
        gs = list(gaussians)
        if not gs:
            return cls.empty()
        return cls([g.mu for g in gs], [g.log_scale for g in gs], [g.rot for g in gs],
                   [g.opacity_logit for g in gs], [g.color for g in gs], **kw)

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return [Gaussian3D(tuple(self.mu[i]), tuple(self.log_scale[i]), tuple(self.rot[i]),
                           float(self.opacity_logit[i]), tuple(self.color[i]))
                for i in range(len(self))]

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def __len__(self) -> int:
        return len(self.mu)

    def copy(self) -> "SplatModel":
        return SplatModel(self.mu, self.log_scale, self.rot, self.opacity_logit, self.color,
                          self.origin_partition, self.iteration)

    def subset(self, idx) -> "SplatModel":
        idx = np.asarray(idx)
        return SplatModel(self.mu[idx], self.log_scale[idx], self.rot[idx],
                          self.opacity_logit[idx], self.color[idx],
                          self.origin_partition, self.iteration)

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.PARAMS}

    def equals(self, other: "SplatModel", atol: float = 0.0) -> bool:
        if len(self) != len(other):
            return False
        for k in self.PARAMS:
            a, b = getattr(self, k), getattr(other, k)
            if atol == 0.0:
                if not np.array_equal(a, b):
                    return False
            elif not np.allclose(a, b, rtol=0.0, atol=atol):
                return False
        return True

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mu.min(axis=0), self.mu.max(axis=0)

    @staticmethod
    def concatenate(models: Sequence["SplatModel"], **kw) -> "SplatModel":
        if not models:
            return SplatModel.empty()
        return SplatModel(*(np.concatenate([getattr(m, k) for m in models]) for k in SplatModel.PARAMS), **kw)

    def __repr__(self):
        return f"SplatModel(n={len(self)}, iteration={self.iteration}, origin_partition={self.origin_partition})"


@dataclass(frozen=True)
class Camera:
    position: tuple
    target: tuple
    up: tuple = (0.0, 1.0, 0.0)
    fov_y: float = math.radians(50.0)
    width: int = 64
    height: int = 64
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        for name in ("position", "target", "up"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.width < 8 or self.height < 8:
            raise InvalidCamera(f"resolution {self.width}x{self.height} below 8 px")
        if not 0.0 < self.fov_y < math.pi:
            raise InvalidCamera(f"fov_y {self.fov_y} outside (0, pi)")
        if not self.near < self.far:
            raise InvalidCamera("near must be < far")
        fwd = np.subtract(self.target, self.position)
        n = np.linalg.norm(fwd)
        if n == 0.0:
            raise InvalidCamera("position equals target")
        cross = np.cross(fwd / n, self.up)
        if np.linalg.norm(cross) < 1e-9 * max(np.linalg.norm(self.up), 1e-300):
            raise InvalidCamera("up vector parallel to viewing direction")

    @property
    def focal(self) -> float:
        return 0.5 * self.height / math.tan(0.5 * self.fov_y)

    @property
    def principal_point(self) -> tuple[float, float]:
        return 0.5 * self.width, 0.5 * self.height

    def world_to_camera(self) -> np.ndarray:
        """Rotation whose rows are the camera's right, down and forward axes."""
        f = np.subtract(self.target, self.position)
        f = f / np.linalg.norm(f)
        r = np.cross(f, self.up)
        r = r / np.linalg.norm(r)
        u = np.cross(r, f)
        return np.stack([r, -u, f])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.position)) @ self.world_to_camera().T

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates ``(N,2)`` and camera depth ``(N,)``; no culling."""
        t = self.to_camera(points)
        cx, cy = self.principal_point
        f = self.focal
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([f * t[:, 0] / t[:, 2] + cx, f * t[:, 1] / t[:, 2] + cy], axis=1)
        return uv, t[:, 2]

    def rolled(self, theta: float) -> "Camera":
        """Same camera rotated by ``theta`` about its viewing axis."""
        f = np.subtract(self.target, self.position)
        f = f / np.linalg.norm(f)
        up = np.asarray(self.up, dtype=np.float64)
        # Rodrigues about the forward axis
        up = up * math.cos(theta) + np.cross(f, up) * math.sin(theta) + f * np.dot(f, up) * (1 - math.cos(theta))
        return Camera(self.position, self.target, tuple(up), self.fov_y, self.width, self.height,
                      self.near, self.far)

    def with_resolution(self, width: int, height: int) -> "Camera":
        return Camera(self.position, self.target, self.up, self.fov_y, width, height, self.near, self.far)


@dataclass
class Image:
    """Row-major ``(height, width, channels)`` float image."""

    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"image must have 1 or 3 channels, got shape {px.shape}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self):
        return self.pixels.shape

    @classmethod
    def full(cls, width: int, height: int, value) -> "Image":
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return cls(np.broadcast_to(value, (height, width, len(value))).copy())

    def clamped(self) -> "Image":
        return Image(np.clip(self.pixels, 0.0, 1.0))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices ``(...,3,3)`` from quaternions ``(...,4)`` (normalized here)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance_from_params(log_scale, rot) -> np.ndarray:
    """World-space covariance ``R diag(exp(log_scale))^2 R^T``.

    Accepts a single Gaussian or stacked arrays; the result is symmetrized
    explicitly so it is symmetric to the last bit.
    """
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    M = quat_to_rotmat(rot) * s[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities for one camera (vectorized)."""

    mean2d: np.ndarray   # (N,2)
    cov2d: np.ndarray    # (N,2,2), dilated
    depth: np.ndarray    # (N,)
    t_cam: np.ndarray    # (N,3)
    T: np.ndarray        # (N,2,3) Jacobian times world-to-camera rotation
    cov3d: np.ndarray    # (N,3,3)
    valid: np.ndarray    # (N,) depth > near


def project(mu, log_scale, rot, cam: Camera) -> Projection:
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    W = cam.world_to_camera()
    t = (mu - np.asarray(cam.position)) @ W.T
    valid = t[:, 2] > cam.near
    z = np.where(valid, t[:, 2], 1.0)
    f = cam.focal
    cx, cy = cam.principal_point
    mean2d = np.stack([f * t[:, 0] / z + cx, f * t[:, 1] / z + cy], axis=1)
    J = np.zeros((len(mu), 2, 3))
    J[:, 0, 0] = f / z
    J[:, 0, 2] = -f * t[:, 0] / (z * z)
    J[:, 1, 1] = f / z
    J[:, 1, 2] = -f * t[:, 1] / (z * z)
    T = J @ W
    cov3d = covariance_from_params(np.asarray(log_scale).reshape(-1, 3), np.asarray(rot).reshape(-1, 4))
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += SCREEN_DILATION
    cov2d[:, 1, 1] += SCREEN_DILATION
    return Projection(mean2d, cov2d, t[:, 2], t, T, cov3d, valid)


def project_gaussian(g: Gaussian3D, cam: Camera) -> dict:
    """Project a single Gaussian; raises ``BehindCamera`` when depth <= near."""
    p = project([g.mu], [g.log_scale], [g.rot], cam)
    if not p.valid[0]:
        raise BehindCamera(f"depth {p.depth[0]:.6g} <= near {cam.near}")
    return {"mean2d": p.mean2d[0], "cov2d": p.cov2d[0], "depth": float(p.depth[0])}


def build_orbital_cameras(center, radius: float, n_azimuth: int, n_elevation: int,
                          resolution: int = 64, *, elevation_range=(-60.0, 60.0),
                          fov_y: float = math.radians(50.0), near: float | None = None,
                          far: float | None = None) -> list[Camera]:
    """Cameras on a sphere around ``center``, elevation-major order.

    Azimuth 0 lies on +x; elevations (degrees) are spread evenly over
    ``elevation_range``, or 0 when a single ring is requested.
    """
    if n_azimuth < 1 or n_elevation < 1 or not radius > 0:
        raise InvalidRig(f"n_azimuth={n_azimuth} n_elevation={n_elevation} radius={radius}")
    lo, hi = elevation_range
    if not -90.0 < lo <= hi < 90.0:
        raise InvalidRig(f"elevation range {elevation_range} must lie strictly inside (-90, 90)")
    center = np.asarray(center, dtype=np.float64)
    elevs = [0.0] if n_elevation == 1 else np.linspace(lo, hi, n_elevation)
    near = 0.01 * radius if near is None else near
    far = 10.0 * radius if far is None else far
    cams = []
    for el in elevs:
        e = math.radians(el)
        for k in range(n_azimuth):
            a = 2.0 * math.pi * k / n_azimuth
            d = np.array([math.cos(e) * math.cos(a), math.sin(e), math.cos(e) * math.sin(a)])
            cams.append(Camera(tuple(center + radius * d), tuple(center), (0.0, 1.0, 0.0),
                               fov_y, resolution, resolution, near, far))
    return cams


def bounding_sphere(points: np.ndarray) -> tuple[np.ndarray, float]:
    """AABB-centered sphere enclosing ``points``."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    c = 0.5 * (lo + hi)
    return c, float(np.max(np.linalg.norm(points - c, axis=1)))
