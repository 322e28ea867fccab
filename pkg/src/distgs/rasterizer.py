"""Tile-based forward rendering, geometric masks and the analytic backward pass."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import Camera, Image, Projection, SplatModel, project, quat_to_rotmat, sigmoid
from .errors import InvalidConfig, StaleForward


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    alpha_cutoff: float = 1.0 / 255.0
    sigma_cutoff: float = 3.0
    background: tuple = (1.0, 1.0, 1.0)
    transmittance_floor: float = 1e-4

    def __post_init__(self):
        ts = self.tile_size
        if ts < 1 or ts & (ts - 1):
            raise InvalidConfig(f"tile_size {ts} is not a positive power of two")
        if not 0.0 < self.alpha_cutoff < 1.0:
            raise InvalidConfig(f"alpha_cutoff {self.alpha_cutoff} outside (0, 1)")
        if not 1.0 <= self.sigma_cutoff <= 6.0:
            raise InvalidConfig(f"sigma_cutoff {self.sigma_cutoff} outside [1, 6]")
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))


@dataclass
class _Raster:
    """Screen-space state shared by forward and backward."""

    proj: Projection
    conic: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    tile_offsets: np.ndarray
    tile_splats: np.ndarray
    n_tx: int
    n_ty: int


@dataclass
class RenderOutput:
    color: Image
    alpha: Image
    per_pixel_contributor_count: np.ndarray
    splat_order: np.ndarray
    iteration: int = 0
    n_gaussians: int = 0
    _raster: _Raster | None = field(default=None, repr=False)


@dataclass
class GradientBuffer:
    """Per-Gaussian gradients for one backward pass (or a reduction of several).

    ``screen_grad`` is dL/d(mean2d) in pixels; ``screen_norm`` the norm of the
    same gradient expressed in normalized device units, which is what the
    densification threshold is compared against. ``touch`` counts how many
    views a Gaussian contributed gradient to.
    """

    mu: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    screen_grad: np.ndarray
    screen_norm: np.ndarray
    touch: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffer":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros((n, 2)), np.zeros(n), np.zeros(n, dtype=np.int64))

    def __len__(self):
        return len(self.mu)

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in SplatModel.PARAMS}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params().values())


def _conic(cov2d):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


def _rasterize(model: SplatModel, cam: Camera, cfg: RenderConfig) -> tuple[_Raster, np.ndarray]:
    n = len(model)
    W, H, ts = cam.width, cam.height, cfg.tile_size
    n_tx, n_ty = -(-W // ts), -(-H // ts)
    proj = project(model.mu, model.log_scale, model.rot, cam)
    conic = _conic(proj.cov2d) if n else np.zeros((0, 3))
    k = cfg.sigma_cutoff
    mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
    rx = k * np.sqrt(proj.cov2d[:, 0, 0])
    ry = k * np.sqrt(proj.cov2d[:, 1, 1])
    with np.errstate(invalid="ignore"):
        x_lo = np.ceil(mx - rx - 0.5)
        x_hi = np.floor(mx + rx - 0.5)
        y_lo = np.ceil(my - ry - 0.5)
        y_hi = np.floor(my + ry - 0.5)
        vis = (proj.valid & (proj.depth < cam.far) & np.isfinite(x_lo) & np.isfinite(y_lo)
               & (x_hi >= 0) & (x_lo <= W - 1) & (y_hi >= 0) & (y_lo <= H - 1))
    idx = np.nonzero(vis)[0]
    order = idx[np.lexsort((idx, proj.depth[idx]))]

    tx0 = (np.clip(x_lo[order], 0, W - 1) // ts).astype(np.int64)
    tx1 = (np.clip(x_hi[order], 0, W - 1) // ts).astype(np.int64)
    ty0 = (np.clip(y_lo[order], 0, H - 1) // ts).astype(np.int64)
    ty1 = (np.clip(y_hi[order], 0, H - 1) // ts).astype(np.int64)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    per = nx * ny
    total = int(per.sum())
    rank = np.repeat(np.arange(len(order)), per)
    local = np.arange(total) - np.repeat(np.cumsum(per) - per, per)
    ty = np.repeat(ty0, per) + local // np.repeat(nx, per)
    tx = np.repeat(tx0, per) + local % np.repeat(nx, per)
    tile = ty * n_tx + tx
    # stable by tile, then depth rank
    srt = np.lexsort((rank, tile))
    tile_splats = np.ascontiguousarray(order[rank[srt]], dtype=np.int64)
    counts = np.bincount(tile, minlength=n_tx * n_ty)
    tile_offsets = np.zeros(n_tx * n_ty + 1, dtype=np.int64)
    np.cumsum(counts, out=tile_offsets[1:])

    raster = _Raster(proj, np.ascontiguousarray(conic), np.ascontiguousarray(sigmoid(model.opacity_logit)),
                     np.ascontiguousarray(model.color), tile_offsets, tile_splats, n_tx, n_ty)
    return raster, order


def _kernel_args(r: _Raster, cam: Camera, cfg: RenderConfig):
    return (np.ascontiguousarray(r.proj.mean2d), r.conic, r.opacity, r.color,
            r.tile_offsets, r.tile_splats, cam.width, cam.height, cfg.tile_size,
            np.asarray(cfg.background, dtype=np.float64), cfg.alpha_cutoff,
            cfg.sigma_cutoff ** 2, cfg.transmittance_floor)


def render(model: SplatModel, cam: Camera, cfg: RenderConfig = RenderConfig(), backend=None) -> RenderOutput:
    """Front-to-back alpha compositing of ``model`` seen from ``cam``."""
    impl = kernels.get_backend(backend)
    H, W = cam.height, cam.width
    raster, order = _rasterize(model, cam, cfg)
    color = np.empty((H, W, 3))
    alpha = np.empty((H, W))
    count = np.empty((H, W), dtype=np.int32)
    impl.forward(*_kernel_args(raster, cam, cfg), color, alpha, count)
    return RenderOutput(Image(color), Image(alpha), count, order, model.iteration, len(model), raster)


def _row_gradients(impl, args, dl, ty, n):
    bufs = (np.zeros((n, 2)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)), np.zeros(n, dtype=np.int64))
    impl.backward_tile_row(*args, dl, ty, *bufs)
    return bufs


_POOLS: dict[int, ThreadPoolExecutor] = {}


def _pool(shards: int) -> ThreadPoolExecutor:
    if shards not in _POOLS:
        _POOLS[shards] = ThreadPoolExecutor(max_workers=shards, thread_name_prefix="shard")
    return _POOLS[shards]


def screen_gradients(model: SplatModel, cam: Camera, cfg: RenderConfig, output: RenderOutput,
                     dL_dpixels, shards: int = 1, backend=None):
    """Gradients w.r.t. the screen-space quantities (mean2d, conic, opacity, color).

    Pixel rows are processed one tile row at a time into separate buffers that
    are summed in ascending row order, so the result does not depend on how
    the rows are split across ``shards`` threads.
    """
    if output.iteration != model.iteration or output.n_gaussians != len(model) or output._raster is None:
        raise StaleForward(f"forward pass at iteration {output.iteration} with {output.n_gaussians} "
                           f"Gaussians, model at iteration {model.iteration} with {len(model)}")
    impl = kernels.get_backend(backend)
    n = len(model)
    dl = dL_dpixels.pixels if isinstance(dL_dpixels, Image) else np.asarray(dL_dpixels, dtype=np.float64)
    dl = np.ascontiguousarray(dl.reshape(cam.height, cam.width, 3), dtype=np.float64)
    r = output._raster
    args = _kernel_args(r, cam, cfg)
    rows = list(range(r.n_ty))
    if shards <= 1 or len(rows) <= 1:
        results = [_row_gradients(impl, args, dl, ty, n) for ty in rows]
    else:
        bands = [b for b in np.array_split(np.asarray(rows), shards) if len(b)]

        def run_band(band):
            return [_row_gradients(impl, args, dl, int(ty), n) for ty in band]

        futures = [_pool(shards).submit(run_band, b) for b in bands]
        results = [res for f in futures for res in f.result()]
    g_mean2d, g_conic, g_opac, g_color, hits = (np.zeros((n, 2)), np.zeros((n, 3)), np.zeros(n),
                                                np.zeros((n, 3)), np.zeros(n, dtype=np.int64))
    for gm, gc, go, gcol, h in results:
        g_mean2d += gm
        g_conic += gc
        g_opac += go
        g_color += gcol
        hits += h
    return g_mean2d, g_conic, g_opac, g_color, hits


def _quat_grad(q, gR):
    """dL/dq for unnormalized ``q`` given dL/dR of its normalized rotation."""
    nrm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / nrm
    w, x, y, z = qn.T
    G = gR
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
              + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    gy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
              - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    gz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
              + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    gq = np.stack([gw, gx, gy, gz], axis=1)
    return (gq - qn * np.sum(qn * gq, axis=1, keepdims=True)) / nrm


def chain_to_params(model: SplatModel, cam: Camera, proj: Projection, conic,
                    g_mean2d, g_conic, g_opac, g_color, hits) -> GradientBuffer:
    n = len(model)
    buf = GradientBuffer.zeros(n)
    if n == 0:
        return buf
    f = cam.focal
    W = cam.world_to_camera()
    t = proj.t_cam
    z = np.where(proj.valid, t[:, 2], 1.0)

    Ci = np.empty((n, 2, 2))
    Ci[:, 0, 0], Ci[:, 0, 1], Ci[:, 1, 0], Ci[:, 1, 1] = conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]
    Gc = np.empty((n, 2, 2))
    Gc[:, 0, 0], Gc[:, 1, 1] = g_conic[:, 0], g_conic[:, 2]
    Gc[:, 0, 1] = Gc[:, 1, 0] = 0.5 * g_conic[:, 1]
    G2 = -Ci @ Gc @ Ci
    T = proj.T
    Tt = np.swapaxes(T, 1, 2)
    G3 = Tt @ G2 @ T
    G3 = 0.5 * (G3 + np.swapaxes(G3, 1, 2))
    gT = 2.0 * G2 @ T @ proj.cov3d
    gJ = gT @ W.T

    gt = np.zeros((n, 3))
    z2, z3 = z * z, z * z * z
    gt[:, 2] += gJ[:, 0, 0] * (-f / z2) + gJ[:, 1, 1] * (-f / z2)
    gt[:, 0] += gJ[:, 0, 2] * (-f / z2)
    gt[:, 2] += gJ[:, 0, 2] * (2 * f * t[:, 0] / z3)
    gt[:, 1] += gJ[:, 1, 2] * (-f / z2)
    gt[:, 2] += gJ[:, 1, 2] * (2 * f * t[:, 1] / z3)
    gt[:, 0] += g_mean2d[:, 0] * f / z
    gt[:, 2] += -g_mean2d[:, 0] * f * t[:, 0] / z2
    gt[:, 1] += g_mean2d[:, 1] * f / z
    gt[:, 2] += -g_mean2d[:, 1] * f * t[:, 1] / z2
    buf.mu = gt @ W

    s = np.exp(model.log_scale)
    R = quat_to_rotmat(model.rot)
    M = R * s[:, None, :]
    gM = 2.0 * G3 @ M
    buf.log_scale = np.sum(gM * R, axis=1) * s
    buf.rot = _quat_grad(model.rot, gM * s[:, None, :])

    o = sigmoid(model.opacity_logit)
    buf.opacity_logit = g_opac * o * (1.0 - o)
    buf.color = g_color.copy()

    buf.screen_grad = g_mean2d.copy()
    ndc = g_mean2d * np.array([0.5 * cam.width, 0.5 * cam.height])
    buf.screen_norm = np.linalg.norm(ndc, axis=1)
    buf.touch = (hits > 0).astype(np.int64)
    # culled Gaussians get exact zeros, whatever the chain produced
    dead = hits == 0
    for k in SplatModel.PARAMS:
        getattr(buf, k)[dead] = 0.0
    return buf


def backward(model: SplatModel, cam: Camera, cfg: RenderConfig, output: RenderOutput,
             dL_dpixels, shards: int = 1, backend=None) -> GradientBuffer:
    """Analytic adjoint of :func:`render` for a pixel-space loss gradient."""
    g = screen_gradients(model, cam, cfg, output, dL_dpixels, shards=shards, backend=backend)
    r = output._raster
    return chain_to_params(model, cam, r.proj, r.conic, *g)


def render_mask(points, cam: Camera, footprint_px: float = 1.0, dilation_px: float = 2.0) -> Image:
    """Binary coverage mask: pixels whose center lies within
    ``footprint_px + dilation_px`` of a projected point in front of the camera."""
    if footprint_px < 0.5:
        raise InvalidConfig(f"footprint_px {footprint_px} < 0.5")
    pts = np.asarray(getattr(points, "positions", points), dtype=np.float64).reshape(-1, 3)
    H, W = cam.height, cam.width
    mask = np.zeros((H, W), dtype=bool)
    if len(pts):
        uv, depth = cam.project_points(pts)
        ok = (depth > cam.near) & (depth < cam.far) & np.all(np.isfinite(uv), axis=1)
        rad = footprint_px + dilation_px
        uv = uv[ok]
        uv = uv[(uv[:, 0] > -rad) & (uv[:, 0] < W + rad) & (uv[:, 1] > -rad) & (uv[:, 1] < H + rad)]
        if len(uv):
            base = np.floor(uv).astype(np.int64)
            R = int(math.ceil(rad)) + 1
            r2 = rad * rad
            for oy in range(-R, R + 1):
                for ox in range(-R, R + 1):
                    px = base[:, 0] + ox
                    py = base[:, 1] + oy
                    d2 = (px + 0.5 - uv[:, 0]) ** 2 + (py + 0.5 - uv[:, 1]) ** 2
                    hit = (d2 <= r2) & (px >= 0) & (px < W) & (py >= 0) & (py < H)
                    mask[py[hit], px[hit]] = True
    return Image(mask.astype(np.float64))
