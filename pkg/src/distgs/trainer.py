"""Per-partition optimization: masked L1 + D-SSIM loss, Adam, densification."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .core import LOG_SCALE_MAX, LOG_SCALE_MIN, Camera, Image, SplatModel, quat_to_rotmat, sigmoid
from .errors import DimensionMismatch, InvalidConfig, NoViews
from .metrics import ssim_map, ssim_map_grad
from .rasterizer import GradientBuffer, RenderConfig, backward, render

log = logging.getLogger(__name__)


@dataclass
class TrainView:
    cam: Camera
    ground_truth: Image
    mask: Image

    def __post_init__(self):
        shape = (self.cam.height, self.cam.width)
        if self.ground_truth.shape[:2] != shape or self.mask.shape[:2] != shape:
            raise DimensionMismatch(f"view images {self.ground_truth.shape}/{self.mask.shape} "
                                    f"do not match camera {shape}")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    lr_mu: float = 4e-4
    lr_scale: float = 5e-3
    lr_rot: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    loss_lambda: float = 0.2
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 5e-3
    densify_stop_fraction: float = 0.5
    percent_dense: float = 0.01
    scene_extent: float | None = None
    mu_lr_decay: float = 0.01
    max_gaussians: int = 20000
    seed: int = 0

    def __post_init__(self):
        if min(self.lr_mu, self.lr_scale, self.lr_rot, self.lr_opacity, self.lr_color) <= 0:
            raise InvalidConfig("learning rates must be > 0")
        if not 0.0 <= self.loss_lambda <= 1.0:
            raise InvalidConfig(f"loss_lambda {self.loss_lambda} outside [0, 1]")
        if self.iterations < 0:
            raise InvalidConfig("iterations must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _mask_bool(mask) -> np.ndarray:
    m = mask.pixels if isinstance(mask, Image) else np.asarray(mask)
    return m.reshape(m.shape[0], m.shape[1], -1)[..., 0] > 0.5


def masked_loss(rendered, view: TrainView, loss_lambda: float = 0.2):
    """``(1-lambda) * L1 + lambda * (1 - SSIM)`` restricted to masked-in pixels.

    Both images are zeroed outside the mask before SSIM, and the SSIM map is
    averaged over masked-in window centers only, so nothing outside the mask
    can influence the loss or its gradient.
    Returns ``(loss, dL_dpixels)``.
    """
    r = rendered.pixels if isinstance(rendered, Image) else np.asarray(rendered, dtype=np.float64)
    gt = view.ground_truth.pixels
    if r.shape != gt.shape or r.shape[:2] != view.mask.shape[:2]:
        raise DimensionMismatch(f"rendered {r.shape} vs truth {gt.shape} vs mask {view.mask.shape}")
    m = _mask_bool(view.mask)
    n_in = int(m.sum())
    grad = np.zeros_like(r)
    if n_in == 0:
        return 0.0, Image(grad)
    C = r.shape[2]
    loss = 0.0
    if loss_lambda < 1.0:
        diff = r[m] - gt[m]
        loss += (1.0 - loss_lambda) * float(np.abs(diff).sum()) / (n_in * C)
        grad[m] += (1.0 - loss_lambda) * np.sign(diff) / (n_in * C)
    if loss_lambda > 0.0:
        m3 = m[..., None].astype(np.float64)
        x = r * m3
        y = np.where(m[..., None], gt, 0.0)
        s, inter = ssim_map(x, y)
        loss += loss_lambda * (1.0 - float(s[m].sum()) / (n_in * C))
        g_map = np.zeros_like(s)
        g_map[m] = -loss_lambda / (n_in * C)
        grad += ssim_map_grad(x, y, s, inter, g_map) * m3
    grad[~m] = 0.0
    return loss, Image(grad)


class Adam:
    """Adam over the five parameter groups of a :class:`SplatModel`."""

    def __init__(self, model: SplatModel, lrs: dict, betas=(0.9, 0.999), eps=1e-15):
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in model.params().items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params().items()}

    def step(self, model: SplatModel, grads: GradientBuffer, lr_override: dict | None = None):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.b1 ** t
        bc2 = 1.0 - self.b2 ** t
        for k in SplatModel.PARAMS:
            g = getattr(grads, k)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            lr = (lr_override or {}).get(k, self.lrs[k])
            p = getattr(model, k)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def select(self, keep: np.ndarray, n_new: int = 0):
        """Keep rows ``keep`` and append ``n_new`` zeroed rows."""
        for d in (self.m, self.v):
            for k, a in d.items():
                a = a[keep]
                if n_new:
                    a = np.concatenate([a, np.zeros((n_new,) + a.shape[1:])])
                d[k] = a

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m_{k}": v for k, v in self.m.items()}
        out.update({f"v_{k}": v for k, v in self.v.items()})
        out["step"] = np.array([self.step_count])
        return out

    def load_state(self, arrays):
        for k in SplatModel.PARAMS:
            self.m[k] = np.array(arrays[f"m_{k}"])
            self.v[k] = np.array(arrays[f"v_{k}"])
        self.step_count = int(arrays["step"][0])


def sanitize(model: SplatModel):
    """Post-step projections: unit quaternions, clamped scales and colors."""
    model.rot /= np.linalg.norm(model.rot, axis=1, keepdims=True)
    np.clip(model.log_scale, LOG_SCALE_MIN, LOG_SCALE_MAX, out=model.log_scale)
    np.clip(model.color, 0.0, 1.0, out=model.color)


class DensifyStats:
    def __init__(self, n: int):
        self.norm_sum = np.zeros(n)
        self.touch = np.zeros(n, dtype=np.int64)

    def add(self, g: GradientBuffer):
        self.norm_sum += g.screen_norm
        self.touch += g.touch

    def as_buffer(self) -> GradientBuffer:
        buf = GradientBuffer.zeros(len(self.norm_sum))
        buf.screen_norm = self.norm_sum.copy()
        buf.touch = self.touch.copy()
        return buf


def densify_and_prune(model: SplatModel, stats: GradientBuffer, cfg: TrainConfig,
                      optimizer: Adam | None = None, rng: np.random.Generator | None = None) -> SplatModel:
    """Clone or split Gaussians with large mean screen-space gradients, then
    drop nearly transparent ones.

    Small Gaussians (max scale <= ``percent_dense * scene_extent``) are
    cloned in place; large ones are replaced by two children at 0.8x scale
    drawn from the parent's footprint. Optimizer moments are carried for
    surviving Gaussians and zero for new ones.
    """
    n = len(model)
    if len(stats) != n:
        raise DimensionMismatch(f"stats for {len(stats)} Gaussians, model has {n}")
    rng = rng or np.random.default_rng([cfg.seed, model.iteration])
    extent = cfg.scene_extent
    if extent is None:
        lo, hi = model.aabb()
        extent = 0.5 * float(np.linalg.norm(hi - lo))
    mean_grad = np.where(stats.touch > 0, stats.screen_norm / np.maximum(stats.touch, 1), 0.0)
    hot = mean_grad > cfg.densify_grad_threshold
    room = max(cfg.max_gaussians - n, 0)
    if hot.sum() > room:
        # keep the strongest candidates, ties by index
        cand = np.nonzero(hot)[0]
        cand = cand[np.lexsort((cand, -mean_grad[cand]))][:room]
        hot = np.zeros(n, dtype=bool)
        hot[cand] = True
    big = np.exp(model.log_scale).max(axis=1) > cfg.percent_dense * extent
    clone = np.nonzero(hot & ~big)[0]
    split = np.nonzero(hot & big)[0]

    parts = [model]
    if len(clone):
        parts.append(model.subset(clone))
    if len(split):
        s = np.exp(model.log_scale[split])
        R = quat_to_rotmat(model.rot[split])
        children = []
        for _ in range(2):
            z = rng.standard_normal((len(split), 3)) * s
            c = model.subset(split)
            c.mu = c.mu + np.einsum("nij,nj->ni", R, z)
            c.log_scale = c.log_scale + math.log(0.8)
            children.append(c)
        parts.extend(children)
    grown = SplatModel.concatenate(parts, origin_partition=model.origin_partition, iteration=model.iteration)
    keep = np.ones(len(grown), dtype=bool)
    keep[split] = False  # parents replaced by their children
    keep &= sigmoid(grown.opacity_logit) >= cfg.prune_opacity
    if not keep.any():
        keep[int(np.argmax(grown.opacity_logit))] = True
    idx = np.nonzero(keep)[0]
    if optimizer is not None:
        n_new = len(grown) - n
        optimizer.select(np.arange(n), n_new)
        optimizer.select(idx)
    out = grown.subset(idx)
    out.origin_partition, out.iteration = model.origin_partition, model.iteration
    return out


def _extent_from_views(views: list[TrainView]) -> float:
    centers = np.array([v.cam.position for v in views])
    return 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1))) or 1.0


@dataclass
class TrainResult:
    model: SplatModel
    losses: list = field(default_factory=list)
    size_before_densify: int = 0
    optimizer: Adam | None = None


def train_partition(model: SplatModel, views: list[TrainView], cfg: TrainConfig, shards: int = 1,
                    render_cfg: RenderConfig = RenderConfig(),
                    checkpoint: Callable | None = None, checkpoint_every: int = 0,
                    progress: Callable | None = None, return_result: bool = False):
    """Optimize a copy of ``model`` against ``views``.

    Each step renders one view (round-robin over a seeded permutation),
    back-propagates the masked loss, and applies one Adam update. With
    ``shards > 1`` the backward pass runs in that many threads over
    contiguous row bands; the reduction order is fixed, so the result is
    the same for any shard count.
    """
    if not views:
        raise NoViews("train_partition needs at least one view")
    if shards < 1:
        raise InvalidConfig(f"shards {shards} < 1")
    model = model.copy()
    result = TrainResult(model, size_before_densify=len(model))
    if cfg.iterations == 0:
        return result if return_result else model
    if cfg.scene_extent is None:
        cfg = replace(cfg, scene_extent=_extent_from_views(views))
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(views))
    lrs = {"mu": cfg.lr_mu, "log_scale": cfg.lr_scale, "rot": cfg.lr_rot,
           "opacity_logit": cfg.lr_opacity, "color": cfg.lr_color}
    opt = Adam(model, lrs)
    stats = DensifyStats(len(model))
    stop = int(cfg.densify_stop_fraction * cfg.iterations)
    for it in range(cfg.iterations):
        view = views[order[it % len(views)]]
        out = render(model, view.cam, render_cfg)
        loss, dl = masked_loss(out.color, view, cfg.loss_lambda)
        grads = backward(model, view.cam, render_cfg, out, dl, shards=shards)
        stats.add(grads)
        lr_mu = cfg.lr_mu * cfg.mu_lr_decay ** (it / max(cfg.iterations - 1, 1))
        opt.step(model, grads, {"mu": lr_mu})
        sanitize(model)
        model.iteration += 1
        result.losses.append(loss)
        step = it + 1
        if cfg.densify_interval > 0 and step % cfg.densify_interval == 0 and step <= stop:
            result.size_before_densify = len(model)
            model = densify_and_prune(model, stats.as_buffer(), cfg, opt,
                                      np.random.default_rng([cfg.seed, step]))
            stats = DensifyStats(len(model))
        if progress is not None:
            progress(step, loss, model)
        if checkpoint is not None and checkpoint_every and step % checkpoint_every == 0:
            checkpoint(model, opt, step, cfg)
    result.model = model
    result.optimizer = opt
    return result if return_result else model
