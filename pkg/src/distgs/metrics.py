"""Image quality metrics and artifact diagnostics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .core import Camera, Image, SplatModel
from .errors import DimensionMismatch, EmptyBand, EmptyInterior, TooSmall

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _px(img):
    return img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)


def _check_same(a, b):
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images on [0, 1]; 99.0 when equal."""
    a, b = _px(a), _px(b)
    _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def filter2d(x: np.ndarray, w: np.ndarray, mode: str = "constant") -> np.ndarray:
    """Separable correlation over the two spatial axes of ``(H, W, C)``."""
    y = correlate1d(x, w, axis=0, mode=mode, cval=0.0)
    return correlate1d(y, w, axis=1, mode=mode, cval=0.0)


def ssim_map(x: np.ndarray, y: np.ndarray, w: np.ndarray | None = None):
    """Per-pixel SSIM with zero padding, plus the intermediates needed for its
    gradient. Inputs are ``(H, W, C)`` arrays."""
    w = gaussian_window_1d() if w is None else w
    mx = filter2d(x, w)
    my = filter2d(y, w)
    sxx = filter2d(x * x, w) - mx * mx
    syy = filter2d(y * y, w) - my * my
    sxy = filter2d(x * y, w) - mx * my
    A = 2.0 * mx * my + SSIM_C1
    B = 2.0 * sxy + SSIM_C2
    C = mx * mx + my * my + SSIM_C1
    D = sxx + syy + SSIM_C2
    s = (A * B) / (C * D)
    return s, (mx, my, A, B, C, D)


def ssim_map_grad(x, y, s, inter, g, w: np.ndarray | None = None) -> np.ndarray:
    """Adjoint of :func:`ssim_map` w.r.t. ``x`` given dL/d(map) = ``g``.

    The Gaussian window is symmetric and zero padded, so the transpose of the
    filter is the filter itself.
    """
    w = gaussian_window_1d() if w is None else w
    mx, my, A, B, C, D = inter
    CD = C * D
    dA = g * B / CD
    dB = g * A / CD
    dC = -g * s / C
    dD = -g * s / D
    g_mx = dA * 2.0 * my + dC * 2.0 * mx - dD * 2.0 * mx - dB * 2.0 * my
    g_xx = dD
    g_xy = 2.0 * dB
    return filter2d(g_mx, w) + 2.0 * x * filter2d(g_xx, w) + y * filter2d(g_xy, w)


def ssim(a, b) -> float:
    """Mean SSIM over all fully-inside 11x11 windows, averaged over channels."""
    a, b = _px(a), _px(b)
    _check_same(a, b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise TooSmall(f"SSIM needs both sides >= {SSIM_WINDOW}, got {a.shape[:2]}")
    s, _ = ssim_map(a, b)
    r = SSIM_WINDOW // 2
    return float(np.mean(s[r:a.shape[0] - r, r:a.shape[1] - r]))


@dataclass
class EvalResult:
    psnr: float
    ssim: float
    per_view: list = field(default_factory=list)

    def to_row(self, label: str = "") -> dict:
        return {"label": label, "psnr": f"{self.psnr:.4f}", "ssim": f"{self.ssim:.6f}", "lpips": "n/a"}


def evaluate(rendered: list, truths: list) -> EvalResult:
    per = []
    for i, (r, t) in enumerate(zip(rendered, truths)):
        per.append({"view": i, "psnr": psnr(r, t), "ssim": ssim(r, t)})
    if not per:
        return EvalResult(float("nan"), float("nan"), [])
    return EvalResult(float(np.mean([p["psnr"] for p in per])), float(np.mean([p["ssim"] for p in per])), per)


def boundary_band_error(rendered, truth, band_mask, foreground=None) -> dict:
    """Mean absolute error inside the boundary band versus the rest of the foreground."""
    r, t = _px(rendered), _px(truth)
    _check_same(r, t)
    band = _px(band_mask)[..., 0] > 0.5
    fg = np.ones(band.shape, dtype=bool) if foreground is None else _px(foreground)[..., 0] > 0.5
    band = band & fg
    interior = fg & ~band
    if not band.any():
        raise EmptyBand("band mask selects no foreground pixels")
    if not interior.any():
        raise EmptyInterior("band covers the whole foreground")
    err = np.abs(r - t).mean(axis=-1)
    band_mae = float(err[band].mean())
    interior_mae = float(err[interior].mean())
    if interior_mae == 0.0:
        ratio = 1.0 if band_mae == 0.0 else math.inf
    else:
        ratio = band_mae / interior_mae
    return {"band_mae": band_mae, "interior_mae": interior_mae, "ratio": ratio}


def background_splat_count(model: SplatModel, cams: list[Camera], coverage: list, min_views: int = 3) -> int:
    """Number of Gaussians whose center projects outside the coverage mask
    (or off screen) in at least ``min_views`` of the given views."""
    if len(model) == 0:
        return 0
    outside = np.zeros(len(model), dtype=np.int64)
    for cam, cov in zip(cams, coverage):
        m = _px(cov)[..., 0] > 0.5
        uv, depth = cam.project_points(model.mu)
        col = np.floor(uv[:, 0])
        row = np.floor(uv[:, 1])
        on = (depth > cam.near) & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
        inside = np.zeros(len(model), dtype=bool)
        inside[on] = m[row[on].astype(np.int64), col[on].astype(np.int64)]
        outside += ~inside
    return int(np.sum(outside >= min_views))


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned plain-text table."""
    cells = [[str(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    line = "  ".join(c.rjust(w) for c, w in zip(columns, widths))
    out = [line, "  ".join("-" * w for w in widths)]
    out += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(out) + "\n"


def to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    wr.writeheader()
    for r in rows:
        wr.writerow(r)
    return buf.getvalue()
