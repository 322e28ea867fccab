"""Pure numpy implementation of the compositing kernels.

Same signatures and arithmetic as the compiled module. Work is vectorized
over the pixels of one tile while splats are visited in depth order, so the
per-pixel floating point sequence matches the compiled loop.
"""
import numpy as np

BACKEND = "numpy"


def _tile_pixels(tx, ty, width, height, tile_size):
    x0, y0 = tx * tile_size, ty * tile_size
    x1, y1 = min(x0 + tile_size, width), min(y0 + tile_size, height)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return ys, xs, (slice(y0, y1), slice(x0, x1))


def _tile_alphas(ids, ys, xs, mean2d, conic, opacity, alpha_cutoff, max_d2, t_floor):
    """Per-splat alphas (K,h,w) and transmittance before each splat, with
    skipped and terminated entries zeroed."""
    fx = xs + 0.5
    fy = ys + 0.5
    K = len(ids)
    alphas = np.zeros((K,) + xs.shape)
    Tbefore = np.zeros((K,) + xs.shape)
    T = np.ones(xs.shape)
    alive = np.ones(xs.shape, dtype=bool)
    for k, g in enumerate(ids):
        dx = fx - mean2d[g, 0]
        dy = fy - mean2d[g, 1]
        d2 = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
        a = opacity[g] * np.exp(-0.5 * d2)
        use = alive & (d2 <= max_d2) & (a >= alpha_cutoff)
        a = np.where(use, a, 0.0)
        alphas[k] = a
        Tbefore[k] = np.where(use, T, 0.0)
        T = np.where(use, T * (1.0 - a), T)
        alive &= ~(use & (T < t_floor))
    return alphas, Tbefore, T


def forward(mean2d, conic, opacity, color, tile_offsets, tile_splats, width, height,
            tile_size, bg, alpha_cutoff, max_d2, t_floor, out_color, out_alpha, out_count):
    n_tx = (width + tile_size - 1) // tile_size
    n_ty = (height + tile_size - 1) // tile_size
    for ty in range(n_ty):
        for tx in range(n_tx):
            t = ty * n_tx + tx
            ys, xs, sl = _tile_pixels(tx, ty, width, height, tile_size)
            ids = tile_splats[tile_offsets[t]:tile_offsets[t + 1]]
            alphas, Tb, T = _tile_alphas(ids, ys, xs, mean2d, conic, opacity,
                                         alpha_cutoff, max_d2, t_floor)
            acc = np.zeros(xs.shape + (3,))
            for k, g in enumerate(ids):
                w = alphas[k] * Tb[k]
                acc = acc + color[g][None, None, :] * w[..., None]
            out_color[sl] = acc + T[..., None] * np.asarray(bg)[None, None, :]
            out_alpha[sl] = 1.0 - T
            out_count[sl] = (alphas > 0).sum(axis=0) if len(ids) else 0


def backward_tile_row(mean2d, conic, opacity, color, tile_offsets, tile_splats, width, height,
                      tile_size, bg, alpha_cutoff, max_d2, t_floor, dl_dcolor, ty,
                      g_mean2d, g_conic, g_opacity, g_color, hits):
    n_tx = (width + tile_size - 1) // tile_size
    for tx in range(n_tx):
        t = ty * n_tx + tx
        ys, xs, sl = _tile_pixels(tx, ty, width, height, tile_size)
        ids = tile_splats[tile_offsets[t]:tile_offsets[t + 1]]
        if len(ids) == 0:
            continue
        L = dl_dcolor[sl]
        live = np.any(L != 0.0, axis=-1)
        alphas, Tb, _ = _tile_alphas(ids, ys, xs, mean2d, conic, opacity,
                                     alpha_cutoff, max_d2, t_floor)
        fx = xs + 0.5
        fy = ys + 0.5
        R = np.broadcast_to(np.asarray(bg, dtype=np.float64), xs.shape + (3,)).copy()
        for k in range(len(ids) - 1, -1, -1):
            g = ids[k]
            a = alphas[k]
            used = (a > 0) & live
            if not used.any():
                continue
            T = Tb[k]
            c = color[g]
            w = a * T
            g_color[g] += (w[..., None] * L)[used].sum(axis=0)
            da = T * ((c[None, None, :] - R) * L).sum(axis=-1)
            R = np.where(used[..., None], c[None, None, :] * a[..., None] + (1.0 - a[..., None]) * R, R)
            dx = fx - mean2d[g, 0]
            dy = fy - mean2d[g, 1]
            e = a / opacity[g]
            dp = da * a
            g_opacity[g] += (da * e)[used].sum()
            g_mean2d[g, 0] += (dp * (conic[g, 0] * dx + conic[g, 1] * dy))[used].sum()
            g_mean2d[g, 1] += (dp * (conic[g, 1] * dx + conic[g, 2] * dy))[used].sum()
            g_conic[g, 0] += (-0.5 * dp * dx * dx)[used].sum()
            g_conic[g, 1] += (-dp * dx * dy)[used].sum()
            g_conic[g, 2] += (-0.5 * dp * dy * dy)[used].sum()
            hits[g] += int(used.sum())
