# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel compositing kernels.

Both functions walk the depth-sorted splat list of each tile. Gaussians are
addressed by their original index; tile lists hold those indices in
compositing order. All loops run without the GIL so shard threads overlap.
"""
import numpy as np
from libc.math cimport exp

BACKEND = "cython"


def forward(const double[:, ::1] mean2d, const double[:, ::1] conic,
            const double[::1] opacity, const double[:, ::1] color,
            const long long[::1] tile_offsets, const long long[::1] tile_splats,
            int width, int height, int tile_size, const double[::1] bg,
            double alpha_cutoff, double max_d2, double t_floor,
            double[:, :, ::1] out_color, double[:, ::1] out_alpha, int[:, ::1] out_count):
    cdef int n_tx = (width + tile_size - 1) // tile_size
    cdef int n_ty = (height + tile_size - 1) // tile_size
    cdef int tx, ty, px, py, x1, y1, cnt
    cdef long long j, t, g
    cdef double fx, fy, dx, dy, d2, a, T, w, r, gr, b
    with nogil:
        for ty in range(n_ty):
            y1 = min((ty + 1) * tile_size, height)
            for tx in range(n_tx):
                x1 = min((tx + 1) * tile_size, width)
                t = ty * n_tx + tx
                for py in range(ty * tile_size, y1):
                    fy = py + 0.5
                    for px in range(tx * tile_size, x1):
                        fx = px + 0.5
                        T = 1.0
                        r = 0.0
                        gr = 0.0
                        b = 0.0
                        cnt = 0
                        for j in range(tile_offsets[t], tile_offsets[t + 1]):
                            g = tile_splats[j]
                            dx = fx - mean2d[g, 0]
                            dy = fy - mean2d[g, 1]
                            d2 = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                            if d2 > max_d2:
                                continue
                            a = opacity[g] * exp(-0.5 * d2)
                            if a < alpha_cutoff:
                                continue
                            w = a * T
                            r = r + color[g, 0] * w
                            gr = gr + color[g, 1] * w
                            b = b + color[g, 2] * w
                            T = T * (1.0 - a)
                            cnt = cnt + 1
                            if T < t_floor:
                                break
                        out_color[py, px, 0] = r + T * bg[0]
                        out_color[py, px, 1] = gr + T * bg[1]
                        out_color[py, px, 2] = b + T * bg[2]
                        out_alpha[py, px] = 1.0 - T
                        out_count[py, px] = cnt


def backward_tile_row(const double[:, ::1] mean2d, const double[:, ::1] conic,
                      const double[::1] opacity, const double[:, ::1] color,
                      const long long[::1] tile_offsets, const long long[::1] tile_splats,
                      int width, int height, int tile_size, const double[::1] bg,
                      double alpha_cutoff, double max_d2, double t_floor,
                      const double[:, :, ::1] dl_dcolor, int ty,
                      double[:, ::1] g_mean2d, double[:, ::1] g_conic,
                      double[::1] g_opacity, double[:, ::1] g_color, long long[::1] hits):
    """Accumulate gradients from the pixels of tile row ``ty`` into the given buffers."""
    cdef int n_tx = (width + tile_size - 1) // tile_size
    cdef int tx, px, py, x1, y0, y1, k, kk
    cdef long long j, t, g, maxlen = 1
    cdef double fx, fy, dx, dy, d2, a, T, w, e, da, dp, Rr, Rg, Rb, cr, cg, cb, lr, lg, lb
    for t in range(ty * n_tx, (ty + 1) * n_tx):
        maxlen = max(maxlen, tile_offsets[t + 1] - tile_offsets[t])
    cdef long long[::1] s_idx = np.empty(maxlen, dtype=np.int64)
    cdef double[::1] s_a = np.empty(maxlen, dtype=np.float64)
    cdef double[::1] s_T = np.empty(maxlen, dtype=np.float64)
    y0 = ty * tile_size
    y1 = min(y0 + tile_size, height)
    with nogil:
        for tx in range(n_tx):
            x1 = min((tx + 1) * tile_size, width)
            t = ty * n_tx + tx
            for py in range(y0, y1):
                fy = py + 0.5
                for px in range(tx * tile_size, x1):
                    lr = dl_dcolor[py, px, 0]
                    lg = dl_dcolor[py, px, 1]
                    lb = dl_dcolor[py, px, 2]
                    if lr == 0.0 and lg == 0.0 and lb == 0.0:
                        continue
                    fx = px + 0.5
                    # replay the forward pass for this pixel
                    T = 1.0
                    k = 0
                    for j in range(tile_offsets[t], tile_offsets[t + 1]):
                        g = tile_splats[j]
                        dx = fx - mean2d[g, 0]
                        dy = fy - mean2d[g, 1]
                        d2 = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                        if d2 > max_d2:
                            continue
                        a = opacity[g] * exp(-0.5 * d2)
                        if a < alpha_cutoff:
                            continue
                        s_idx[k] = g
                        s_a[k] = a
                        s_T[k] = T
                        k = k + 1
                        T = T * (1.0 - a)
                        if T < t_floor:
                            break
                    # back to front; R is the color seen behind the current splat
                    Rr = bg[0]
                    Rg = bg[1]
                    Rb = bg[2]
                    for kk in range(k - 1, -1, -1):
                        g = s_idx[kk]
                        a = s_a[kk]
                        T = s_T[kk]
                        cr = color[g, 0]
                        cg = color[g, 1]
                        cb = color[g, 2]
                        w = a * T
                        g_color[g, 0] += w * lr
                        g_color[g, 1] += w * lg
                        g_color[g, 2] += w * lb
                        da = T * ((cr - Rr) * lr + (cg - Rg) * lg + (cb - Rb) * lb)
                        Rr = cr * a + (1.0 - a) * Rr
                        Rg = cg * a + (1.0 - a) * Rg
                        Rb = cb * a + (1.0 - a) * Rb
                        dx = fx - mean2d[g, 0]
                        dy = fy - mean2d[g, 1]
                        e = a / opacity[g]
                        g_opacity[g] += da * e
                        dp = da * a
                        g_mean2d[g, 0] += dp * (conic[g, 0] * dx + conic[g, 1] * dy)
                        g_mean2d[g, 1] += dp * (conic[g, 1] * dx + conic[g, 2] * dy)
                        g_conic[g, 0] += -0.5 * dp * dx * dx
                        g_conic[g, 1] += -dp * dx * dy
                        g_conic[g, 2] += -0.5 * dp * dy * dy
                        hits[g] += 1
