"""Time the compiled and numpy rasterizer backends on the same scene.

    python3 benchmarks/bench_kernels.py [--dims 16] [--resolution 128] [--repeat 3]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from distgs.core import build_orbital_cameras
from distgs.isosurface import extract_isosurface, make_volume, seed_gaussians
from distgs.kernels import get_backend
from distgs.rasterizer import RenderConfig, backward, render


def scene(dims: int, resolution: int):
    pc = extract_isosurface(make_volume("gyroid", (dims,) * 3), 0.0)
    model = seed_gaussians(pc, "knn", k=3, opacity=0.3)
    cam = build_orbital_cameras(np.zeros(3), 3.2, 1, 1, resolution)[0]
    return model, cam


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, default=16, help="gyroid grid size (sets the splat count)")
    ap.add_argument("--resolution", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args(argv)
    model, cam = scene(a.dims, a.resolution)
    cfg = RenderConfig()
    print(f"{len(model)} splats, {a.resolution}x{a.resolution} px, best of {a.repeat}")
    rows = []
    ref = None
    for name in ("cython", "numpy"):
        try:
            get_backend(name)
        except ImportError:
            print(f"{name:>7}: not available")
            continue
        out = render(model, cam, cfg, backend=name)
        g = np.random.default_rng(0).normal(size=out.color.pixels.shape)
        fwd = best_of(lambda: render(model, cam, cfg, backend=name), a.repeat)
        bwd = best_of(lambda: backward(model, cam, cfg, out, g, backend=name), a.repeat)
        grads = backward(model, cam, cfg, out, g, backend=name)
        if ref is None:
            ref = (out.color.pixels, grads.mu)
            diff = 0.0
        else:
            diff = max(np.abs(out.color.pixels - ref[0]).max(), np.abs(grads.mu - ref[1]).max())
        rows.append((name, fwd, bwd))
        print(f"{name:>7}: forward {fwd * 1e3:9.2f} ms  backward {bwd * 1e3:9.2f} ms  max|diff| {diff:.1e}")
    if len(rows) == 2:
        print(f"speedup: forward {rows[1][1] / rows[0][1]:.1f}x  backward {rows[1][2] / rows[0][2]:.1f}x")


if __name__ == "__main__":
    main()
