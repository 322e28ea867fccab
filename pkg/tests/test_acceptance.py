"""Acceptance criteria, one test per criterion.

Each test records a single ``criterion N: PASS|FAIL|SKIP ...`` line; the
lines are printed together at the end of the pytest session. Tolerances
are the ones stated for each criterion and are not loosened here.
"""
from __future__ import annotations

import os
import time
from pathlib import Path

import numpy as np
import pytest

from distgs import io as dio
from distgs.cli import main as cli_main
from distgs.core import SplatModel, build_orbital_cameras
from distgs.isosurface import extract_isosurface, make_volume, seed_gaussians
from distgs.rasterizer import RenderConfig, backward, render, render_mask
from distgs.runtime import (JobSpec, RigSpec, artifact_diagnostics, build_views, gt_scale_for, make_rig,
                            read_runs_csv, run_job, scaling_report, split_rig)
from distgs.trainer import TrainConfig, masked_loss, train_partition

from conftest import ACCEPTANCE, ORACLE_CFG, fd_check, front_camera, oracle_case, random_model

FIXTURES = Path(__file__).parent / "fixtures"

# Desk-scale fixture shared by the reconstruction and ablation criteria:
# a 7 x 4 orbital rig (28 views, 4 held out) at 64 x 64.
RIG = RigSpec(n_azimuth=7, n_elevation=4, resolution=64)
N_TEST = 4
ITERATIONS = 2000
# Threshold on the mean screen-space gradient (normalized device units).
# The library default of 2e-4 sits below the typical gradient on these
# small scenes and would densify every Gaussian at every interval.
DENSIFY_THRESHOLD = 2e-3
ABLATION_SEEDS = (0, 1, 2)

pytestmark = pytest.mark.slow


def record(n, ok, detail):
    status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
    line = f"criterion {n}: {status}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def train_cfg(**kw):
    return {"iterations": ITERATIONS, "densify_grad_threshold": DENSIFY_THRESHOLD, **kw}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def blob(workdir):
    pc = extract_isosurface(make_volume("two-blob", (16, 16, 16)), 0.5)
    path = workdir / "two_blob.ply"
    dio.write_cloud_ply(path, pc)
    return pc, path


@pytest.fixture(scope="module")
def blob_runs(blob, workdir):
    """Cached two-blob jobs keyed by (seed, partitions, ghost margin, masks)."""
    pc, path = blob
    cache = {}

    def get(seed, n=2, ghost_margin=None, use_masks=True):
        key = (seed, n, ghost_margin, use_masks)
        if key not in cache:
            name = f"blob_s{seed}_p{n}_g{ghost_margin}_m{int(use_masks)}"
            cache[key] = run_job(JobSpec(str(path), str(workdir / name), n_partitions=n, rig=RIG, n_test=N_TEST,
                                         seed=seed, ghost_margin=ghost_margin, use_masks=use_masks,
                                         train=train_cfg()))
        return cache[key]
    return get


def diagnostics(res, pc):
    cams, doc = dio.read_rig(res.output_dir / "rig.json")
    test = [cams[i] for i in doc["test_indices"]]
    return artifact_diagnostics(res.merged_model, pc, res.partitions, test, gt_scale_for(pc), RenderConfig())


def test_criterion_01_gradient_oracle():
    t0 = time.perf_counter()
    worst = worst_abs = 0.0
    n_params = 0
    for seed in range(20):
        model, view, lam = oracle_case(seed)

        def loss(m):
            return masked_loss(render(m, view.cam, ORACLE_CFG).color, view, lam)[0]

        out = render(model, view.cam, ORACLE_CFG)
        _, dl = masked_loss(out.color, view, lam)
        rel, ab = fd_check(model, loss, backward(model, view.cam, ORACLE_CFG, out, dl), with_abs=True)
        worst, worst_abs = max(worst, rel), max(worst_abs, ab)
        n_params += sum(getattr(model, k).size for k in SplatModel.PARAMS)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 120
    record(1, ok, f"20 scenes, {n_params} parameters, max rel err {worst:.2e} (< 1e-4; abs errors under 1e-8 "
                  f"count as exact), max abs err {worst_abs:.1e}, {elapsed:.1f} s (< 120 s)")
    assert ok


def test_criterion_02_conservation_and_tiling():
    cam = front_camera(32)
    cfg = RenderConfig(background=(0.0, 0.0, 0.0), tile_size=8)
    worst_sum = worst_tile = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = random_model(rng, n=int(rng.integers(1, 16)), spread=0.7, scale=(0.02, 0.4))
        m.color[:] = 1.0
        out = render(m, cam, cfg)
        total = out.color.pixels[..., 0] + (1.0 - out.alpha.pixels[..., 0])
        worst_sum = max(worst_sum, float(np.abs(total - 1.0).max()))
        m.color[:] = rng.uniform(size=m.color.shape)
        tiled = render(m, cam, RenderConfig(tile_size=16)).color.pixels
        whole = render(m, cam, RenderConfig(tile_size=32)).color.pixels
        worst_tile = max(worst_tile, float(np.abs(tiled - whole).max()))
    ok = worst_sum <= 1e-6 and worst_tile <= 1e-12
    record(2, ok, f"100 scenes, |sum w + T - 1| max {worst_sum:.1e} (<= 1e-6), tiled vs untiled {worst_tile:.1e} "
                  f"(<= 1e-12)")
    assert ok


def test_criterion_03_reconstruction(workdir):
    pc = extract_isosurface(make_volume("sphere", (16, 16, 16)), 0.6)
    path = workdir / "sphere.ply"
    dio.write_cloud_ply(path, pc)
    t0 = time.perf_counter()
    res = run_job(JobSpec(str(path), str(workdir / "sphere"), rig=RIG, n_test=N_TEST, train=train_cfg()))
    elapsed = time.perf_counter() - t0
    ev = res.evaluation
    n_train = RIG.n_azimuth * RIG.n_elevation - N_TEST
    ok = ev.psnr >= 28.0 and ev.ssim >= 0.93 and elapsed < 600
    record(3, ok, f"sphere {len(pc)} seeds, {n_train} train / {N_TEST} test, {ITERATIONS} it: PSNR {ev.psnr:.2f} dB "
                  f"(>= 28), SSIM {ev.ssim:.4f} (>= 0.93), {elapsed:.0f} s (< 600 s)")
    assert ok


def test_criterion_04_ghost_ablation(blob, blob_runs):
    pc, _ = blob
    parts, ok = [], True
    for seed in ABLATION_SEEDS:
        with_g = diagnostics(blob_runs(seed), pc)["ratio"]
        without = diagnostics(blob_runs(seed, ghost_margin=0.0), pc)["ratio"]
        ok &= with_g <= 1.5 and with_g < without
        parts.append(f"seed {seed}: {with_g:.3f} vs {without:.3f}")
    record(4, ok, "band/interior ratio with ghosts (<= 1.5) vs without (must be larger): " + "; ".join(parts))
    assert ok


def test_criterion_05_mask_ablation(blob, blob_runs):
    pc, _ = blob
    parts, ok = [], True
    for seed in ABLATION_SEEDS:
        masked = diagnostics(blob_runs(seed), pc)["background_splats"]
        unmasked = diagnostics(blob_runs(seed, use_masks=False), pc)["background_splats"]
        ok &= unmasked > masked
        parts.append(f"seed {seed}: {unmasked} without vs {masked} with")
    record(5, ok, "background splats (outside coverage in >= 3 held-out views), must be strictly more without "
                  "masks: " + "; ".join(parts))
    assert ok


def test_criterion_06_distributed_fidelity(blob_runs):
    mono = blob_runs(0, n=1).evaluation.psnr
    dist = blob_runs(0, n=2).evaluation.psnr
    ok = abs(mono - dist) <= 2.0
    record(6, ok, f"two-blob, {ITERATIONS} it per partition: 2-partition PSNR {dist:.2f} dB vs 1-partition "
                  f"{mono:.2f} dB, gap {abs(mono - dist):.2f} dB (<= 2)")
    assert ok


def test_criterion_07a_scaling_report_arithmetic():
    rep = scaling_report(read_runs_csv(FIXTURES / "rm_2048_scaling.csv"), baseline="4 nodes")
    speed = rep["rows"][1]["speedup"]
    ok = round(speed, 1) == 3.1 and "3.15" in rep["text"]
    record("7a", ok, f"reference fixture 32.03 / 10.18 min -> speedup {speed:.4f}, reported {speed:.2f} "
                     f"(3.1 at one decimal)")
    assert ok


def test_criterion_07b_worker_scaling(blob, workdir):
    _, path = blob
    walls = {}
    for workers in (1, 4):
        spec = JobSpec(str(path), str(workdir / f"scale_w{workers}"), n_partitions=4, rig=RigSpec(7, 4, 32),
                       n_test=N_TEST, max_workers=workers, label=f"{workers} workers",
                       train={"iterations": 300, "densify_interval": 0})
        walls[workers] = run_job(spec).wall_seconds
    ratio = walls[4] / walls[1]
    cores = os.cpu_count() or 1
    detail = f"4-partition job, wall 4 workers / 1 worker = {walls[4]:.1f} / {walls[1]:.1f} s = {ratio:.2f} (<= 0.5)"
    if cores < 4:
        record("7b", "SKIP", f"{detail}; needs >= 4 cores, this machine has {cores}")
        pytest.skip(f"wall-time ratio needs >= 4 cores, found {cores}")
    ok = ratio <= 0.5
    record("7b", ok, detail)
    assert ok


def test_criterion_08_determinism(blob, workdir):
    _, path = blob
    outs = []
    for name in ("det_a", "det_b"):
        spec = JobSpec(str(path), str(workdir / name), n_partitions=2, rig=RigSpec(7, 4, 32), n_test=N_TEST,
                       seed=7, train={"iterations": 200, "densify_interval": 50,
                                      "densify_grad_threshold": DENSIFY_THRESHOLD})
        dio.write_json(workdir / f"{name}.json", spec.to_dict())
        assert cli_main(["run", "--spec", str(workdir / f"{name}.json")]) == 0
        outs.append(workdir / name)
    same = {f: (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in ("merged.ply", "metrics.csv")}
    ok = all(same.values())
    record(8, ok, "two `run` invocations, same spec and seed: " + ", ".join(
        f"{f} {'identical' if v else 'DIFFERENT'}" for f, v in same.items()))
    assert ok


def test_criterion_09_degenerate_distribution(blob, workdir):
    pc, path = blob
    spec = JobSpec(str(path), str(workdir / "p1"), rig=RigSpec(7, 4, 32), n_test=N_TEST, seed=3,
                   train={"iterations": 300, "densify_interval": 50, "densify_grad_threshold": DENSIFY_THRESHOLD})
    dio.write_json(workdir / "p1.json", spec.to_dict())
    assert cli_main(["run", "--spec", str(workdir / "p1.json"), "--partitions", "1", "--shards", "1"]) == 0
    dist = dio.read_splat_ply(workdir / "p1" / "merged.ply")
    cams = make_rig(pc, spec.rig)
    train_idx, _ = split_rig(len(cams), spec.seed, n_test=N_TEST)
    views = build_views(pc, [cams[i] for i in train_idx], gt_scale_for(pc), spec.render)
    cfg = TrainConfig(**{**spec.train.to_dict(), "seed": spec.seed})
    direct = train_partition(seed_gaussians(pc), views, cfg, shards=1)
    exact = dist.equals(direct)
    sharded = {s: train_partition(seed_gaussians(pc), views, cfg, shards=s) for s in (2, 4)}
    diff = max(max(float(np.abs(getattr(m, k) - getattr(direct, k)).max()) for k in SplatModel.PARAMS)
               if len(m) == len(direct) else np.inf for m in sharded.values())
    ok = exact and diff <= 1e-10
    record(9, ok, f"run --partitions 1 --shards 1 vs direct: {'bit-identical' if exact else 'DIFFERENT'}; "
                  f"shards 2,4 vs 1 max |diff| {diff:.1e} (<= 1e-10)")
    assert ok


def test_criterion_10_round_trips(blob_runs, workdir, tmp_path):
    res = blob_runs(0)
    model = res.merged_model
    dio.write_splat_ply(tmp_path / "m.ply", model)
    back = dio.read_splat_ply(tmp_path / "m.ply")
    ply_ok = all(getattr(back, k).tobytes() == getattr(model, k).tobytes() for k in SplatModel.PARAMS)

    cams, _ = dio.read_rig(res.output_dir / "rig.json")
    pc = dio.read_cloud_ply(res.output_dir / "partition_000" / "points.ply")
    mask = render_mask(pc, cams[0], 2.0, 2.0)
    dio.write_image(tmp_path / "mask.png", mask)
    mask_ok = np.array_equal(dio.read_image(tmp_path / "mask.png").pixels, mask.pixels)

    rig = build_orbital_cameras(np.array([0.1, -0.2, 0.3]), 2.7, 28, 16, 64)
    dio.write_rig(tmp_path / "rig.json", rig)
    rig_ok = dio.read_rig(tmp_path / "rig.json")[0] == rig
    ok = ply_ok and mask_ok and rig_ok
    record(10, ok, f"splat PLY bit-exact {ply_ok} ({len(model)} Gaussians), mask PNG bit-exact {mask_ok}, "
                   f"camera JSON value-exact {rig_ok} (448 cameras)")
    assert ok
