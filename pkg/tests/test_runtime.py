import os

import numpy as np
import pytest

from distgs import io as dio
from distgs.core import Camera
from distgs.errors import InvalidConfig, IoError, ManifestMismatch, MissingBaseline, Timeout, WorkerFailure
from distgs.isosurface import extract_isosurface, make_volume, seed_gaussians
from distgs.partition import partition_cloud
from distgs.rasterizer import render
from distgs.runtime import (JobSpec, RigSpec, RunSummary, build_views, gather, gt_scale_for, make_rig,
                            read_runs_csv, run_job, scaling_report, split_rig)
from distgs.trainer import TrainConfig, train_partition

from test_metrics import FIXTURES


@pytest.fixture(scope="module")
def blob_cloud(tmp_path_factory):
    pc = extract_isosurface(make_volume("two-blob", (16, 16, 16)), 0.5)
    path = tmp_path_factory.mktemp("cloud") / "cloud.ply"
    dio.write_cloud_ply(path, pc)
    return pc, path


def small_spec(path, out, **kw):
    base = dict(rig=RigSpec(4, 2, 32), n_test=2,
                train={"iterations": 30, "densify_interval": 10, "densify_grad_threshold": 2e-3})
    base.update(kw)
    return JobSpec(str(path), str(out), **base)


def test_single_partition_equals_direct_training(blob_cloud, tmp_path):
    pc, path = blob_cloud
    spec = small_spec(path, tmp_path / "run", seed=5)
    res = run_job(spec)
    cams = make_rig(pc, spec.rig)
    train_idx, _ = split_rig(len(cams), 5, n_test=2)
    views = build_views(pc, [cams[i] for i in train_idx], gt_scale_for(pc), spec.render)
    direct = train_partition(seed_gaussians(pc), views, TrainConfig(**{**spec.train.to_dict(), "seed": 5}))
    assert res.merged_model.equals(direct)
    assert dio.read_splat_ply(tmp_path / "run" / "merged.ply").equals(direct)


def test_two_runs_byte_identical(blob_cloud, tmp_path):
    _, path = blob_cloud
    for name in ("a", "b"):
        run_job(small_spec(path, tmp_path / name, n_partitions=2, seed=1))
    for f in ("merged.ply", "metrics.csv", "metrics_per_view.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_each_partition_renders_its_own_blob(blob_cloud, tmp_path):
    pc, path = blob_cloud
    res = run_job(small_spec(path, tmp_path / "r", n_partitions=2))
    m = res.merged_model
    cut = res.partitions[0].box_max[0]
    cam = Camera((0, 0, 2.5), (0, 0, 0), width=64, height=64)
    uv, _ = cam.project_points(np.array([[-0.42, 0, 0], [0.42, 0, 0]]))
    (lx, ly), (rx, ry) = np.floor(uv).astype(int)

    def covered(img, x, y):
        return np.abs(img.pixels[y, x] - 1.0).max() > 0.05

    left = render(m.subset(np.nonzero(m.mu[:, 0] < cut)[0]), cam).color
    right = render(m.subset(np.nonzero(m.mu[:, 0] >= cut)[0]), cam).color
    both = render(m, cam).color
    assert covered(left, lx, ly) and not covered(left, rx, ry)
    assert covered(right, rx, ry) and not covered(right, lx, ly)
    assert covered(both, lx, ly) and covered(both, rx, ry)


def test_worker_failure_names_partition_and_spares_others(blob_cloud, tmp_path, monkeypatch):
    _, path = blob_cloud
    monkeypatch.setenv("DISTGS_FAULT_PARTITION", "1")
    monkeypatch.setenv("DISTGS_FAULT_AFTER", "12")
    spec = small_spec(path, tmp_path / "f", n_partitions=2, checkpoint_every=5, max_workers=1)
    with pytest.raises(WorkerFailure) as exc:
        run_job(spec)
    assert exc.value.partition_id == 1
    assert "injected fault" in str(exc.value)
    ck0 = sorted((tmp_path / "f" / "partition_000" / "checkpoints").glob("*.ply"))
    assert [p.stem for p in ck0] == [f"step_{s:06d}" for s in (5, 10, 15, 20, 25, 30)]
    for p in ck0:
        assert dio.read_splat_ply(p).iteration == int(p.stem.split("_")[1])
        assert np.load(p.with_suffix(".npz"))["step"][0] == int(p.stem.split("_")[1])
    ck1 = sorted((tmp_path / "f" / "partition_001" / "checkpoints").glob("*.ply"))
    assert [p.stem for p in ck1] == ["step_000005", "step_000010"]
    assert not (tmp_path / "f" / "merged.ply").exists()


def test_timeout(blob_cloud, tmp_path):
    _, path = blob_cloud
    spec = small_spec(path, tmp_path / "t", timeout_s=0.2, train={"iterations": 100000})
    with pytest.raises(Timeout) as exc:
        run_job(spec)
    assert exc.value.partition_id == 0


def test_gather_rejects_foreign_rig(blob_cloud, tmp_path):
    pc, path = blob_cloud
    run_job(small_spec(path, tmp_path / "g", n_partitions=2))
    parts = partition_cloud(pc, 2)
    dirs = [tmp_path / "g" / f"partition_{i:03d}" for i in range(2)]
    good = dio.read_rig(tmp_path / "g" / "rig.json")[1]["rig_hash"]
    models, reports = gather(parts, dirs, good)
    assert [r.partition_id for r in reports] == [0, 1]
    with pytest.raises(ManifestMismatch):
        gather(parts, dirs, "0" * 64)
    with pytest.raises(ManifestMismatch):
        gather(parts, dirs[::-1], good)


def test_missing_input(tmp_path):
    with pytest.raises(IoError):
        run_job(JobSpec(str(tmp_path / "none.ply"), str(tmp_path / "o")))


def test_job_spec_json(tmp_path):
    spec = JobSpec("in.ply", "out", n_partitions=3, train={"iterations": 7}, rig={"resolution": 48})
    dio.write_json(tmp_path / "job.json", spec.to_dict())
    back = JobSpec.load(tmp_path / "job.json")
    assert back == spec and back.train.iterations == 7 and back.rig.resolution == 48
    with pytest.raises(InvalidConfig):
        JobSpec.from_dict({"input": "a", "output_dir": "b", "bogus": 1})
    with pytest.raises(InvalidConfig):
        JobSpec("a", "b", n_partitions=0)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("DISTGS_WORKERS", "3")
    assert JobSpec("a", "b", n_partitions=8).worker_count() == 3
    assert JobSpec("a", "b", n_partitions=8, max_workers=2).worker_count() == 2
    monkeypatch.delenv("DISTGS_WORKERS")
    assert JobSpec("a", "b", n_partitions=8).worker_count() == 8


def test_split_rig_is_seeded_partition():
    tr, te = split_rig(28, 0, n_test=4)
    assert len(te) == 4 and sorted(tr + te) == list(range(28))
    assert (tr, te) == split_rig(28, 0, n_test=4)
    assert split_rig(20, 0)[1].__len__() == 2


def test_scaling_identity_and_errors():
    rep = scaling_report([RunSummary("base", 10.0), RunSummary("same", 10.0)])
    assert [r["speedup"] for r in rep["rows"]] == [1.0, 1.0]
    with pytest.raises(MissingBaseline):
        scaling_report([RunSummary("only", 1.0)])
    with pytest.raises(MissingBaseline):
        scaling_report([RunSummary("a", 1.0), RunSummary("b", 2.0)], baseline="c")


def test_scaling_reference_fixture():
    runs = read_runs_csv(FIXTURES / "rm_2048_scaling.csv")
    rep = scaling_report(runs, baseline="4 nodes")
    speed = rep["rows"][1]["speedup"]
    assert speed == pytest.approx(32.03 / 10.18)
    assert f"{speed:.2f}" == "3.15" and round(speed, 1) == 3.1
    assert "3.15" in rep["text"] and "3.15" in rep["csv"]
    assert len({len(line) for line in rep["text"].splitlines()}) == 1
    assert rep["csv"].splitlines()[0] == "config,wall_seconds,speedup,psnr,ssim,lpips"


def test_worker_entry_usage():
    from distgs.worker import main
    assert main([]) == 2
    assert os.environ.get("DISTGS_FAULT_PARTITION") is None
