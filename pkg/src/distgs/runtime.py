"""End-to-end distributed job: partition, per-partition training in worker
processes, gather, merge and evaluate.

Workers are plain subprocesses (``python -m distgs.worker manifest.json``)
that talk to the coordinator only through files: a manifest in, a model PLY
and a JSON report out.
"""
from __future__ import annotations

import csv
import io as _stdio
import json
import logging
import math
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io as dio
from .core import Camera, Image, SplatModel, bounding_sphere, build_orbital_cameras
from .errors import InvalidConfig, IoError, ManifestMismatch, MissingBaseline, Timeout, WorkerFailure
from .isosurface import PointCloud, nearest_neighbor_distances, seed_gaussians
from .metrics import EvalResult, background_splat_count, boundary_band_error, evaluate, format_table, to_csv
from .partition import default_ghost_margin, merge_models, partition_cloud
from .rasterizer import RenderConfig, render, render_mask
from .trainer import TrainConfig, TrainView

log = logging.getLogger(__name__)

GT_OPACITY = 0.95
WORKERS_ENV = "DISTGS_WORKERS"


# --- shared pipeline steps -------------------------------------------------

@dataclass
class RigSpec:
    n_azimuth: int = 7
    n_elevation: int = 4
    resolution: int = 64
    radius_factor: float = 2.5
    elevation_range: tuple = (-60.0, 60.0)
    fov_y_deg: float = 50.0

    def __post_init__(self):
        self.elevation_range = tuple(float(e) for e in self.elevation_range)


def make_rig(pc: PointCloud, rig: RigSpec) -> list[Camera]:
    center, r = bounding_sphere(pc.positions)
    return build_orbital_cameras(center, rig.radius_factor * max(r, 1e-6), rig.n_azimuth, rig.n_elevation,
                                 rig.resolution, elevation_range=tuple(rig.elevation_range),
                                 fov_y=math.radians(rig.fov_y_deg))


def split_rig(n: int, seed: int, test_fraction: float = 0.1, n_test: int | None = None):
    """Seeded train/test split of camera indices (both returned sorted)."""
    if n_test is None:
        n_test = max(1, int(round(test_fraction * n))) if n > 1 else 0
    perm = np.random.default_rng(seed).permutation(n)
    return sorted(int(i) for i in perm[n_test:]), sorted(int(i) for i in perm[:n_test])


def gt_scale_for(pc: PointCloud, factor: float = 0.7) -> float:
    """World-space size of the splats used to render ground truth."""
    if len(pc) < 2:
        return 0.01
    return factor * float(np.median(nearest_neighbor_distances(pc.positions, 1)))


def ground_truth_model(pc: PointCloud, scale: float) -> SplatModel:
    return seed_gaussians(pc, "fixed", fixed_scale=scale, opacity=GT_OPACITY)


def mask_footprint(cam: Camera, pc: PointCloud, scale: float) -> float:
    """Three projected standard deviations of the nearest ground-truth splat."""
    _, depth = cam.project_points(pc.positions)
    depth = depth[depth > cam.near]
    if not len(depth):
        return 0.5
    return max(0.5, 3.0 * cam.focal * scale / float(depth.min()))


def build_views(pc: PointCloud, cams: list[Camera], gt_scale: float, render_cfg: RenderConfig,
                use_masks: bool = True, dilation_px: float = 2.0) -> list[TrainView]:
    gt = ground_truth_model(pc, gt_scale)
    views = []
    for cam in cams:
        img = render(gt, cam, render_cfg).color
        if use_masks:
            mask = render_mask(pc, cam, mask_footprint(cam, pc, gt_scale), dilation_px)
        else:
            mask = Image.full(cam.width, cam.height, 1.0)
        views.append(TrainView(cam, img, mask))
    return views


def boundary_band_mask(pc: PointCloud, partitions, cam: Camera, width_px: float = 6.0,
                       slab: float | None = None) -> Image:
    """Pixels within ``width_px`` of where the partition cut planes meet the surface.

    The intersection curve is sampled by the cloud points lying within
    ``slab`` (default twice the median point spacing) of each interior cut.
    """
    if slab is None:
        slab = 2.0 * float(np.median(nearest_neighbor_distances(pc.positions, 1))) if len(pc) > 1 else 0.0
    cuts = [(p.axis, p.box_max[p.axis]) for p in partitions if p.box_max[p.axis] < p.domain_max[p.axis]]
    near = np.zeros(len(pc), dtype=bool)
    for axis, c in cuts:
        near |= np.abs(pc.positions[:, axis] - c) <= slab
    return render_mask(pc.positions[near], cam, 0.5, max(width_px - 0.5, 0.0))


def evaluate_model(model: SplatModel, pc: PointCloud, cams: list[Camera], gt_scale: float,
                   render_cfg: RenderConfig) -> EvalResult:
    gt = ground_truth_model(pc, gt_scale)
    return evaluate([render(model, c, render_cfg).color for c in cams],
                    [render(gt, c, render_cfg).color for c in cams])


def artifact_diagnostics(model: SplatModel, pc: PointCloud, partitions, cams: list[Camera], gt_scale: float,
                         render_cfg: RenderConfig, width_px: float = 6.0, min_views: int = 3) -> dict:
    """Boundary-band error pooled over ``cams`` plus the background-splat count.

    The views are stacked into one tall image so the band and interior means
    are pixel-weighted over all views. Coverage is the union ground-truth
    mask of the whole cloud.
    """
    gt = ground_truth_model(pc, gt_scale)
    cover = [render_mask(pc, c, mask_footprint(c, pc, gt_scale)) for c in cams]
    stack = lambda imgs: Image(np.concatenate([i.pixels for i in imgs], axis=0))  # noqa: E731
    band = boundary_band_error(stack([render(model, c, render_cfg).color for c in cams]),
                               stack([render(gt, c, render_cfg).color for c in cams]),
                               stack([boundary_band_mask(pc, partitions, c, width_px) for c in cams]),
                               stack(cover))
    band["background_splats"] = background_splat_count(model, cams, cover, min_views)
    return band


# --- job description --------------------------------------------------------

@dataclass
class JobSpec:
    input: str
    output_dir: str
    n_partitions: int = 1
    shards_per_partition: int = 1
    rig: RigSpec = field(default_factory=RigSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    seed: int = 0
    ghost_margin: float | None = None
    use_masks: bool = True
    mask_dilation: float = 2.0
    gt_scale_factor: float = 0.7
    test_fraction: float = 0.1
    n_test: int | None = None
    max_workers: int | None = None
    timeout_s: float | None = None
    checkpoint_every: int = 0
    label: str = ""

    def __post_init__(self):
        if isinstance(self.rig, dict):
            self.rig = RigSpec(**self.rig)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.render, dict):
            self.render = RenderConfig(**self.render)
        if self.n_partitions < 1:
            raise InvalidConfig(f"n_partitions {self.n_partitions} < 1")
        if self.shards_per_partition < 1:
            raise InvalidConfig(f"shards_per_partition {self.shards_per_partition} < 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rig"]["elevation_range"] = list(self.rig.elevation_range)
        d["render"]["background"] = list(self.render.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "JobSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown job spec keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "JobSpec":
        return cls.from_dict(dio.read_json(path))

    def worker_count(self) -> int:
        if self.max_workers:
            return self.max_workers
        env = os.environ.get(WORKERS_ENV)
        return int(env) if env else self.n_partitions

    def partition_seed(self, pid: int) -> int:
        return self.seed + pid


@dataclass
class WorkerReport:
    partition_id: int
    train_seconds: float
    final_loss: float
    size_initial: int
    size_before_last_densify: int
    size_final: int
    n_owned: int
    n_ghost: int
    iterations: int
    peak_rss_mb: float
    rig_hash: str

    def __post_init__(self):
        if self.train_seconds < 0 or min(self.size_initial, self.size_final) < 0:
            raise InvalidConfig("negative time or model size in worker report")


@dataclass
class JobResult:
    merged_model: SplatModel
    reports: list
    evaluation: EvalResult | None
    wall_seconds: float
    output_dir: Path
    partitions: list = field(default_factory=list)


# --- worker side ---------------------------------------------------------------

def run_worker(manifest_path) -> WorkerReport:
    """Execute one partition's training from its manifest (runs in the worker process)."""
    import resource

    from .trainer import train_partition

    m = dio.read_json(manifest_path)
    pid = int(m["partition_id"])
    out = Path(m["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cloud = dio.read_cloud_ply(m["cloud"])
    cams, rig_doc = dio.read_rig(m["rig"])
    train_cams = [cams[i] for i in m["train_indices"]]
    render_cfg = RenderConfig(**m["render"])
    cfg = TrainConfig(**m["train"])
    views = build_views(cloud, train_cams, m["gt_scale"], render_cfg, m["use_masks"], m["mask_dilation"])
    init = seed_gaussians(cloud, "knn", k=3)
    init.origin_partition = pid

    fault_pid = os.environ.get("DISTGS_FAULT_PARTITION")
    fault_after = int(os.environ.get("DISTGS_FAULT_AFTER", "1"))
    t0 = time.perf_counter()
    ckpt_dir = out / "checkpoints"

    def checkpoint(model, opt, step, cfg_):
        base = ckpt_dir / f"step_{step:06d}"
        dio.write_splat_ply(base.with_suffix(".ply"), model)
        buf = _stdio.BytesIO()
        np.savez(buf, **opt.state_arrays())
        dio.atomic_write(base.with_suffix(".npz"), buf.getvalue())
        dio.write_json(base.with_suffix(".json"), {"iteration": step, "partition_id": pid,
                                                   "config_hash": cfg_.digest()})

    def progress(step, loss, model):
        if step == min(100, cfg.iterations):
            dio.write_json(out / "progress.json", {"iterations_done": step, "seconds": time.perf_counter() - t0,
                                                   "iterations": cfg.iterations})
        if fault_pid is not None and int(fault_pid) == pid and step >= fault_after:
            raise RuntimeError(f"injected fault in partition {pid} at step {step}")

    res = train_partition(init, views, cfg, shards=int(m["shards"]), render_cfg=render_cfg,
                          checkpoint=checkpoint, checkpoint_every=int(m.get("checkpoint_every", 0)),
                          progress=progress, return_result=True)
    seconds = time.perf_counter() - t0
    model = res.model
    model.origin_partition = pid
    dio.write_splat_ply(out / "model.ply", model)
    report = WorkerReport(pid, seconds, float(res.losses[-1]) if res.losses else 0.0, len(init),
                          res.size_before_densify, len(model), int(m["n_owned"]), len(cloud) - int(m["n_owned"]),
                          cfg.iterations, resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0,
                          rig_doc["rig_hash"])
    dio.write_json(out / "report.json", asdict(report))
    return report


# --- coordinator side --------------------------------------------------------


def prepare_job(spec: JobSpec):
    """Partition the cloud and write the rig and per-worker manifests."""
    if not Path(spec.input).is_file():
        raise IoError(f"input point cloud {spec.input} does not exist")
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    pc = dio.read_cloud_ply(spec.input)
    margin = spec.ghost_margin if spec.ghost_margin is not None else default_ghost_margin(pc)
    parts = partition_cloud(pc, spec.n_partitions, margin)
    cams = make_rig(pc, spec.rig)
    train_idx, test_idx = split_rig(len(cams), spec.seed, spec.test_fraction, spec.n_test)
    dio.write_rig(out / "rig.json", cams, {"train_indices": train_idx, "test_indices": test_idx})
    gt_scale = gt_scale_for(pc, spec.gt_scale_factor)
    dio.write_json(out / "partitions.json", {"ghost_margin": margin, "axis": parts[0].axis,
                                             "partitions": [p.to_manifest() for p in parts]})
    manifests = []
    for p in parts:
        pdir = out / f"partition_{p.id:03d}"
        dio.write_cloud_ply(pdir / "points.ply", p.points(), [f"partition {p.id}", f"owned {len(p.owned_indices)}"])
        train = spec.train.to_dict()
        train["seed"] = spec.partition_seed(p.id)
        man = {
            "partition_id": p.id, "cloud": str(pdir / "points.ply"), "n_owned": len(p.owned_indices),
            "rig": str(out / "rig.json"), "train_indices": train_idx, "train": train,
            "render": {**asdict(spec.render), "background": list(spec.render.background)},
            "use_masks": spec.use_masks, "mask_dilation": spec.mask_dilation, "gt_scale": gt_scale,
            "shards": spec.shards_per_partition, "out_dir": str(pdir),
            "checkpoint_every": spec.checkpoint_every,
        }
        dio.write_json(pdir / "manifest.json", man)
        manifests.append(pdir / "manifest.json")
    return pc, parts, cams, train_idx, test_idx, gt_scale, manifests


def _tail(path, n=1) -> str:
    try:
        lines = [ln for ln in Path(path).read_text(errors="replace").splitlines() if ln.strip()]
    except OSError:
        return ""
    return " | ".join(lines[-n:])


def _launch(manifests, n_workers: int, timeout_s: float | None, env=None):
    pending = list(enumerate(manifests))
    running: dict[int, tuple] = {}
    env = dict(os.environ if env is None else env)
    try:
        while pending or running:
            while pending and len(running) < n_workers:
                pid, man = pending.pop(0)
                logf = open(Path(man).parent / "worker.log", "wb")
                proc = subprocess.Popen([sys.executable, "-m", "distgs.worker", str(man)],
                                        stdout=logf, stderr=subprocess.STDOUT, env=env)
                running[pid] = (proc, time.monotonic(), logf, Path(man).parent)
            time.sleep(0.02)
            for pid in list(running):
                proc, started, logf, pdir = running[pid]
                rc = proc.poll()
                if rc is None:
                    limit = timeout_s if timeout_s is not None else _adaptive_timeout(pdir)
                    if limit is not None and time.monotonic() - started > limit:
                        proc.kill()
                        proc.wait()
                        logf.close()
                        del running[pid]
                        raise Timeout(pid, f"no result after {limit:.1f} s")
                    continue
                logf.close()
                del running[pid]
                if rc != 0:
                    raise WorkerFailure(pid, f"exit code {rc}: {_tail(pdir / 'worker.log')}")
    finally:
        for proc, _, logf, _ in running.values():
            proc.kill()
            proc.wait()
            logf.close()


STARTUP_GRACE_S = 120.0


def _adaptive_timeout(pdir: Path) -> float | None:
    """Ten times the run length extrapolated from the first 100 iterations."""
    prog = pdir / "progress.json"
    if not prog.exists():
        return None
    try:
        p = json.loads(prog.read_text())
    except ValueError:
        return None
    per_it = p["seconds"] / max(p["iterations_done"], 1)
    return STARTUP_GRACE_S + 10.0 * per_it * p["iterations"]


def gather(parts, dirs, expected_hash: str):
    """Load each worker's model and report, checking they belong to this job."""
    models, reports = [], []
    for p, pdir in zip(parts, dirs):
        rep = WorkerReport(**dio.read_json(Path(pdir) / "report.json"))
        if rep.rig_hash != expected_hash or rep.partition_id != p.id:
            raise ManifestMismatch(f"partition {p.id}: report rig hash or id differs from coordinator")
        m = dio.read_splat_ply(Path(pdir) / "model.ply")
        if m.origin_partition != p.id:
            raise ManifestMismatch(f"partition {p.id}: model tagged {m.origin_partition}")
        models.append(m)
        reports.append(rep)
    return models, reports


METRIC_COLUMNS = ["label", "n_partitions", "shards", "n_gaussians", "psnr", "ssim", "lpips"]
REPORT_COLUMNS = ["partition_id", "train_seconds", "final_loss", "size_initial", "size_before_last_densify",
                  "size_final", "n_owned", "n_ghost", "iterations", "peak_rss_mb"]


def run_job(spec: JobSpec, env=None) -> JobResult:
    """Run the whole pipeline described by ``spec``; outputs land in ``spec.output_dir``."""
    t0 = time.perf_counter()
    out = Path(spec.output_dir)
    pc, parts, cams, train_idx, test_idx, gt_scale, manifests = prepare_job(spec)
    _launch(manifests, max(1, spec.worker_count()), spec.timeout_s, env)

    models, reports = gather(parts, [Path(m).parent for m in manifests], dio.rig_hash(cams))
    merged = merge_models(models, parts)
    dio.write_splat_ply(out / "merged.ply", merged)

    evaluation = None
    if test_idx:
        test_cams = [cams[i] for i in test_idx]
        for i, cam in zip(test_idx, test_cams):
            dio.write_image(out / "renders" / f"view_{i:03d}.png", render(merged, cam, spec.render).color)
        evaluation = evaluate_model(merged, pc, test_cams, gt_scale, spec.render)
        row = {"label": spec.label or f"p{spec.n_partitions}_s{spec.shards_per_partition}",
               "n_partitions": spec.n_partitions, "shards": spec.shards_per_partition,
               "n_gaussians": len(merged), "psnr": f"{evaluation.psnr:.4f}", "ssim": f"{evaluation.ssim:.6f}",
               "lpips": "n/a"}
        dio.atomic_write(out / "metrics.csv", to_csv([row], METRIC_COLUMNS).encode())
        per_view = [{"view": test_idx[v["view"]], "psnr": f"{v['psnr']:.4f}", "ssim": f"{v['ssim']:.6f}"}
                    for v in evaluation.per_view]
        dio.atomic_write(out / "metrics_per_view.csv", to_csv(per_view, ["view", "psnr", "ssim"]).encode())
    wall = time.perf_counter() - t0
    rows = [{k: (f"{v:.3f}" if isinstance(v, float) else v) for k, v in asdict(r).items()} for r in reports]
    dio.atomic_write(out / "reports.csv", to_csv(rows, REPORT_COLUMNS).encode())
    dio.write_json(out / "timing.json", {"wall_seconds": wall, "n_partitions": spec.n_partitions,
                                         "shards": spec.shards_per_partition, "workers": spec.worker_count(),
                                         "label": spec.label,
                                         "psnr": evaluation.psnr if evaluation else None,
                                         "ssim": evaluation.ssim if evaluation else None})
    dio.write_json(out / "job.json", spec.to_dict())
    return JobResult(merged, reports, evaluation, wall, out, parts)


# --- scaling report -------------------------------------------------------------

@dataclass
class RunSummary:
    config: str
    wall_seconds: float
    psnr: float | None = None
    ssim: float | None = None


SCALING_COLUMNS = ["config", "wall_seconds", "speedup", "psnr", "ssim", "lpips"]


def scaling_report(runs: list[RunSummary], baseline: str | None = None) -> dict:
    """Speedup of every run relative to the baseline configuration.

    Returns ``{"rows", "text", "csv"}``; ``rows`` keep the unrounded speedup.
    """
    if len(runs) < 2:
        raise MissingBaseline(f"need at least 2 runs, got {len(runs)}")
    base_label = runs[0].config if baseline is None else baseline
    base = [r for r in runs if r.config == base_label]
    if not base:
        raise MissingBaseline(f"baseline config {base_label!r} not among runs")
    b = base[0].wall_seconds
    rows, printable = [], []
    for r in runs:
        speed = b / r.wall_seconds if r.wall_seconds > 0 else math.inf
        rows.append({"config": r.config, "wall_seconds": r.wall_seconds, "speedup": speed,
                     "psnr": r.psnr, "ssim": r.ssim})
        printable.append({"config": r.config, "wall_seconds": f"{r.wall_seconds:.2f}", "speedup": f"{speed:.2f}",
                          "psnr": "n/a" if r.psnr is None else f"{r.psnr:.2f}",
                          "ssim": "n/a" if r.ssim is None else f"{r.ssim:.4f}", "lpips": "n/a"})
    return {"rows": rows, "text": format_table(printable, SCALING_COLUMNS),
            "csv": to_csv(printable, SCALING_COLUMNS)}


def read_runs_csv(path) -> list[RunSummary]:
    """Runs from a CSV with ``config`` and ``wall_seconds`` or ``wall_minutes`` columns."""
    text = Path(path).read_text()
    out = []
    for row in csv.DictReader(_stdio.StringIO(text)):
        if row.get("wall_seconds"):
            wall = float(row["wall_seconds"])
        else:
            wall = 60.0 * float(row["wall_minutes"])
        out.append(RunSummary(row["config"], wall,
                              float(row["psnr"]) if row.get("psnr") not in (None, "", "n/a") else None,
                              float(row["ssim"]) if row.get("ssim") not in (None, "", "n/a") else None))
    return out


def summary_from_run_dir(path) -> RunSummary:
    t = dio.read_json(Path(path) / "timing.json")
    label = t.get("label") or f"p{t['n_partitions']}_s{t['shards']}_w{t['workers']}"
    return RunSummary(label, t["wall_seconds"], t.get("psnr"), t.get("ssim"))
