"""Command-line interface: one subcommand per pipeline stage.

Every subcommand accepts ``--seed`` and writes a manifest recording the
content hashes of its inputs and the configuration it ran with. Failures
exit nonzero with a single line ``error: <code>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io as dio
from . import runtime as rt
from .errors import DistGSError, InvalidConfig
from .isosurface import DEFAULT_ISOVALUE, KINDS, extract_isosurface, make_volume
from .metrics import evaluate, format_table, to_csv
from .partition import Partition, merge_models, partition_cloud
from .rasterizer import RenderConfig, render
from .trainer import TrainConfig


def _add_rig_args(p, defaults=rt.RigSpec()):
    p.add_argument("--azimuth", type=int, default=defaults.n_azimuth)
    p.add_argument("--elevation", type=int, default=defaults.n_elevation)
    p.add_argument("--resolution", type=int, default=defaults.resolution)
    p.add_argument("--radius-factor", type=float, default=defaults.radius_factor)
    p.add_argument("--elev-min", type=float, default=defaults.elevation_range[0], help="degrees")
    p.add_argument("--elev-max", type=float, default=defaults.elevation_range[1], help="degrees")
    p.add_argument("--fov", type=float, default=defaults.fov_y_deg, help="vertical field of view, degrees")


def _rig_spec(a) -> rt.RigSpec:
    return rt.RigSpec(a.azimuth, a.elevation, a.resolution, a.radius_factor, (a.elev_min, a.elev_max), a.fov)


def _render_cfg(a) -> RenderConfig:
    return RenderConfig(tile_size=getattr(a, "tile_size", 16))


def _select_views(doc: dict, n: int, which: str) -> list[int]:
    if which == "all":
        return list(range(n))
    if which in ("train", "test"):
        key = f"{which}_indices"
        return list(doc.get(key, range(n)))
    try:
        return [int(t) for t in which.split(",")]
    except ValueError:
        raise InvalidConfig(f"--views must be all, train, test or a comma list, got {which!r}") from None


# --- subcommands --------------------------------------------------------------

def cmd_gen_volume(a):
    dims = tuple(a.dims) * 3 if len(a.dims) == 1 else tuple(a.dims)
    if len(dims) != 3:
        raise InvalidConfig("--dims takes 1 or 3 values")
    vol = make_volume(a.kind, dims, a.noise, a.seed or 0)
    dio.write_volume(a.output, vol)
    base = Path(a.output).with_suffix("")
    outs = [base.with_suffix(".raw"), base.with_suffix(".json")]
    return dio.write_manifest(base.with_suffix(".json"), "gen-volume", [],
                              {"kind": a.kind, "dims": list(dims), "noise": a.noise}, a.seed, outs)


def cmd_extract_iso(a):
    vol = dio.read_volume(a.volume)
    iso = a.isovalue
    if iso is None:
        iso = DEFAULT_ISOVALUE.get(a.kind or "", None)
        if iso is None:
            raise InvalidConfig("--isovalue is required unless --kind names a built-in volume")
    pc = extract_isosurface(vol, iso)
    dio.write_cloud_ply(a.output, pc, [f"isovalue {iso!r}"])
    print(f"{len(pc)} points")
    raw = Path(a.volume).with_suffix(".raw")
    return dio.write_manifest(a.output, "extract-iso", [Path(a.volume).with_suffix(".json"), raw],
                              {"isovalue": iso}, a.seed, [a.output])


def cmd_gen_cameras(a):
    rig = _rig_spec(a)
    inputs = []
    if a.cloud:
        pc = dio.read_cloud_ply(a.cloud)
        cams = rt.make_rig(pc, rig)
        inputs.append(a.cloud)
    else:
        if a.center is None or a.radius is None:
            raise InvalidConfig("give --cloud, or both --center and --radius")
        from .core import build_orbital_cameras
        cams = build_orbital_cameras(np.array(a.center), a.radius, rig.n_azimuth, rig.n_elevation,
                                     rig.resolution, elevation_range=rig.elevation_range,
                                     fov_y=math.radians(rig.fov_y_deg))
    train, test = rt.split_rig(len(cams), a.seed or 0, a.test_fraction, a.n_test)
    dio.write_rig(a.output, cams, {"train_indices": train, "test_indices": test})
    print(f"{len(cams)} cameras ({len(train)} train, {len(test)} test)")
    cfg = {**asdict(rig), "test_fraction": a.test_fraction, "n_test": a.n_test}
    return dio.write_manifest(a.output, "gen-cameras", inputs, cfg, a.seed, [a.output])


def cmd_partition(a):
    pc = dio.read_cloud_ply(a.cloud)
    parts = partition_cloud(pc, a.partitions, a.ghost_margin)
    out = Path(a.output)
    outs = [out / "partitions.json"]
    for p in parts:
        path = out / f"partition_{p.id:03d}" / "points.ply"
        dio.write_cloud_ply(path, p.points(), [f"partition {p.id}", f"owned {len(p.owned_indices)}"])
        outs.append(path)
    dio.write_json(out / "partitions.json", {"ghost_margin": parts[0].ghost_margin, "axis": parts[0].axis,
                                             "partitions": [p.to_manifest() for p in parts]})
    for p in parts:
        print(f"partition {p.id}: {len(p.owned_indices)} owned, {len(p.ghost_indices)} ghost")
    return dio.write_manifest(out, "partition", [a.cloud],
                              {"partitions": a.partitions, "ghost_margin": a.ghost_margin}, a.seed, outs)


def cmd_render_gt(a):
    full = dio.read_cloud_ply(a.cloud)
    cams, doc = dio.read_rig(a.rig)
    idx = _select_views(doc, len(cams), a.views)
    scale = rt.gt_scale_for(full, a.gt_scale_factor)
    cfg = _render_cfg(a)
    out = Path(a.output)
    targets = [(out, full)]
    if a.partitions_dir:
        pdoc = dio.read_json(Path(a.partitions_dir) / "partitions.json")
        targets = []
        for d in pdoc["partitions"]:
            p = Partition.from_manifest(d, full)
            targets.append((out / f"partition_{p.id:03d}", p.points()))
    outs = []
    for tdir, pc in targets:
        views = rt.build_views(pc, [cams[i] for i in idx], scale, cfg, not a.no_masks, a.mask_dilation)
        for i, v in zip(idx, views):
            for name, img in ((f"view_{i:03d}.png", v.ground_truth), (f"mask_{i:03d}.png", v.mask)):
                dio.write_image(tdir / name, img)
                outs.append(tdir / name)
    inputs = [a.cloud, a.rig] + ([Path(a.partitions_dir) / "partitions.json"] if a.partitions_dir else [])
    out.mkdir(parents=True, exist_ok=True)
    return dio.write_manifest(out, "render-gt", inputs,
                              {"views": idx, "gt_scale": scale, "masks": not a.no_masks,
                               "mask_dilation": a.mask_dilation}, a.seed, outs)


def _train_overrides(a) -> dict:
    over = {}
    if getattr(a, "iterations", None) is not None:
        over["iterations"] = a.iterations
    if getattr(a, "densify_threshold", None) is not None:
        over["densify_grad_threshold"] = a.densify_threshold
    return over


def cmd_train(a):
    if a.manifest:
        man = dio.read_json(a.manifest)
        if a.seed is not None:
            man["train"]["seed"] = a.seed
        man["train"].update(_train_overrides(a))
        if a.shards is not None:
            man["shards"] = a.shards
        path = Path(man["out_dir"]) / "manifest.json"
    else:
        if not (a.cloud and a.rig and a.output):
            raise InvalidConfig("train needs a MANIFEST, or --cloud, --rig and --output")
        cams, doc = dio.read_rig(a.rig)
        pc = dio.read_cloud_ply(a.cloud)
        full = dio.read_cloud_ply(a.full_cloud) if a.full_cloud else pc
        train = {**TrainConfig().to_dict(), **_train_overrides(a), "seed": a.seed or 0}
        man = {"partition_id": a.partition_id, "cloud": str(a.cloud), "n_owned": len(pc), "rig": str(a.rig),
               "train_indices": list(doc.get("train_indices", range(len(cams)))), "train": train,
               "render": {**asdict(RenderConfig()), "background": list(RenderConfig().background)},
               "use_masks": not a.no_masks, "mask_dilation": 2.0,
               "gt_scale": rt.gt_scale_for(full, 0.7), "shards": a.shards or 1, "out_dir": str(a.output),
               "checkpoint_every": a.checkpoint_every}
        path = Path(a.output) / "manifest.json"
    dio.write_json(path, man)
    rep = rt.run_worker(path)
    print(f"partition {rep.partition_id}: {rep.size_final} gaussians, loss {rep.final_loss:.6f}, "
          f"{rep.train_seconds:.1f} s")
    out = Path(man["out_dir"])
    return dio.write_manifest(out / "model.ply", "train", [man["cloud"], man["rig"]], man, man["train"]["seed"],
                              [out / "model.ply", out / "report.json"])


def cmd_run(a):
    if a.spec:
        d = dio.read_json(a.spec)
    else:
        if not a.input:
            raise InvalidConfig("run needs --spec or --input")
        d = {"input": a.input, "output_dir": a.output or "run_out"}
    d.setdefault("train", {})
    d.setdefault("rig", {})
    if a.input:
        d["input"] = a.input
    if a.output:
        d["output_dir"] = a.output
    if a.partitions is not None:
        d["n_partitions"] = a.partitions
    if a.shards is not None:
        d["shards_per_partition"] = a.shards
    if a.seed is not None:
        d["seed"] = a.seed
    if a.resolution is not None:
        d["rig"]["resolution"] = a.resolution
    if a.workers is not None:
        d["max_workers"] = a.workers
    if a.label is not None:
        d["label"] = a.label
    d["train"].update(_train_overrides(a))
    spec = rt.JobSpec.from_dict(d)
    res = rt.run_job(spec)
    if res.evaluation is not None:
        print(f"merged {len(res.merged_model)} gaussians; PSNR {res.evaluation.psnr:.2f} dB, "
              f"SSIM {res.evaluation.ssim:.4f}; wall {res.wall_seconds:.1f} s")
    inputs = [spec.input] + ([a.spec] if a.spec else [])
    return dio.write_manifest(res.output_dir, "run", inputs, spec.to_dict(), spec.seed,
                              [res.output_dir / "merged.ply", res.output_dir / "metrics.csv"])


def cmd_merge(a):
    pdoc = dio.read_json(a.partitions)
    full = dio.read_cloud_ply(a.cloud) if a.cloud else None
    parts = [Partition.from_manifest(d, full) for d in pdoc["partitions"]]
    models = [dio.read_splat_ply(m) for m in a.models]
    merged = merge_models(models, parts)
    dio.write_splat_ply(a.output, merged)
    print(f"{len(merged)} gaussians")
    return dio.write_manifest(a.output, "merge", [a.partitions] + list(a.models), {}, a.seed, [a.output])


def cmd_render(a):
    model = dio.read_splat_ply(a.model)
    cams, doc = dio.read_rig(a.rig)
    idx = _select_views(doc, len(cams), a.views)
    cfg = _render_cfg(a)
    out = Path(a.output)
    outs = []
    for i in idx:
        path = out / f"view_{i:03d}.png"
        dio.write_image(path, render(model, cams[i], cfg).color)
        outs.append(path)
    out.mkdir(parents=True, exist_ok=True)
    return dio.write_manifest(out, "render", [a.model, a.rig], {"views": idx, **asdict(cfg)}, a.seed, outs)


def cmd_eval(a):
    cams, doc = dio.read_rig(a.rig)
    idx = _select_views(doc, len(cams), a.views)
    cfg = _render_cfg(a)
    if a.model:
        model = dio.read_splat_ply(a.model)
        rendered = [render(model, cams[i], cfg).color for i in idx]
        inputs = [a.model]
    elif a.rendered:
        rendered = [dio.read_image(Path(a.rendered) / f"view_{i:03d}.png") for i in idx]
        inputs = [Path(a.rendered) / f"view_{i:03d}.png" for i in idx]
    else:
        raise InvalidConfig("eval needs --model or --rendered")
    if a.truth:
        truths = [dio.read_image(Path(a.truth) / f"view_{i:03d}.png") for i in idx]
        inputs += [Path(a.truth) / f"view_{i:03d}.png" for i in idx]
    elif a.cloud:
        pc = dio.read_cloud_ply(a.cloud)
        gt = rt.ground_truth_model(pc, rt.gt_scale_for(pc, a.gt_scale_factor))
        truths = [render(gt, cams[i], cfg).color for i in idx]
        inputs.append(a.cloud)
    else:
        raise InvalidConfig("eval needs --truth or --cloud")
    res = evaluate(rendered, truths)
    row = res.to_row(a.label)
    cols = ["label", "psnr", "ssim", "lpips"]
    print(format_table([row], cols), end="")
    dio.atomic_write(a.output, to_csv([row], cols).encode())
    return dio.write_manifest(a.output, "eval", inputs + [a.rig], {"views": idx}, a.seed, [a.output])


def cmd_report(a):
    runs = []
    inputs = []
    for src in a.runs:
        p = Path(src)
        if p.is_dir():
            runs.append(rt.summary_from_run_dir(p))
            inputs.append(p / "timing.json")
        else:
            runs.extend(rt.read_runs_csv(p))
            inputs.append(p)
    rep = rt.scaling_report(runs, a.baseline)
    print(rep["text"], end="")
    if a.output:
        dio.atomic_write(a.output, rep["csv"].encode())
        return dio.write_manifest(a.output, "report", inputs, {"baseline": a.baseline}, a.seed, [a.output])
    return None


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="distgs", description="Distributed Gaussian splatting of isosurfaces.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=None, help="random seed (recorded in the manifest)")
        return p

    p = add("gen-volume", cmd_gen_volume, "Write a synthetic scalar volume (.raw + .json).")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--dims", type=int, nargs="+", default=[32])
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("-o", "--output", required=True)

    p = add("extract-iso", cmd_extract_iso, "Extract an isosurface point cloud from a volume.")
    p.add_argument("volume")
    p.add_argument("--isovalue", type=float)
    p.add_argument("--kind", choices=KINDS, help="use this kind's default isovalue")
    p.add_argument("-o", "--output", required=True)

    p = add("gen-cameras", cmd_gen_cameras, "Write an orbital camera rig (JSON).")
    p.add_argument("--cloud", help="center the rig on this point cloud")
    p.add_argument("--center", type=float, nargs=3)
    p.add_argument("--radius", type=float)
    _add_rig_args(p)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--n-test", type=int)
    p.add_argument("-o", "--output", required=True)

    p = add("partition", cmd_partition, "Split a point cloud into slabs with ghost margins.")
    p.add_argument("cloud")
    p.add_argument("--partitions", type=int, required=True)
    p.add_argument("--ghost-margin", type=float)
    p.add_argument("-o", "--output", required=True, help="output directory")

    p = add("render-gt", cmd_render_gt, "Render ground-truth images and masks (per partition if given).")
    p.add_argument("--cloud", required=True, help="full point cloud")
    p.add_argument("--rig", required=True)
    p.add_argument("--partitions-dir")
    p.add_argument("--views", default="train", help="all, train, test or a comma list of indices")
    p.add_argument("--gt-scale-factor", type=float, default=0.7)
    p.add_argument("--no-masks", action="store_true")
    p.add_argument("--mask-dilation", type=float, default=2.0)
    p.add_argument("-o", "--output", required=True)

    p = add("train", cmd_train, "Train a single partition.")
    p.add_argument("manifest", nargs="?", help="worker manifest written by run or a previous train")
    p.add_argument("--cloud")
    p.add_argument("--full-cloud", help="cloud used for the ground-truth splat size (default: --cloud)")
    p.add_argument("--rig")
    p.add_argument("--partition-id", type=int, default=0)
    p.add_argument("--iterations", type=int)
    p.add_argument("--densify-threshold", type=float)
    p.add_argument("--shards", type=int)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--no-masks", action="store_true")
    p.add_argument("-o", "--output")

    p = add("run", cmd_run, "Run the full distributed job.")
    p.add_argument("--spec", help="job spec JSON")
    p.add_argument("--input", help="point cloud PLY")
    p.add_argument("--partitions", type=int)
    p.add_argument("--shards", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--densify-threshold", type=float)
    p.add_argument("--resolution", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--label")
    p.add_argument("-o", "--output")

    p = add("merge", cmd_merge, "Merge per-partition models by ownership.")
    p.add_argument("models", nargs="+")
    p.add_argument("--partitions", required=True, help="partitions.json")
    p.add_argument("--cloud")
    p.add_argument("-o", "--output", required=True)

    p = add("render", cmd_render, "Render a splat model from rig views.")
    p.add_argument("model")
    p.add_argument("--rig", required=True)
    p.add_argument("--views", default="test")
    p.add_argument("-o", "--output", required=True)

    p = add("eval", cmd_eval, "PSNR / SSIM of a model or rendered images against ground truth.")
    p.add_argument("--model")
    p.add_argument("--rendered", help="directory of view_###.png")
    p.add_argument("--truth", help="directory of view_###.png ground truth")
    p.add_argument("--cloud", help="render ground truth from this cloud")
    p.add_argument("--rig", required=True)
    p.add_argument("--views", default="test")
    p.add_argument("--gt-scale-factor", type=float, default=0.7)
    p.add_argument("--label", default="")
    p.add_argument("-o", "--output", required=True)

    p = add("report", cmd_report, "Scaling table from run directories or a runs CSV.")
    p.add_argument("runs", nargs="+")
    p.add_argument("--baseline")
    p.add_argument("-o", "--output")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except DistGSError as e:
        print(f"error: {e.code}: {str(e).splitlines()[0] if str(e) else ''}", file=sys.stderr)
        return 1
    except Exception as e:  # anything unexpected still gets one parsable line
        print(f"error: internal: {type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
