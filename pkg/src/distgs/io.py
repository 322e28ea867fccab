"""File formats: splat/point PLY, PNG images, camera rigs, volumes, manifests.

Every writer goes through :func:`atomic_write`, so a reader never sees a
half-written file.
"""
from __future__ import annotations

import hashlib
import io as _stdio
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import Camera, Image, SplatModel
from .errors import IoError, MalformedFile
from .isosurface import PointCloud, Volume

SPLAT_PROPS = (["x", "y", "z"] + [f"f_dc_{i}" for i in range(3)] + ["opacity"]
               + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)])
CLOUD_PROPS = ["x", "y", "z", "nx", "ny", "nz", "red", "green", "blue"]

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e


def sha256_file(path) -> str:
    return hashlib.sha256(_read_bytes(path)).hexdigest()


def write_ply(path, columns: dict[str, np.ndarray], comments=()):
    """Binary little-endian PLY with one ``vertex`` element of double properties."""
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {n}")
    header += [f"property double {name}" for name in names]
    header.append("end_header")
    arr = np.empty(n, dtype=[(name, "<f8") for name in names])
    for name in names:
        arr[name] = columns[name]
    atomic_write(path, ("\n".join(header) + "\n").encode("ascii") + arr.tobytes())


def read_ply(path) -> tuple[dict[str, np.ndarray], list[str]]:
    raw = _read_bytes(path)
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise MalformedFile(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]
    fmt, count, props, comments = None, None, [], []
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "comment":
            comments.append(line[len("comment "):])
        elif parts[0] == "element":
            if count is not None:
                raise MalformedFile(f"{path}: only a single vertex element is supported")
            if parts[1] != "vertex":
                raise MalformedFile(f"{path}: unexpected element {parts[1]}")
            count = int(parts[2])
        elif parts[0] == "property":
            if parts[1] == "list" or parts[1] not in _PLY_TYPES:
                raise MalformedFile(f"{path}: unsupported property {line}")
            props.append((parts[2], "<" + _PLY_TYPES[parts[1]]))
    if fmt != "binary_little_endian" or count is None:
        raise MalformedFile(f"{path}: expected binary_little_endian vertex data")
    dtype = np.dtype(props)
    if len(body) != dtype.itemsize * count:
        raise MalformedFile(f"{path}: expected {dtype.itemsize * count} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=dtype, count=count)
    return {name: arr[name].astype(np.float64) for name, _ in props}, comments


def write_splat_ply(path, model: SplatModel):
    cols = {}
    for i, a in enumerate("xyz"):
        cols[a] = model.mu[:, i]
    for i in range(3):
        cols[f"f_dc_{i}"] = model.color[:, i]
    cols["opacity"] = model.opacity_logit
    for i in range(3):
        cols[f"scale_{i}"] = model.log_scale[:, i]
    for i in range(4):
        cols[f"rot_{i}"] = model.rot[:, i]
    origin = "none" if model.origin_partition is None else str(int(model.origin_partition))
    write_ply(path, cols, [f"iteration {model.iteration}", f"origin_partition {origin}",
                           "f_dc holds linear RGB; opacity is a logit; scale is log; rot is w,x,y,z"])


def read_splat_ply(path) -> SplatModel:
    cols, comments = read_ply(path)
    missing = [p for p in SPLAT_PROPS if p not in cols]
    if missing:
        raise MalformedFile(f"{path}: missing splat properties {missing}")
    meta = dict(c.split(" ", 1) for c in comments if " " in c)
    origin = meta.get("origin_partition", "none")
    return SplatModel(np.stack([cols[a] for a in "xyz"], axis=1),
                      np.stack([cols[f"scale_{i}"] for i in range(3)], axis=1),
                      np.stack([cols[f"rot_{i}"] for i in range(4)], axis=1),
                      cols["opacity"],
                      np.stack([cols[f"f_dc_{i}"] for i in range(3)], axis=1),
                      origin_partition=None if origin == "none" else int(origin),
                      iteration=int(meta.get("iteration", 0)))


def write_cloud_ply(path, pc: PointCloud, comments=()):
    p, n, c = pc.positions, pc.normals, pc.colors
    write_ply(path, {"x": p[:, 0], "y": p[:, 1], "z": p[:, 2], "nx": n[:, 0], "ny": n[:, 1], "nz": n[:, 2],
                     "red": c[:, 0], "green": c[:, 1], "blue": c[:, 2]}, comments)


def read_cloud_ply(path) -> PointCloud:
    cols, _ = read_ply(path)
    if any(k not in cols for k in ("x", "y", "z")):
        raise MalformedFile(f"{path}: missing x/y/z")
    n = len(cols["x"])
    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    nrm = (np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1) if "nx" in cols
           else np.tile([1.0, 0.0, 0.0], (n, 1)))
    col = (np.stack([cols["red"], cols["green"], cols["blue"]], axis=1) if "red" in cols
           else np.full((n, 3), 0.5))
    return PointCloud(pos, col, nrm)


def write_image(path, img: Image):
    """8-bit PNG; 1-channel images are written as grayscale."""
    px = np.clip(img.pixels, 0.0, 1.0)
    q = np.rint(px * 255.0).astype(np.uint8)
    pil = PILImage.fromarray(q[..., 0] if img.channels == 1 else q)
    buf = _stdio.BytesIO()
    pil.save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def read_image(path) -> Image:
    raw = _read_bytes(path)
    try:
        with PILImage.open(_stdio.BytesIO(raw)) as pil:
            pil.load()
            gray = pil.mode in ("L", "1", "LA", "I", "I;16")
            arr = np.asarray(pil.convert("L" if gray else "RGB"))
    except Exception as e:  # PIL raises a mix of OSError, SyntaxError, ValueError
        raise MalformedFile(f"{path}: {e}") from e
    return Image(arr.astype(np.float64) / 255.0)


def camera_to_dict(cam: Camera) -> dict:
    return {"position": list(cam.position), "target": list(cam.target), "up": list(cam.up),
            "fov_y": cam.fov_y, "width": cam.width, "height": cam.height, "near": cam.near, "far": cam.far}


def camera_from_dict(d: dict) -> Camera:
    return Camera(tuple(d["position"]), tuple(d["target"]), tuple(d["up"]), float(d["fov_y"]),
                  int(d["width"]), int(d["height"]), float(d.get("near", 0.01)), float(d.get("far", 100.0)))


def rig_hash(cams: list[Camera]) -> str:
    payload = json.dumps([camera_to_dict(c) for c in cams], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def write_rig(path, cams: list[Camera], extra: dict | None = None):
    doc = {"cameras": [camera_to_dict(c) for c in cams], "rig_hash": rig_hash(cams)}
    doc.update(extra or {})
    atomic_write(path, (json.dumps(doc, indent=1) + "\n").encode())


def read_rig(path) -> tuple[list[Camera], dict]:
    try:
        doc = json.loads(_read_bytes(path))
        cams = [camera_from_dict(d) for d in doc["cameras"]]
    except (ValueError, KeyError, TypeError) as e:
        raise MalformedFile(f"{path}: {e}") from e
    if "rig_hash" in doc and doc["rig_hash"] != rig_hash(cams):
        raise MalformedFile(f"{path}: rig hash does not match camera values")
    return cams, doc


def write_volume(path, vol: Volume):
    """``<path>.raw`` little-endian float64 in C order plus ``<path>.json`` sidecar."""
    base = Path(path).with_suffix("")
    atomic_write(base.with_suffix(".raw"), vol.values.astype("<f8").tobytes(order="C"))
    meta = {"dims": list(vol.dims), "spacing": vol.spacing, "origin": list(vol.origin),
            "dtype": "float64", "byte_order": "little", "order": "C, values[x][y][z]",
            "raw": base.with_suffix(".raw").name}
    atomic_write(base.with_suffix(".json"), (json.dumps(meta, indent=1) + "\n").encode())


def read_volume(path) -> Volume:
    base = Path(path).with_suffix("")
    try:
        meta = json.loads(_read_bytes(base.with_suffix(".json")))
    except ValueError as e:
        raise MalformedFile(f"{path}: {e}") from e
    raw = _read_bytes(base.parent / meta.get("raw", base.with_suffix(".raw").name))
    dims = tuple(meta["dims"])
    if len(raw) != 8 * int(np.prod(dims)):
        raise MalformedFile(f"{path}: raw size {len(raw)} does not match dims {dims}")
    return Volume(dims, float(meta["spacing"]), tuple(meta["origin"]),
                  np.frombuffer(raw, dtype="<f8").reshape(dims))


def write_json(path, doc):
    atomic_write(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())


def read_json(path):
    try:
        return json.loads(_read_bytes(path))
    except ValueError as e:
        raise MalformedFile(f"{path}: {e}") from e


def config_hash(config) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_manifest(output, stage: str, inputs=(), config=None, seed=None, outputs=()):
    """Sidecar ``<output>.manifest.json`` recording how ``output`` was produced."""
    output = Path(output)
    doc = {
        "stage": stage,
        "seed": seed,
        "config": config or {},
        "config_hash": config_hash(config or {}),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": sorted(str(p) for p in outputs),
    }
    target = output / "manifest.json" if output.is_dir() else output.with_name(output.name + ".manifest.json")
    write_json(target, doc)
    return target
