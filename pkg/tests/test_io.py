import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from distgs import io as dio
from distgs.core import Camera, Image, SplatModel
from distgs.errors import IoError, MalformedFile
from distgs.isosurface import extract_isosurface, make_volume

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(arrays(np.float64, (6, 14), elements=finite), st.integers(0, 10**6), st.one_of(st.none(), st.integers(0, 64)))
@settings(max_examples=30, deadline=None)
def test_splat_ply_bit_exact(tmp_path_factory, a, iteration, origin):
    m = SplatModel(a[:, 0:3], a[:, 3:6], a[:, 6:10], a[:, 10], a[:, 11:14], origin_partition=origin,
                   iteration=iteration)
    path = tmp_path_factory.mktemp("ply") / "m.ply"
    dio.write_splat_ply(path, m)
    back = dio.read_splat_ply(path)
    for k in SplatModel.PARAMS:
        assert getattr(back, k).tobytes() == getattr(m, k).tobytes()
    assert back.origin_partition == origin and back.iteration == iteration


def test_splat_ply_header_order(tmp_path):
    path = tmp_path / "m.ply"
    dio.write_splat_ply(path, SplatModel.empty())
    header = path.read_bytes().split(b"end_header")[0].decode()
    props = [line.split()[-1] for line in header.splitlines() if line.startswith("property")]
    assert props == dio.SPLAT_PROPS
    assert "binary_little_endian" in header
    assert len(dio.read_splat_ply(path)) == 0


def test_ply_truncated(tmp_path):
    path = tmp_path / "m.ply"
    m = SplatModel(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 4)), np.zeros(3), np.zeros((3, 3)))
    dio.write_splat_ply(path, m)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(MalformedFile):
        dio.read_splat_ply(path)
    (tmp_path / "junk.ply").write_bytes(b"not a ply")
    with pytest.raises(MalformedFile):
        dio.read_ply(tmp_path / "junk.ply")


def test_cloud_roundtrip(tmp_path):
    pc = extract_isosurface(make_volume("sphere", (10, 10, 10)), 0.6)
    dio.write_cloud_ply(tmp_path / "c.ply", pc)
    back = dio.read_cloud_ply(tmp_path / "c.ply")
    assert np.array_equal(back.positions, pc.positions)
    assert np.array_equal(back.colors, pc.colors)
    assert np.array_equal(back.normals, pc.normals)


def test_mask_png_bit_exact(tmp_path, rng):
    mask = Image((rng.uniform(size=(20, 30)) > 0.5).astype(np.float64))
    dio.write_image(tmp_path / "m.png", mask)
    back = dio.read_image(tmp_path / "m.png")
    assert back.channels == 1
    assert np.array_equal(back.pixels, mask.pixels)


def test_rgb_png_quantization(tmp_path, rng):
    img = Image(rng.uniform(size=(20, 30, 3)))
    dio.write_image(tmp_path / "c.png", img)
    back = dio.read_image(tmp_path / "c.png")
    assert back.shape == img.shape
    assert np.abs(back.pixels - img.pixels).max() <= 1 / 255


def test_truncated_png(tmp_path, rng):
    dio.write_image(tmp_path / "c.png", Image(rng.uniform(size=(32, 32, 3))))
    raw = (tmp_path / "c.png").read_bytes()
    (tmp_path / "t.png").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(MalformedFile):
        dio.read_image(tmp_path / "t.png")
    with pytest.raises(IoError):
        dio.read_image(tmp_path / "missing.png")


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=6, max_size=6),
       st.floats(0.01, 3.0), st.integers(8, 4096))
@settings(max_examples=50, deadline=None)
def test_rig_value_exact(tmp_path_factory, v, fov, w):
    pos, tgt = tuple(v[:3]), tuple(v[3:])
    if np.linalg.norm(np.subtract(pos, tgt)) < 1e-3:
        return
    try:
        cam = Camera(pos, tgt, (0.0, 1.0, 0.0), fov, w, 17, 0.001, 1e4)
    except Exception:
        return  # up parallel to the view direction
    path = tmp_path_factory.mktemp("rig") / "rig.json"
    dio.write_rig(path, [cam, cam.rolled(0.3)])
    cams, doc = dio.read_rig(path)
    assert cams[0] == cam
    assert cams[1] == cam.rolled(0.3)
    assert doc["rig_hash"] == dio.rig_hash([cam, cam.rolled(0.3)])


def test_rig_tamper_detected(tmp_path):
    cam = Camera((0, 0, 3.0), (0, 0, 0))
    dio.write_rig(tmp_path / "r.json", [cam])
    text = (tmp_path / "r.json").read_text().replace("0.8726646259971648", "0.9")
    (tmp_path / "r.json").write_text(text)
    with pytest.raises(MalformedFile):
        dio.read_rig(tmp_path / "r.json")


def test_volume_roundtrip(tmp_path):
    vol = make_volume("gyroid", (9, 10, 11))
    dio.write_volume(tmp_path / "v", vol)
    back = dio.read_volume(tmp_path / "v.json")
    assert back.dims == vol.dims and back.origin == vol.origin and back.spacing == vol.spacing
    assert np.array_equal(back.values, vol.values)
    (tmp_path / "v.raw").write_bytes(b"\0" * 16)
    with pytest.raises(MalformedFile):
        dio.read_volume(tmp_path / "v.json")


def test_atomic_write_leaves_no_temp(tmp_path):
    dio.atomic_write(tmp_path / "a.bin", b"x")
    dio.atomic_write(tmp_path / "a.bin", b"yz")
    assert [p.name for p in tmp_path.iterdir()] == ["a.bin"]
    assert (tmp_path / "a.bin").read_bytes() == b"yz"


def test_manifest_records_hashes(tmp_path):
    src = tmp_path / "in.txt"
    src.write_text("hello")
    out = tmp_path / "out.txt"
    out.write_text("x")
    target = dio.write_manifest(out, "stage", [src], {"a": 1}, 7, [out])
    doc = dio.read_json(target)
    assert target.name == "out.txt.manifest.json"
    assert doc["inputs"][str(src)] == dio.sha256_file(src)
    assert doc["seed"] == 7 and doc["config_hash"] == dio.config_hash({"a": 1})
    assert math.isfinite(len(doc["outputs"]))
