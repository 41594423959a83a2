import json

import numpy as np
import pytest

from anomseg.tensorio import (
    DatasetManifest,
    ManifestRecord,
    TensorIOError,
    load_manifest,
    read_tensor,
    save_manifest,
    write_tensor,
)


def test_2x2_float_file_is_34_bytes(tmp_path):
    # 8 magic + 1 dtype + 1 ndim + 2*4 dims + 4*4 payload
    path = tmp_path / "t.ten"
    write_tensor(path, np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
    assert path.stat().st_size == 34


def test_header_bytes_exact(tmp_path):
    path = tmp_path / "t.ten"
    write_tensor(path, np.array([7], dtype=np.uint8))
    blob = path.read_bytes()
    assert blob == b"ANOMTEN1" + bytes([2, 1]) + (1).to_bytes(4, "little") + bytes([7])


def test_zero_filled_label_roundtrip(tmp_path):
    path = tmp_path / "z.ten"
    t = np.zeros((1, 1), dtype=np.uint8)
    write_tensor(path, t)
    back = read_tensor(path)
    assert back.dtype == np.uint8
    assert np.array_equal(back, t)


def test_zero_dimension_rejected(tmp_path):
    with pytest.raises(TensorIOError, match="zero dimension"):
        write_tensor(tmp_path / "bad.ten", np.empty((3, 0), dtype=np.float32))


@pytest.mark.parametrize("ndim", [1, 2, 3, 4])
@pytest.mark.parametrize("dtype", [np.float32, np.uint8])
def test_roundtrip_bit_exact(tmp_path, ndim, dtype):
    rng = np.random.default_rng(ndim)
    shape = tuple(rng.integers(1, 5, ndim))
    if dtype is np.float32:
        t = rng.standard_normal(shape).astype(np.float32)
    else:
        t = rng.integers(0, 256, shape).astype(np.uint8)
    path = tmp_path / "t.ten"
    write_tensor(path, t)
    first = path.read_bytes()
    back = read_tensor(path)
    assert np.array_equal(back, t) and back.dtype == t.dtype
    write_tensor(path, back)
    assert path.read_bytes() == first


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ten"
    path.write_bytes(b"XXXXXXXX" + bytes(20))
    with pytest.raises(TensorIOError, match="bad magic"):
        read_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.ten"
    write_tensor(path, np.ones((2, 2), dtype=np.float32))
    blob = path.read_bytes()
    path.write_bytes(blob[:-1])
    with pytest.raises(TensorIOError, match="truncated"):
        read_tensor(path)


def test_unknown_dtype_code(tmp_path):
    path = tmp_path / "t.ten"
    write_tensor(path, np.ones(2, dtype=np.float32))
    blob = bytearray(path.read_bytes())
    blob[8] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(TensorIOError, match="unknown dtype"):
        read_tensor(path)


def _write_scene_pair(base, stem, split, seed):
    write_tensor(base / f"{stem}_img.ten", np.zeros((4, 4, 3), dtype=np.float32))
    write_tensor(base / f"{stem}_lab.ten", np.zeros((4, 4), dtype=np.uint8))
    return ManifestRecord(f"{stem}_img.ten", f"{stem}_lab.ten", split, seed)


def test_manifest_roundtrip(tmp_path):
    recs = [
        _write_scene_pair(tmp_path, "a", "train", 1),
        _write_scene_pair(tmp_path, "b", "test", 2),
    ]
    save_manifest(tmp_path / "m.json", DatasetManifest(recs, ["bg"], None))
    m = load_manifest(tmp_path / "m.json")
    assert len(m.records) == 2
    assert m.class_names == ["bg"]
    assert len(m.by_split("train")) == 1


def test_manifest_missing_file_names_path(tmp_path):
    rec = ManifestRecord("nope_img.ten", "nope_lab.ten", "train", 1)
    save_manifest(tmp_path / "m.json", DatasetManifest([rec], [], None))
    with pytest.raises(TensorIOError, match="nope_img.ten"):
        load_manifest(tmp_path / "m.json")


def test_manifest_empty_is_valid(tmp_path):
    save_manifest(tmp_path / "m.json", DatasetManifest([], ["bg"], None))
    m = load_manifest(tmp_path / "m.json")
    assert m.records == []


def test_manifest_duplicate_record(tmp_path):
    rec = _write_scene_pair(tmp_path, "a", "train", 1)
    dup = ManifestRecord(rec.image, rec.label, "test", 2)
    save_manifest(tmp_path / "m.json", DatasetManifest([rec, dup], [], None))
    with pytest.raises(TensorIOError, match="duplicate"):
        load_manifest(tmp_path / "m.json")


def test_manifest_bad_split(tmp_path):
    rec = _write_scene_pair(tmp_path, "a", "validation", 1)
    save_manifest(tmp_path / "m.json", DatasetManifest([rec], [], None))
    with pytest.raises(TensorIOError, match="split"):
        load_manifest(tmp_path / "m.json")


def test_manifest_missing_key(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"records": []}))
    with pytest.raises(TensorIOError, match="class_names"):
        load_manifest(tmp_path / "m.json")
