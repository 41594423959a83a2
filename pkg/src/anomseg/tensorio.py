"""Bit-exact portable tensor container and dataset manifests.

Container layout (little-endian throughout):

    magic   8 bytes, ASCII "ANOMTEN1"
    dtype   1 byte   (1 = float32, 2 = uint8)
    ndim    1 byte   (1..4)
    dims    ndim * uint32
    payload row-major values

Manifests are UTF-8 JSON with keys ``records``, ``class_names``, ``roi``.
Each record holds ``image`` (float32 tensor path), ``label`` (uint8 tensor
path), ``split`` and ``seed``.  Label value 255 is reserved for ignore
pixels; the value equal to ``len(class_names)`` marks the anomalous shape
of the scene's split (see synthworld).
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ANOMTEN1"
IGNORE_LABEL = 255
SPLITS = ("train", "proxy-anom", "test", "novel")

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("uint8")}
_CODE_FOR_KIND = {"f": 1, "u": 2}


class TensorIOError(ValueError):
    """Malformed container or manifest."""


def write_tensor(path, tensor):
    """Serialize a float32 or uint8 array; round-trips bit-exactly."""
    arr = np.asarray(tensor)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f4", copy=False)
    elif arr.dtype.kind in "ui":
        arr = arr.astype(np.uint8, copy=False)
    else:
        raise TensorIOError(f"unsupported dtype {arr.dtype}")
    if not 1 <= arr.ndim <= 4:
        raise TensorIOError(f"ndim {arr.ndim} outside 1..4")
    if any(d == 0 for d in arr.shape):
        raise TensorIOError("zero dimension")
    code = _CODE_FOR_KIND[arr.dtype.kind]
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def read_tensor(path):
    """Inverse of write_tensor."""
    blob = Path(path).read_bytes()
    if len(blob) < 10 or blob[:8] != MAGIC:
        raise TensorIOError(f"bad magic in {path}")
    code, ndim = struct.unpack_from("<BB", blob, 8)
    if code not in _DTYPE_CODES:
        raise TensorIOError(f"unknown dtype code {code} in {path}")
    if not 1 <= ndim <= 4:
        raise TensorIOError(f"bad ndim {ndim} in {path}")
    off = 10
    if len(blob) < off + 4 * ndim:
        raise TensorIOError(f"truncated header in {path}")
    dims = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    dt = _DTYPE_CODES[code]
    n = int(np.prod(dims))
    need = n * dt.itemsize
    if len(blob) - off < need:
        raise TensorIOError(f"truncated payload in {path}")
    if len(blob) - off > need:
        raise TensorIOError(f"trailing bytes in {path}")
    return np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(dims).copy()


@dataclass
class ManifestRecord:
    image: str
    label: str
    split: str
    seed: int


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    class_names: list = field(default_factory=list)
    roi: str | None = None
    base_dir: Path = Path(".")

    def resolve(self, rel):
        return self.base_dir / rel

    def by_split(self, split):
        return [r for r in self.records if r.split == split]


def load_manifest(path):
    """Parse and validate a manifest; every referenced file must exist and parse."""
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    for key in ("records", "class_names", "roi"):
        if key not in data:
            raise TensorIOError(f"manifest missing key {key!r}")
    base = path.parent
    records = []
    seen = set()
    for rec in data["records"]:
        r = ManifestRecord(rec["image"], rec["label"], rec["split"], int(rec["seed"]))
        if r.split not in SPLITS:
            raise TensorIOError(f"unknown split tag {r.split!r}")
        if r.image in seen:
            raise TensorIOError(f"duplicate record for {r.image}")
        seen.add(r.image)
        for ref in (r.image, r.label):
            full = base / ref
            if not full.exists():
                raise TensorIOError(f"missing file reference: {full}")
            read_tensor(full)
        records.append(r)
    roi = data["roi"]
    if roi is not None:
        if not (base / roi).exists():
            raise TensorIOError(f"missing file reference: {base / roi}")
        read_tensor(base / roi)
    return DatasetManifest(records, list(data["class_names"]), roi, base)


def save_manifest(path, manifest):
    payload = {
        "records": [
            {"image": r.image, "label": r.label, "split": r.split, "seed": r.seed}
            for r in manifest.records
        ],
        "class_names": manifest.class_names,
        "roi": manifest.roi,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
