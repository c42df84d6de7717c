"""Binary matrix container (NMAT1) and JSON manifest I/O.

NMAT1 layout, all little-endian::

    offset  size  field
    0       8     magic  b"NMAT1\\0\\0\\0"
    8       4     version (u32, = 1)
    12      4     dtype   (u32, 0 = float32)
    16      8     rows    (u64)
    24      8     cols    (u64)
    32      ...   rows*cols float32 values, row-major
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NMAT1\x00\x00\x00"
VERSION = 1
DTYPE_F32 = 0
HEADER = struct.Struct("<8sIIQQ")
HEADER_SIZE = HEADER.size  # 32

REGIONS = (
    "posterior temporal",
    "anterior temporal",
    "inferior frontal",
    "angular gyrus",
    "dmPFC",
)


class MatrixFormatError(ValueError):
    """Raised for malformed NMAT1 files or invalid payloads."""


class ManifestError(ValueError):
    """Raised when a JSON manifest violates its invariants."""


def write_matrix(path, matrix) -> None:
    """Write a 2-D array as an NMAT1 file.

    Doubles are converted to float32. A 1-D input is written as a single column.
    """
    a = np.asarray(matrix)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise MatrixFormatError(f"expected a 2-D matrix, got shape {a.shape}")
    rows, cols = a.shape
    if rows < 1 or cols < 1:
        raise MatrixFormatError("empty matrix")
    a = np.ascontiguousarray(a, dtype="<f4")
    if not np.all(np.isfinite(a)):
        raise MatrixFormatError("non-finite payload")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, DTYPE_F32, rows, cols))
        fh.write(a.tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    """Read an NMAT1 file into a ``(rows, cols)`` float32 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise MatrixFormatError("truncated header")
    magic, version, dtype, rows, cols = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MatrixFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise MatrixFormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise MatrixFormatError(f"unsupported dtype code {dtype}")
    if rows < 1 or cols < 1:
        raise MatrixFormatError("empty dimensions")
    need = rows * cols * 4
    payload = raw[HEADER_SIZE:]
    if len(payload) < need:
        raise MatrixFormatError(
            f"truncated payload: {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise MatrixFormatError("trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)


@dataclass
class StoryManifest:
    story_id: str
    word_onsets: np.ndarray
    n_trs: int
    tr_seconds: float = 2.0
    censor_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.word_onsets = np.asarray(self.word_onsets, dtype=float)
        if self.censor_mask is None:
            self.censor_mask = np.ones(self.n_trs, dtype=bool)
        self.censor_mask = np.asarray(self.censor_mask, dtype=bool)
        validate_manifest(self)

    @property
    def duration(self) -> float:
        return self.n_trs * self.tr_seconds

    def to_dict(self) -> dict:
        return {
            "story_id": self.story_id,
            "word_onsets": [float(x) for x in self.word_onsets],
            "n_trs": int(self.n_trs),
            "tr_seconds": float(self.tr_seconds),
            "censor_mask": [bool(x) for x in self.censor_mask],
        }


def validate_manifest(m: StoryManifest) -> None:
    if m.n_trs < 1:
        raise ManifestError("n_trs must be positive")
    if m.tr_seconds <= 0:
        raise ManifestError("tr_seconds must be positive")
    on = m.word_onsets
    if on.ndim != 1:
        raise ManifestError("word_onsets must be a flat list")
    if on.size and np.any(np.diff(on) <= 0):
        raise ManifestError("non-monotone onsets")
    if on.size and (on[0] < 0 or on[-1] >= m.duration):
        raise ManifestError("onset past scan end")
    if m.censor_mask.shape != (m.n_trs,):
        raise ManifestError(
            f"censor_mask length {m.censor_mask.size} != n_trs {m.n_trs}")


def load_manifest(path) -> StoryManifest:
    with open(path) as fh:
        d = json.load(fh)
    return manifest_from_dict(d)


def manifest_from_dict(d: dict) -> StoryManifest:
    try:
        return StoryManifest(
            story_id=str(d["story_id"]),
            word_onsets=d["word_onsets"],
            n_trs=int(d["n_trs"]),
            tr_seconds=float(d.get("tr_seconds", 2.0)),
            censor_mask=d.get("censor_mask"),
        )
    except KeyError as exc:
        raise ManifestError(f"missing manifest key {exc}") from None


def save_manifest(path, manifest: StoryManifest) -> None:
    write_json(path, manifest.to_dict())


def load_regions(path) -> dict[str, str]:
    """Load a ``{voxel_id: region}`` JSON mapping and check region names."""
    with open(path) as fh:
        d = json.load(fh)
    return validate_regions(d)


def validate_regions(d: dict) -> dict[str, str]:
    out = {}
    for vox, region in d.items():
        if region not in REGIONS:
            raise ManifestError(f"voxel {vox}: unknown region {region!r}")
        out[str(vox)] = region
    return out


def write_json(path, obj) -> None:
    """Deterministic strict JSON (sorted keys, fixed indent, non-finite floats as null)."""
    text = json.dumps(to_jsonable(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text + "\n")
    os.replace(tmp, path)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def to_jsonable(o):
    """Plain Python containers with numpy values converted and NaN/inf mapped to None."""
    if isinstance(o, dict):
        return {str(k): to_jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [to_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return to_jsonable(o.tolist())
    if isinstance(o, (bool, np.bool_)):
        return bool(o)
    if isinstance(o, (int, np.integer)):
        return int(o)
    if isinstance(o, (float, np.floating)):
        return float(o) if np.isfinite(o) else None
    if isinstance(o, Path):
        return str(o)
    if o is None or isinstance(o, str):
        return o
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
