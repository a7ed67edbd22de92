"""Voxel volumes, boxes, the BVOX file format and resolution scaling."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels

CLASS_NAMES = ("bottle", "handgun", "binocular", "glockframe", "ipod")
NUM_CLASSES = len(CLASS_NAMES)

PROVENANCES = ("real-synthetic", "tip-composited")
ENERGIES = ("low", "high", "dual")


@dataclass(frozen=True)
class Box3D:
    """Axis-aligned box, half-open voxel coordinates."""

    z0: float
    y0: float
    x0: float
    z1: float
    y1: float
    x1: float

    def __post_init__(self):
        c = self.coords
        if not all(math.isfinite(v) for v in c):
            raise ValueError(f"non-finite box coordinates {c}")
        if not (self.z1 > self.z0 and self.y1 > self.y0 and self.x1 > self.x0):
            raise ValueError(f"degenerate box {c}")

    @property
    def coords(self) -> tuple[float, ...]:
        return (self.z0, self.y0, self.x0, self.z1, self.y1, self.x1)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.coords[:3], dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.coords[3:], dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2

    @property
    def sides(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    def as_array(self) -> np.ndarray:
        return np.array(self.coords, dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box3D":
        return cls(*(float(v) for v in a))

    def slices(self) -> tuple[slice, slice, slice]:
        """Voxel slices; only meaningful for integer boxes."""
        c = [int(round(v)) for v in self.coords]
        return slice(c[0], c[3]), slice(c[1], c[4]), slice(c[2], c[5])


def boxes_to_array(boxes: Iterable[Box3D]) -> np.ndarray:
    arr = [b.as_array() for b in boxes]
    return np.array(arr, dtype=np.float64).reshape(-1, 6)


def array_to_boxes(arr) -> list[Box3D]:
    return [Box3D.from_array(r) for r in np.asarray(arr).reshape(-1, 6)]


@dataclass(frozen=True)
class Annotation:
    box: Box3D
    class_id: int
    instance_id: int = 0

    def __post_init__(self):
        if not 0 <= self.class_id < NUM_CLASSES:
            raise ValueError(f"class_id {self.class_id} outside 0..{NUM_CLASSES - 1}")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]

    def to_record(self) -> dict:
        return {
            "class_name": self.class_name,
            "class_id": self.class_id,
            "instance_id": self.instance_id,
            "box": list(self.box.coords),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Annotation":
        cid = int(rec["class_id"])
        if "class_name" in rec and rec["class_name"] != CLASS_NAMES[cid]:
            raise ValueError(f"class_name {rec['class_name']!r} does not match class_id {cid}")
        return cls(Box3D(*map(float, rec["box"])), cid, int(rec.get("instance_id", 0)))


@dataclass(frozen=True)
class VolumeMeta:
    source_id: str = ""
    provenance: str = "real-synthetic"
    energy: str = "low"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.energy not in ENERGIES:
            raise ValueError(f"unknown energy tag {self.energy!r}")


@dataclass
class Volume:
    """Channel-major voxel grid, shape ``(C, D, H, W)``."""

    voxels: np.ndarray
    meta: VolumeMeta = field(default_factory=VolumeMeta)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim == 3:
            v = v[None]
        if v.ndim != 4 or min(v.shape) < 1:
            raise ValueError(f"voxels must be (C, D, H, W) with every extent >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("voxel intensities must be finite")
        self.voxels = v

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape[1:])

    @property
    def channels(self) -> int:
        return int(self.voxels.shape[0])

    def with_voxels(self, voxels, **meta) -> "Volume":
        return Volume(voxels, replace(self.meta, **meta) if meta else self.meta)

    def equals(self, other: "Volume") -> bool:
        return (
            self.voxels.dtype == other.voxels.dtype
            and self.voxels.shape == other.voxels.shape
            and self.voxels.tobytes() == other.voxels.tobytes()
        )


# --------------------------------------------------------------------------- BVOX

MAGIC = b"BVOX"
VERSION = 1
_HEADER = struct.Struct("<4sBBBB3I")
# 0 is the only required code; 1 is a local extension for float64 payloads.
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {dt: code for code, dt in DTYPES.items()}


class FormatError(ValueError):
    """Base class for BVOX decoding failures."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class UnsupportedDtypeError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimsMismatchError(FormatError):
    pass


def encode_bvox(voxels: np.ndarray) -> bytes:
    voxels = np.asarray(voxels)
    dt = voxels.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise UnsupportedDtypeError(f"dtype {voxels.dtype} has no BVOX code")
    c, d, h, w = voxels.shape
    if c > 255:
        raise ValueError("BVOX supports at most 255 channels")
    header = _HEADER.pack(MAGIC, VERSION, _DTYPE_CODES[dt], c, 0, d, h, w)
    return header + np.ascontiguousarray(voxels, dtype=dt).tobytes()


def decode_bvox(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(f"header needs {_HEADER.size} bytes, file has {len(buf)}")
    _, version, code, c, _reserved, d, h, w = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"version {version}, expected {VERSION}")
    if code not in DTYPES:
        raise UnsupportedDtypeError(f"dtype code {code}")
    dt = DTYPES[code]
    expected = c * d * h * w * dt.itemsize
    payload = len(buf) - _HEADER.size
    if payload < expected:
        raise TruncatedPayloadError(f"payload {payload} bytes, header implies {expected}")
    if payload > expected or min(c, d, h, w) == 0:
        raise DimsMismatchError(f"payload {payload} bytes, header dims {(c, d, h, w)} imply {expected}")
    return np.frombuffer(buf, dtype=dt, offset=_HEADER.size).reshape(c, d, h, w).copy()


def annotation_path(path) -> Path:
    return Path(path).with_suffix(".json")


def meta_path(path) -> Path:
    return Path(path).with_suffix(".meta.json")


def save_annotations(annotations: Sequence[Annotation], path) -> None:
    Path(path).write_text(json.dumps([a.to_record() for a in annotations], indent=1))


def load_annotations(path) -> list[Annotation]:
    return [Annotation.from_record(r) for r in json.loads(Path(path).read_text())]


def save_volume(v: Volume, path, annotations: Sequence[Annotation] | None = None) -> None:
    path = Path(path)
    path.write_bytes(encode_bvox(v.voxels))
    meta = {"source_id": v.meta.source_id, "provenance": v.meta.provenance, "energy": v.meta.energy}
    meta_path(path).write_text(json.dumps(meta))
    save_annotations(annotations or [], annotation_path(path))


def load_volume(path) -> tuple[Volume, list[Annotation]]:
    path = Path(path)
    voxels = decode_bvox(path.read_bytes())
    mp = meta_path(path)
    meta = VolumeMeta(**json.loads(mp.read_text())) if mp.exists() else VolumeMeta(source_id=path.stem)
    ap = annotation_path(path)
    anns = load_annotations(ap) if ap.exists() else []
    return Volume(voxels, meta), anns


# ------------------------------------------------------------------------ geometry

def iou3d(a: Box3D, b: Box3D) -> float:
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    inter = float(np.prod(np.clip(hi - lo, 0, None)))
    if inter == 0.0:
        return 0.0
    return inter / (a.volume + b.volume - inter)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two ``(N, 6)`` box arrays."""
    return kernels.iou_matrix(a, b)


def clip_boxes(arr, dims) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64).reshape(-1, 6)
    ext = np.array(dims, dtype=np.float64)
    arr[:, :3] = np.clip(arr[:, :3], 0, ext)
    arr[:, 3:] = np.clip(arr[:, 3:], 0, ext)
    return arr


@dataclass(frozen=True)
class ScaleConfig:
    s: int = 3

    def __post_init__(self):
        if self.s not in (1, 2, 3, 4):
            raise ValueError(f"scale factor must be in 1..4, got {self.s}")


def scaled_dims(dims, s: int) -> tuple[int, int, int]:
    return tuple(-(-int(d) // s) for d in dims)


def resample(v: Volume, cfg: ScaleConfig) -> Volume:
    if cfg.s == 1:
        return v.with_voxels(v.voxels.copy())
    return v.with_voxels(kernels.block_mean(v.voxels, cfg.s))


def rescale_boxes(boxes: Sequence[Box3D], cfg: ScaleConfig, dims) -> list[Box3D]:
    """Map boxes from a volume of ``dims`` onto its ``resample``d grid."""
    out_dims = np.array(scaled_dims(dims, cfg.s), dtype=np.float64)
    result = []
    for b in boxes:
        lo = np.clip(b.lo / cfg.s, 0, out_dims)
        hi = np.clip(b.hi / cfg.s, 0, out_dims)
        # grow sub-voxel sides about their centre so centre ordering survives
        short = hi - lo < 1
        grown_lo = np.clip((lo + hi) / 2 - 0.5, 0, out_dims - 1)
        lo = np.where(short, grown_lo, lo)
        hi = np.where(short, grown_lo + 1, hi)
        result.append(Box3D(*lo, *hi))
    return result


def pad_to_multiple(v: Volume, m: int) -> tuple[Volume, tuple[int, int, int]]:
    if m < 1:
        raise ValueError("stride multiple must be >= 1")
    target = [-(-d // m) * m for d in v.dims]
    if list(v.dims) == target:
        return v, (0, 0, 0)
    pad = [(0, 0)] + [(0, t - d) for d, t in zip(v.dims, target)]
    return v.with_voxels(np.pad(v.voxels, pad)), (0, 0, 0)


def select_channels(v: Volume, mode: str) -> Volume:
    """Pick the low (channel 0), high (channel 1) or both energy channels."""
    if mode not in ENERGIES:
        raise ValueError(f"channel mode must be one of {ENERGIES}, got {mode!r}")
    if v.channels == 1:
        if mode == "dual":
            raise ValueError("dual-energy requested from a single-channel volume")
        return v
    idx = {"low": [0], "high": [1], "dual": [0, 1]}[mode]
    return v.with_voxels(v.voxels[idx], energy=mode)


# ------------------------------------------------------------------------ manifest

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    split: str
    split_index: int

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        if self.split_index not in (1, 2, 3):
            raise ValueError(f"split_index must be 1, 2 or 3, got {self.split_index}")


def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    lines = ["path\tsplit\tsplit_index"]
    lines += [f"{e.path}\t{e.split}\t{e.split_index}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for line in Path(path).read_text().splitlines()[1:]:
        if line.strip():
            p, split, idx = line.split("\t")
            entries.append(ManifestEntry(p, split, int(idx)))
    return entries


def manifest_paths(path, split: str, split_index: int) -> list[Path]:
    """Resolve the volume paths of one split, relative to the manifest's folder."""
    root = Path(path).parent
    return [
        root / e.path
        for e in read_manifest(path)
        if e.split == split and e.split_index == split_index
    ]
