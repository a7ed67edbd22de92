"""Procedural cluttered bags and threat-image-projection compositing.

Foreground classes are parametric solids standing in for real scans:

==========  ======================================  ==============
class       shape                                   intensity
==========  ======================================  ==============
bottle      hollow cylinder with base and neck      ~0.70
handgun     L-shaped union of two cuboids           ~0.90 (metal)
binocular   two parallel cylinders and a bridge     ~0.75
glockframe  L-shape, thinner than the handgun       clutter mean +- noise sigma
ipod        thin slab with a brighter inner board   0.60 / 0.80
==========  ======================================  ==============

Each instance gets a random axis-aligned orientation (one of the 48
signed axis permutations) before placement.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import kernels
from .volcore import CLASS_NAMES, Annotation, Box3D, Volume, VolumeMeta, load_volume, save_volume

OCCUPANCY_THRESHOLD = 0.3
MAX_COLLISION = 0.05
MAX_ATTEMPTS = 100

# high-energy channel = base * factor
MATERIAL_FACTOR = {0: 0.80, 1: 1.00, 2: 0.95, 3: 0.85, 4: 0.90}
CLUTTER_FACTORS = (0.80, 0.85, 0.90, 0.95, 1.00)


class PlacementError(RuntimeError):
    pass


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class BagSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    channels: int = 1
    clutter_count: tuple[int, int] = (4, 8)
    clutter_intensity: tuple[float, float] = (0.25, 0.55)
    noise: float = 0.03
    # (class_id, count) pairs
    targets: tuple[tuple[int, int], ...] = ()
    size_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 32:
            raise ValueError(f"bag dims must each be >= 32, got {self.dims}")
        if self.channels not in (1, 2):
            raise ValueError("channels must be 1 or 2")
        if self.noise < 0:
            raise ValueError("noise sigma must be >= 0")
        lo, hi = self.clutter_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad clutter count range {self.clutter_count}")
        for cid, n in self.targets:
            if not 0 <= cid < len(CLASS_NAMES) or n < 0:
                raise ValueError(f"bad target entry {(cid, n)}")

    @property
    def clutter_mean(self) -> float:
        return float(np.mean(self.clutter_intensity))


@dataclass
class Signature:
    voxels: np.ndarray  # (C, d, h, w), zero outside mask
    mask: np.ndarray  # (d, h, w) bool
    class_id: int
    source_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.voxels.ndim == 3:
            self.voxels = self.voxels[None]
        if self.voxels.shape[1:] != self.mask.shape:
            raise ValueError("signature voxels and mask dims differ")
        if not self.mask.any():
            raise EmptyMaskError("signature mask is empty")
        if np.any(self.voxels[:, ~self.mask] != 0):
            raise ValueError("signature voxels outside the mask must be 0")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.mask.shape


# ------------------------------------------------------------------ shapes

def _grid(shape):
    return np.indices(shape, dtype=np.float64) + 0.5


def _cylinder(shape, r, center_yx):
    _, y, x = _grid(shape)
    return (y - center_yx[0]) ** 2 + (x - center_yx[1]) ** 2 <= r * r


def _bottle(rng, k):
    length = int(round(rng.uniform(14, 20) * k))
    r = rng.uniform(4.0, 5.5) * k
    neck = max(2, int(round(3 * k)))
    side = int(np.ceil(2 * r)) + 1
    shape = (length, side, side)
    c = (side / 2, side / 2)
    outer = _cylinder(shape, r, c)
    inner = _cylinder(shape, r - 1.6, c)
    z = _grid(shape)[0]
    body = outer & ~(inner & (z > 1.5) & (z < length - neck))
    body &= (z < length - neck) | _cylinder(shape, r * 0.5, c)
    body &= ~((z >= length - neck) & _cylinder(shape, max(r * 0.5 - 1.2, 0.6), c))
    return body.astype(np.float64) * rng.uniform(0.66, 0.74)


def _l_shape(rng, k, long_len, thick, grip_len, grip_w, width):
    ll = int(round(rng.uniform(*long_len) * k))
    th = max(2, int(round(rng.uniform(*thick) * k)))
    gl = int(round(rng.uniform(*grip_len) * k))
    gw = max(2, int(round(rng.uniform(*grip_w) * k)))
    wd = max(2, int(round(rng.uniform(*width) * k)))
    m = np.zeros((th + gl, ll, wd), dtype=bool)
    m[:th, :, :] = True
    m[th:, ll - gw:, :] = True
    return m


def _handgun(rng, k):
    m = _l_shape(rng, k, (16, 20), (4, 5), (8, 10), (4, 5), (3, 4))
    return m * rng.uniform(0.86, 0.94)


def _glockframe(rng, k, clutter_mean, sigma):
    m = _l_shape(rng, k, (14, 17), (2, 3), (7, 9), (3, 4), (2, 3))
    level = clutter_mean + rng.uniform(-1, 1) * sigma
    return m * level


def _binocular(rng, k):
    length = int(round(rng.uniform(10, 13) * k))
    r = rng.uniform(2.5, 3.5) * k
    gap = rng.uniform(1.5, 3.0) * k
    h = int(np.ceil(2 * r)) + 1
    w = int(np.ceil(4 * r + gap)) + 1
    shape = (length, h, w)
    a = _cylinder(shape, r, (h / 2, r + 0.5))
    b = _cylinder(shape, r, (h / 2, w - r - 0.5))
    z, y, x = _grid(shape)
    bridge = (np.abs(z - length / 2) < 2 * k) & (np.abs(y - h / 2) < 1.2 * k) & (x > r) & (x < w - r)
    return (a | b | bridge) * rng.uniform(0.72, 0.78)


def _ipod(rng, k):
    t = max(2, int(round(rng.uniform(2, 3) * k)))
    a = int(round(rng.uniform(10, 12) * k))
    b = int(round(rng.uniform(6, 7) * k))
    v = np.full((t, a, b), 0.6)
    v[:, 2:a - 2, 1:b - 1] = 0.8
    return v


def render_target(class_id: int, rng: np.random.Generator, spec: BagSpec) -> np.ndarray:
    """Intensity block of one object in a random axis-aligned orientation."""
    k = spec.size_scale
    if class_id == 0:
        v = _bottle(rng, k)
    elif class_id == 1:
        v = _handgun(rng, k)
    elif class_id == 2:
        v = _binocular(rng, k)
    elif class_id == 3:
        v = _glockframe(rng, k, spec.clutter_mean, spec.noise)
    else:
        v = _ipod(rng, k)
    v = np.transpose(v, rng.permutation(3))
    flips = [a for a in range(3) if rng.random() < 0.5]
    return np.ascontiguousarray(np.flip(v, flips) if flips else v)


def render_clutter(rng: np.random.Generator, spec: BagSpec) -> np.ndarray:
    k = spec.size_scale
    level = rng.uniform(*spec.clutter_intensity)
    kind = rng.integers(3)
    if kind == 0:
        radii = rng.uniform(3, 8, size=3) * k
        shape = tuple(int(np.ceil(2 * r)) + 1 for r in radii)
        g = _grid(shape)
        m = sum(((g[i] - shape[i] / 2) / radii[i]) ** 2 for i in range(3)) <= 1
    elif kind == 1:
        shape = tuple(int(s) for s in np.round(rng.uniform(3, 14, size=3) * k).astype(int))
        m = np.ones(shape, dtype=bool)
    else:
        length = int(round(rng.uniform(10, 25) * k))
        r = rng.uniform(1.5, 3.0) * k
        side = int(np.ceil(2 * r)) + 1
        m = _cylinder((length, side, side), r, (side / 2, side / 2))
        m = np.transpose(m, rng.permutation(3))
    return np.ascontiguousarray(m * level)


# ---------------------------------------------------------------- placement

def tight_box(mask: np.ndarray, origin=(0, 0, 0)) -> Box3D:
    idx = np.nonzero(mask)
    lo = [int(i.min()) + o for i, o in zip(idx, origin)]
    hi = [int(i.max()) + 1 + o for i, o in zip(idx, origin)]
    return Box3D(*lo, *hi)


def _random_origin(rng, dims, block, margin=0):
    room = [d - b - 2 * margin for d, b in zip(dims, block)]
    if min(room) < 0:
        return None
    return tuple(int(rng.integers(r + 1)) + margin for r in room)


def _region(origin, shape):
    return tuple(slice(o, o + s) for o, s in zip(origin, shape))


def generate_bag(spec: BagSpec, with_masks: bool = False):
    """Returns ``(volume, annotations)``, plus per-instance ``(origin, mask)`` pairs if ``with_masks``."""
    rng = np.random.default_rng(spec.seed)
    dims = tuple(spec.dims)
    base = np.zeros(dims)
    factor = np.ones(dims)
    placed = []
    blocked = np.zeros(dims, dtype=bool)
    anns: list[Annotation] = []

    instance = 0
    for class_id, count in spec.targets:
        for _ in range(count):
            block = render_target(class_id, rng, spec)
            mask = block > 0
            for _attempt in range(MAX_ATTEMPTS):
                origin = _random_origin(rng, dims, block.shape, margin=1)
                if origin is None:
                    raise PlacementError(f"{CLASS_NAMES[class_id]} of size {block.shape} does not fit {dims}")
                region = _region(origin, block.shape)
                # keep a one-voxel gap so instances stay separate 6-connected components
                if not np.any(blocked[region] & mask):
                    break
            else:
                raise PlacementError(
                    f"could not place {CLASS_NAMES[class_id]} collision-free after {MAX_ATTEMPTS} attempts"
                )
            base[region][mask] = block[mask]
            factor[region][mask] = MATERIAL_FACTOR[class_id]
            placed.append((origin, mask))
            grown = _region([o - 1 for o in origin], [b + 2 for b in block.shape])
            blocked[grown] |= ndimage.binary_dilation(np.pad(mask, 1))
            anns.append(Annotation(tight_box(mask, origin), class_id, instance))
            instance += 1

    keep_out = blocked
    lo, hi = spec.clutter_count
    for _ in range(int(rng.integers(lo, hi + 1))):
        block = render_clutter(rng, spec)
        mask = block > 0
        mat = CLUTTER_FACTORS[int(rng.integers(len(CLUTTER_FACTORS)))]
        for _attempt in range(20):
            origin = _random_origin(rng, dims, block.shape)
            if origin is None:
                break
            region = _region(origin, block.shape)
            if not np.any(keep_out[region] & mask):
                sub = base[region]
                brighter = mask & (block > sub)
                sub[brighter] = block[brighter]
                factor[region][brighter] = mat
                break

    channels = [base]
    if spec.channels == 2:
        channels.append(base * factor)
    vox = np.stack(channels)
    if spec.noise > 0:
        vox = vox + rng.normal(0.0, spec.noise, size=vox.shape)
    vox = np.clip(vox, 0.0, 1.0).astype(np.float32)
    meta = VolumeMeta(f"bag-{spec.seed}", "real-synthetic", "dual" if spec.channels == 2 else "low")
    if with_masks:
        return Volume(vox, meta), anns, placed
    return Volume(vox, meta), anns


# ----------------------------------------------------------------------- TIP

def extract_signature(
    v: Volume, seed_box: Box3D, threshold: float, class_id: int = 0, channel: int = 0
) -> Signature:
    """Largest 6-connected blob above ``threshold`` inside ``seed_box``, cropped tight."""
    lo = [int(np.floor(c)) for c in seed_box.coords[:3]]
    hi = [int(np.ceil(c)) for c in seed_box.coords[3:]]
    if min(lo) < 0 or any(h > d for h, d in zip(hi, v.dims)):
        raise ValueError(f"seed box {seed_box.coords} exceeds volume extent {v.dims}")
    region = _region(lo, [h - l for l, h in zip(lo, hi)])
    sub = v.voxels[(slice(None),) + region]
    labels, n = kernels.label_components(sub[channel] > threshold)
    if n == 0:
        raise EmptyMaskError(f"no voxel exceeds threshold {threshold} inside the seed box")
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    mask = labels == int(np.argmax(sizes)) + 1
    box = tight_box(mask)
    crop = box.slices()
    mask = mask[crop]
    vox = np.where(mask, sub[(slice(None),) + crop], 0).astype(v.voxels.dtype)
    return Signature(vox, mask, class_id, v.meta.source_id)


def project_signature(
    target: Volume,
    sig: Signature,
    rng: np.random.Generator,
    occupancy_threshold: float = OCCUPANCY_THRESHOLD,
    max_collision: float = MAX_COLLISION,
    attempts: int = MAX_ATTEMPTS,
    instance_id: int = 0,
) -> tuple[Volume, Annotation]:
    """Insert ``sig`` at a random low-collision spot by voxel-wise max blending."""
    if any(s > d for s, d in zip(sig.dims, target.dims)):
        raise ValueError(f"signature {sig.dims} larger than target {target.dims}")
    if sig.voxels.shape[0] != target.channels:
        raise ValueError(f"signature has {sig.voxels.shape[0]} channels, target {target.channels}")
    n_mask = int(sig.mask.sum())
    occupied = target.voxels[0] > occupancy_threshold
    for _ in range(attempts):
        origin = _random_origin(rng, target.dims, sig.dims)
        region = _region(origin, sig.dims)
        if np.count_nonzero(occupied[region] & sig.mask) <= max_collision * n_mask:
            break
    else:
        raise PlacementError(f"no placement with <= {max_collision:.0%} collision after {attempts} attempts")
    out = target.voxels.copy()
    full = (slice(None),) + region
    out[full] = np.where(sig.mask, np.maximum(out[full], sig.voxels), out[full])
    ann = Annotation(tight_box(sig.mask, origin), sig.class_id, instance_id)
    return target.with_voxels(out, provenance="tip-composited"), ann


def save_signature(sig: Signature, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_volume(Volume(sig.voxels), d / "voxels.bvox")
    save_volume(Volume(sig.mask[None].astype(np.float32)), d / "mask.bvox")
    meta = {"class_id": sig.class_id, "class_name": CLASS_NAMES[sig.class_id], "source_id": sig.source_id}
    (d / "signature.json").write_text(json.dumps(meta))


def load_signature(directory) -> Signature:
    d = Path(directory)
    vox, _ = load_volume(d / "voxels.bvox")
    mask, _ = load_volume(d / "mask.bvox")
    meta = json.loads((d / "signature.json").read_text())
    return Signature(vox.voxels, mask.voxels[0] > 0.5, int(meta["class_id"]), meta.get("source_id", ""))


# ------------------------------------------------------------------- dataset

@dataclass(frozen=True)
class DatasetSpec:
    """How ``synthesize_dataset`` draws per-bag specs."""

    bag: BagSpec = field(default_factory=BagSpec)
    objects_per_bag: tuple[int, int] = (1, 3)
    tip_fraction: float = 0.3
    signature_threshold: float = 0.2
    classes: tuple[int, ...] = (0, 1, 2, 3, 4)


def _draw_targets(rng, ds: DatasetSpec) -> tuple[tuple[int, int], ...]:
    n = int(rng.integers(ds.objects_per_bag[0], ds.objects_per_bag[1] + 1))
    counts = np.bincount(rng.choice(ds.classes, size=n), minlength=len(CLASS_NAMES))
    return tuple((c, int(k)) for c, k in enumerate(counts) if k)


def tip_bag(ds: DatasetSpec, targets, seed: int) -> tuple[Volume, list[Annotation]]:
    """Object-only source bag -> signatures -> projected into a clutter-only bag."""
    source, anns = generate_bag(replace(ds.bag, targets=targets, clutter_count=(0, 0), seed=seed))
    sigs = [extract_signature(source, a.box, ds.signature_threshold, a.class_id) for a in anns]
    bag, _ = generate_bag(replace(ds.bag, targets=(), seed=seed + 1))
    rng = np.random.default_rng([seed, 2])
    out = []
    for i, s in enumerate(sigs):
        bag, ann = project_signature(bag, s, rng, instance_id=i)
        out.append(ann)
    return replace_source(bag, f"tip-{seed}"), out


def replace_source(v: Volume, source_id: str) -> Volume:
    return Volume(v.voxels, replace(v.meta, source_id=source_id))


def make_dataset_item(ds: DatasetSpec, seed: int, index: int) -> tuple[Volume, list[Annotation]]:
    """Deterministic bag ``index`` of the dataset rooted at ``seed``."""
    rng = np.random.default_rng([seed, index])
    targets = _draw_targets(rng, ds)
    use_tip = rng.random() < ds.tip_fraction
    for retry in range(10):
        sub = int(rng.integers(2**31))
        try:
            if use_tip:
                return tip_bag(ds, targets, sub)
            v, anns = generate_bag(replace(ds.bag, targets=targets, seed=sub))
            return replace_source(v, f"bag-{seed}-{index}"), anns
        except PlacementError:
            continue
    raise PlacementError(f"dataset item {index}: placement failed on 10 derived seeds")


def worker_count() -> int:
    return max(1, int(os.environ.get("BAGGAGEDET_WORKERS", os.cpu_count() or 1)))


def _write_item(args):
    ds, seed, index, out_dir = args
    v, anns = make_dataset_item(ds, seed, index)
    name = f"vol_{index:05d}.bvox"
    save_volume(v, Path(out_dir) / name, anns)
    return name


def synthesize_dataset(ds: DatasetSpec, count: int, out_dir, seed: int = 0) -> list[str]:
    """Write ``count`` bags as BVOX + sidecars and a ``volumes.txt`` list; returns file names."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(ds, seed, i, str(out_dir)) for i in range(count)]
    workers = min(worker_count(), count)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            names = list(pool.map(_write_item, jobs))
    else:
        names = [_write_item(j) for j in jobs]
    (out_dir / "volumes.txt").write_text("\n".join(names) + "\n")
    return names


def load_dataset(out_dir, names: Sequence[str] | None = None) -> list[tuple[Volume, list[Annotation]]]:
    out_dir = Path(out_dir)
    if names is None:
        names = (out_dir / "volumes.txt").read_text().split()
    return [load_volume(out_dir / n) for n in names]
