"""Pyramid anchors, IoU-threshold matching and box delta coding."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .volcore import Annotation, Box3D

LEVEL_STRIDES = {2: 4, 3: 8, 4: 16, 5: 32}
LOG_CLAMP = 4.0


class AnchorGridError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorConfig:
    base_sizes: tuple[float, ...] = (8, 16, 32, 64)
    multipliers: tuple[float, ...] = (1.0,)
    levels: tuple[int, ...] = (2, 3, 4, 5)

    def __post_init__(self):
        if len(self.base_sizes) != len(self.levels):
            raise ValueError("need one base size per pyramid level")
        if any(l not in LEVEL_STRIDES for l in self.levels) or list(self.levels) != sorted(set(self.levels)):
            raise ValueError(f"levels must be ascending and drawn from P2..P5, got {self.levels}")
        if list(self.base_sizes) != sorted(self.base_sizes) or min(self.base_sizes) <= 0:
            raise ValueError("base sizes must be positive and ascending with level")
        if not self.multipliers or min(self.multipliers) <= 0:
            raise ValueError("need at least one positive scale multiplier")

    @property
    def n_a(self) -> int:
        return len(self.multipliers)


@dataclass(frozen=True)
class AnchorSet:
    """All anchors of a pyramid, flattened level-major then (z, y, x, a)."""

    boxes: np.ndarray
    levels: tuple[int, ...]
    grid_shapes: tuple[tuple[int, int, int], ...]
    offsets: tuple[int, ...]
    n_a: int
    input_dims: tuple[int, int, int]

    def __len__(self):
        return len(self.boxes)

    def linear_id(self, level: int, z: int, y: int, x: int, a: int) -> int:
        li = self.levels.index(level)
        _, h, w = self.grid_shapes[li]
        return self.offsets[li] + ((z * h + y) * w + x) * self.n_a + a

    def unravel(self, idx: int) -> tuple[int, int, int, int, int]:
        li = int(np.searchsorted(self.offsets, idx, side="right")) - 1
        rem = idx - self.offsets[li]
        d, h, w = self.grid_shapes[li]
        a = rem % self.n_a
        z, y, x = np.unravel_index(rem // self.n_a, (d, h, w))
        return self.levels[li], int(z), int(y), int(x), int(a)

    def level_count(self, level: int) -> int:
        li = self.levels.index(level)
        return int(np.prod(self.grid_shapes[li])) * self.n_a


def build_anchor_grid(input_dims, cfg: AnchorConfig = AnchorConfig()) -> AnchorSet:
    dims = tuple(int(d) for d in input_dims)
    if any(d % 32 for d in dims):
        raise AnchorGridError(f"input dims {dims} not divisible by 32; pad first")
    per_level, shapes, offsets = [], [], []
    total = 0
    for level, base in zip(cfg.levels, cfg.base_sizes):
        stride = LEVEL_STRIDES[level]
        shape = tuple(d // stride for d in dims)
        centers = [stride / 2 + stride * np.arange(n) for n in shape]
        cz, cy, cx = np.meshgrid(*centers, indexing="ij")
        c = np.stack([cz, cy, cx], axis=-1).reshape(-1, 1, 3)
        sides = (base * np.asarray(cfg.multipliers, dtype=np.float64)).reshape(1, -1, 1)
        boxes = np.concatenate([c - sides / 2, c + sides / 2], axis=-1).reshape(-1, 6)
        per_level.append(boxes)
        shapes.append(shape)
        offsets.append(total)
        total += len(boxes)
    return AnchorSet(
        np.concatenate(per_level), tuple(cfg.levels), tuple(shapes), tuple(offsets), cfg.n_a, dims
    )


# ---------------------------------------------------------------------- deltas

def encode(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorised deltas ``(tz, ty, tx, td, th, tw)`` of ``gts`` w.r.t. cube-or-box ``anchors``."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 6)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 6)
    a_c = (anchors[:, :3] + anchors[:, 3:]) / 2
    a_s = anchors[:, 3:] - anchors[:, :3]
    g_c = (gts[:, :3] + gts[:, 3:]) / 2
    g_s = gts[:, 3:] - gts[:, :3]
    return np.concatenate([(g_c - a_c) / a_s, np.log(g_s / a_s)], axis=1)


def decode(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 6)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 6)
    a_c = (anchors[:, :3] + anchors[:, 3:]) / 2
    a_s = anchors[:, 3:] - anchors[:, :3]
    c = a_c + deltas[:, :3] * a_s
    s = a_s * np.exp(np.clip(deltas[:, 3:], -LOG_CLAMP, LOG_CLAMP))
    return np.concatenate([c - s / 2, c + s / 2], axis=1)


def encode_deltas(anchor: Box3D, gt: Box3D) -> np.ndarray:
    return encode(anchor.as_array(), gt.as_array())[0]


def decode_deltas(anchor: Box3D, d) -> Box3D:
    return Box3D.from_array(decode(anchor.as_array(), d)[0])


# -------------------------------------------------------------------- matching

@dataclass
class MatchResult:
    """Per-anchor assignment.

    ``labels`` holds the softmax target: 0 for background, ``class_id + 1``
    for positives. ``targets`` is zero on negatives.
    """

    labels: np.ndarray
    gt_index: np.ndarray
    targets: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def match_anchors(anchors: AnchorSet, gts: Sequence[Annotation], iou_t: float = 0.1) -> MatchResult:
    if not 0.0 < iou_t < 1.0:
        raise ValueError(f"match IoU must lie in (0, 1), got {iou_t}")
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 6), dtype=np.float64)
    if not gts:
        return MatchResult(labels, gt_index, targets)

    gt_boxes = np.stack([g.box.as_array() for g in gts])
    classes = np.array([g.class_id for g in gts], dtype=np.int64)
    iou = kernels.iou_matrix(anchors.boxes, gt_boxes)

    best_gt = np.argmax(iou, axis=1)
    best_iou = iou[np.arange(n), best_gt]
    pos = best_iou >= iou_t
    gt_index[pos] = best_gt[pos]

    # forced positive per gt; an anchor forced by several gts goes to the one it overlaps most
    forced = np.argmax(iou, axis=0)
    claim = np.full(n, -1.0)
    for g, a in enumerate(forced):
        if iou[a, g] > claim[a]:
            gt_index[a] = g
            claim[a] = iou[a, g]

    pos = gt_index >= 0
    labels[pos] = classes[gt_index[pos]] + 1
    targets[pos] = encode(anchors.boxes[pos], gt_boxes[gt_index[pos]])
    return MatchResult(labels, gt_index, targets)
