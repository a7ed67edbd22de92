"""Random flips and 90-degree rotations applied jointly to volumes and boxes.

Every transform is an axis permutation followed by reversal of some axes,
so the volume side is a view reshuffle and the box side is exact.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volcore import Box3D, Volume

FLIP_AXES = ((0,), (1,), (2,), (0, 1), (0, 2), (1, 2))
# (rotation plane, direction); the rotation axis is the one not in the plane.
ROTATIONS = (((1, 2), 1), ((1, 2), -1), ((0, 2), 1), ((0, 2), -1), ((0, 1), 1), ((0, 1), -1))
AXIS_NAMES = "zyx"


@dataclass(frozen=True)
class TransformId:
    kind: str
    index: int

    def __post_init__(self):
        if self.kind not in ("flip", "rotation") or not 0 <= self.index < 6:
            raise ValueError(f"invalid transform {self.kind}/{self.index}")

    def __str__(self):
        if self.kind == "flip":
            return "flip-" + "".join(AXIS_NAMES[a] for a in FLIP_AXES[self.index])
        (p, q), k = ROTATIONS[self.index]
        axis = AXIS_NAMES[3 - p - q]
        return f"rot{'+' if k > 0 else '-'}90-{axis}"

    def axis_map(self) -> tuple[tuple[int, int, int], tuple[bool, bool, bool]]:
        """New axis i reads old axis ``perm[i]``, reversed if ``flips[i]``."""
        perm = [0, 1, 2]
        flips = [False, False, False]
        if self.kind == "flip":
            for a in FLIP_AXES[self.index]:
                flips[a] = True
        else:
            (p, q), k = ROTATIONS[self.index]
            perm[p], perm[q] = q, p
            # matches np.rot90(m, k, axes=(p, q))
            flips[p if k > 0 else q] = True
        return tuple(perm), tuple(flips)

    def inverse(self) -> "TransformId":
        if self.kind == "flip":
            return self
        return TransformId("rotation", self.index ^ 1)


ALL_TRANSFORMS = tuple(TransformId("flip", i) for i in range(6)) + tuple(
    TransformId("rotation", i) for i in range(6)
)


@dataclass(frozen=True)
class AugmentConfig:
    p: float = 0.2
    flips: bool = True
    rotations: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"aug.p must lie in [0, 1], got {self.p}")

    def enabled(self, t: TransformId) -> bool:
        return self.flips if t.kind == "flip" else self.rotations


def transform_array(vox: np.ndarray, t: TransformId) -> np.ndarray:
    """Apply ``t`` to the last three axes of ``vox``."""
    perm, flips = t.axis_map()
    lead = vox.ndim - 3
    out = np.transpose(vox, tuple(range(lead)) + tuple(lead + p for p in perm))
    axes = [lead + i for i in range(3) if flips[i]]
    return np.ascontiguousarray(np.flip(out, axes) if axes else out)


def transform_boxes(boxes: Sequence[Box3D], dims, t: TransformId) -> list[Box3D]:
    perm, flips = t.axis_map()
    out = []
    for b in boxes:
        lo, hi = b.lo, b.hi
        nlo, nhi = lo[list(perm)], hi[list(perm)]
        for i in range(3):
            if flips[i]:
                n = dims[perm[i]]
                nlo[i], nhi[i] = n - nhi[i], n - nlo[i]
        out.append(Box3D(*nlo, *nhi))
    return out


def transformed_dims(dims, t: TransformId) -> tuple[int, int, int]:
    perm, _ = t.axis_map()
    return tuple(int(dims[p]) for p in perm)


def apply_transform(v: Volume, boxes: Sequence[Box3D], t: TransformId) -> tuple[Volume, list[Box3D]]:
    return v.with_voxels(transform_array(v.voxels, t)), transform_boxes(boxes, v.dims, t)


def sample_transforms(cfg: AugmentConfig, rng: np.random.Generator) -> list[TransformId]:
    # one draw per transform regardless of enablement keeps streams aligned across configs
    draws = rng.random(len(ALL_TRANSFORMS))
    return [t for t, u in zip(ALL_TRANSFORMS, draws) if cfg.enabled(t) and u < cfg.p]


def random_augment(v: Volume, boxes: Sequence[Box3D], cfg: AugmentConfig, rng: np.random.Generator):
    applied = sample_transforms(cfg, rng)
    for t in applied:
        v, boxes = apply_transform(v, boxes, t)
    return v, list(boxes), applied


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample, ...) so loading order does not matter."""
    return np.random.default_rng([seed, *keys])
