"""Pure-numpy reference kernels.

Box arrays are ``(N, 6)`` float64 in ``(z0, y0, x0, z1, y1, x1)`` order,
half-open.
"""
import numpy as np
from scipy import ndimage


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 6)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 6)
    lo = np.maximum(a[:, None, :3], b[None, :, :3])
    hi = np.minimum(a[:, None, 3:], b[None, :, 3:])
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=2)
    vol_a = np.prod(a[:, 3:] - a[:, :3], axis=1)
    vol_b = np.prod(b[:, 3:] - b[:, :3], axis=1)
    union = vol_a[:, None] + vol_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms_greedy(boxes, scores, iou_t):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for rank, i in enumerate(order):
        if not alive[rank]:
            continue
        keep.append(i)
        rest = order[rank + 1:]
        if len(rest) == 0:
            break
        ious = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        alive[rank + 1:] &= ious < iou_t
    return np.asarray(keep, dtype=np.int64)


def block_mean(vox, s):
    """Average-pool ``(C, D, H, W)`` by ``s`` per axis, edge blocks partial."""
    vox = np.asarray(vox)
    c, d, h, w = vox.shape
    od, oh, ow = -(-d // s), -(-h // s), -(-w // s)
    pad = ((0, 0), (0, od * s - d), (0, oh * s - h), (0, ow * s - w))
    total = np.pad(vox.astype(np.float64), pad).reshape(c, od, s, oh, s, ow, s).sum(axis=(2, 4, 6))
    ones = np.pad(np.ones((d, h, w)), pad[1:]).reshape(od, s, oh, s, ow, s).sum(axis=(1, 3, 5))
    return (total / ones).astype(vox.dtype)


_SIX = ndimage.generate_binary_structure(3, 1)


def label_components(mask):
    """6-connected labels (0 = background, 1.. in raster order of first voxel)."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_SIX)
    return labels.astype(np.int32), int(n)
