"""numba-compiled kernels; same contracts as ``_numpy``."""
import numpy as np
from numba import njit


@njit(cache=True)
def _iou_matrix(a, b):
    n, m = a.shape[0], b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        va = (a[i, 3] - a[i, 0]) * (a[i, 4] - a[i, 1]) * (a[i, 5] - a[i, 2])
        for j in range(m):
            dz = min(a[i, 3], b[j, 3]) - max(a[i, 0], b[j, 0])
            if dz <= 0:
                continue
            dy = min(a[i, 4], b[j, 4]) - max(a[i, 1], b[j, 1])
            if dy <= 0:
                continue
            dx = min(a[i, 5], b[j, 5]) - max(a[i, 2], b[j, 2])
            if dx <= 0:
                continue
            inter = dz * dy * dx
            vb = (b[j, 3] - b[j, 0]) * (b[j, 4] - b[j, 1]) * (b[j, 5] - b[j, 2])
            out[i, j] = inter / (va + vb - inter)
    return out


def iou_matrix(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 6)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 6)
    return _iou_matrix(a, b)


@njit(cache=True)
def _nms(boxes, order, iou_t):
    n = order.shape[0]
    alive = np.ones(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    k = 0
    for r in range(n):
        if not alive[r]:
            continue
        i = order[r]
        keep[k] = i
        k += 1
        vi = (boxes[i, 3] - boxes[i, 0]) * (boxes[i, 4] - boxes[i, 1]) * (boxes[i, 5] - boxes[i, 2])
        for q in range(r + 1, n):
            if not alive[q]:
                continue
            j = order[q]
            dz = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 0], boxes[j, 0])
            dy = min(boxes[i, 4], boxes[j, 4]) - max(boxes[i, 1], boxes[j, 1])
            dx = min(boxes[i, 5], boxes[j, 5]) - max(boxes[i, 2], boxes[j, 2])
            if dz <= 0 or dy <= 0 or dx <= 0:
                continue
            inter = dz * dy * dx
            vj = (boxes[j, 3] - boxes[j, 0]) * (boxes[j, 4] - boxes[j, 1]) * (boxes[j, 5] - boxes[j, 2])
            if inter / (vi + vj - inter) >= iou_t:
                alive[q] = False
    return keep[:k]


def nms_greedy(boxes, scores, iou_t):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 6)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return _nms(boxes, order, float(iou_t))


@njit(cache=True)
def _block_mean(vox, s):
    c, d, h, w = vox.shape
    od, oh, ow = (d + s - 1) // s, (h + s - 1) // s, (w + s - 1) // s
    out = np.zeros((c, od, oh, ow))
    cnt = np.zeros((od, oh, ow))
    for z in range(d):
        for y in range(h):
            for x in range(w):
                cnt[z // s, y // s, x // s] += 1.0
    for ch in range(c):
        for z in range(d):
            for y in range(h):
                for x in range(w):
                    out[ch, z // s, y // s, x // s] += vox[ch, z, y, x]
        out[ch] /= cnt
    return out


def block_mean(vox, s):
    vox = np.asarray(vox)
    return _block_mean(np.ascontiguousarray(vox, dtype=np.float64), int(s)).astype(vox.dtype)


@njit(cache=True)
def _label6(mask):
    d, h, w = mask.shape
    labels = np.zeros((d, h, w), dtype=np.int32)
    stack = np.empty((d * h * w, 3), dtype=np.int64)
    n = 0
    for z0 in range(d):
        for y0 in range(h):
            for x0 in range(w):
                if not mask[z0, y0, x0] or labels[z0, y0, x0] != 0:
                    continue
                n += 1
                labels[z0, y0, x0] = n
                top = 0
                stack[0, 0], stack[0, 1], stack[0, 2] = z0, y0, x0
                top = 1
                while top > 0:
                    top -= 1
                    z, y, x = stack[top, 0], stack[top, 1], stack[top, 2]
                    for k in range(6):
                        nz, ny, nx = z, y, x
                        if k == 0:
                            nz -= 1
                        elif k == 1:
                            nz += 1
                        elif k == 2:
                            ny -= 1
                        elif k == 3:
                            ny += 1
                        elif k == 4:
                            nx -= 1
                        else:
                            nx += 1
                        if nz < 0 or ny < 0 or nx < 0 or nz >= d or ny >= h or nx >= w:
                            continue
                        if mask[nz, ny, nx] and labels[nz, ny, nx] == 0:
                            labels[nz, ny, nx] = n
                            stack[top, 0], stack[top, 1], stack[top, 2] = nz, ny, nx
                            top += 1
    return labels, n


def label_components(mask):
    labels, n = _label6(np.ascontiguousarray(mask, dtype=np.bool_))
    return labels, int(n)
