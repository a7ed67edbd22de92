"""Detection post-processing, 3D NMS and the AP / precision / recall suite."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import kernels
from .anchors import AnchorSet, decode
from .volcore import CLASS_NAMES, NUM_CLASSES, Annotation, Box3D, clip_boxes

SCORE_FLOOR = 0.05
PRE_NMS_TOPK = 1000


class UnknownClassError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: Box3D
    class_id: int
    score: float
    volume_id: str = ""

    def to_record(self) -> dict:
        return {"volume_id": self.volume_id, "class_id": self.class_id, "score": self.score, "box": list(self.box.coords)}

    @classmethod
    def from_record(cls, r: dict) -> "Detection":
        return cls(Box3D(*map(float, r["box"])), int(r["class_id"]), float(r["score"]), str(r["volume_id"]))


@dataclass(frozen=True)
class EvalConfig:
    tp_iou: float = 0.1
    score_threshold: float = 0.5
    nms_iou: float = 0.1
    max_detections: int = 100
    pr_mode: str = "threshold"  # or "max-f1"

    def __post_init__(self):
        for name in ("tp_iou", "score_threshold", "nms_iou"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"eval.{name} must lie in (0, 1), got {v}")
        if self.pr_mode not in ("threshold", "max-f1"):
            raise ValueError(f"unknown P/R mode {self.pr_mode!r}")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")


# ----------------------------------------------------------------------- NMS

def nms3d(dets: Sequence[Detection], iou_t: float) -> list[Detection]:
    if not dets:
        return []
    if len({(d.class_id, d.volume_id) for d in dets}) > 1:
        raise ValueError("nms3d expects detections of a single class and volume")
    boxes = np.stack([d.box.as_array() for d in dets])
    keep = kernels.nms_greedy(boxes, [d.score for d in dets], iou_t)
    return [dets[i] for i in keep]


# -------------------------------------------------------------------- detect

def postprocess(
    reg: np.ndarray,
    probs: np.ndarray,
    anchors: AnchorSet,
    cfg: EvalConfig,
    extent=None,
    volume_id: str = "",
) -> list[Detection]:
    """Turn per-anchor deltas ``(A, 6)`` and softmax ``(A, 1+K)`` into detections."""
    if len(reg) != len(anchors) or len(probs) != len(anchors):
        raise ValueError(f"head outputs cover {len(reg)} anchors, grid has {len(anchors)}")
    extent = anchors.input_dims if extent is None else extent
    fg = probs[:, 1:]
    out: list[Detection] = []
    for c in range(fg.shape[1]):
        idx = np.nonzero(fg[:, c] >= SCORE_FLOOR)[0]
        if len(idx) == 0:
            continue
        if len(idx) > PRE_NMS_TOPK:
            idx = idx[np.argsort(-fg[idx, c], kind="stable")[:PRE_NMS_TOPK]]
        boxes = clip_boxes(decode(anchors.boxes[idx], reg[idx]), extent)
        ok = np.all(boxes[:, 3:] > boxes[:, :3], axis=1)
        dets = [Detection(Box3D.from_array(b), c, float(s), volume_id) for b, s in zip(boxes[ok], fg[idx[ok], c])]
        out.extend(nms3d(dets, cfg.nms_iou))
    out.sort(key=lambda d: -d.score)
    return out[: cfg.max_detections]


@torch.no_grad()
def detect(model, x, anchors: AnchorSet, cfg: EvalConfig = EvalConfig(), extent=None, volume_id: str = ""):
    """Detections for one prepared volume (``Volume`` or ``(C, D, H, W)`` array)."""
    from .net3d.train import run_model

    vox = x.voxels if hasattr(x, "voxels") else np.asarray(x)
    if tuple(vox.shape[1:]) != tuple(anchors.input_dims):
        raise ValueError(f"volume dims {tuple(vox.shape[1:])} differ from anchor grid {anchors.input_dims}")
    model.eval()
    _, out = run_model(model, torch.from_numpy(np.ascontiguousarray(vox, dtype=np.float32))[None])
    reg, cls = out.flat(model.cfg.n_a, model.cfg.num_classes)
    probs = torch.softmax(cls[0].double(), dim=-1).numpy()
    return postprocess(reg[0].double().numpy(), probs, anchors, cfg, extent, volume_id)


def scale_detections(dets: Sequence[Detection], s: int, dims) -> list[Detection]:
    """Map detections from a grid down-scaled by ``s`` back onto the original ``dims``."""
    if s == 1:
        return list(dets)
    out = []
    for d in dets:
        b = clip_boxes(d.box.as_array() * s, dims)[0]
        out.append(Detection(Box3D.from_array(b), d.class_id, d.score, d.volume_id))
    return out


def write_detections(dets: Sequence[Detection], path) -> None:
    Path(path).write_text("".join(json.dumps(d.to_record()) + "\n" for d in dets))


def read_detections(path) -> list[Detection]:
    return [Detection.from_record(json.loads(l)) for l in Path(path).read_text().splitlines() if l.strip()]


# ------------------------------------------------------------------- metrics

@dataclass
class ClassMetrics:
    ap: float
    precision: float
    recall: float
    n_gt: int
    n_det: int
    flags: tuple[str, ...] = ()

    @property
    def excluded(self) -> bool:
        return "no-gt" in self.flags


@dataclass
class Metrics:
    per_class: dict[int, ClassMetrics]
    mAP: float
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "classes": {
                CLASS_NAMES[c]: {"AP": m.ap, "P": m.precision, "R": m.recall, "n_gt": m.n_gt, "n_det": m.n_det, "flags": list(m.flags)}
                for c, m in self.per_class.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        per = {}
        for name, m in d["classes"].items():
            per[CLASS_NAMES.index(name)] = ClassMetrics(m["AP"], m["P"], m["R"], m["n_gt"], m["n_det"], tuple(m["flags"]))
        return cls(per, d["mAP"])


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP of a score-sorted TP/FP sequence."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def match_class(dets, gts_by_volume, class_id: int, tp_iou: float):
    """Greedy score-ordered matching for one class.

    Returns ``(scores, tp)`` sorted by descending score (ties by volume id,
    then the detection's position in its volume's list) and the gt count.
    """
    rows = []
    for vid, vdets in dets.items():
        for i, d in enumerate(vdets):
            if d.class_id == class_id:
                rows.append((-d.score, str(vid), i, d))
    rows.sort(key=lambda r: r[:3])
    gt_boxes = {
        vid: np.array([g.box.as_array() for g in gts if g.class_id == class_id]).reshape(-1, 6)
        for vid, gts in gts_by_volume.items()
    }
    used = {vid: np.zeros(len(b), dtype=bool) for vid, b in gt_boxes.items()}
    n_gt = sum(len(b) for b in gt_boxes.values())
    tp = np.zeros(len(rows), dtype=bool)
    scores = np.array([-r[0] for r in rows])
    for k, (_, vid, _, d) in enumerate(rows):
        g = gt_boxes[vid]
        if len(g) == 0:
            continue
        ious = kernels.iou_matrix(d.box.as_array(), g)[0]
        ious[used[vid]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= tp_iou:
            tp[k] = True
            used[vid][j] = True
    return scores, tp, n_gt


def evaluate(
    dets: Mapping[str, Sequence[Detection]],
    gts: Mapping[str, Sequence[Annotation]],
    cfg: EvalConfig = EvalConfig(),
    num_classes: int = NUM_CLASSES,
) -> Metrics:
    missing = set(dets) - set(gts)
    if missing:
        raise KeyError(f"detections for volumes without ground truth: {sorted(missing)[:5]}")
    for group in list(dets.values()) + list(gts.values()):
        for item in group:
            if not 0 <= item.class_id < num_classes:
                raise UnknownClassError(f"class id {item.class_id} outside 0..{num_classes - 1}")
    per_class = {}
    for c in range(num_classes):
        scores, tp, n_gt = match_class(dets, gts, c, cfg.tp_iou)
        flags = []
        ap = average_precision(tp, n_gt)
        if n_gt == 0:
            flags.append("no-gt")
        if cfg.pr_mode == "threshold":
            k = int(np.sum(scores >= cfg.score_threshold))
        else:
            k = _max_f1_cut(tp, n_gt)
        n_tp = int(tp[:k].sum())
        if k == 0:
            precision = 0.0
            flags.append("precision-undefined")
        else:
            precision = n_tp / k
        recall = n_tp / n_gt if n_gt else 0.0
        per_class[c] = ClassMetrics(ap, precision, recall, n_gt, len(tp), tuple(flags))
    aps = [m.ap for m in per_class.values() if not m.excluded]
    m_ap = float(np.mean(aps)) if aps else float("nan")
    return Metrics(per_class, m_ap, () if aps else ("no-gt",))


def _max_f1_cut(tp, n_gt) -> int:
    if len(tp) == 0 or n_gt == 0:
        return 0
    ctp = np.cumsum(tp)
    k = np.arange(1, len(tp) + 1)
    f1 = 2 * ctp / (k + n_gt)
    return int(np.argmax(f1)) + 1


# -------------------------------------------------------------------- report

TABLES = {
    # columns per class; mirrors the layouts of the backbone, augmentation/scaling and energy tables
    "pr": ("P", "R"),
    "ap": ("AP",),
    "energy": ("P", "R", "AP"),
}


@dataclass
class ReportRow:
    label: tuple[str, ...]
    splits: list[Metrics] = field(default_factory=list)


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation, ignoring NaN; NaN when empty."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


def _cell(field_name, m: ClassMetrics) -> float:
    if m.excluded:
        return float("nan")
    return {"P": m.precision, "R": m.recall, "AP": m.ap}[field_name]


def report_cells(rows: Sequence[ReportRow], kind: str = "ap", classes: Sequence[int] | None = None):
    """Header and rows of ``(mean, std)`` cells, values as fractions."""
    if kind not in TABLES:
        raise ValueError(f"unknown table kind {kind!r}")
    if not rows or any(not r.splits for r in rows):
        raise ValueError("every report row needs at least one split result")
    classes = list(range(NUM_CLASSES)) if classes is None else list(classes)
    fields = TABLES[kind]
    header = [f"{CLASS_NAMES[c]}:{f}" for c in classes for f in fields] + ["mAP"]
    body = []
    for r in rows:
        cells = []
        for c in classes:
            for f in fields:
                cells.append(mean_std(_cell(f, s.per_class[c]) for s in r.splits))
        if kind == "energy":
            cells.append(mean_std(np.nanmean([s.per_class[c].ap for c in classes]) for s in r.splits))
        else:
            cells.append(mean_std(s.mAP for s in r.splits))
        body.append((r.label, cells))
    return header, body


def _fmt(cell) -> str:
    mean, std = cell
    if math.isnan(mean):
        return "n/a"
    return f"{100 * mean:.1f} ± {100 * std:.1f}"


def report(rows: Sequence[ReportRow], kind: str = "ap", fmt: str = "text", label_names=("setting",), classes=None) -> str:
    header, body = report_cells(rows, kind, classes)
    if fmt == "json":
        return json.dumps(
            [
                {"label": list(lbl), **{h: {"mean": m, "std": s} for h, (m, s) in zip(header, cells)}}
                for lbl, cells in body
            ],
            indent=1,
        )
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(list(label_names) + [f"{h}:{x}" for h in header for x in ("mean", "std")])
        for lbl, cells in body:
            w.writerow(list(lbl) + [("" if math.isnan(v) else f"{v:.6f}") for cell in cells for v in cell])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    table = [list(label_names) + [h + " (%)" for h in header]]
    table += [list(lbl) + [_fmt(c) for c in cells] for lbl, cells in body]
    widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in table]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
