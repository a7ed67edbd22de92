"""Training loop, staged learning-rate schedule, logs and checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .. import augment as aug_mod
from ..anchors import AnchorConfig, AnchorSet, build_anchor_grid, match_anchors
from ..augment import AugmentConfig
from ..volcore import Annotation, ScaleConfig, Volume, pad_to_multiple, rescale_boxes, resample, select_channels
from .loss import LossParts, compute_loss
from .model import ModelConfig, RetinaNet3D

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lrs: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    epochs_per_stage: int = 20
    batch_size: int = 2
    neg_ratio: int = 3
    focal_gamma: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    match_iou: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.lrs, self.lrs[1:])):
            raise ValueError(f"learning rates must strictly decrease, got {self.lrs}")
        if self.epochs_per_stage < 1:
            raise ValueError("epochs_per_stage must be >= 1")
        if self.batch_size < 1 or self.neg_ratio < 0:
            raise ValueError("batch_size must be >= 1 and neg_ratio >= 0")

    @property
    def total_epochs(self) -> int:
        return self.epochs_per_stage * len(self.lrs)

    def lr_at(self, epoch: int) -> float:
        """Learning rate of 0-based ``epoch``."""
        return self.lrs[min(epoch // self.epochs_per_stage, len(self.lrs) - 1)]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    cls_loss: float
    reg_loss: float
    total: float

    def line(self) -> str:
        return f"{self.epoch},{self.lr:g},{self.cls_loss:.6f},{self.reg_loss:.6f},{self.total:.6f}"


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    path: Path | None = None

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(rec.line() + "\n")

    @classmethod
    def read(cls, path) -> "TrainLog":
        recs = []
        for line in Path(path).read_text().splitlines():
            if line and not line.startswith("epoch"):
                e, lr, c, r, t = line.split(",")
                recs.append(EpochRecord(int(e), float(lr), float(c), float(r), float(t)))
        return cls(recs)


# ------------------------------------------------------------------ data prep

def prepare_sample(
    v: Volume, anns: Sequence[Annotation], scale: ScaleConfig, channels: str = "low"
) -> tuple[Volume, list[Annotation]]:
    """Channel pick, down-scale by ``s`` and pad to the coarsest stride."""
    v = select_channels(v, channels)
    boxes = rescale_boxes([a.box for a in anns], scale, v.dims)
    v = resample(v, scale)
    v, _ = pad_to_multiple(v, 32)
    return v, [Annotation(b, a.class_id, a.instance_id) for b, a in zip(boxes, anns)]


def collate(vols: Sequence[Volume]) -> torch.Tensor:
    """Stack volumes, zero-padding at the high ends to the largest extent."""
    dims = np.max([v.dims for v in vols], axis=0)
    out = np.zeros((len(vols), vols[0].channels, *dims), dtype=np.float32)
    for i, v in enumerate(vols):
        d, h, w = v.dims
        out[i, :, :d, :h, :w] = v.voxels
    return torch.from_numpy(out)


def run_model(model: RetinaNet3D, x: torch.Tensor):
    """Forward pass; a lone volume is run as a pair, which picks the fast CPU conv path."""
    if x.shape[0] == 1 and x.dtype == torch.float32:
        fp, out = model(torch.cat([x, x]))
        return fp, type(out)([r[:1] for r in out.reg], [c[:1] for c in out.cls])
    return model(x)


class AnchorCache:
    def __init__(self, cfg: AnchorConfig):
        self.cfg = cfg
        self._sets: dict[tuple, AnchorSet] = {}

    def __call__(self, dims) -> AnchorSet:
        key = tuple(int(d) for d in dims)
        if key not in self._sets:
            self._sets[key] = build_anchor_grid(key, self.cfg)
        return self._sets[key]


def batch_loss(model, vols, anns, anchors: AnchorCache, cfg: TrainConfig) -> LossParts:
    x = collate(vols)
    aset = anchors(x.shape[2:])
    matches = [match_anchors(aset, a, cfg.match_iou) for a in anns]
    _, out = run_model(model, x)
    reg, cls = out.flat(model.cfg.n_a, model.cfg.num_classes)
    return compute_loss(reg, cls, matches, cfg.neg_ratio, cfg.focal_gamma)


# -------------------------------------------------------------------- training

def build_model(cfg: ModelConfig, seed: int = 0) -> RetinaNet3D:
    torch.manual_seed(seed)
    return RetinaNet3D(cfg)


def train(
    model: RetinaNet3D,
    samples: Sequence[tuple[Volume, Sequence[Annotation]]],
    cfg: TrainConfig,
    aug: AugmentConfig,
    anchor_cfg: AnchorConfig = AnchorConfig(),
    out_dir=None,
    extra_meta: dict | None = None,
) -> tuple[RetinaNet3D, TrainLog]:
    """Fit ``model`` on prepared samples (see ``prepare_sample``)."""
    if not samples:
        raise TrainingError("training split is empty")
    torch.manual_seed(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    tlog = TrainLog()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        tlog.path = out_dir / "trainlog.csv"
        tlog.path.write_text("epoch,lr,cls_loss,reg_loss,total\n")
    anchors = AnchorCache(anchor_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lrs[0], betas=cfg.betas)
    model.train()
    n = len(samples)
    for epoch in range(cfg.total_epochs):
        lr = cfg.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        order = aug_mod.sample_rng(cfg.seed, epoch).permutation(n)
        sums = np.zeros(3)
        steps = 0
        for start in range(0, n, cfg.batch_size):
            vols, anns = [], []
            for i in order[start:start + cfg.batch_size]:
                v, a = samples[i]
                rng = aug_mod.sample_rng(aug.seed, epoch, int(i))
                v2, boxes, _ = aug_mod.random_augment(v, [x.box for x in a], aug, rng)
                vols.append(v2)
                anns.append([Annotation(b, x.class_id, x.instance_id) for b, x in zip(boxes, a)])
            parts = batch_loss(model, vols, anns, anchors, cfg)
            total = float(parts.total.detach())
            if not math.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {steps}: "
                    f"cls={float(parts.cls_loss.detach())} reg={float(parts.reg_loss.detach())} lr={lr}"
                )
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            sums += [float(parts.cls_loss.detach()), float(parts.reg_loss.detach()), total]
            steps += 1
        mean = sums / steps
        tlog.append(EpochRecord(epoch, lr, *mean))
        log.info("epoch %d lr %g cls %.4f reg %.4f", epoch, lr, mean[0], mean[1])
        if out_dir is not None and (epoch + 1) % cfg.epochs_per_stage == 0:
            stage = (epoch + 1) // cfg.epochs_per_stage
            save_checkpoint(out_dir / f"stage{stage}.ckpt", model, opt, epoch + 1, extra_meta)
    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", model, opt, cfg.total_epochs, extra_meta)
    model.eval()
    return model, tlog


# ------------------------------------------------------------------ checkpoint

def save_checkpoint(path, model: RetinaNet3D, opt=None, epoch: int = 0, meta: dict | None = None) -> None:
    state = {
        "version": CHECKPOINT_VERSION,
        "arch": model.cfg.to_dict(),
        "params": [(name, p.detach().clone()) for name, p in model.state_dict().items()],
        "optimizer": opt.state_dict() if opt is not None else None,
        "epoch": epoch,
        "meta": meta or {},
    }
    torch.save(state, path)


def load_checkpoint(path) -> tuple[RetinaNet3D, dict]:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {state.get('version')} unsupported")
    model = RetinaNet3D(ModelConfig.from_dict(state["arch"]))
    model.load_state_dict(dict(state["params"]))
    model.eval()
    return model, state

