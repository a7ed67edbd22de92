"""3D RetinaNet: residual backbone, top-down pyramid and shared twin heads."""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

BLOCKS_PER_STAGE = {
    10: (1, 1, 1, 1),
    18: (2, 2, 2, 2),
    34: (3, 4, 6, 3),
    50: (3, 4, 6, 3),
    101: (3, 4, 23, 3),
}


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 10
    widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    in_channels: int = 1

    def __post_init__(self):
        if self.depth not in BLOCKS_PER_STAGE:
            raise ValueError(f"backbone depth must be one of {sorted(BLOCKS_PER_STAGE)}, got {self.depth}")
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ValueError("need four positive stage widths")
        if self.in_channels not in (1, 2):
            raise ValueError("input channels must be 1 or 2")

    @property
    def bottleneck(self) -> bool:
        return self.depth >= 50

    @property
    def out_widths(self) -> tuple[int, ...]:
        k = 4 if self.bottleneck else 1
        return tuple(w * k for w in self.widths)


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fpn_width: int = 64
    num_classes: int = 5
    n_a: int = 1
    norm_groups: int = 8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = d.pop("backbone")
        bb["widths"] = tuple(bb["widths"])
        return cls(backbone=BackboneConfig(**bb), **d)


class _Pins:
    masks: list | None = None
    replay: int | None = None


def relu(x: torch.Tensor) -> torch.Tensor:
    if _Pins.masks is None:
        return F.relu(x)
    if _Pins.replay is None:
        mask = (x > 0).to(x.dtype)
        _Pins.masks.append(mask)
    else:
        mask = _Pins.masks[_Pins.replay]
        _Pins.replay += 1
    return x * mask


class ReLU(nn.Module):
    def forward(self, x):
        return relu(x)


@contextmanager
def pinned_relu():
    """Record every ReLU on/off pattern on the first forward pass, replay it after.

    Holds the network on one linear piece; the finite-difference gradient
    check uses it so perturbations never straddle a kink.
    """
    _Pins.masks, _Pins.replay = [], None

    def rewind():
        _Pins.replay = 0

    try:
        yield rewind
    finally:
        _Pins.masks, _Pins.replay = None, None


def _norm(ch: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, ch), ch)


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv3d(cin, cout, k, stride=stride, padding=k // 2)


class BasicBlock(nn.Module):
    def __init__(self, cin, width, stride, groups):
        super().__init__()
        self.conv1 = _conv(cin, width, 3, stride)
        self.n1 = _norm(width, groups)
        self.conv2 = _conv(width, width)
        self.n2 = _norm(width, groups)
        self.short = None
        if stride != 1 or cin != width:
            self.short = nn.Sequential(_conv(cin, width, 1, stride), _norm(width, groups))

    def forward(self, x):
        y = relu(self.n1(self.conv1(x)))
        y = self.n2(self.conv2(y))
        return relu(y + (x if self.short is None else self.short(x)))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, width, stride, groups):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = _conv(cin, width, 1)
        self.n1 = _norm(width, groups)
        self.conv2 = _conv(width, width, 3, stride)
        self.n2 = _norm(width, groups)
        self.conv3 = _conv(width, cout, 1)
        self.n3 = _norm(cout, groups)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(_conv(cin, cout, 1, stride), _norm(cout, groups))

    def forward(self, x):
        y = relu(self.n1(self.conv1(x)))
        y = relu(self.n2(self.conv2(y)))
        y = self.n3(self.conv3(y))
        return relu(y + (x if self.short is None else self.short(x)))


class Backbone(nn.Module):
    """Stride-2 stem then four stages, each halving resolution: C2..C5 at 4, 8, 16, 32."""

    def __init__(self, cfg: BackboneConfig, groups: int):
        super().__init__()
        block = Bottleneck if cfg.bottleneck else BasicBlock
        self.stem = nn.Sequential(_conv(cfg.in_channels, cfg.widths[0], 3, 2), _norm(cfg.widths[0], groups), ReLU())
        cin = cfg.widths[0]
        stages = []
        for width, n in zip(cfg.widths, BLOCKS_PER_STAGE[cfg.depth]):
            blocks = []
            for i in range(n):
                blocks.append(block(cin, width, 2 if i == 0 else 1, groups))
                cin = width * (block.expansion if block is Bottleneck else 1)
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Head(nn.Module):
    def __init__(self, width, out_ch, groups):
        super().__init__()
        layers = []
        for _ in range(4):
            layers += [_conv(width, width), _norm(width, groups), ReLU()]
        self.tower = nn.Sequential(*layers)
        self.out = _conv(width, out_ch)

    def forward(self, x):
        return self.out(self.tower(x))


class FeaturePyramid(NamedTuple):
    c: list  # C2..C5
    p: list  # P2..P5


class HeadOutputs(NamedTuple):
    reg: list  # per level (B, 6*n_a, d, h, w)
    cls: list  # per level (B, (1+K)*n_a, d, h, w)

    def flat(self, n_a: int, num_classes: int):
        """``(B, A, 6)`` deltas and ``(B, A, 1+K)`` logits in AnchorSet order."""
        regs, clss = [], []
        for r, c in zip(self.reg, self.cls):
            b = r.shape[0]
            regs.append(r.view(b, n_a, 6, *r.shape[2:]).permute(0, 3, 4, 5, 1, 2).reshape(b, -1, 6))
            k1 = num_classes + 1
            clss.append(c.view(b, n_a, k1, *c.shape[2:]).permute(0, 3, 4, 5, 1, 2).reshape(b, -1, k1))
        return torch.cat(regs, 1), torch.cat(clss, 1)


class RetinaNet3D(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        g = cfg.norm_groups
        fw = cfg.fpn_width
        self.backbone = Backbone(cfg.backbone, g)
        self.lateral = nn.ModuleList(_conv(c, fw) for c in cfg.backbone.out_widths)
        self.reg_head = Head(fw, 6 * cfg.n_a, g)
        self.cls_head = Head(fw, (1 + cfg.num_classes) * cfg.n_a, g)
        self._init()

    def _init(self):
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        for head in (self.reg_head, self.cls_head):
            nn.init.normal_(head.out.weight, std=0.01)
            nn.init.zeros_(head.out.bias)

    def pyramid(self, x) -> FeaturePyramid:
        c = self.backbone(x)
        p = [None] * 4
        # P5 from a conv on C5; each lower level adds its lateral conv to the upsampled level above
        p[3] = self.lateral[3](c[3])
        for i in (2, 1, 0):
            p[i] = self.lateral[i](c[i]) + F.interpolate(p[i + 1], scale_factor=2, mode="nearest")
        return FeaturePyramid(c, p)

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != self.cfg.backbone.in_channels:
            raise ValueError(
                f"expected (B, {self.cfg.backbone.in_channels}, D, H, W) input, got {tuple(x.shape)}"
            )
        if any(s % 32 for s in x.shape[2:]):
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} must be divisible by 32")
        fp = self.pyramid(x)
        out = HeadOutputs([self.reg_head(p) for p in fp.p], [self.cls_head(p) for p in fp.p])
        return fp, out

    def head_param_count(self) -> int:
        return sum(p.numel() for h in (self.reg_head, self.cls_head) for p in h.parameters())


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
