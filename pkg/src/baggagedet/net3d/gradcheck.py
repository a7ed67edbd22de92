"""Central-difference check of the analytic gradient of the training loss."""
from __future__ import annotations

from typing import Sequence

import torch

from ..anchors import AnchorConfig, build_anchor_grid, match_anchors
from ..volcore import Annotation
from .loss import compute_loss, select_negatives
from .model import RetinaNet3D, pinned_relu


def grad_check(
    model: RetinaNet3D,
    x: torch.Tensor,
    anns: Sequence[Sequence[Annotation]],
    eps: float = 1e-3,
    anchor_cfg: AnchorConfig = AnchorConfig(),
    floor: float = 1e-6,
    max_params: int = 5000,
) -> float:
    """Max over parameters of ``|g - g_fd| / max(|g|, |g_fd|, floor)``.

    Runs in float64 on a copy of ``model``; every parameter element is
    perturbed, so keep the model tiny.
    """
    n_par = sum(p.numel() for p in model.parameters())
    if n_par > max_params:
        raise ValueError(f"model has {n_par} parameters, grad check is limited to {max_params}")
    net = RetinaNet3D(model.cfg).double()
    net.load_state_dict(model.state_dict())
    x = x.double()
    aset = build_anchor_grid(tuple(x.shape[2:]), anchor_cfg)
    matches = [match_anchors(aset, a) for a in anns]

    def loss(negatives) -> torch.Tensor:
        _, out = net(x)
        reg, cls = out.flat(net.cfg.n_a, net.cfg.num_classes)
        return compute_loss(reg, cls, matches, negatives=negatives).total

    # mining and ReLU are piecewise: pin both at the base point so finite
    # differences stay on the piece whose gradient autograd reports
    with pinned_relu() as rewind:
        with torch.no_grad():
            _, out0 = net(x)
            pinned = select_negatives(out0.flat(net.cfg.n_a, net.cfg.num_classes)[1], matches)
        rewind()
        net.zero_grad()
        loss(pinned).backward()
        worst = 0.0
        with torch.no_grad():
            for p in net.parameters():
                analytic = p.grad.detach().clone().view(-1)
                flat = p.data.view(-1)
                for i in range(flat.numel()):
                    orig = float(flat[i])
                    flat[i] = orig + eps
                    rewind()
                    up = float(loss(pinned))
                    flat[i] = orig - eps
                    rewind()
                    down = float(loss(pinned))
                    flat[i] = orig
                    numeric = (up - down) / (2 * eps)
                    a = float(analytic[i])
                    err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                    worst = max(worst, err)
    return float(worst)
