"""Classification and regression losses over matched anchors."""
from __future__ import annotations

from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F

from ..anchors import MatchResult


class AnchorCountError(ValueError):
    pass


class LossParts(NamedTuple):
    cls_loss: torch.Tensor
    reg_loss: torch.Tensor
    total: torch.Tensor


def mine_negatives(neg_scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` largest entries, ties resolved towards lower index."""
    order = torch.sort(neg_scores.detach(), descending=True, stable=True).indices
    return order[:k]


def select_negatives(cls: torch.Tensor, matches: Sequence[MatchResult], neg_ratio: int = 3) -> list[torch.Tensor]:
    """The anchor indices ``compute_loss`` would mine for each batch item."""
    out = []
    with torch.no_grad():
        for b, m in enumerate(matches):
            labels = torch.from_numpy(m.labels)
            ce = -F.log_softmax(cls[b], dim=-1).gather(1, labels[:, None])[:, 0]
            neg_idx = torch.nonzero(labels == 0)[:, 0]
            n_pos = int(m.num_positive)
            k = min(neg_ratio * n_pos if n_pos > 0 else 1, len(neg_idx))
            out.append(neg_idx[mine_negatives(ce[neg_idx], k)])
    return out


def compute_loss(
    reg: torch.Tensor,
    cls: torch.Tensor,
    matches: Sequence[MatchResult],
    neg_ratio: int = 3,
    focal_gamma: float = 0.0,
    negatives: Sequence[torch.Tensor] | None = None,
) -> LossParts:
    """Loss for flat head outputs ``reg`` (B, A, 6) and ``cls`` (B, A, 1+K).

    Cross-entropy over positives plus the ``neg_ratio * n_pos`` negatives with
    the highest foreground probability (one negative when an item has no
    positives). ``focal_gamma > 0`` switches to focal loss over every anchor.
    ``negatives`` pins the mined anchor indices per item instead of mining.
    """
    if reg.shape[0] != len(matches):
        raise AnchorCountError(f"batch of {reg.shape[0]} outputs but {len(matches)} match results")
    n_anchor = reg.shape[1]
    cls_terms, reg_terms = [], []
    n_cls = 0
    n_pos_total = 0
    for b, m in enumerate(matches):
        if len(m.labels) != n_anchor or cls.shape[1] != n_anchor:
            raise AnchorCountError(f"head outputs cover {n_anchor} anchors, match has {len(m.labels)}")
        labels = torch.from_numpy(m.labels).to(cls.device)
        pos = labels > 0
        n_pos = int(pos.sum())
        n_pos_total += n_pos
        logp = F.log_softmax(cls[b], dim=-1)
        ce = -logp.gather(1, labels[:, None])[:, 0]
        if focal_gamma > 0:
            pt = torch.exp(-ce)
            cls_terms.append(((1 - pt) ** focal_gamma * ce).sum())
        else:
            if negatives is not None:
                hard = negatives[b]
                k = len(hard)
            else:
                neg_idx = torch.nonzero(~pos)[:, 0]
                k = neg_ratio * n_pos if n_pos > 0 else 1
                k = min(k, len(neg_idx))
                hard = neg_idx[mine_negatives(ce[neg_idx], k)]
            cls_terms.append(ce[pos].sum() + ce[hard].sum())
            n_cls += n_pos + k
        if n_pos:
            tgt = torch.from_numpy(m.targets[m.positive]).to(reg.dtype)
            reg_terms.append(F.smooth_l1_loss(reg[b][pos], tgt, beta=1.0, reduction="sum"))

    if focal_gamma > 0:
        cls_loss = torch.stack(cls_terms).sum() / max(1, n_pos_total)
    else:
        cls_loss = torch.stack(cls_terms).sum() / max(1, n_cls)
    if reg_terms:
        reg_loss = torch.stack(reg_terms).sum() / n_pos_total
    else:
        reg_loss = reg.sum() * 0.0
    return LossParts(cls_loss, reg_loss, cls_loss + reg_loss)

