"""Training objectives: focal relation loss, pointer NLL and their weighted sum."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .relgrid import RelationGrid

EPS_LOG = 1e-12


def focal_relation_loss(logits: T.Tensor, gold, alpha: float = 5.0, tau: float = 1.0,
                        reduction: str = "mean") -> T.Tensor:
    """``-alpha * (1 - p)^tau * log p`` for the gold label of each cell.

    ``log p`` comes from a log-softmax, which is finite for any logits and
    needs no additive epsilon. ``reduction`` is ``mean`` (over all N*N
    cells) or ``sum``.
    """
    labels = gold.labels if isinstance(gold, RelationGrid) else np.asarray(gold, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise T.ShapeError(f"logits {logits.shape} do not match grid {labels.shape}")
    if alpha <= 0 or tau < 0:
        raise ValueError(f"need alpha > 0 and tau >= 0, got {alpha}, {tau}")
    logp_all = T.log_softmax(logits, axis=-1)
    idx = tuple(np.indices(labels.shape)) + (labels,)
    logp = logp_all[idx]
    weight = (1.0 - T.exp(logp)) ** tau if tau != 0 else 1.0
    cell = -alpha * (weight * logp)
    if reduction == "mean":
        return cell.mean()
    if reduction == "sum":
        return cell.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def entity_nll(probs: T.Tensor, gold: Sequence[int]) -> T.Tensor:
    """Mean over steps of ``-log(P_t[gold_t] + 1e-12)``."""
    gold = np.asarray(gold, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != gold.size:
        raise T.ShapeError(f"{probs.shape[0] if probs.ndim else 0} step distributions "
                           f"for a target of length {gold.size}")
    picked = probs[np.arange(gold.size), gold]
    return -T.log(picked + EPS_LOG).mean()


def combined_loss(l_entity, l_relation: Optional[T.Tensor], w: float):
    """``L_entity + w * L_relation``; a missing relation loss counts as 0."""
    if l_relation is None:
        return l_entity
    return l_entity + w * l_relation
