"""Entity-level precision / recall / F1 with exact and boundary-only matching."""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from .corpus import EntityMention


@dataclass
class Metrics:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    boundary_precision: float = 0.0
    boundary_recall: float = 0.0
    boundary_f1: float = 0.0
    relation_accuracy: Optional[float] = None
    n_gold: int = 0
    n_pred: int = 0
    n_discarded: int = 0
    per_epoch: list = field(default_factory=list)

    def final(self) -> dict:
        return {
            "p": self.precision,
            "r": self.recall,
            "f1": self.f1,
            "boundary_f1": self.boundary_f1,
            "relation_accuracy": self.relation_accuracy,
        }

    def to_dict(self) -> dict:
        return asdict(self)


def prf(matched: int, n_pred: int, n_gold: int) -> tuple:
    p = matched / n_pred if n_pred else 0.0
    r = matched / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def _key(m: EntityMention, with_type: bool):
    return (m.fragments, m.type_id) if with_type else m.fragments


def count_matches(gold: Sequence[EntityMention], pred: Sequence[EntityMention],
                  with_type: bool = True) -> int:
    """Size of the multiset intersection of gold and predicted mentions."""
    g = Counter(_key(m, with_type) for m in gold)
    p = Counter(_key(m, with_type) for m in pred)
    return sum((g & p).values())


def score_mentions(gold: Sequence[Sequence[EntityMention]],
                   pred: Sequence[Sequence[EntityMention]]) -> Metrics:
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold sentences but {len(pred)} predictions")
    n_gold = sum(len(g) for g in gold)
    n_pred = sum(len(p) for p in pred)
    exact = sum(count_matches(g, p, True) for g, p in zip(gold, pred))
    bound = sum(count_matches(g, p, False) for g, p in zip(gold, pred))
    p, r, f = prf(exact, n_pred, n_gold)
    bp, br, bf = prf(bound, n_pred, n_gold)
    return Metrics(p, r, f, bp, br, bf, n_gold=n_gold, n_pred=n_pred)


def corrupt_types(gold: Sequence[Sequence[EntityMention]], pred: Sequence[Sequence[EntityMention]],
                  rate: float, n_types: int, seed: int = 0) -> list:
    """Reassign a wrong type to ``rate`` of the exactly-correct predictions.

    The corrupted subset is drawn without replacement (its size is
    ``round(rate * n_correct)``); fragments are never touched.
    """
    if n_types < 2:
        raise ValueError("type corruption needs at least two types")
    rng = random.Random(seed)
    correct = []
    for si, (g, p) in enumerate(zip(gold, pred)):
        remaining = Counter(_key(m, True) for m in g)
        for mi, m in enumerate(p):
            k = _key(m, True)
            if remaining[k] > 0:
                remaining[k] -= 1
                correct.append((si, mi))
    chosen = set(rng.sample(correct, round(rate * len(correct))))
    out = []
    for si, p in enumerate(pred):
        row = []
        for mi, m in enumerate(p):
            if (si, mi) in chosen:
                t = rng.randrange(n_types - 1)
                t = t if t < m.type_id else t + 1
                m = EntityMention(m.fragments, t)
            row.append(m)
        out.append(row)
    return out
