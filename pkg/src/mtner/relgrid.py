"""Gold token-pair relation labels for the auxiliary relation task.

Each unordered pair of tokens is labelled ``BEGIN_END`` (first and last
token of one mention), ``STAR_INSIDE`` (two distinct tokens of one mention,
at least one of them strictly inside it) or ``NONE``. Single-token mentions put
``BEGIN_END`` on the diagonal. Where mentions overlap the higher label wins
(``BEGIN_END`` > ``STAR_INSIDE`` > ``NONE``), so the grid does not depend on
mention order.
"""

from __future__ import annotations

from enum import IntEnum
from typing import Sequence

import numpy as np

from .corpus import Sentence


class RelationLabel(IntEnum):
    NONE = 0
    BEGIN_END = 1
    STAR_INSIDE = 2


# Conflict priority: larger wins.
_PRIORITY = np.array([0, 2, 1])
_BY_PRIORITY = np.array([RelationLabel.NONE, RelationLabel.STAR_INSIDE, RelationLabel.BEGIN_END])

N_RELATIONS = len(RelationLabel)


class RelationGrid:
    """Symmetric ``n x n`` array of relation label ids."""

    __slots__ = ("labels",)

    def __init__(self, labels: np.ndarray):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 2 or labels.shape[0] != labels.shape[1]:
            raise ValueError(f"grid must be square, got {labels.shape}")
        self.labels = labels

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, ij):
        return RelationLabel(int(self.labels[ij]))

    def __eq__(self, other) -> bool:
        return isinstance(other, RelationGrid) and np.array_equal(self.labels, other.labels)

    def dump(self) -> str:
        return "".join(" ".join(str(v) for v in row) + "\n" for row in self.labels)


def build_grid(s: Sentence) -> RelationGrid:
    n = len(s)
    prio = np.zeros((n, n), dtype=np.int64)
    for m in s.mentions:
        pos = np.array(m.positions)
        b, e = m.first, m.last
        inside = pos[(pos != b) & (pos != e)]
        if inside.size:
            # distinct mention-token pairs with at least one inside token
            touch = np.zeros((n, n), dtype=bool)
            touch[np.ix_(inside, pos)] = True
            touch[np.ix_(pos, inside)] = True
            np.fill_diagonal(touch, False)
            prio[touch] = np.maximum(prio[touch], _PRIORITY[RelationLabel.STAR_INSIDE])
        p = _PRIORITY[RelationLabel.BEGIN_END]
        prio[b, e] = prio[e, b] = max(prio[b, e], p)
    return RelationGrid(_BY_PRIORITY[prio])


def class_distribution(grids: Sequence[RelationGrid]) -> dict:
    """Cell counts per label over all grids."""
    if not grids:
        raise ValueError("class_distribution needs at least one grid")
    counts = np.zeros(N_RELATIONS, dtype=np.int64)
    for g in grids:
        counts += np.bincount(g.labels.reshape(-1), minlength=N_RELATIONS)
    return {label: int(counts[label]) for label in RelationLabel}
