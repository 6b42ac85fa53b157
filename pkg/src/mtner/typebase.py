"""Entity-type vectors from a frequency-weighted entity lexicon.

A type vector is the weighted sum of the embeddings of the lexicon phrases
listed under that type, with weights proportional to phrase frequency. A
phrase embedding is the mean of its token embeddings. Because the result is
linear in the token embedding table it is computed as one matrix product
``W @ table`` with a fixed ``(n_types, vocab)`` weight matrix ``W``.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import Vocab, lexicon_counts
from .layers import Linear, Module, split_heads


class LexiconError(ValueError):
    pass


@dataclass(frozen=True)
class TypeLexicon:
    """``entries[t]`` lists ``(phrase_tokens, frequency)`` for type ``t``."""

    type_names: tuple
    entries: tuple

    def __post_init__(self):
        if len(self.entries) != len(self.type_names):
            raise LexiconError("one entry list per type is required")
        for name, ents in zip(self.type_names, self.entries):
            if not ents:
                raise LexiconError(f"type {name!r} has no lexicon entries")
            for phrase, freq in ents:
                if not phrase:
                    raise LexiconError(f"empty phrase under type {name!r}")
                if freq <= 0:
                    raise LexiconError(f"non-positive frequency {freq} under type {name!r}")

    @property
    def n_types(self) -> int:
        return len(self.type_names)

    def thetas(self, t: int, mode: str = "frequency") -> np.ndarray:
        freqs = np.array([f for _, f in self.entries[t]], dtype=np.float64)
        if mode == "uniform":
            freqs = np.ones_like(freqs)
        elif mode != "frequency":
            raise ValueError(f"unknown weighting mode {mode!r}")
        return freqs / freqs.sum()

    def weight_matrix(self, vocab: Vocab, mode: str = "frequency") -> np.ndarray:
        w = np.zeros((self.n_types, len(vocab)))
        for t, ents in enumerate(self.entries):
            for (phrase, _), theta in zip(ents, self.thetas(t, mode)):
                ids = vocab.encode(phrase)
                np.add.at(w[t], ids, theta / len(ids))
        return w


def load_lexicon(path, type_names: Sequence[str]) -> TypeLexicon:
    """Read ``type_name<TAB>space separated phrase<TAB>frequency`` lines."""
    index = {name: i for i, name in enumerate(type_names)}
    grouped = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise LexiconError(f"{path}:{lineno}: expected 3 tab-separated columns")
            name, phrase, freq = cols
            if name not in index:
                raise LexiconError(f"{path}:{lineno}: unknown type name {name!r}")
            try:
                freq = float(freq)
            except ValueError:
                raise LexiconError(f"{path}:{lineno}: bad frequency {freq!r}") from None
            if freq <= 0:
                raise LexiconError(f"{path}:{lineno}: frequency must be positive, got {freq}")
            tokens = tuple(phrase.split())
            if not tokens:
                raise LexiconError(f"{path}:{lineno}: empty phrase")
            grouped[index[name]].append((tokens, freq))
    entries = tuple(tuple(grouped[i]) for i in range(len(type_names)))
    try:
        return TypeLexicon(tuple(type_names), entries)
    except LexiconError as exc:
        raise LexiconError(f"{path}: {exc}") from None


def save_lexicon(lex: TypeLexicon, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, ents in zip(lex.type_names, lex.entries):
            for phrase, freq in ents:
                f = int(freq) if float(freq).is_integer() else freq
                fh.write(f"{name}\t{' '.join(phrase)}\t{f}\n")


def compute_type_embeddings(weights: np.ndarray, token_embed, freeze: bool = False) -> T.Tensor:
    """``E_T = weights @ token_embed``; ``freeze`` cuts the gradient path."""
    table = token_embed.detach() if freeze else token_embed
    return T.matmul(T.Tensor(weights), table)


class TypeProjector(Module):
    """Shared down/up bottleneck MLP followed by per-layer key and value maps."""

    def __init__(self, d_h: int, d_down: int, d_up: int, n_layers: int, n_heads: int,
                 rng: np.random.Generator, activation: str = "tanh"):
        if d_h % n_heads:
            raise ValueError(f"hidden size {d_h} not divisible by {n_heads} heads")
        if activation not in ("tanh", "relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.down = Linear(d_h, d_down, rng)
        self.up = Linear(d_down, d_up, rng)
        self.keys = [Linear(d_up, d_h, rng) for _ in range(n_layers)]
        self.values = [Linear(d_up, d_h, rng) for _ in range(n_layers)]
        self.n_heads = n_heads
        self.activation = activation

    def hidden(self, type_table) -> T.Tensor:
        z = self.down(type_table)
        if self.activation == "tanh":
            z = T.tanh(z)
        elif self.activation == "relu":
            z = T.relu(z)
        return self.up(z)

    def project(self, type_table, layer: int, hidden=None) -> tuple:
        """Head-split ``(K_T, V_T)``, each ``(n_heads, n_types, d_h // n_heads)``."""
        z = self.hidden(type_table) if hidden is None else hidden
        return (split_heads(self.keys[layer](z), self.n_heads),
                split_heads(self.values[layer](z), self.n_heads))

    def project_all(self, type_table) -> list:
        z = self.hidden(type_table)
        return [self.project(type_table, i, z) for i in range(len(self.keys))]


def lexicon_from_corpus(corpus, type_names: Sequence[str]) -> TypeLexicon:
    """Lexicon of every mention surface form, weighted by its mention count."""
    grouped = defaultdict(list)
    for (t, phrase), count in sorted(lexicon_counts(corpus).items()):
        grouped[t].append((tuple(phrase.split()), count))
    return TypeLexicon(tuple(type_names), tuple(tuple(grouped[t]) for t in range(len(type_names))))
