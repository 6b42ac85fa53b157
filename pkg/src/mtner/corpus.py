"""Sentences, entity mentions, corpus files and pointer-target sequences.

A mention is an ordered list of inclusive ``(start, end)`` token ranges, so
flat, nested and discontinuous entities share one representation.

Pointer targets live in a unified index space for a sentence of N tokens
and T types::

    [0, N)        source token positions
    [N, N + T)    type slots
    N + T         end of sequence
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class CorpusError(ValueError):
    """Malformed corpus input."""


def _merge_positions(positions: Sequence[int]) -> tuple:
    frags = []
    for p in positions:
        if frags and p == frags[-1][1] + 1:
            frags[-1][1] = p
        else:
            frags.append([p, p])
    return tuple((a, b) for a, b in frags)


@dataclass(frozen=True)
class EntityMention:
    """An entity occurrence made of one or more token ranges.

    Touching fragments (``end + 1 == next start``) are merged on
    construction so that every mention has a single canonical form.
    """

    fragments: tuple
    type_id: int

    def __post_init__(self):
        frags = [tuple(int(v) for v in f) for f in self.fragments]
        if not frags:
            raise CorpusError("mention has no fragments")
        for a, b in frags:
            if a < 0 or a > b:
                raise CorpusError(f"bad fragment [{a}, {b}]")
        for (_, b0), (a1, _) in zip(frags, frags[1:]):
            if a1 <= b0:
                raise CorpusError(f"fragments {frags} unsorted or overlapping")
        positions = [p for a, b in frags for p in range(a, b + 1)]
        object.__setattr__(self, "fragments", _merge_positions(positions))
        if int(self.type_id) < 0:
            raise CorpusError(f"negative type id {self.type_id}")
        object.__setattr__(self, "type_id", int(self.type_id))

    @classmethod
    def from_positions(cls, positions: Iterable[int], type_id: int) -> "EntityMention":
        return cls(_merge_positions(sorted(positions)), type_id)

    @property
    def positions(self) -> list:
        return [p for a, b in self.fragments for p in range(a, b + 1)]

    @property
    def first(self) -> int:
        return self.fragments[0][0]

    @property
    def last(self) -> int:
        return self.fragments[-1][1]

    @property
    def is_discontinuous(self) -> bool:
        return len(self.fragments) > 1

    def to_json(self) -> dict:
        return {"frags": [list(f) for f in self.fragments], "type": self.type_id}


@dataclass(frozen=True)
class Sentence:
    tokens: tuple
    mentions: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "mentions", tuple(self.mentions))
        if not self.tokens:
            raise CorpusError("sentence has no tokens")
        n = len(self.tokens)
        for m in self.mentions:
            if m.last >= n:
                raise CorpusError(f"mention {m.fragments} exceeds sentence length {n}")

    def __len__(self) -> int:
        return len(self.tokens)

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "mentions": [m.to_json() for m in self.mentions]}


def sentence_from_json(obj: dict) -> Sentence:
    mentions = [EntityMention(tuple(tuple(f) for f in m["frags"]), m["type"]) for m in obj["mentions"]]
    return Sentence(tuple(obj["tokens"]), tuple(mentions))


# -- file I/O ------------------------------------------------------------------

def load_corpus(path, n_types: Optional[int] = None) -> list:
    """Read a JSON-Lines corpus; errors carry the 1-based line number."""
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                s = sentence_from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, CorpusError) as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
            if n_types is not None:
                for m in s.mentions:
                    if m.type_id >= n_types:
                        raise CorpusError(f"{path}:{lineno}: type id {m.type_id} >= {n_types}")
            sentences.append(s)
    return sentences


def save_corpus(sentences: Iterable[Sentence], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")


def load_type_names(path) -> list:
    with open(path, encoding="utf-8") as fh:
        names = [ln.strip() for ln in fh if ln.strip()]
    if len(set(names)) != len(names):
        raise CorpusError(f"{path}: duplicate type names")
    return names


def save_type_names(names: Sequence[str], path) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


# -- vocabulary ----------------------------------------------------------------

class Vocab:
    """Token <-> id map with reserved pad (0) and unknown (1) ids."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = [PAD_TOKEN, UNK_TOKEN]
        self.stoi = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{t}\n" for t in self.itos[2:]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(ln.rstrip("\n") for ln in open(path, encoding="utf-8") if ln.rstrip("\n"))


def build_vocab(corpus: Sequence[Sentence]) -> Vocab:
    if not corpus:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    return Vocab(tok for s in corpus for tok in s.tokens)


# -- pointer targets -------------------------------------------------------------

def mention_order_key(m: EntityMention) -> tuple:
    return (m.first, m.last, m.type_id, m.fragments)


def linearize_targets(s: Sentence, n_types: int) -> list:
    """Pointer ids for ``s``: each mention's positions then its type slot, then EOS."""
    n = len(s)
    out = []
    for m in sorted(s.mentions, key=mention_order_key):
        if m.type_id >= n_types:
            raise CorpusError(f"type id {m.type_id} >= n_types {n_types}")
        out.extend(m.positions)
        out.append(n + m.type_id)
    out.append(n + n_types)
    return out


def delinearize(indices: Sequence[int], n_tokens: int, n_types: int) -> tuple:
    """Parse pointer ids back into mentions, skipping malformed runs.

    Returns ``(mentions, n_discarded)``. Never raises.
    """
    eos = n_tokens + n_types
    mentions = []
    discarded = 0
    run = []
    for raw in indices:
        try:
            idx = int(raw)
        except (TypeError, ValueError):
            idx = -1
        if idx == eos:
            break
        if 0 <= idx < n_tokens:
            run.append(idx)
        elif n_tokens <= idx < eos:
            if run and all(b > a for a, b in zip(run, run[1:])):
                mentions.append(EntityMention.from_positions(run, idx - n_tokens))
            else:
                discarded += 1
            run = []
        else:
            discarded += 1
            run = []
    if run:
        discarded += 1
    return mentions, discarded


def is_well_formed(indices: Sequence[int], n_tokens: int, n_types: int) -> bool:
    eos = n_tokens + n_types
    if not indices or indices[-1] != eos:
        return False
    mentions, discarded = delinearize(indices, n_tokens, n_types)
    n_type_slots = sum(1 for i in indices if n_tokens <= i < eos)
    return discarded == 0 and len(mentions) == n_type_slots and indices.count(eos) == 1


# -- synthetic data ----------------------------------------------------------------

CATEGORIES = ("flat", "nested", "discontinuous")


@dataclass
class SynthConfig:
    """Knobs for the synthetic corpus.

    ``rates`` gives the share of sentences built around each structure
    category; the remaining share carries no entity. Counts are allotted
    exactly (largest remainder), so the realised shares match the rates up
    to rounding.
    """

    n_sentences: int = 200
    n_types: int = 4
    vocab_size: int = 60
    words_per_type: int = 12
    n_connectors: int = 4
    min_len: int = 6
    max_len: int = 14
    max_entity_len: int = 3
    max_flat_per_sentence: int = 2
    rates: dict = field(default_factory=lambda: {"flat": 0.5, "nested": 0.25, "discontinuous": 0.25})
    type_prefix: str = "T"

    def validate(self) -> None:
        unknown = set(self.rates) - set(CATEGORIES)
        if unknown:
            raise CorpusError(f"unknown categories {sorted(unknown)}")
        if any(r < 0 for r in self.rates.values()) or sum(self.rates.values()) > 1 + 1e-9:
            raise CorpusError(f"rates must be non-negative and sum to at most 1: {self.rates}")
        if self.n_sentences < 0 or self.n_types < 1 or self.vocab_size < 1 or self.words_per_type < 1:
            raise CorpusError("n_sentences, n_types, vocab_size, words_per_type must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise CorpusError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        if self.max_entity_len < 1:
            raise CorpusError("max_entity_len must be >= 1")
        if self.rates.get("nested", 0) > 0 and (self.max_entity_len < 2 or self.max_len < 2):
            raise CorpusError("nested entities need max_entity_len >= 2 and max_len >= 2")
        if self.rates.get("discontinuous", 0) > 0:
            if self.max_len < 3:
                raise CorpusError("discontinuous entities need max_len >= 3")
            if self.n_connectors < 1:
                raise CorpusError("discontinuous entities need n_connectors >= 1")

    def type_names(self) -> list:
        return [f"{self.type_prefix}{t}" for t in range(self.n_types)]


def _allot(rates: dict, n: int) -> list:
    """Exact per-category sentence labels; every positive rate gets >= 1."""
    cats = [c for c in CATEGORIES if rates.get(c, 0) > 0]
    raw = {c: rates[c] * n for c in cats}
    counts = {c: int(raw[c]) for c in cats}
    left = round(sum(raw.values())) - sum(counts.values())
    for c in sorted(cats, key=lambda c: counts[c] - raw[c])[:max(left, 0)]:
        counts[c] += 1
    for c in cats:
        counts[c] = max(counts[c], 1 if n > 0 else 0)
    while sum(counts.values()) > n:
        counts[max(cats, key=lambda c: counts[c])] -= 1
    labels = [c for c in cats for _ in range(counts[c])]
    return labels + [None] * (n - len(labels))


class _Generator:
    def __init__(self, cfg: SynthConfig, rng: random.Random):
        self.cfg = cfg
        self.rng = rng
        self.fillers = [f"w{i}" for i in range(cfg.vocab_size)]
        self.connectors = [f"c{i}" for i in range(cfg.n_connectors)]
        self.pools = [
            [f"{cfg.type_prefix.lower()}{t}_{j}" for j in range(cfg.words_per_type)]
            for t in range(cfg.n_types)
        ]

    def _phrase(self, t: int, length: int) -> list:
        return [self.rng.choice(self.pools[t]) for _ in range(length)]

    def _other_type(self, t: int) -> int:
        if self.cfg.n_types == 1:
            return t
        u = self.rng.randrange(self.cfg.n_types - 1)
        return u if u < t else u + 1

    def _blocks(self, category: Optional[str]) -> list:
        """Entity blocks as (tokens, [(relative positions, type)]) tuples."""
        rng, cfg = self.rng, self.cfg
        if category == "flat":
            k = rng.randint(1, cfg.max_flat_per_sentence)
            blocks = []
            for _ in range(k):
                t = rng.randrange(cfg.n_types)
                length = rng.randint(1, cfg.max_entity_len)
                blocks.append((self._phrase(t, length), [(list(range(length)), t)]))
            return blocks
        if category == "nested":
            outer_t = rng.randrange(cfg.n_types)
            inner_t = self._other_type(outer_t)
            inner_len = rng.randint(1, cfg.max_entity_len - 1)
            lead = rng.randint(1, cfg.max_entity_len - inner_len)
            toks = self._phrase(outer_t, lead) + self._phrase(inner_t, inner_len)
            outer = (list(range(lead + inner_len)), outer_t)
            inner = (list(range(lead, lead + inner_len)), inner_t)
            return [(toks, [outer, inner])]
        if category == "discontinuous":
            t = rng.randrange(cfg.n_types)
            head_len = rng.randint(1, max(1, cfg.max_entity_len - 1))
            gap = rng.randint(1, 2) if cfg.max_len >= head_len + 3 else 1
            head_len = min(head_len, cfg.max_len - gap - 1)
            toks = (self._phrase(t, head_len)
                    + [rng.choice(self.connectors) for _ in range(gap)]
                    + self._phrase(t, 1))
            pos = list(range(head_len)) + [head_len + gap]
            return [(toks, [(pos, t)])]
        return []

    def sentence(self, category: Optional[str]) -> Sentence:
        rng, cfg = self.rng, self.cfg
        for _ in range(100):
            blocks = self._blocks(category)
            need = sum(len(b[0]) for b in blocks) + max(0, len(blocks) - 1)
            if need <= cfg.max_len:
                break
            if category == "flat" and len(blocks) > 1:
                continue
        else:
            raise CorpusError(f"cannot fit a '{category}' structure in {cfg.max_len} tokens")
        length = max(need, rng.randint(cfg.min_len, cfg.max_len))
        # Distribute spare filler slots into len(blocks) + 1 gaps; inner gaps keep >= 1.
        spare = length - need
        gaps = [0] + [1] * (len(blocks) - 1) + [0] if blocks else [0]
        for _ in range(spare):
            gaps[rng.randrange(len(gaps))] += 1
        tokens, mentions = [], []
        for i, (toks, ments) in enumerate(blocks):
            tokens.extend(rng.choice(self.fillers) for _ in range(gaps[i]))
            base = len(tokens)
            tokens.extend(toks)
            for pos, t in ments:
                mentions.append(EntityMention.from_positions([base + p for p in pos], t))
        tokens.extend(rng.choice(self.fillers) for _ in range(gaps[-1]))
        return Sentence(tuple(tokens), tuple(mentions))


def generate_synthetic(cfg: SynthConfig, seed: int) -> list:
    """Deterministic synthetic corpus with flat / nested / discontinuous entities.

    Entity tokens come from per-type word pools disjoint from the filler
    vocabulary; discontinuous mentions skip over dedicated connector tokens.
    """
    cfg.validate()
    rng = random.Random(seed)
    labels = _allot(cfg.rates, cfg.n_sentences)
    rng.shuffle(labels)
    gen = _Generator(cfg, rng)
    return [gen.sentence(c) for c in labels]


def sentence_category(s: Sentence) -> Optional[str]:
    """Structure category of a sentence as the generator labels it."""
    if not s.mentions:
        return None
    if any(m.is_discontinuous for m in s.mentions):
        return "discontinuous"
    spans = [set(m.positions) for m in s.mentions]
    for i, a in enumerate(spans):
        for b in spans[i + 1:]:
            if a & b:
                return "nested"
    return "flat"


def lexicon_counts(corpus: Iterable[Sentence]) -> Counter:
    """(type_id, phrase) -> number of mentions with that surface form."""
    counts = Counter()
    for s in corpus:
        for m in s.mentions:
            phrase = " ".join(s.tokens[p] for p in m.positions)
            counts[(m.type_id, phrase)] += 1
    return counts


def split_corpus(corpus: Sequence[Sentence], seed: int, dev_fraction: float = 0.1) -> tuple:
    """Seeded shuffle then split into (train, dev)."""
    order = list(range(len(corpus)))
    random.Random(seed).shuffle(order)
    n_dev = int(round(len(corpus) * dev_fraction))
    if len(corpus) > 1:
        n_dev = min(max(n_dev, 1), len(corpus) - 1)
    else:
        n_dev = 0
    dev = [corpus[i] for i in order[:n_dev]]
    train = [corpus[i] for i in order[n_dev:]]
    return train, dev


STANDARD_SEED = 2024


def standard_corpus(n_train: int = 2000, n_dev: int = 200, seed: int = STANDARD_SEED) -> tuple:
    """The fixed benchmark split used by the ablation experiments: (train, dev, config)."""
    cfg = SynthConfig(n_sentences=n_train + n_dev)
    corpus = generate_synthetic(cfg, seed)
    return corpus[:n_train], corpus[n_train:], cfg
