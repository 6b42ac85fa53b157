"""Finite-difference audit of the full training loss, per parameter group."""

from __future__ import annotations

import re
from typing import Optional

import numpy as np

from .corpus import EntityMention, Sentence, build_vocab, linearize_targets
from .model import ModelConfig, MultiTaskNER
from .relgrid import build_grid
from .tensor import finite_diff_check
from .training import Example, TrainConfig, example_loss
from .typebase import lexicon_from_corpus

PARAMETER_GROUPS = {
    "embedding": r"^embed$",
    "cln": r"^cln\.",
    "relation_reduce": r"^rel_reduce\.",
    "relation_mlp": r"^rel_head\.",
    "conv": r"^rel_attn\.(kernel|conv_bias)$",
    "relation_kv": r"^rel_attn\.(keys|values)\.",
    "type_mlp": r"^type_proj\.",
    "attention": r"\.(attn|self_attn|cross_attn)\.",
    "layer_norm": r"\.ln\d\.",
    "feed_forward": r"\.ffn\.",
    "pointer_eos": r"^(eos|start)$",
}


def probe_sentence() -> tuple:
    """Six tokens carrying a flat, a nested and a discontinuous mention."""
    tokens = ("ache", "in", "the", "left", "knee", "joint")
    mentions = (
        EntityMention(((0, 1), (4, 4)), 0),
        EntityMention(((3, 5),), 1),
        EntityMention(((4, 4),), 2),
    )
    s = Sentence(tokens, mentions)
    return s, ["symptom", "body", "part"]


def group_of(name: str) -> Optional[str]:
    for group, pattern in PARAMETER_GROUPS.items():
        if re.search(pattern, name):
            return group
    return None


def gradient_suite(d_h: int = 8, n_probe: int = 30, seed: int = 0, eps: float = 1e-5,
                   sentence: Optional[Sentence] = None, **overrides) -> dict:
    """Max relative finite-difference error of the total loss for each parameter group.

    ``n_probe`` coordinates are drawn at random (seeded) inside every group.
    """
    if sentence is None:
        sentence, type_names = probe_sentence()
    else:
        n = 1 + max((m.type_id for m in sentence.mentions), default=0)
        type_names = [f"T{i}" for i in range(n)]
    vocab = build_vocab([sentence])
    lexicon = lexicon_from_corpus([sentence], type_names)
    weights = lexicon.weight_matrix(vocab)
    cfg = ModelConfig(vocab_size=len(vocab), n_types=len(type_names), d_h=d_h,
                      n_heads=overrides.pop("n_heads", 2), **overrides)
    model = MultiTaskNER(cfg, weights, seed=seed)
    tcfg = TrainConfig(w=0.3, alpha=5.0, tau=1.0)
    ex = Example(sentence, vocab.encode(sentence.tokens),
                 linearize_targets(sentence, cfg.n_types), build_grid(sentence))

    def total_loss(_):
        return example_loss(model, ex, tcfg)[0]

    rng = np.random.default_rng(seed)
    by_group = {}
    for name, p in model.named_parameters():
        group = group_of(name)
        if group is None:
            raise KeyError(f"parameter {name} belongs to no gradient-check group")
        by_group.setdefault(group, []).append((name, p))

    report = {}
    for group, params in by_group.items():
        coords = [(pi, idx) for pi, (_, p) in enumerate(params) for idx in np.ndindex(*p.shape)]
        pick = rng.choice(len(coords), size=min(n_probe, len(coords)), replace=False)
        chosen = {}
        for k in sorted(pick):
            pi, idx = coords[k]
            chosen.setdefault(pi, []).append(idx)
        worst = 0.0
        for pi, indices in chosen.items():
            worst = max(worst, finite_diff_check(total_loss, params[pi][1], eps, indices))
        report[group] = worst
    model.zero_grad()
    return report
