"""Multi-task pointer-network Transformer for flat, nested and discontinuous NER.

Wiring, for a sentence of N tokens and T entity types:

* Encoder: token embedding + sinusoidal positions, then post-LN blocks.
  With ``use_eta`` every self-attention layer also attends to T type slots.
* Relation representations: conditional layer norm over all token pairs,
  reduced to ``d_rel`` features per pair. ``use_rp`` adds a 3-way classifier
  per pair; ``use_tra`` convolves the pair grid, max-pools it to one vector
  per token and turns those into extra key/value slots for each decoder
  cross-attention layer.
* Decoder: causal self-attention over the pointer prefix, cross-attention
  over ``cat(K_R, K_T, K)``, feed-forward. The next-index distribution is a
  softmax over ``[H_e . h ; E_T . h ; e_eos . h]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .config import build, dump_kv, load_kv
from .layers import (
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    sinusoidal_positions,
    split_heads,
)
from .relgrid import N_RELATIONS
from .typebase import TypeProjector, compute_type_embeddings

CHECKPOINT_HEADER = "mtner-checkpoint v1"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    n_types: int
    d_h: int = 32
    n_heads: int = 2
    n_layers_enc: int = 1
    n_layers_dec: int = 1
    d_ff: Optional[int] = None
    d_rel: Optional[int] = None
    conv_kernel: int = 3
    d_down: Optional[int] = None
    d_up: Optional[int] = None
    eps_ln: float = 1e-5
    use_rp: bool = True
    use_tra: bool = True
    use_eta: bool = True
    type_activation: str = "tanh"
    freeze_type_embeddings: bool = False
    source_input: str = "encoder"
    init_scale: float = 1.0

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 2 * self.d_h
        if self.d_rel is None:
            self.d_rel = max(1, self.d_h // 2)
        if self.d_down is None:
            self.d_down = max(1, self.d_h // 2)
        if self.d_up is None:
            self.d_up = self.d_h
        self.validate()

    def validate(self) -> None:
        if self.vocab_size < 2 or self.n_types < 0 or self.d_h < 1 or self.n_heads < 1:
            raise ConfigError("vocab_size >= 2, n_types >= 0, d_h >= 1, n_heads >= 1 required")
        if self.d_h % self.n_heads:
            raise ConfigError(f"d_h={self.d_h} is not divisible by n_heads={self.n_heads}")
        if self.use_tra and not self.use_rp:
            raise ConfigError("use_tra requires use_rp: relation attention reads the relation-task features")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd and positive, got {self.conv_kernel}")
        if self.source_input not in ("encoder", "embedding"):
            raise ConfigError(f"source_input must be 'encoder' or 'embedding', got {self.source_input!r}")

    @property
    def ablation_name(self) -> str:
        parts = [name for flag, name in ((self.use_rp, "RP"), (self.use_tra, "TRA"),
                                         (self.use_eta, "ETA")) if flag]
        return "Baseline" if not parts else "+" + "&".join(parts)

    def to_text(self) -> str:
        return dump_kv(self)

    @classmethod
    def from_file(cls, path, **overrides) -> "ModelConfig":
        values = load_kv(path)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return build(cls, values, strict=False)


@dataclass
class EncoderOutput:
    hidden: T.Tensor                 # (N, d_h)
    relations: Optional[T.Tensor]    # (N, N, d_rel) when use_rp
    type_table: T.Tensor             # (T, d_h)
    token_embeddings: T.Tensor       # (N, d_h)
    type_kv: Optional[list]          # per type-attention layer (K_T, V_T), head-split


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.attn = MultiHeadAttention(cfg.d_h, cfg.n_heads, rng)
        self.ln1 = LayerNorm(cfg.d_h, cfg.eps_ln)
        self.ffn = FeedForward(cfg.d_h, cfg.d_ff, rng)
        self.ln2 = LayerNorm(cfg.d_h, cfg.eps_ln)

    def __call__(self, x, type_kv=None, mask_banks=False):
        x = self.ln1(x + self.attn(x, x, banks=[type_kv], mask_banks=mask_banks))
        return self.ln2(x + self.ffn(x))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.self_attn = MultiHeadAttention(cfg.d_h, cfg.n_heads, rng)
        self.ln1 = LayerNorm(cfg.d_h, cfg.eps_ln)
        self.cross_attn = MultiHeadAttention(cfg.d_h, cfg.n_heads, rng)
        self.ln2 = LayerNorm(cfg.d_h, cfg.eps_ln)
        self.ffn = FeedForward(cfg.d_h, cfg.d_ff, rng)
        self.ln3 = LayerNorm(cfg.d_h, cfg.eps_ln)

    def __call__(self, y, memory, self_type_kv=None, relation_kv=None, cross_type_kv=None,
                 mask_banks=False):
        y = self.ln1(y + self.self_attn(y, y, banks=[self_type_kv], causal=True,
                                        mask_banks=mask_banks))
        y = self.ln2(y + self.cross_attn(y, memory, banks=[relation_kv, cross_type_kv],
                                         mask_banks=mask_banks))
        return self.ln3(y + self.ffn(y))


class ConditionalLayerNorm(Module):
    """``r_ij = (W_a h_i + b_a) * (h_j - mu_j) / (sigma_j + eps) + (W_b h_i + b_b)``."""

    def __init__(self, d: int, rng, eps: float = 1e-5):
        self.w_alpha = Parameter(0.1 * rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)))
        self.b_alpha = Parameter(np.ones(d))
        self.w_beta = Parameter(0.1 * rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)))
        self.b_beta = Parameter(np.zeros(d))
        self.eps = eps

    def pair(self, h_i, h_j) -> T.Tensor:
        gamma = T.matmul(h_i.reshape(1, -1), self.w_alpha).reshape(-1) + self.b_alpha
        lam = T.matmul(h_i.reshape(1, -1), self.w_beta).reshape(-1) + self.b_beta
        mu, sigma = T.layer_norm_stats(h_j)
        return gamma * ((h_j - mu) / (sigma + self.eps)) + lam

    def grid(self, h) -> T.Tensor:
        """All pairs at once: (N, d) -> (N, N, d), row i conditions column j."""
        n, d = h.shape
        gamma = T.matmul(h, self.w_alpha) + self.b_alpha
        lam = T.matmul(h, self.w_beta) + self.b_beta
        mu, sigma = T.layer_norm_stats(h)
        normed = (h - mu) / (sigma + self.eps)
        return gamma.reshape(n, 1, d) * normed.reshape(1, n, d) + lam.reshape(n, 1, d)


class RelationHead(Module):
    """Two-layer MLP scoring each token pair over the relation labels."""

    def __init__(self, d_rel: int, rng):
        self.hidden = Linear(d_rel, d_rel, rng)
        self.out = Linear(d_rel, N_RELATIONS, rng)

    def __call__(self, r) -> T.Tensor:
        return self.out(T.relu(self.hidden(r)))


class RelationAttention(Module):
    """Convolve the pair grid, max-pool over rows, map to per-layer K_R / V_R."""

    def __init__(self, cfg: ModelConfig, rng):
        k, c = cfg.conv_kernel, cfg.d_rel
        self.kernel = Parameter(rng.normal(0.0, np.sqrt(2.0 / (k * k * c + c)), size=(k, k, c, c)))
        self.conv_bias = Parameter(np.zeros(c))
        self.keys = [Linear(c, cfg.d_h, rng) for _ in range(cfg.n_layers_dec)]
        self.values = [Linear(c, cfg.d_h, rng) for _ in range(cfg.n_layers_dec)]

    def pooled(self, r) -> T.Tensor:
        feats = T.conv2d(r, self.kernel) + self.conv_bias
        return T.amax(feats, axis=0)

    def __call__(self, r) -> list:
        pooled = self.pooled(r)
        return [(kf(pooled), vf(pooled)) for kf, vf in zip(self.keys, self.values)]


class MultiTaskNER(Module):
    """The full model; disabled components have no parameters at all."""

    def __init__(self, cfg: ModelConfig, type_weights: Optional[np.ndarray] = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_h
        self.mask_banks = False
        self._type_weights = None
        if type_weights is not None:
            type_weights = np.asarray(type_weights, dtype=np.float64)
            if type_weights.shape != (cfg.n_types, cfg.vocab_size):
                raise ConfigError(
                    f"type weight matrix {type_weights.shape} != ({cfg.n_types}, {cfg.vocab_size})")
            self._type_weights = type_weights

        self.embed = Parameter(cfg.init_scale * rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)))
        self.type_table = None
        if self._type_weights is None:
            self.type_table = Parameter(cfg.init_scale * rng.normal(0.0, 1.0, size=(cfg.n_types, d)))
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers_enc)]
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.n_layers_dec)]
        self.start = Parameter(rng.normal(0.0, 1.0, size=d))
        self.eos = Parameter(rng.normal(0.0, 1.0, size=d))

        self.cln = self.rel_reduce = self.rel_head = self.rel_attn = self.type_proj = None
        if cfg.use_rp:
            self.cln = ConditionalLayerNorm(d, rng, cfg.eps_ln)
            self.rel_reduce = Linear(d, cfg.d_rel, rng)
            self.rel_head = RelationHead(cfg.d_rel, rng)
        if cfg.use_tra:
            self.rel_attn = RelationAttention(cfg, rng)
        if cfg.use_eta:
            n_layers = cfg.n_layers_enc + 2 * cfg.n_layers_dec
            self.type_proj = TypeProjector(d, cfg.d_down, cfg.d_up, n_layers, cfg.n_heads, rng,
                                           cfg.type_activation)

    # -- pieces ----------------------------------------------------------------
    def type_embeddings(self) -> T.Tensor:
        if self._type_weights is not None:
            return compute_type_embeddings(self._type_weights, self.embed,
                                           self.cfg.freeze_type_embeddings)
        return self.type_table

    def _check_ids(self, token_ids) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("encode needs a non-empty 1-D sequence of token ids")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise IndexError(f"token id outside [0, {self.cfg.vocab_size})")
        return ids

    def encode(self, token_ids: Sequence[int]) -> EncoderOutput:
        cfg = self.cfg
        ids = self._check_ids(token_ids)
        n = ids.size
        tok = T.take_rows(self.embed, ids)
        x = tok + sinusoidal_positions(n, cfg.d_h)
        type_table = self.type_embeddings()
        type_kv = self.type_proj.project_all(type_table) if cfg.use_eta else None
        for i, layer in enumerate(self.encoder):
            x = layer(x, type_kv[i] if type_kv else None, self.mask_banks)
        relations = None
        if cfg.use_rp:
            relations = self.rel_reduce(self.cln.grid(x))
        return EncoderOutput(x, relations, type_table, tok, type_kv)

    def relation_logits(self, enc: EncoderOutput) -> Optional[T.Tensor]:
        if enc.relations is None:
            return None
        return self.rel_head(enc.relations)

    def relation_bank(self, enc: EncoderOutput) -> Optional[list]:
        """Head-split (K_R, V_R) per decoder layer, or None without ``use_tra``."""
        if not self.cfg.use_tra:
            return None
        h = self.cfg.n_heads
        return [(split_heads(k, h), split_heads(v, h)) for k, v in self.rel_attn(enc.relations)]

    def pointer_keys(self, enc: EncoderOutput) -> T.Tensor:
        """Rows scored against the decoder state: N sources, T types, EOS."""
        return T.concat([enc.hidden, enc.type_table, self.eos.reshape(1, -1)], axis=0)

    def n_slots(self, n_tokens: int) -> int:
        return n_tokens + self.cfg.n_types + 1

    def decode(self, enc: EncoderOutput, bank: Optional[list], prev: Sequence[int]) -> T.Tensor:
        """Distributions for every step given the prefix ``prev``: (len(prev)+1, N+T+1)."""
        cfg = self.cfg
        n = enc.hidden.shape[0]
        n_slots = self.n_slots(n)
        prev = [int(p) for p in prev]
        for p in prev:
            if not 0 <= p < n_slots:
                raise IndexError(f"pointer index {p} outside [0, {n_slots})")
        source_rows = enc.hidden if cfg.source_input == "encoder" else enc.token_embeddings
        table = T.concat([source_rows, enc.type_table, self.eos.reshape(1, -1),
                          self.start.reshape(1, -1)], axis=0)
        y = T.take_rows(table, [n_slots] + prev)
        y = y + sinusoidal_positions(len(prev) + 1, cfg.d_h)
        n_enc = cfg.n_layers_enc
        for l, layer in enumerate(self.decoder):
            self_kv = cross_kv = None
            if enc.type_kv is not None:
                self_kv = enc.type_kv[n_enc + l]
                cross_kv = enc.type_kv[n_enc + cfg.n_layers_dec + l]
            y = layer(y, enc.hidden, self_kv, bank[l] if bank else None, cross_kv,
                      self.mask_banks)
        scores = T.matmul(y, self.pointer_keys(enc).T)
        return T.softmax(scores, axis=-1)

    def decode_step(self, enc: EncoderOutput, bank: Optional[list], prev: Sequence[int]) -> T.Tensor:
        """Next-index distribution after the prefix ``prev``."""
        return self.decode(enc, bank, prev)[-1]

    def forward_teacher_forced(self, token_ids: Sequence[int], gold: Sequence[int]) -> tuple:
        """(stepwise distributions (len(gold), N+T+1), relation logits or None)."""
        if len(gold) < 1:
            raise ValueError("gold target must contain at least the EOS index")
        enc = self.encode(token_ids)
        bank = self.relation_bank(enc)
        probs = self.decode(enc, bank, list(gold[:-1]))
        return probs, self.relation_logits(enc)

    def greedy_generate(self, token_ids: Sequence[int], max_len: Optional[int] = None) -> list:
        """Argmax decoding until EOS or ``max_len`` indices (ties -> lowest index)."""
        n = len(token_ids)
        if max_len is None:
            max_len = 3 * n + 2
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        eos = n + self.cfg.n_types
        out = []
        with T.no_grad():
            enc = self.encode(token_ids)
            bank = self.relation_bank(enc)
            while len(out) < max_len:
                p = self.decode_step(enc, bank, out)
                nxt = int(np.argmax(p.data))
                out.append(nxt)
                if nxt == eos:
                    break
        return out

    # -- persistence ---------------------------------------------------------------
    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(CHECKPOINT_HEADER + "\n")
            for name, p in self.named_parameters():
                fh.write(f"param: {name}\n")
                fh.write(T.dump_tensor(p))

    def load(self, path) -> None:
        self.load_state_dict(read_checkpoint(path))


def read_checkpoint(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a checkpoint (expected header {CHECKPOINT_HEADER!r})")
    state = {}
    body = lines[1:]
    if len(body) % 3:
        raise ValueError(f"{path}: truncated checkpoint")
    for i in range(0, len(body), 3):
        if not body[i].startswith("param: "):
            raise ValueError(f"{path}:{i + 2}: expected 'param: <name>'")
        name = body[i][len("param: "):].strip()
        state[name] = T.parse_tensor(body[i + 1] + "\n" + body[i + 2]).data
    return state
