"""Parameter containers and Transformer building blocks on top of ``tensor``."""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_VALUE = -1e9


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Collects ``Parameter`` attributes, sub-modules and lists of them by name."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, val in vars(self).items():
            yield from _walk(val, prefix + name)

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            if name not in own:
                continue
            if own[name].shape != np.shape(arr):
                raise ValueError(f"{name}: shape {np.shape(arr)} != {own[name].shape}")
            own[name].data = np.array(arr, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(val, name: str):
    if isinstance(val, Parameter):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(xavier(rng, d_in, d_out))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    """Layer norm with ``eps`` added to the population standard deviation."""

    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        mu, sigma = T.layer_norm_stats(x)
        return (x - mu) / (sigma + self.eps) * self.gain + self.bias


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        self.fc1 = Linear(d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(S, d) -> (n_heads, S, d // n_heads)."""
    s, d = x.shape
    return x.reshape(s, n_heads, d // n_heads).transpose(1, 0, 2)


def merge_heads(x: Tensor) -> Tensor:
    h, s, dk = x.shape
    return x.transpose(1, 0, 2).reshape(s, h * dk)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None,
                         return_weights: bool = False):
    """Softmax(q k^T / sqrt(d) + mask) v over the last two axes."""
    if k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(f"key slots {k.shape[-2]} != value slots {v.shape[-2]}")
    scores = T.matmul(q, k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))
    scores = scores / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores + mask
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def _present(banks: Sequence) -> list:
    return [b for b in banks if b is not None and b[0].shape[-2] > 0]


def banked_attention(q: Tensor, k: Tensor, v: Tensor, banks: Sequence = (),
                     main_mask: Optional[np.ndarray] = None, mask_banks: bool = False,
                     return_weights: bool = False):
    """Attention whose keys/values are ``cat(bank_1, ..., bank_m, main)``.

    Each bank is a ``(K, V)`` pair laid out like ``k``/``v`` (head-split);
    ``None`` or empty banks contribute no slots. ``main_mask`` (queries x
    main slots) applies to the main slots only; ``mask_banks`` pushes all
    bank scores to ``MASK_VALUE``.
    """
    banks = _present(banks)
    for bk, bv in banks:
        if bk.shape[-2] != bv.shape[-2]:
            raise T.ShapeError(f"bank key slots {bk.shape[-2]} != value slots {bv.shape[-2]}")
    keys = T.concat([bk for bk, _ in banks] + [k], axis=-2)
    values = T.concat([bv for _, bv in banks] + [v], axis=-2)
    n_bank = keys.shape[-2] - k.shape[-2]
    mask = None
    if n_bank and mask_banks or main_mask is not None:
        mask = np.zeros((q.shape[-2], keys.shape[-2]))
        if mask_banks:
            mask[:, :n_bank] = MASK_VALUE
        if main_mask is not None:
            mask[:, n_bank:] += main_mask
    return scaled_dot_attention(q, keys, values, mask, return_weights)


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), MASK_VALUE), k=1)


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ValueError(f"hidden size {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def __call__(self, x: Tensor, memory: Tensor, banks: Sequence = (), causal: bool = False,
                 mask_banks: bool = False, return_weights: bool = False):
        h = self.n_heads
        q = split_heads(self.q(x), h)
        k = split_heads(self.k(memory), h)
        v = split_heads(self.v(memory), h)
        main_mask = causal_mask(x.shape[0]) if causal else None
        res = banked_attention(q, k, v, banks, main_mask, mask_banks, return_weights)
        out, weights = res if return_weights else (res, None)
        out = self.o(merge_heads(out))
        return (out, weights) if return_weights else out


@lru_cache(maxsize=256)
def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Fixed (n, d) position table; cached and read-only."""
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.flags.writeable = False
    return table
