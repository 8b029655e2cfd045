"""Self-attention over spatial positions and context-vector attention pooling.

Both operate on a single map (``[C, M]`` / ``[F, R]``) or a batch of maps with a
leading axis, e.g. one map per frame.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError


@dataclass
class SelfAttentionParams:
    wf: T.Tensor  # [C', C]
    wg: T.Tensor  # [C', C]
    wh: T.Tensor  # [C, C]
    gamma: T.Tensor  # scalar, starts at 0

    @classmethod
    def init(cls, channels, rng, prefix="sa"):
        reduced = max(1, channels // 8)
        std = 1.0 / np.sqrt(channels)
        return cls(
            wf=T.parameter(rng.normal(0.0, std, (reduced, channels)), f"{prefix}.wf"),
            wg=T.parameter(rng.normal(0.0, std, (reduced, channels)), f"{prefix}.wg"),
            wh=T.parameter(rng.normal(0.0, std, (channels, channels)), f"{prefix}.wh"),
            gamma=T.parameter(0.0, f"{prefix}.gamma"),
        )

    def tensors(self):
        return [self.wf, self.wg, self.wh, self.gamma]


@dataclass
class ContextAttentionParams:
    w: T.Tensor  # [A, F]
    b: T.Tensor  # [A]
    u: T.Tensor  # [A] context vector

    @classmethod
    def init(cls, features, rng, attention_dim=None, prefix="ctx"):
        a = attention_dim or features
        return cls(
            w=T.parameter(rng.normal(0.0, 1.0 / np.sqrt(features), (a, features)), f"{prefix}.w"),
            b=T.parameter(np.zeros(a), f"{prefix}.b"),
            u=T.parameter(rng.normal(0.0, 1.0 / np.sqrt(a), a), f"{prefix}.u"),
        )

    def tensors(self):
        return [self.w, self.b, self.u]


def self_attention(x, params):
    """``o = x + gamma * h(x) @ softmax(f(x)^T g(x))`` with the softmax taken over source positions.

    ``x`` is ``[C, M]`` or ``[B, C, M]``. Column ``j`` of the attention matrix holds the
    weights each source position ``i`` contributes to target ``j``; it sums to one.
    """
    f = T.one_by_one_conv(x, params.wf)
    g = T.one_by_one_conv(x, params.wg)
    h = T.one_by_one_conv(x, params.wh)
    ft = T.transpose(f, (1, 0) if f.ndim == 2 else (0, 2, 1))
    scores = T.matmul(ft, g)  # [.., M_i, M_j]
    attn = T.softmax(scores, axis=-2)
    return T.add(x, T.mul(params.gamma, T.matmul(h, attn)))


def attention_map(x, params):
    """The ``[M, M]`` (or batched) source-by-target weights used inside ``self_attention``."""
    f = T.one_by_one_conv(x, params.wf)
    g = T.one_by_one_conv(x, params.wg)
    ft = T.transpose(f, (1, 0) if f.ndim == 2 else (0, 2, 1))
    return T.softmax(T.matmul(ft, g), axis=-2).data


def _pool(items, weights):
    # weights [.., 1, R] -> summary [.., F]
    wt = T.transpose(weights, (1, 0) if weights.ndim == 2 else (0, 2, 1))
    s = T.matmul(items, wt)
    return T.reshape(s, s.shape[:-1])


def context_attention(items, params):
    """Score each column of ``items[F, R]`` against the context vector and pool.

    Returns ``(summary[F], weights[R])`` (batched: ``[B, F]``, ``[B, R]``).
    """
    if items.shape[-2] != params.w.shape[1]:
        raise DimensionError(f"items have {items.shape[-2]} features, attention expects {params.w.shape[1]}")
    hidden = T.tanh(T.add(T.matmul(params.w, items), T.reshape(params.b, (-1, 1))))
    u_row = T.reshape(params.u, (1, -1))
    weights = T.softmax(T.matmul(u_row, hidden), axis=-1)  # [.., 1, R]
    summary = _pool(items, weights)
    return summary, T.reshape(weights, weights.shape[:-2] + weights.shape[-1:])


def uniform_pool(items):
    """Equal-weight pooling; bitwise what ``context_attention`` gives when ``u == 0``."""
    r = items.shape[-1]
    w = np.full(items.shape[:-2] + (1, r), 1.0 / r)
    return _pool(items, T.Tensor(w))
