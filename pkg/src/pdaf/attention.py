"""Debiased multi-head self-attention blocks and attentive statistics pooling.

Inputs are batched as ``[B, T, d_model]`` with a boolean key mask ``[B, T]``
(False for silence, padding and ablated frames) and a per-key debias term
``[B, T]`` that is added to every query's attention logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 128
    n_heads: int = 8
    d_k: int = 32
    d_ff: int = 1024
    n_blocks: int = 2

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_k", "d_ff", "n_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def _as_bias4(bias) -> Tensor | np.ndarray:
    # [B, T] -> [B, 1, 1, T]: one value per key, shared by heads and queries
    if isinstance(bias, Tensor):
        B, T = bias.shape
        return gc.reshape(bias, (B, 1, 1, T))
    bias = np.asarray(bias, dtype=np.float64)
    return bias[:, None, None, :]


class DebiasedAttentionBlock:
    """Post-norm transformer block whose attention logits carry a per-key bias."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, prefix: str = "block"):
        d, h, dk, dff = cfg.d_model, cfg.n_heads, cfg.d_k, cfg.d_ff
        self.cfg = cfg
        self.prefix = prefix
        self.params: dict[str, Tensor] = {
            "w_q": uniform_init(rng, d, (d, h * dk)),
            "w_k": uniform_init(rng, d, (d, h * dk)),
            "w_v": uniform_init(rng, d, (d, h * dk)),
            "w_o": uniform_init(rng, h * dk, (h * dk, d)),
            "b_o": zeros(d),
            "ln1_g": ones(d),
            "ln1_b": zeros(d),
            "w_ff1": uniform_init(rng, d, (d, dff)),
            "b_ff1": zeros(dff),
            "w_ff2": uniform_init(rng, dff, (dff, d)),
            "b_ff2": zeros(d),
            "ln2_g": ones(d),
            "ln2_b": zeros(d),
        }
        self.last_weights: np.ndarray | None = None

    def named_params(self):
        return {f"{self.prefix}.{k}": v for k, v in self.params.items()}

    def _heads(self, x: Tensor, w: Tensor) -> Tensor:
        B, T, _ = x.shape
        h, dk = self.cfg.n_heads, self.cfg.d_k
        return gc.transpose(gc.reshape(gc.matmul(x, w), (B, T, h, dk)), (0, 2, 1, 3))

    def attention_weights(self, x: Tensor, bias, mask: np.ndarray) -> Tensor:
        p = self.params
        q = self._heads(x, p["w_q"])
        k = self._heads(x, p["w_k"])
        scores = gc.scale(gc.matmul(q, gc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.cfg.d_k))
        return gc.softmax_lastdim(scores, _as_bias4(bias), mask=np.asarray(mask, dtype=bool)[:, None, None, :])

    def __call__(self, x: Tensor, bias, mask: np.ndarray, keep_weights: bool = False) -> Tensor:
        p = self.params
        B, T, d = x.shape
        h, dk = self.cfg.n_heads, self.cfg.d_k
        weights = self.attention_weights(x, bias, mask)
        if keep_weights:
            self.last_weights = weights.data
        v = self._heads(x, p["w_v"])
        ctx = gc.reshape(gc.transpose(gc.matmul(weights, v), (0, 2, 1, 3)), (B, T, h * dk))
        attn_out = gc.linear(ctx, p["w_o"], p["b_o"])
        x = gc.layer_norm(gc.add(x, attn_out), p["ln1_g"], p["ln1_b"])
        ff = gc.relu(gc.linear(x, p["w_ff1"], p["b_ff1"]))
        ff = gc.linear(ff, p["w_ff2"], p["b_ff2"])
        return gc.layer_norm(gc.add(x, ff), p["ln2_g"], p["ln2_b"])


def debiased_attention(block: DebiasedAttentionBlock, x, debias, key_mask) -> Tensor:
    """Single-utterance convenience wrapper: ``x`` is ``[T, d]``."""
    x = gc.as_tensor(x)
    T = x.shape[0]
    if isinstance(debias, Tensor):
        b = gc.reshape(debias, (1, T))
    else:
        b = np.asarray(debias, dtype=np.float64)[None, :]
    out = block(gc.reshape(x, (1, T, x.shape[1])), b, np.asarray(key_mask, dtype=bool)[None, :])
    return gc.reshape(out, (T, x.shape[1]))


class AttentiveStatsPool:
    """Softmax-weighted mean and standard deviation over attendable frames.

    A learned vector scores each frame; masked frames get exactly zero weight.
    """

    def __init__(self, d_model: int, rng: np.random.Generator, prefix: str = "pool", eps: float = 1e-9):
        self.prefix = prefix
        self.eps = eps
        self.params = {"score": uniform_init(rng, d_model, (d_model, 1))}

    def named_params(self):
        return {f"{self.prefix}.{k}": v for k, v in self.params.items()}

    def __call__(self, h: Tensor, mask: np.ndarray) -> Tensor:
        B, T, d = h.shape
        logits = gc.reshape(gc.matmul(h, self.params["score"]), (B, 1, T))
        alpha = gc.softmax_lastdim(logits, mask=np.asarray(mask, dtype=bool)[:, None, :])
        mu = gc.matmul(alpha, h)  # [B, 1, d]
        second = gc.matmul(alpha, gc.mul(h, h))
        var = gc.add(gc.sub(second, gc.mul(mu, mu)), self.eps)
        var = _clamp_positive(var, self.eps)
        sigma = gc.sqrt(var)
        return gc.reshape(gc.concat([mu, sigma], axis=-1), (B, 2 * d))


def _clamp_positive(var: Tensor, eps: float) -> Tensor:
    # cancellation in E[h^2] - mu^2 can dip below zero for near-constant frames
    if (var.data >= eps * 0.5).all():
        return var
    floor = np.maximum(var.data, eps * 0.5) - var.data
    return gc.add(var, floor)


def attentive_stats_pool(h, key_mask, score, eps: float = 1e-9) -> Tensor:
    """Functional form for one utterance ``h`` of shape ``[T, d]``; returns ``[2d]``."""
    h = gc.as_tensor(h)
    T, d = h.shape
    pool = AttentiveStatsPool(d, np.random.default_rng(0), eps=eps)
    pool.params["score"] = gc.reshape(gc.as_tensor(score), (d, 1))
    out = pool(gc.reshape(h, (1, T, d)), np.asarray(key_mask, dtype=bool)[None, :])
    return gc.reshape(out, (2 * d,))
