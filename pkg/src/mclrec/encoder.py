"""Causal self-attention sequence encoder (SASRec family)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .nn import Module, parameter
from .tensor import Tensor

# Additive attention masks. Future keys get the larger penalty so that rows
# whose past is entirely padding still never see the future.
PAD_PENALTY = -1e4  # exp() underflows to 0 in float64 yet logits keep ~1e-12 precision
FUTURE_PENALTY = -1e12


@dataclass
class EncoderConfig:
    item_count: int
    max_len: int = 50
    dim: int = 64
    blocks: int = 2
    heads: int = 2
    dropout: float = 0.2
    ffn_dim: int = 0           # 0 -> same as dim
    mask_padding: bool = True  # exclude padding keys inside attention
    pooling: str = "mean"      # "mean" (1/T over all steps) or "masked"
    dedicated_mask_token: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.pooling not in ("mean", "masked"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def vocab_size(self) -> int:
        return self.item_count + 1 + int(self.dedicated_mask_token)

    @property
    def mask_token(self) -> int:
        return self.item_count + 1 if self.dedicated_mask_token else 0


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float):
        self.weight = parameter(rng.normal(0.0, std, size=(d_in, d_out)))
        self.bias = parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Block(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d, std = cfg.dim, cfg.init_std
        self.heads = cfg.heads
        self.dropout = cfg.dropout
        self.query = Linear(d, d, rng, std)
        self.key = Linear(d, d, rng, std)
        self.value = Linear(d, d, rng, std)
        self.out = Linear(d, d, rng, std)
        self.attn_norm = LayerNorm(d)
        self.ffn_in = Linear(d, cfg.ffn_dim or d, rng, std)
        self.ffn_out = Linear(cfg.ffn_dim or d, d, rng, std)
        self.ffn_norm = LayerNorm(d)

    def _split(self, x: Tensor) -> Tensor:
        n, t, d = x.shape
        return x.reshape(n, t, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, attn_mask: np.ndarray, rng) -> Tensor:
        n, t, d = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // self.heads))
        probs = tc.softmax(scores + attn_mask)
        probs = tc.dropout(probs, self.dropout, self.training, rng)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
        x = self.attn_norm(x + tc.dropout(self.out(ctx), self.dropout, self.training, rng))
        hidden = self.ffn_out(tc.gelu(self.ffn_in(x)))
        return self.ffn_norm(x + tc.dropout(hidden, self.dropout, self.training, rng))


class Encoder(Module):
    """Maps (N, T) item ids to (N, T, d) per-step representations.

    Item id 0 is padding: its embedding is pinned to zero and, with
    ``mask_padding``, it is never attended to.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        std = cfg.init_std
        self.item_embedding = parameter(rng.normal(0.0, std, size=(cfg.vocab_size, cfg.dim)))
        self.item_embedding.data[0] = 0.0
        self.position_embedding = parameter(rng.normal(0.0, std, size=(cfg.max_len, cfg.dim)))
        self.input_norm = LayerNorm(cfg.dim)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.blocks)]

    def attention_mask(self, ids: np.ndarray) -> np.ndarray:
        t = ids.shape[1]
        future = np.triu(np.ones((t, t), dtype=bool), k=1)
        mask = np.where(future, FUTURE_PENALTY, 0.0)[None, None]
        if self.cfg.mask_padding:
            pad = (ids == 0)[:, None, None, :]
            mask = mask + np.where(pad & ~future[None, None], PAD_PENALTY, 0.0)
        return mask

    def __call__(self, ids: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] != self.cfg.max_len:
            raise tc.ShapeError(f"encode: expected (N, {self.cfg.max_len}) ids, got {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise IndexError(f"encode: item id out of range [0, {self.cfg.vocab_size})")
        real = (ids != 0)[..., None].astype(np.float64)
        x = tc.embedding(self.item_embedding, ids) * real + self.position_embedding
        x = tc.dropout(self.input_norm(x), self.cfg.dropout, self.training, rng)
        mask = self.attention_mask(ids)
        for block in self.blocks:
            x = block(x, mask, rng)
        return x

    encode = __call__

    def score_items(self, h: Tensor, items: np.ndarray) -> Tensor:
        """h_t . e(v) for item ids ``items`` with shape h.shape[:-1]."""
        return tc.dot(h, tc.embedding(self.item_embedding, items))

    def catalog_embeddings(self) -> np.ndarray:
        """Embeddings of real items 1..item_count (row i-1 is item i)."""
        return self.item_embedding.data[1:self.cfg.item_count + 1]

    def pool(self, per_step: Tensor, ids: np.ndarray | None = None) -> Tensor:
        if self.cfg.pooling == "masked" and ids is not None:
            return pool_masked(per_step, ids)
        return pool_mean(per_step)


def pool_mean(per_step: Tensor) -> Tensor:
    """Mean over the T axis, padded steps included."""
    return tc.mean(per_step, axis=1)


def pool_masked(per_step: Tensor, ids: np.ndarray) -> Tensor:
    real = (np.asarray(ids) != 0).astype(np.float64)
    counts = np.maximum(real.sum(axis=1, keepdims=True), 1.0)
    return tc.sum_(per_step * real[..., None], axis=1) / counts


def concat_views(per_step: Tensor) -> Tensor:
    """Flatten (N, T, d) to (N, T*d), step-major."""
    n, t, d = per_step.shape
    return per_step.reshape(n, t * d)
