"""Stochastic sequence views: crop, mask and reorder."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

OPS = ("crop", "mask", "reorder")
# absorbs float error in ratio * n, e.g. 0.7 * 10 = 7.000000000000001
_EPS = 1e-9


@dataclass
class AugmentConfig:
    crop_ratio: float = 0.6
    mask_ratio: float = 0.3
    reorder_ratio: float = 0.25
    ops: tuple[str, ...] = OPS
    mask_token: int = 0

    def __post_init__(self):
        if not 0.0 < self.crop_ratio <= 1.0:
            raise ValueError(f"crop_ratio must be in (0, 1], got {self.crop_ratio}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if not 0.0 < self.reorder_ratio <= 1.0:
            raise ValueError(f"reorder_ratio must be in (0, 1], got {self.reorder_ratio}")
        self.ops = tuple(self.ops)
        unknown = set(self.ops) - set(OPS)
        if not self.ops or unknown:
            raise ValueError(f"ops must be a non-empty subset of {OPS}, got {self.ops}")


def crop(seq: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    n = len(seq)
    length = max(1, math.ceil(ratio * n - _EPS))
    start = int(rng.integers(0, n - length + 1))
    return seq[start:start + length].copy()


def mask(seq: np.ndarray, ratio: float, rng: np.random.Generator, token: int = 0) -> np.ndarray:
    out = seq.copy()
    count = math.floor(ratio * len(seq) + _EPS)
    if count:
        out[rng.choice(len(seq), size=count, replace=False)] = token
    return out


def reorder(seq: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    n = len(seq)
    length = max(1, math.ceil(ratio * n - _EPS))
    start = int(rng.integers(0, n - length + 1))
    out = seq.copy()
    out[start:start + length] = rng.permutation(out[start:start + length])
    return out


def augment(seq: Sequence[int], cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply one operator drawn uniformly from ``cfg.ops``."""
    seq = np.asarray(seq, dtype=np.int64)
    if len(seq) == 0:
        return seq.copy()
    op = cfg.ops[int(rng.integers(len(cfg.ops)))]
    if op == "crop":
        return crop(seq, cfg.crop_ratio, rng)
    if op == "mask":
        return mask(seq, cfg.mask_ratio, rng, cfg.mask_token)
    return reorder(seq, cfg.reorder_ratio, rng)
