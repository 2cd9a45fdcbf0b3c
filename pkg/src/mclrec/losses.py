"""Training objectives: next-item BCE, sequence InfoNCE, intent InfoNCE and the
multi-intent aware contrastive loss with decayed similarity."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import Tensor

COS_GAP_MIN = 1e-8


@dataclass
class LossWeights:
    beta: float = 0.1    # sequence-level CL
    lam: float = 0.1     # intent-level CL
    gamma: float = 0.1   # multi-intent aware CL

    def __post_init__(self):
        for name in ("beta", "lam", "gamma"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


def loss_rec(per_step: Tensor, item_embedding: Tensor, targets: np.ndarray,
             negatives: np.ndarray, mask: np.ndarray) -> Tensor:
    """-sum[log s(h.e+) + log(1 - s(h.e-))] over real positions, divided by N."""
    n = per_step.shape[0]
    weight = np.asarray(mask, dtype=np.float64)
    pos = tc.dot(per_step, tc.embedding(item_embedding, targets))
    neg = tc.dot(per_step, tc.embedding(item_embedding, negatives))
    per_pos = tc.log_sigmoid(pos) + tc.log_sigmoid(-neg)
    return -(per_pos * weight).sum() * (1.0 / n)


def _infonce_rows(logits: Tensor, partner: np.ndarray) -> Tensor:
    logp = tc.log_softmax(logits)
    return -logp[np.arange(len(partner)), partner].sum()


def loss_cl(xa: Tensor, xb: Tensor, temperature: float = 1.0) -> Tensor:
    """Symmetric InfoNCE between paired views, 2(N-1) in-batch negatives per anchor."""
    n = xa.shape[0]
    if n < 2:
        raise ValueError("loss_cl needs at least 2 sequences (no negatives with N=1)")
    z = tc.concat([xa, xb], axis=0)
    logits = (z @ z.transpose()) * (1.0 / temperature)
    self_mask = np.where(np.eye(2 * n, dtype=bool), -np.inf, 0.0)
    partner = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    return _infonce_rows(logits + self_mask, partner) * (1.0 / n)


def loss_icl(views: list[Tensor], centroids: np.ndarray, assignments: np.ndarray,
             temperature: float = 1.0) -> Tensor:
    """InfoNCE of each view against its assigned centroid, other centroids as negatives."""
    c = Tensor(np.asarray(centroids)).transpose()
    assignments = np.asarray(assignments)
    total = None
    for x in views:
        term = _infonce_rows((x @ c) * (1.0 / temperature), assignments)
        total = term if total is None else total + term
    return total * (1.0 / (len(views) * views[0].shape[0]))


def decay_value(cos: np.ndarray | float) -> np.ndarray | float:
    """log2(2 / (1 - cos)) with the gap clamped at ``COS_GAP_MIN``."""
    return np.log2(2.0 / np.maximum(1.0 - np.asarray(cos, dtype=np.float64), COS_GAP_MIN))


def _cos_matrix(v: np.ndarray) -> np.ndarray:
    norms = np.sqrt((v * v).sum(1))
    norms = np.where(norms > 0, norms, 1.0)
    u = v / norms[:, None]
    return np.clip(u @ u.T, -1.0, 1.0)


@dataclass
class MergedBatchSet:
    """The 2N vectors {x_u} + {c_u}: rows 0..N-1 user reps, N..2N-1 intent-aware reps."""

    elements: np.ndarray
    is_intent: np.ndarray
    users: np.ndarray

    @classmethod
    def build(cls, xbar: np.ndarray, cbar: np.ndarray) -> "MergedBatchSet":
        n = len(xbar)
        return cls(np.vstack([xbar, cbar]),
                   np.repeat([False, True], n),
                   np.tile(np.arange(n), 2))

    @property
    def partner(self) -> np.ndarray:
        n = len(self.elements) // 2
        return np.concatenate([np.arange(n, 2 * n), np.arange(n)])


def decay_matrix(xbar: np.ndarray, cbar: np.ndarray, smoothed: np.ndarray) -> np.ndarray:
    """Pairwise decay over the merged set (2N x 2N).

    User/user pairs compare smoothed intent weights, every other pair compares
    intent-aware representations. Identical vectors get +inf (this covers the
    diagonal); an anchor's own partner always uses the cosine rule.
    """
    merged = MergedBatchSet.build(np.asarray(xbar), np.asarray(cbar))
    n = len(xbar)
    cos_w = _cos_matrix(np.asarray(smoothed))
    cos_c = _cos_matrix(np.asarray(cbar))
    u = merged.users
    both_users = ~merged.is_intent[:, None] & ~merged.is_intent[None, :]
    cos = np.where(both_users, cos_w[u][:, u], cos_c[u][:, u])
    d = decay_value(cos)
    e = merged.elements
    same = (e[:, None, :] == e[None, :, :]).all(-1)
    same[np.arange(2 * n), merged.partner] = False
    same[np.arange(2 * n), np.arange(2 * n)] = True
    d[same] = np.inf
    return d


def loss_mcl(xbar: Tensor, cbar: np.ndarray, decay: np.ndarray,
             temperature: float = 1.0) -> Tensor:
    """Multi-intent aware InfoNCE over the merged set with sim = b.b' - D.

    ``cbar`` and ``decay`` are constants; gradients flow through ``xbar`` only.
    """
    n = xbar.shape[0]
    if n < 2:
        raise ValueError("loss_mcl needs at least 2 users (no negatives with N=1)")
    b = tc.concat([xbar, Tensor(np.asarray(cbar))], axis=0)
    sims = (b @ b.transpose()) * (1.0 / temperature) - decay
    partner = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    return _infonce_rows(sims, partner) * (1.0 / n)


def loss_joint(rec: Tensor, cl: Tensor | None, icl: Tensor | None, mcl: Tensor | None,
               w: LossWeights) -> Tensor:
    total = rec
    for value, weight in ((cl, w.beta), (icl, w.lam), (mcl, w.gamma)):
        if value is not None and weight != 0:
            total = total + value * weight
    return total
