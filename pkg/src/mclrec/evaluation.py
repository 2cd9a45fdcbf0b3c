"""Full-catalog leave-one-out ranking evaluation (HR@k, NDCG@k)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import InteractionDataset, truncate_pad
from .encoder import Encoder
from .tensor import no_grad

KS = (5, 10)
SPLITS = ("valid", "test")


class ReportError(AssertionError):
    pass


def metric(rank: int, k: int) -> tuple[int, float]:
    """(hit, ndcg) for a 1-based rank."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank > k:
        return 0, 0.0
    return 1, 1.0 / math.log2(rank + 1)


@dataclass
class EvalReport:
    hr5: float
    hr10: float
    ndcg5: float
    ndcg10: float
    user_count: int
    split: str

    def check(self) -> "EvalReport":
        eps = 1e-12
        ok = (self.hr5 <= self.hr10 + eps and self.ndcg5 <= self.ndcg10 + eps
              and self.ndcg5 <= self.hr5 + eps and self.ndcg10 <= self.hr10 + eps
              and all(0.0 <= v <= 1.0 for v in self.metrics().values()))
        if not ok:
            raise ReportError(f"report invariants violated: {self}")
        return self

    def metrics(self) -> dict[str, float]:
        return {"hr5": self.hr5, "hr10": self.hr10, "ndcg5": self.ndcg5, "ndcg10": self.ndcg10}

    def to_records(self) -> str:
        lines = [f"split={self.split}", f"users={self.user_count}"]
        lines += [f"{k}={v!r}" for k, v in self.metrics().items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_records(cls, text: str) -> "EvalReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(float(kv["hr5"]), float(kv["hr10"]), float(kv["ndcg5"]),
                   float(kv["ndcg10"]), int(kv["users"]), kv["split"])

    def table(self) -> str:
        return (f"split {self.split}  users {self.user_count}\n"
                f"  HR@5    {self.hr5:.4f}   HR@10   {self.hr10:.4f}\n"
                f"  NDCG@5  {self.ndcg5:.4f}   NDCG@10 {self.ndcg10:.4f}")

    def as_dict(self) -> dict:
        return asdict(self)


def target_rank(scores: np.ndarray, target: int, exclude: Sequence[int] = ()) -> int:
    """1-based rank of ``target`` (item id) among non-excluded items.

    ``scores[i]`` is the score of item ``i + 1``; ties rank the lower id first.
    """
    s = np.array(scores, dtype=np.float64)
    excl = [i for i in set(int(v) for v in exclude) if i != target]
    if excl:
        s[np.asarray(excl) - 1] = -np.inf
    t = s[target - 1]
    ids = np.arange(1, len(s) + 1)
    return int(1 + np.sum(s > t) + np.sum((s == t) & (ids < target)))


def ranking(scores: np.ndarray, exclude: Sequence[int] = ()) -> list[int]:
    """Item ids sorted by descending score, ties by ascending id, excluded ids dropped."""
    excl = set(int(v) for v in exclude)
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    return [int(i) + 1 for i in order if int(i) + 1 not in excl]


def split_examples(ds: InteractionDataset, split: str,
                   users: Sequence[int] | None = None) -> tuple[list[np.ndarray], np.ndarray]:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    users = range(ds.user_count) if users is None else users
    get = ds.valid_example if split == "valid" else ds.test_example
    prefixes, targets = [], []
    for u in users:
        p, t = get(int(u))
        prefixes.append(p)
        targets.append(t)
    return prefixes, np.array(targets, dtype=np.int64)


def score_prefixes(model: Encoder, prefixes: Sequence[np.ndarray]) -> np.ndarray:
    """Scores of every catalog item after each prefix, shape (len(prefixes), item_count)."""
    t = model.cfg.max_len
    ids = np.array([truncate_pad(p, t) for p in prefixes], dtype=np.int64)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            h = model(ids).data[:, -1, :]
    finally:
        model.train(was_training)
    return h @ model.catalog_embeddings().T


def rank_full(model: Encoder, prefix: Sequence[int], exclude_history: bool = True) -> list[int]:
    scores = score_prefixes(model, [np.asarray(prefix)])[0]
    return ranking(scores, prefix if exclude_history else ())


def evaluate(model: Encoder, ds: InteractionDataset, split: str = "valid",
             users: Sequence[int] | None = None, exclude_history: bool = True,
             batch_size: int = 512) -> EvalReport:
    prefixes, targets = split_examples(ds, split, users)
    n = len(targets)
    hits = {k: 0.0 for k in KS}
    gains = {k: 0.0 for k in KS}
    for start in range(0, n, batch_size):
        chunk = prefixes[start:start + batch_size]
        scores = score_prefixes(model, chunk)
        for row, prefix in enumerate(chunk):
            r = target_rank(scores[row], int(targets[start + row]),
                            prefix if exclude_history else ())
            for k in KS:
                h, g = metric(r, k)
                hits[k] += h
                gains[k] += g
    denom = max(n, 1)
    return EvalReport(hits[5] / denom, hits[10] / denom, gains[5] / denom, gains[10] / denom,
                      n, split).check()
