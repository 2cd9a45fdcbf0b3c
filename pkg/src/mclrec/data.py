"""Interaction-log ingestion, k-core filtering, leave-one-out split and batching."""
from __future__ import annotations

import gzip
import hashlib
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

DATA_VERSION = "mclrec-data/1"
FORMATS = ("raw", "sequence", "amazon-json")


class DatasetError(ValueError):
    pass


@dataclass
class InteractionDataset:
    """Per-user chronological item sequences; item ids run 1..item_count, 0 is padding.

    The last item of every sequence is the test target, the one before it the
    validation target, and the rest is training data.
    """

    sequences: list[np.ndarray]
    item_count: int
    user_keys: list[str] = field(default_factory=list)
    item_keys: list[str] = field(default_factory=list)
    _histories: list[frozenset] | None = field(default=None, repr=False, compare=False)

    @property
    def user_count(self) -> int:
        return len(self.sequences)

    @property
    def action_count(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    def train_items(self, u: int) -> np.ndarray:
        return self.sequences[u][:-2]

    def valid_example(self, u: int) -> tuple[np.ndarray, int]:
        s = self.sequences[u]
        return s[:-2], int(s[-2])

    def test_example(self, u: int) -> tuple[np.ndarray, int]:
        s = self.sequences[u]
        return s[:-1], int(s[-1])

    def history(self, u: int) -> frozenset:
        if self._histories is None:
            self._histories = [frozenset(s.tolist()) for s in self.sequences]
        return self._histories[u]

    def stats(self) -> dict:
        users, items, actions = self.user_count, self.item_count, self.action_count
        return {
            "users": users,
            "items": items,
            "actions": actions,
            "avg_length": actions / users if users else 0.0,
            "sparsity": 1.0 - actions / (users * items) if users and items else 1.0,
        }

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.item_count).encode())
        for s in self.sequences:
            h.update(np.asarray(s, dtype=np.int64).tobytes())
            h.update(b"|")
        return h.hexdigest()

    def subsample(self, n_users: int, seed: int) -> "InteractionDataset":
        """Random user subset; items re-indexed densely, no further filtering."""
        if n_users >= self.user_count:
            return self
        rng = np.random.default_rng(seed)
        chosen = np.sort(rng.choice(self.user_count, size=n_users, replace=False))
        remap: dict[int, int] = {}
        seqs = []
        for u in chosen:
            seqs.append(np.array([remap.setdefault(int(i), len(remap) + 1)
                                  for i in self.sequences[u]], dtype=np.int64))
        item_keys = [""] * len(remap)
        for old, new in remap.items():
            item_keys[new - 1] = self.item_keys[old - 1] if self.item_keys else str(old)
        user_keys = [self.user_keys[u] for u in chosen] if self.user_keys else []
        return InteractionDataset(seqs, len(remap), user_keys, item_keys)


def format_stats(stats: dict) -> str:
    return (f"# Users       {stats['users']:,}\n"
            f"# Items       {stats['items']:,}\n"
            f"# Actions     {stats['actions']:,}\n"
            f"# Avg.length  {stats['avg_length']:.1f}\n"
            f"Sparsity      {100 * stats['sparsity']:.2f}%")


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _open_text(path: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


def _read_records(path: str, fmt: str) -> list[tuple[str, str, float]]:
    records: list[tuple[str, str, float]] = []
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if fmt == "raw":
                parts = line.split("\t") if "\t" in line else line.split()
                if len(parts) != 3:
                    raise DatasetError(f"{path}:{lineno}: expected user, item, timestamp")
                try:
                    ts = float(parts[2])
                except ValueError:
                    raise DatasetError(f"{path}:{lineno}: bad timestamp {parts[2]!r}") from None
                records.append((parts[0], parts[1], ts))
            elif fmt == "sequence":
                parts = line.split()
                if len(parts) < 2:
                    raise DatasetError(f"{path}:{lineno}: expected user followed by items")
                records.extend((parts[0], item, float(t)) for t, item in enumerate(parts[1:]))
            elif fmt == "amazon-json":
                try:
                    obj = json.loads(line)
                    records.append((str(obj["reviewerID"]), str(obj["asin"]),
                                    float(obj["unixReviewTime"])))
                except (ValueError, KeyError, TypeError):
                    raise DatasetError(f"{path}:{lineno}: unparsable review record") from None
            else:
                raise DatasetError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    return records


def kcore_filter(records: Sequence[tuple], k: int = 5, fixpoint: bool = True) -> list[tuple]:
    """Drop users and items with fewer than ``k`` interactions.

    With ``fixpoint`` the filter is repeated until nothing changes; otherwise a
    single simultaneous pass over the original counts is made.
    """
    records = list(records)
    while True:
        users = Counter(r[0] for r in records)
        items = Counter(r[1] for r in records)
        kept = [r for r in records if users[r[0]] >= k and items[r[1]] >= k]
        if not fixpoint or len(kept) == len(records):
            return kept
        records = kept


def build_dataset(records: Sequence[tuple[str, str, float]], k: int = 5,
                  fixpoint: bool = True) -> InteractionDataset:
    if not records:
        raise DatasetError("no interactions")
    records = kcore_filter(records, k, fixpoint)
    by_user: dict[str, list[tuple[float, int, str]]] = {}
    for pos, (user, item, ts) in enumerate(records):
        by_user.setdefault(user, []).append((ts, pos, item))

    user_keys: list[str] = []
    item_ids: dict[str, int] = {}
    sequences: list[np.ndarray] = []
    short = 0
    for user, events in by_user.items():
        if len(events) < 3:
            short += 1
            continue
        events.sort()
        seq = [item_ids.setdefault(item, len(item_ids) + 1) for _, _, item in events]
        sequences.append(np.array(seq, dtype=np.int64))
        user_keys.append(user)
    if short:
        log.warning("excluded %d users with fewer than 3 interactions", short)
    if not sequences:
        raise DatasetError("no interactions left after filtering")
    item_keys = list(item_ids)
    return InteractionDataset(sequences, len(item_keys), user_keys, item_keys)


def load(path: str | os.PathLike, fmt: str = "raw", k: int = 5,
         fixpoint: bool = True) -> InteractionDataset:
    """Parse a log file, k-core filter it, order per user by time and re-index from 1."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"input file not found: {path}")
    return build_dataset(_read_records(path, fmt), k, fixpoint)


def save_dataset(ds: InteractionDataset, path: str | os.PathLike) -> None:
    payload = {
        "format_version": DATA_VERSION,
        "item_count": ds.item_count,
        "user_keys": ds.user_keys,
        "item_keys": ds.item_keys,
        "sequences": [s.tolist() for s in ds.sequences],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, separators=(",", ":"))


def load_dataset(path: str | os.PathLike) -> InteractionDataset:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != DATA_VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {payload.get('format_version')!r}")
    seqs = [np.array(s, dtype=np.int64) for s in payload["sequences"]]
    return InteractionDataset(seqs, int(payload["item_count"]),
                              payload.get("user_keys", []), payload.get("item_keys", []))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def truncate_pad(seq: Sequence[int], max_len: int) -> list[int]:
    """Keep the latest ``max_len`` items, left-padding with 0."""
    seq = list(seq)[-max_len:] if max_len > 0 else []
    return [0] * (max_len - len(seq)) + seq


@dataclass
class SequenceBatch:
    users: np.ndarray
    inputs: np.ndarray       # (N, T) item ids, left-padded with 0
    targets: np.ndarray      # (N, T) next item for each input position
    negatives: np.ndarray    # (N, T) sampled non-interacted items, 0 on padding
    padding_mask: np.ndarray  # (N, T) True on real positions
    raw_inputs: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.users)


def sample_negatives(ds: InteractionDataset, u: int, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    seen = ds.history(u)
    if len(seen) >= ds.item_count:
        raise DatasetError(f"user {u} has interacted with the whole catalog; "
                           f"cannot sample a negative")
    out = rng.integers(1, ds.item_count + 1, size=n)
    bad = np.fromiter((v in seen for v in out), dtype=bool, count=n)
    while bad.any():
        out[bad] = rng.integers(1, ds.item_count + 1, size=int(bad.sum()))
        bad = np.fromiter((v in seen for v in out), dtype=bool, count=n)
    return out


def make_batch(ds: InteractionDataset, users: Sequence[int], rng: np.random.Generator,
               max_len: int) -> SequenceBatch:
    users = np.asarray(users, dtype=np.int64)
    n = len(users)
    inputs = np.zeros((n, max_len), dtype=np.int64)
    targets = np.zeros((n, max_len), dtype=np.int64)
    negatives = np.zeros((n, max_len), dtype=np.int64)
    raw = []
    for row, u in enumerate(users):
        train = ds.train_items(int(u))
        raw.append(train[:-1])
        inputs[row] = truncate_pad(train[:-1], max_len)
        targets[row] = truncate_pad(train[1:], max_len)
        real = targets[row] != 0
        if real.any():
            negatives[row, real] = sample_negatives(ds, int(u), int(real.sum()), rng)
    return SequenceBatch(users, inputs, targets, negatives, targets != 0, raw)


def next_batch(ds: InteractionDataset, batch_size: int, rng: np.random.Generator,
               max_len: int) -> SequenceBatch:
    """A batch of ``batch_size`` distinct users drawn with ``rng``."""
    if batch_size > ds.user_count:
        raise DatasetError(f"batch size {batch_size} exceeds user count {ds.user_count}")
    users = rng.choice(ds.user_count, size=batch_size, replace=False)
    return make_batch(ds, users, rng, max_len)


def iter_batches(ds: InteractionDataset, batch_size: int, rng: np.random.Generator,
                 max_len: int) -> Iterator[SequenceBatch]:
    """One epoch over all users in a freshly shuffled order."""
    order = rng.permutation(ds.user_count)
    for start in range(0, len(order), batch_size):
        yield make_batch(ds, order[start:start + batch_size], rng, max_len)
