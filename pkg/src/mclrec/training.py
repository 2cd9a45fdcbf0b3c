"""EM-style training: cluster user representations, then optimise the joint loss."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import intent as it
from . import losses
from .augment import augment
from .config import TrainConfig, resolve
from .data import InteractionDataset, SequenceBatch, iter_batches, truncate_pad
from .encoder import Encoder, EncoderConfig, concat_views
from .evaluation import evaluate
from .nn import CheckpointError, load_checkpoint, save_checkpoint
from .optim import Adam
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

HISTORY_FILE = "history.jsonl"
BEST_FILE = "best.npz"
LAST_FILE = "last.npz"
_STREAMS = ("init", "batch", "augment", "dropout")


@dataclass
class TrainResult:
    encoder: Encoder
    intents: it.IntentModel | None
    history: list[dict[str, Any]] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def _streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(_STREAMS, children)}


def build_encoder(cfg: TrainConfig, item_count: int, rng: np.random.Generator) -> Encoder:
    return Encoder(EncoderConfig(item_count=item_count, **cfg.encoder_kwargs()), rng)


def user_representations(ds: InteractionDataset, encoder: Encoder,
                         batch_size: int = 512) -> np.ndarray:
    """Pooled, un-augmented, dropout-free representation of each user's training input."""
    t = encoder.cfg.max_len
    was_training = encoder.training
    encoder.eval()
    out = []
    try:
        with no_grad():
            for start in range(0, ds.user_count, batch_size):
                users = range(start, min(start + batch_size, ds.user_count))
                ids = np.array([truncate_pad(ds.train_items(u)[:-1], t) for u in users],
                               dtype=np.int64)
                out.append(encoder.pool(encoder(ids), ids).data)
    finally:
        encoder.train(was_training)
    return np.concatenate(out, axis=0) if out else np.zeros((0, encoder.cfg.dim))


def epoch_estep(ds: InteractionDataset, encoder: Encoder, cfg: TrainConfig) -> it.IntentModel:
    reps = user_representations(ds, encoder)
    return it.fit_kmeans(reps, cfg["intent.K"], cfg["intent.seed"],
                         max_iter=cfg["intent.kmeans_iters"], ratio=cfg["intent.ratio"])


def _pad_views(views: list[np.ndarray], t: int) -> np.ndarray:
    return np.array([truncate_pad(v, t) for v in views], dtype=np.int64)


def batch_losses(encoder: Encoder, batch: SequenceBatch, cfg: TrainConfig,
                 intents: it.IntentModel | None, rngs: dict[str, np.random.Generator]
                 ) -> tuple[Tensor, dict[str, float]]:
    """Joint loss for one mini-batch plus the float value of every active component."""
    w = cfg.loss_weights
    temp = cfg["loss.temperature"]
    drop = rngs["dropout"]
    h = encoder(batch.inputs, drop)
    rec = losses.loss_rec(h, encoder.item_embedding, batch.targets, batch.negatives,
                          batch.padding_mask)
    parts: dict[str, float] = {"loss_rec": rec.item()}
    cl = icl = mcl = None
    n = len(batch)
    if n >= 2 and (w.beta or w.lam or w.gamma):
        aug = cfg.augment
        aug.mask_token = encoder.cfg.mask_token
        t = encoder.cfg.max_len
        va = [augment(s, aug, rngs["augment"]) for s in batch.raw_inputs]
        vb = [augment(s, aug, rngs["augment"]) for s in batch.raw_inputs]
        ids = _pad_views(va + vb, t)
        hv = encoder(ids, drop)
        ha, hb = hv[:n], hv[n:]
        if w.beta:
            cl = losses.loss_cl(concat_views(ha), concat_views(hb), temp)
            parts["loss_cl"] = cl.item()
        if w.lam or w.gamma:
            if intents is None:
                raise RuntimeError("intent terms are active but no clustering step has run")
            xa, xb = encoder.pool(ha, ids[:n]), encoder.pool(hb, ids[n:])
            if w.lam:
                anchor = encoder.pool(h, batch.inputs).data
                icl = losses.loss_icl([xa, xb], intents.centroids,
                                      it.assign(anchor, intents.centroids), temp)
                parts["loss_icl"] = icl.item()
            if w.gamma:
                view = cfg["loss.mcl_view"]
                chosen = [xa] if view == "alpha" else [xb] if view == "beta" else [xa, xb]
                for x in chosen:
                    wts, cbar = it.intent_weights(x.data, intents, cfg["intent.normalization"])
                    d = losses.decay_matrix(x.data, cbar, wts.smoothed)
                    term = losses.loss_mcl(x, cbar, d, temp)
                    mcl = term if mcl is None else mcl + term
                mcl = mcl * (1.0 / len(chosen))
                parts["loss_mcl"] = mcl.item()
    total = losses.loss_joint(rec, cl, icl, mcl, w)
    parts["loss"] = total.item()
    return total, parts


def _flat_for_json(flat: dict[str, Any]) -> dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in flat.items()}


def _params_with_prefix(state: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in state.items()}


def _strip_prefix(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def save_model(path: str | os.PathLike, encoder_state: dict[str, np.ndarray],
               intents: it.IntentModel | None, cfg: TrainConfig, item_count: int,
               extra: dict[str, Any] | None = None) -> None:
    arrays = _params_with_prefix(encoder_state, "param.")
    meta: dict[str, Any] = {"config": _flat_for_json(cfg.flat), "item_count": item_count}
    if intents is not None:
        arrays["intent.centroids"] = intents.centroids
        meta["intent_R"] = intents.R
        meta["inertia_history"] = list(intents.inertia_history)
    meta.update(extra or {})
    save_checkpoint(path, arrays, meta)


def load_model(path: str | os.PathLike) -> tuple[Encoder, it.IntentModel | None, dict[str, Any]]:
    """Rebuild the encoder (and intents, if stored) from a model checkpoint."""
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays, meta = load_checkpoint(path)
    if "config" not in meta or "item_count" not in meta:
        raise CheckpointError(f"{path}: not a model checkpoint")
    cfg = TrainConfig(_resolve_stored(meta["config"]))
    encoder = build_encoder(cfg, int(meta["item_count"]), np.random.default_rng(0))
    encoder.load_state_dict(_strip_prefix(arrays, "param."))
    intents = None
    if "intent.centroids" in arrays:
        intents = it.IntentModel(arrays["intent.centroids"], int(meta["intent_R"]),
                                 list(meta.get("inertia_history", [])))
    encoder.eval()
    return encoder, intents, meta


def _resolve_stored(flat: dict[str, Any]) -> dict[str, Any]:
    return resolve({k: tuple(v) if isinstance(v, list) else v for k, v in flat.items()})


def _mean_parts(records: list[dict[str, float]]) -> dict[str, float]:
    keys = [k for k in ("loss", "loss_rec", "loss_cl", "loss_icl", "loss_mcl")
            if any(k in r for r in records)]
    return {k: float(np.mean([r[k] for r in records if k in r])) for k in keys}


def train(ds: InteractionDataset, cfg: TrainConfig, out_dir: str | os.PathLike | None = None,
          resume: bool = False) -> TrainResult:
    """Alternate clustering (E) and gradient (M) steps, early-stopping on valid NDCG@10.

    With ``out_dir`` the history is appended to ``history.jsonl`` and both the best
    and the latest state are checkpointed; ``resume`` continues from ``last.npz``.
    """
    w = cfg.loss_weights
    need_intents = bool(w.lam or w.gamma)
    if need_intents and cfg["intent.K"] > ds.user_count:
        raise it.IntentError(f"K={cfg['intent.K']} exceeds the number of users ({ds.user_count})")
    rngs = _streams(cfg["train.seed"])
    encoder = build_encoder(cfg, ds.item_count, rngs["init"])
    opt = Adam(encoder.parameters(), lr=cfg["train.lr"],
               betas=(cfg["train.adam_beta1"], cfg["train.adam_beta2"]), eps=cfg["train.adam_eps"])
    out = Path(out_dir) if out_dir is not None else None
    history: list[dict[str, Any]] = []
    best_score, best_epoch, bad_epochs = -math.inf, 0, 0
    best_state = encoder.state_dict()
    best_intents: it.IntentModel | None = None
    intents: it.IntentModel | None = None
    start_epoch = 1
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume:
        if out is None or not (out / LAST_FILE).exists():
            raise FileNotFoundError(f"nothing to resume: {out / LAST_FILE if out else out_dir}")
        arrays, meta = load_checkpoint(out / LAST_FILE)
        encoder.load_state_dict(_strip_prefix(arrays, "param."))
        opt.load_state_arrays(arrays)
        best_state = _strip_prefix(arrays, "best.")
        for name, state in meta["rng"].items():
            rngs[name].bit_generator.state = state
        history = meta["history"]
        best_score, best_epoch, bad_epochs = meta["best_score"], meta["best_epoch"], meta["bad_epochs"]
        if "intent.centroids" in arrays:
            intents = it.IntentModel(arrays["intent.centroids"], int(meta["intent_R"]))
        if "best_intent.centroids" in arrays:
            best_intents = it.IntentModel(arrays["best_intent.centroids"], int(meta["intent_R"]))
        start_epoch = meta["epoch"] + 1
        if bad_epochs >= cfg["train.patience"]:
            start_epoch = cfg["train.epochs"] + 1
        log.info("resuming at epoch %d", start_epoch)
    elif out is not None:
        (out / HISTORY_FILE).write_text("")

    stopped = False
    for epoch in range(start_epoch, cfg["train.epochs"] + 1):
        if need_intents and (epoch - 1) % cfg["intent.estep_every"] == 0:
            intents = epoch_estep(ds, encoder, cfg)
        encoder.train()
        parts = []
        for batch in iter_batches(ds, cfg["train.batch_size"], rngs["batch"], encoder.cfg.max_len):
            total, p = batch_losses(encoder, batch, cfg, intents, rngs)
            total.backward()
            opt.step()
            parts.append(p)
        report = evaluate(encoder, ds, "valid", exclude_history=cfg["eval.exclude_history"])
        record: dict[str, Any] = {"epoch": epoch, **_mean_parts(parts),
                                  **{f"valid_{k}": v for k, v in report.metrics().items()}}
        history.append(record)
        log.info("epoch %d loss %.5f valid ndcg10 %.5f", epoch, record["loss"], report.ndcg10)
        if report.ndcg10 > best_score:
            best_score, best_epoch, bad_epochs = report.ndcg10, epoch, 0
            best_state = encoder.state_dict()
            best_intents = intents
            if out is not None:
                save_model(out / BEST_FILE, best_state, best_intents, cfg, ds.item_count,
                           {"epoch": epoch, "valid": report.metrics()})
        else:
            bad_epochs += 1
        if out is not None:
            with open(out / HISTORY_FILE, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            _save_last(out / LAST_FILE, encoder, opt, best_state, intents, best_intents, rngs,
                       cfg, ds.item_count, epoch, history, best_score, best_epoch, bad_epochs)
        if bad_epochs >= cfg["train.patience"]:
            stopped = True
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    encoder.load_state_dict(best_state)
    encoder.eval()
    return TrainResult(encoder, best_intents, history, best_epoch, stopped)


def _save_last(path, encoder, opt, best_state, intents, best_intents, rngs, cfg, item_count,
               epoch, history, best_score, best_epoch, bad_epochs) -> None:
    arrays = _params_with_prefix(encoder.state_dict(), "param.")
    arrays.update(_params_with_prefix(best_state, "best."))
    arrays.update(opt.state_arrays())
    meta: dict[str, Any] = {
        "config": _flat_for_json(cfg.flat), "item_count": item_count, "epoch": epoch,
        "history": history, "best_score": best_score, "best_epoch": best_epoch,
        "bad_epochs": bad_epochs,
        "rng": {name: g.bit_generator.state for name, g in rngs.items()},
    }
    if intents is not None:
        arrays["intent.centroids"] = intents.centroids
        meta["intent_R"] = intents.R
    if best_intents is not None:
        arrays["best_intent.centroids"] = best_intents.centroids
        meta["intent_R"] = best_intents.R
    save_checkpoint(path, arrays, meta)
