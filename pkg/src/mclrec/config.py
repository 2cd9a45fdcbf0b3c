"""Flat dotted-key configuration shared by the CLI and the trainer."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Callable

from .augment import OPS, AugmentConfig
from .losses import LossWeights


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text
    return parse


def _ops(text) -> tuple[str, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(text)
    return tuple(p.strip() for p in str(text).split("+") if p.strip())


# key -> (default, parser, help)
SCHEMA: dict[str, tuple[Any, Callable[[str], Any], str]] = {
    "encoder.blocks": (2, int, "self-attention blocks"),
    "encoder.heads": (2, int, "attention heads"),
    "encoder.dim": (64, int, "embedding dimension d"),
    "encoder.max_len": (50, int, "maximum sequence length T"),
    "encoder.dropout": (0.2, float, "dropout rate"),
    "encoder.ffn_dim": (0, int, "feed-forward width (0 = dim)"),
    "encoder.mask_padding": (True, _bool, "exclude padding keys in attention"),
    "encoder.pooling": ("mean", _choice("mean", "masked"), "mean over all T steps or real steps only"),
    "encoder.init_std": (0.02, float, "std of normal parameter init"),
    "augment.crop_ratio": (0.6, float, "crop window ratio"),
    "augment.mask_ratio": (0.3, float, "mask ratio"),
    "augment.reorder_ratio": (0.25, float, "reorder window ratio"),
    "augment.ops": (OPS, _ops, "enabled operators joined by '+'"),
    "augment.mask_token": ("shared", _choice("shared", "dedicated"),
                           "mask id 0 (shared with padding) or a dedicated id"),
    "intent.K": (256, int, "number of intent centroids"),
    "intent.ratio": (0.625, float, "R/K, fraction of relevant intents"),
    "intent.kmeans_iters": (20, int, "Lloyd iterations"),
    "intent.seed": (0, int, "k-means seed"),
    "intent.normalization": ("max", _choice("none", "max", "l1"),
                             "scaling of kept weights before softmax"),
    "intent.estep_every": (1, int, "run the clustering step every k epochs"),
    "loss.beta": (0.1, float, "sequence-level CL weight"),
    "loss.lambda": (0.1, float, "intent CL weight"),
    "loss.gamma": (0.1, float, "multi-intent aware CL weight"),
    "loss.temperature": (1.0, float, "InfoNCE temperature"),
    "loss.mcl_view": ("alpha", _choice("alpha", "beta", "both"),
                      "view whose pooled reps enter the merged set"),
    "train.epochs": (100, int, "maximum epochs"),
    "train.batch_size": (256, int, "mini-batch size N"),
    "train.patience": (10, int, "early-stopping patience in epochs"),
    "train.lr": (0.001, float, "Adam learning rate"),
    "train.adam_beta1": (0.9, float, "Adam beta1"),
    "train.adam_beta2": (0.999, float, "Adam beta2"),
    "train.adam_eps": (1e-8, float, "Adam epsilon"),
    "train.seed": (0, int, "global seed"),
    "eval.exclude_history": (True, _bool, "drop already-seen items from the ranking"),
    "data.format": ("raw", _choice("raw", "sequence", "amazon-json"), "input log format"),
    "data.kcore": (5, int, "k for k-core filtering"),
    "data.fixpoint": (True, _bool, "iterate k-core filtering to a fixpoint"),
}


def defaults() -> dict[str, Any]:
    return {k: v[0] for k, v in SCHEMA.items()}


def parse_value(key: str, text) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key: {key}")
    if not isinstance(text, str):
        return text
    try:
        return SCHEMA[key][1](text)
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {err}") from None


def read_config_file(path: str | os.PathLike) -> dict[str, Any]:
    """``key = value`` lines; '#' starts a comment."""
    out: dict[str, Any] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (p.strip() for p in line.split("=", 1))
            out[key] = parse_value(key, value)
    return out


def resolve(*layers: dict[str, Any]) -> dict[str, Any]:
    cfg = defaults()
    for layer in layers:
        for key, value in layer.items():
            cfg[key] = parse_value(key, value)
    return cfg


def dump(cfg: dict[str, Any]) -> str:
    lines = []
    for key in SCHEMA:
        value = cfg[key]
        if isinstance(value, tuple):
            value = "+".join(value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


@dataclass
class TrainConfig:
    """Typed view of the resolved flat config."""

    flat: dict[str, Any]

    def __post_init__(self):
        f = self.flat
        for key in ("train.epochs", "train.batch_size", "train.patience", "intent.estep_every"):
            if f[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {f[key]}")
        if not 0.0 < f["intent.ratio"] < 1.0:
            raise ConfigError(f"intent.ratio must be in (0, 1), got {f['intent.ratio']}")
        if f["loss.temperature"] <= 0:
            raise ConfigError("loss.temperature must be positive")
        try:
            self.loss_weights
            self.augment
        except ValueError as err:
            raise ConfigError(str(err)) from None

    @classmethod
    def from_overrides(cls, **overrides) -> "TrainConfig":
        return cls(resolve({k.replace("__", "."): v for k, v in overrides.items()}))

    def __getitem__(self, key: str) -> Any:
        return self.flat[key]

    @property
    def loss_weights(self) -> LossWeights:
        f = self.flat
        return LossWeights(beta=f["loss.beta"], lam=f["loss.lambda"], gamma=f["loss.gamma"])

    @property
    def augment(self) -> AugmentConfig:
        f = self.flat
        return AugmentConfig(crop_ratio=f["augment.crop_ratio"], mask_ratio=f["augment.mask_ratio"],
                             reorder_ratio=f["augment.reorder_ratio"], ops=f["augment.ops"])

    def encoder_kwargs(self) -> dict[str, Any]:
        f = self.flat
        return dict(max_len=f["encoder.max_len"], dim=f["encoder.dim"], blocks=f["encoder.blocks"],
                    heads=f["encoder.heads"], dropout=f["encoder.dropout"],
                    ffn_dim=f["encoder.ffn_dim"], mask_padding=f["encoder.mask_padding"],
                    pooling=f["encoder.pooling"],
                    dedicated_mask_token=f["augment.mask_token"] == "dedicated",
                    init_std=f["encoder.init_std"])
