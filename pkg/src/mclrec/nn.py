"""Parameter containers and the checkpoint file format."""
from __future__ import annotations

import json
import os
from typing import Any, Iterator

import numpy as np

from .tensor import Tensor

CHECKPOINT_VERSION = "mclrec-ckpt/1"


class CheckpointError(ValueError):
    pass


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Attribute-scanning parameter container with a train/eval flag."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            yield from _walk(value, f"{prefix}{attr}")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def train(self, mode: bool = True) -> "Module":
        for mod in self._modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item._modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise CheckpointError(
                    f"parameter {name!r}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()
            p.grad = None


def _walk(value: Any, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor) and value.requires_grad:
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def save_checkpoint(path: str | os.PathLike, arrays: dict[str, np.ndarray],
                    meta: dict[str, Any] | None = None) -> None:
    """Write ``name -> array`` plus a JSON metadata blob to an ``.npz`` file."""
    meta = dict(meta or {})
    meta["format_version"] = CHECKPOINT_VERSION
    payload = {name: np.asarray(a) for name, a in arrays.items()}
    payload["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with np.load(path, allow_pickle=False) as npz:
        if "__meta__" not in npz.files:
            raise CheckpointError(f"{path}: not a checkpoint (no metadata)")
        meta = json.loads(str(npz["__meta__"]))
        arrays = {k: npz[k] for k in npz.files if k != "__meta__"}
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version!r}")
    return arrays, meta
