"""Model checkpoints as versioned ``.npz`` archives.

Layout of a checkpoint file (a plain, uncompressed numpy ``.npz``):

    __meta__          0-d unicode array holding a JSON object:
                        format    "emaformer-checkpoint"
                        version   FORMAT_VERSION
                        kind      "transformer" | "logreg" | "lstm" | "attention_lstm"
                        config    constructor arguments of the model
                        metadata  free-form run information (seed, epochs, task, ...)
                        params    parameter names in insertion order
                        buffers   names of non-trainable arrays
    param/<name>      float64 array for each trainable parameter
    buffer/<name>     float64 array for each non-trainable array (LogReg scaler)

Arrays are stored exactly, so ``load(save(m))`` reproduces every parameter bit
for bit. Archives are read with ``allow_pickle=False``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError, Tensor
from .baselines import LogReg, LSTMClassifier
from .transformer import EMATransformer, TransformerConfig, param_shapes

FORMAT = "emaformer-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def to_checkpoint(model, metadata: dict | None = None) -> Checkpoint:
    params = {k: v.data.copy() for k, v in model.params.items()}
    meta = dict(metadata or {})
    if isinstance(model, EMATransformer):
        return Checkpoint("transformer", model.config.to_dict(), params, {}, meta)
    if isinstance(model, LogReg):
        buffers = {}
        if model.mean is not None:
            buffers = {"mean": model.mean.copy(), "std": model.std.copy()}
        return Checkpoint("logreg", {"summary": model.summary, "l2": model.l2}, params, buffers, meta)
    if isinstance(model, LSTMClassifier):
        cfg = {"input_dim": model.input_dim, "hidden": model.hidden, "attention": model.attention}
        return Checkpoint(model.kind, cfg, params, {}, meta)
    raise ContractError(f"cannot checkpoint {type(model).__name__}")


def from_checkpoint(ckpt: Checkpoint):
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in ckpt.params.items()}
    if ckpt.kind == "transformer":
        cfg = TransformerConfig(**ckpt.config)
        expected = param_shapes(cfg)
        encoder = {k: v for k, v in params.items() if not k.startswith("imp.")}
        if set(encoder) != set(expected) or any(encoder[k].shape != s for k, s in expected.items()):
            raise ContractError("checkpoint parameters do not match its transformer config")
        return EMATransformer(cfg, params)
    if ckpt.kind == "logreg":
        model = LogReg(params=params, **ckpt.config)
        if ckpt.buffers:
            model.mean, model.std = ckpt.buffers["mean"].copy(), ckpt.buffers["std"].copy()
        return model
    if ckpt.kind in ("lstm", "attention_lstm"):
        return LSTMClassifier(params=params, **ckpt.config)
    raise ContractError(f"unknown checkpoint kind {ckpt.kind!r}")


def save(ckpt: Checkpoint, path: str | Path) -> Path:
    meta = {
        "format": FORMAT, "version": FORMAT_VERSION, "kind": ckpt.kind, "config": ckpt.config,
        "metadata": ckpt.metadata, "params": list(ckpt.params), "buffers": list(ckpt.buffers),
    }
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    arrays.update({f"param/{k}": np.asarray(v, dtype=np.float64) for k, v in ckpt.params.items()})
    arrays.update({f"buffer/{k}": np.asarray(v, dtype=np.float64) for k, v in ckpt.buffers.items()})
    path = Path(path)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load(path: str | Path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise ContractError(f"{path}: not an emaformer checkpoint (no __meta__ entry)")
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != FORMAT:
            raise ContractError(f"{path}: unexpected format {meta.get('format')!r}")
        if meta.get("version") != FORMAT_VERSION:
            raise ContractError(f"{path}: checkpoint version {meta.get('version')} not supported")
        params = {k: z[f"param/{k}"].copy() for k in meta["params"]}
        buffers = {k: z[f"buffer/{k}"].copy() for k in meta["buffers"]}
    return Checkpoint(meta["kind"], meta["config"], params, buffers, meta["metadata"])


def save_model(model, path: str | Path, metadata: dict | None = None) -> Path:
    return save(to_checkpoint(model, metadata), path)


def load_model(path: str | Path):
    return from_checkpoint(load(path))
