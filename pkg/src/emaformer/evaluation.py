"""Cross-subject cross-validation, result tables and attention summaries."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import traceback
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ContractError
from .checkpoint import Checkpoint, to_checkpoint
from .data import Dataset
from .features import FEATURE_NAMES, build_features, dataset_windows
from .metrics import UndefinedAUC, roc_auc
from .training import (MaskingConfig, TrainConfig, WindowArrays, finetune, predict, pretrain,
                       split_validation, train_baseline)
from .transformer import EMATransformer, TransformerConfig

log = logging.getLogger(__name__)

__all__ = ["roc_auc", "UndefinedAUC", "FoldPlan", "cross_subject_folds", "ModelSpec", "ExperimentSpec",
           "CellResult", "MetricsTable", "run_experiment", "AttentionSummary", "extract_attention_summary"]


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    k: int
    seed: int
    assignment: dict[str, int]

    def fold_ids(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.assignment.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.assignment.items() if f != fold)

    def sizes(self) -> list[int]:
        return [len(self.fold_ids(f)) for f in range(self.k)]


def cross_subject_folds(ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle of participants, then round-robin assignment to ``k`` folds."""
    ids = sorted(set(ids))
    if k < 2:
        raise ContractError("need at least 2 folds")
    if len(ids) < k:
        raise ContractError(f"{len(ids)} participants cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldPlan(k, seed, {ids[j]: i % k for i, j in enumerate(order)})


# ---------------------------------------------------------------------------
# experiment specification


# a transformer small enough for 5-fold runs in minutes on one CPU core
DESK_TRANSFORMER = {"n_layers": 2, "n_heads": 4, "d_model": 32, "d_ff": 64, "d_pe": 8}

MODEL_KINDS = ("logreg", "logreg_raw", "lstm", "attention_lstm", "transformer")
PRETRAIN_OPTIONS = ("none", "one", "five", "all")


@dataclass(frozen=True)
class ModelSpec:
    """One model family; expands into a cell per (N, encoding, pretrain)."""

    kind: str
    name: str | None = None
    n: tuple[int, ...] = (10,)
    encodings: tuple[str, ...] = ("time_concat",)
    pretrain: tuple[str, ...] = ("none",)
    # TransformerConfig overrides (transformer) or {"hidden": h} (LSTMs)
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ContractError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.kind.startswith("logreg") and tuple(self.n) != (1,):
            raise ContractError("logistic regression only supports N=1")
        for p in self.pretrain:
            if p not in PRETRAIN_OPTIONS:
                raise ContractError(f"unknown pretrain option {p!r}; expected one of {PRETRAIN_OPTIONS}")
        if self.kind != "transformer" and (tuple(self.pretrain) != ("none",)):
            raise ContractError("pre-training applies to transformer models only")

    @property
    def label(self) -> str:
        return self.name or self.kind

    def cells(self) -> list[tuple[str, int, str, str]]:
        encs = self.encodings if self.kind == "transformer" else ("none",)
        return [(self.label, n, e, p) for n in self.n for e in encs for p in self.pretrain]


@dataclass(frozen=True)
class ExperimentSpec:
    models: tuple[ModelSpec, ...]
    k: int = 5
    seed: int = 0
    val_fraction: float = 0.1
    train: TrainConfig = TrainConfig()
    pretrain_train: TrainConfig | None = None
    masking: MaskingConfig = MaskingConfig()
    # evaluate every N on the same prediction targets (prompt index > max N)
    align_targets: bool = False
    attention_fold: int = 0

    def cells(self) -> list[tuple[str, int, str, str]]:
        out = []
        for m in self.models:
            out.extend(m.cells())
        if len(set(out)) != len(out):
            raise ContractError("duplicate experiment cells; give repeated model kinds distinct names")
        return out

    def model_for(self, label: str) -> ModelSpec:
        return next(m for m in self.models if m.label == label)


# ---------------------------------------------------------------------------
# results


@dataclass
class CellResult:
    model: str
    n: int
    encoding: str
    pretrain: str
    fold_aucs: list[float]
    status: str = "ok"
    diagnostics: list[str] = field(default_factory=list)

    @property
    def key(self) -> tuple[str, int, str, str]:
        return (self.model, self.n, self.encoding, self.pretrain)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_aucs)) if self.status == "ok" else math.nan

    @property
    def std(self) -> float:
        # population std over the k fold values
        return float(np.std(self.fold_aucs)) if self.status == "ok" else math.nan


@dataclass
class MetricsTable:
    k: int
    cells: list[CellResult] = field(default_factory=list)

    def get(self, model: str, n: int, encoding: str = "none", pretrain: str = "none") -> CellResult:
        for c in self.cells:
            if c.key == (model, n, encoding, pretrain):
                return c
        raise KeyError((model, n, encoding, pretrain))

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "N", "encoding", "pretrain", "fold", "auc"])
        for c in self.cells:
            for f, auc in enumerate(c.fold_aucs):
                w.writerow([c.model, c.n, c.encoding, c.pretrain, f, repr(float(auc))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_json(self, path: str | Path | None = None) -> str:
        doc = {"k": self.k, "cells": [
            {"model": c.model, "N": c.n, "encoding": c.encoding, "pretrain": c.pretrain,
             "status": c.status, "mean_auc": None if math.isnan(c.mean) else c.mean,
             "std_auc": None if math.isnan(c.std) else c.std,
             "fold_aucs": c.fold_aucs, "diagnostics": c.diagnostics}
            for c in self.cells]}
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_json(cls, text: str) -> "MetricsTable":
        doc = json.loads(text)
        cells = [CellResult(c["model"], c["N"], c["encoding"], c["pretrain"], c["fold_aucs"],
                            c["status"], c["diagnostics"]) for c in doc["cells"]]
        return cls(doc["k"], cells)

    def summary(self) -> str:
        lines = [f"{'model':<18}{'N':>4} {'encoding':<12}{'pretrain':<9}{'AUC':>8}{'std':>8}"]
        for c in self.cells:
            lines.append(f"{c.model:<18}{c.n:>4} {c.encoding:<12}{c.pretrain:<9}{c.mean:>8.4f}{c.std:>8.4f}"
                         + ("" if c.status == "ok" else "  FAILED"))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# attention interpretation


@dataclass
class AttentionSummary:
    lag_weights: np.ndarray          # [n_layers, N]; column 0 is lag 1 (most recent prompt)
    feature_weights: dict[str, float]

    def to_dict(self) -> dict:
        return {"lag_weights": self.lag_weights.tolist(),
                "lags": list(range(1, self.lag_weights.shape[1] + 1)),
                "feature_weights": self.feature_weights}


def extract_attention_summary(model: EMATransformer, data: WindowArrays, query: str = "all",
                              batch_size: int = 512) -> AttentionSummary:
    """Per-lag attention mass per layer and per-feature value-projection weights.

    The lag weights average the columns of every attention matrix over windows,
    heads and query rows (``query="last"`` keeps only the final row, the one the
    classifier reads). The feature weights are the mean absolute entries of each
    input feature's row of ``input.w @ W_V`` for the first layer, normalised to
    sum to one.
    """
    if query not in ("all", "last"):
        raise ContractError("query must be 'all' or 'last'")
    cfg = model.config
    n = data.x.shape[1]
    mass = np.zeros((cfg.n_layers, n))
    for s in range(0, len(data), batch_size):
        att = model.attention(data.x[s:s + batch_size], data.times[s:s + batch_size], data.origins[s:s + batch_size])
        for layer, a in enumerate(att):
            rows = a if query == "all" else a[:, :, -1:, :]
            mass[layer] += rows.mean(axis=2).sum(axis=(0, 1))
    mass /= mass.sum(axis=1, keepdims=True)
    w_in = model.params["input.w"].data
    wv = model.params["layer0.attn.wv"].data
    if cfg.strategy.concat and not cfg.add_before_projection:
        wv = wv[:cfg.projection_width]
    composed = np.abs(w_in @ wv).mean(axis=1)
    composed = composed / composed.sum()
    names = FEATURE_NAMES if cfg.input_dim == len(FEATURE_NAMES) else [f"f{i}" for i in range(cfg.input_dim)]
    return AttentionSummary(mass[:, ::-1].copy(), {nm: float(v) for nm, v in zip(names, composed)})


# ---------------------------------------------------------------------------
# running experiments


def _cell_seed(seed: int, key: tuple, fold: int) -> int:
    # the pretrain option is left out so pre-trained and scratch cells share fine-tuning seeds
    tag = zlib.crc32("|".join(map(str, key[:3])).encode())
    return int(np.random.SeedSequence([seed, tag, fold]).generate_state(1)[0])


def _min_index(spec: ExperimentSpec) -> int:
    return max(n for _, n, _, _ in spec.cells()) if spec.align_targets else 0


@dataclass
class FoldOutcome:
    key: tuple
    fold: int
    auc: float | None
    error: str | None = None
    checkpoint: Checkpoint | None = None
    attention: dict | None = None
    pretrain_errors: dict | None = None
    log_csv: str | None = None


def _windows(ds: Dataset, feats, n: int, min_index: int) -> WindowArrays:
    ws = dataset_windows(ds, n, feats)
    if min_index:
        # index of the predicted prompt within its participant is k + n; keep targets past min_index
        counts: dict[str, int] = {}
        keep = []
        for w in ws:
            k = counts.get(w.participant_id, 0)
            counts[w.participant_id] = k + 1
            if k + n >= min_index:
                keep.append(w)
        ws = keep
    return WindowArrays.from_windows(ws)


def _run_fold(ds: Dataset, spec: ExperimentSpec, key: tuple, fold: int, plan: FoldPlan,
              windows: WindowArrays) -> FoldOutcome:
    label, n, encoding, pre = key
    mspec = spec.model_for(label)
    seed = _cell_seed(spec.seed, key, fold)
    try:
        test_ids = plan.fold_ids(fold)
        train_ids, val_ids = split_validation(plan.train_ids(fold), spec.val_fraction,
                                              np.random.default_rng([spec.seed, fold]))
        if set(test_ids) & (set(train_ids) | set(val_ids)):
            raise ContractError("test participants leaked into training or validation")
        train = windows.by_participants(train_ids)
        val = windows.by_participants(val_ids)
        test = windows.by_participants(test_ids)
        tcfg = replace(spec.train, seed=seed)
        out = FoldOutcome(key, fold, None)
        if mspec.kind == "transformer":
            cfg = TransformerConfig(**{**mspec.model, "encoding": encoding})
            model = None
            if pre != "none":
                pcfg = replace(spec.pretrain_train or spec.train, seed=seed + 1)
                mask_cfg = replace(spec.masking, task=pre, items=None)
                model, report = pretrain(cfg, train, val, mask_cfg, pcfg)
                out.pretrain_errors = report.item_mse
                for k_ in [k_ for k_ in model.params if k_.startswith("imp.")]:
                    del model.params[k_]
            model, elog = finetune(model if model is not None else cfg, train, val, tcfg)
            if fold == spec.attention_fold:
                out.attention = extract_attention_summary(model, test).to_dict()
        else:
            kind = "logreg" if mspec.kind.startswith("logreg") else mspec.kind
            model, elog = train_baseline(kind, train, val, tcfg, summary=(mspec.kind != "logreg_raw"),
                                         hidden=int(mspec.model.get("hidden", 64)))
        out.auc = roc_auc(predict(model, test), test.y)
        out.checkpoint = to_checkpoint(model, {"seed": seed, "fold": fold, "cell": list(key),
                                               "epochs_run": max((r["epoch"] for r in elog.rows), default=0)})
        out.log_csv = elog.to_csv()
        return out
    except Exception as exc:  # noqa: BLE001 - any fold failure marks the cell failed
        log.debug("fold failure", exc_info=True)
        return FoldOutcome(key, fold, None, f"fold {fold}: {type(exc).__name__}: {exc}\n"
                                            + traceback.format_exc(limit=3))


def _fold_task(args):
    return _run_fold(*args)


def run_experiment(ds: Dataset, spec: ExperimentSpec, jobs: int | None = 1
                   ) -> tuple[MetricsTable, list[FoldOutcome]]:
    """Train and test every cell on every cross-subject fold.

    A failing fold marks its cell failed (with diagnostics); other cells still
    run. Fold jobs are independent, so ``jobs > 1`` runs them in worker
    processes with identical results.
    """
    cells = spec.cells()
    plan = cross_subject_folds(list(ds.participants), spec.k, spec.seed)
    feats = build_features(ds)
    min_index = _min_index(spec)
    by_n = {n: _windows(ds, feats, n, min_index) for n in sorted({c[1] for c in cells})}
    tasks = [(ds, spec, key, fold, plan, by_n[key[1]]) for key in cells for fold in range(spec.k)]
    jobs = jobs if jobs is not None else (os.cpu_count() or 1)
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_fold_task, tasks))
    else:
        outcomes = [_fold_task(t) for t in tasks]
    table = MetricsTable(spec.k)
    for key in cells:
        mine = sorted((o for o in outcomes if o.key == key), key=lambda o: o.fold)
        errors = [o.error for o in mine if o.error]
        cell = CellResult(*key, [o.auc for o in mine if o.auc is not None])
        if errors:
            cell.status = "failed"
            cell.diagnostics = errors
            log.warning("cell %s failed: %s", key, errors[0].splitlines()[0])
        table.cells.append(cell)
    return table, outcomes
