"""Masked-imputation pre-training, classifier fine-tuning and baseline fitting.

Every trainer takes an explicit seed through :class:`TrainConfig` and draws
all of its randomness (shuffling, dropout, masking) from one generator, so a
run is bitwise reproducible from (seed, config, data).
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericError, Tape, Tensor
from .baselines import LogReg, LSTMClassifier, make_baseline
from .data import ITEMS
from .features import COMPLETION_DIM, WindowSample, stack_windows
from .metrics import UndefinedAUC, roc_auc
from .optim import Adam
from .transformer import (EMATransformer, TransformerConfig, encoder_forward, impute_head,
                          init_impute_head)

log = logging.getLogger(__name__)

FIVE_ITEMS = ("happy", "bored", "sad", "angry", "restless")
LIKERT_LEVELS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
MASK_TASKS = ("one", "five", "all")


# ---------------------------------------------------------------------------
# window arrays


@dataclass
class WindowArrays:
    """Stacked windows: x [B, N, 20], times [B, N], origins [B], labels [B], pids [B]."""

    x: np.ndarray
    times: np.ndarray
    origins: np.ndarray
    y: np.ndarray
    pids: np.ndarray

    @classmethod
    def from_windows(cls, windows: Sequence[WindowSample]) -> "WindowArrays":
        if not windows:
            raise ContractError("no windows to stack")
        x, t, o, y = stack_windows(windows)
        return cls(x, t, o, y, np.array([w.participant_id for w in windows]))

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "WindowArrays":
        return WindowArrays(self.x[idx], self.times[idx], self.origins[idx], self.y[idx], self.pids[idx])

    def by_participants(self, ids) -> "WindowArrays":
        return self.take(np.isin(self.pids, list(ids)))


def split_validation(ids: Sequence[str], fraction: float, rng: np.random.Generator) -> tuple[list[str], list[str]]:
    """Subject-level split: (train ids, validation ids), disjoint, at least one of each."""
    ids = sorted(ids)
    if len(ids) < 2:
        raise ContractError("need at least two participants for a validation split")
    n_val = min(max(1, int(round(fraction * len(ids)))), len(ids) - 1)
    order = rng.permutation(len(ids))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return train, val


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskingConfig:
    mask_fraction: float = 0.15
    p_mask: float = 0.8
    p_keep: float = 0.1
    p_random: float = 0.1
    task: str = "five"
    # overrides the task's default item subset
    items: tuple[str, ...] | None = None
    sentinel: float = -1.0
    resample_each_epoch: bool = True

    def __post_init__(self):
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ContractError("mask_fraction must lie in [0, 1)")
        probs = (self.p_mask, self.p_keep, self.p_random)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
            raise ContractError(f"replacement probabilities must be non-negative and sum to 1, got {probs}")
        if self.task not in MASK_TASKS:
            raise ContractError(f"unknown masking task {self.task!r}; expected one of {MASK_TASKS}")
        for name in self.item_names:
            if name not in ITEMS:
                raise ContractError(f"unknown item {name!r}")

    @property
    def item_names(self) -> tuple[str, ...]:
        if self.items is not None:
            return tuple(self.items)
        return {"one": ("happy",), "five": FIVE_ITEMS, "all": ITEMS}[self.task]

    @property
    def item_dims(self) -> tuple[int, ...]:
        return tuple(ITEMS.index(n) for n in self.item_names)


# replacement codes recorded per masked position
MASKED, KEPT, RANDOM = 0, 1, 2


@dataclass
class MaskResult:
    x: np.ndarray               # corrupted copy of the batch
    batch_idx: np.ndarray       # [M]
    pos_idx: np.ndarray         # [M]
    targets: np.ndarray         # [M, n_items], original normalised values
    replacement: np.ndarray     # [M], MASKED / KEPT / RANDOM
    item_dims: tuple[int, ...]
    skipped: int                # windows with no completed prompt

    @property
    def n_masked(self) -> int:
        return int(self.batch_idx.size)


def n_mask_positions(n: int, fraction: float) -> int:
    # tolerance keeps e.g. 0.15 * 20 from rounding up to 4
    return int(math.ceil(fraction * n - 1e-9))


def apply_masking(x: np.ndarray, cfg: MaskingConfig, rng: np.random.Generator) -> MaskResult:
    """Mask item values at randomly chosen completed positions of each window.

    ``ceil(mask_fraction * N)`` positions are drawn per window among completed
    prompts (fewer if fewer are completed). The task's item dims at a chosen
    position are replaced with the sentinel, left as is, or replaced with a
    random Likert level; completion and compliance dims are never touched.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ContractError(f"apply_masking expects [B, N, d] windows, got {x.shape}")
    out = x.copy()
    dims = np.array(cfg.item_dims)
    B, N, _ = x.shape
    k = n_mask_positions(N, cfg.mask_fraction)
    bi, pi, skipped = [], [], 0
    for b in range(B):
        eligible = np.flatnonzero(x[b, :, COMPLETION_DIM] == 1.0)
        if eligible.size == 0:
            skipped += 1
            continue
        if k == 0:
            continue
        chosen = np.sort(rng.choice(eligible, size=min(k, eligible.size), replace=False))
        bi.extend([b] * chosen.size)
        pi.extend(chosen.tolist())
    bi = np.asarray(bi, dtype=np.intp)
    pi = np.asarray(pi, dtype=np.intp)
    targets = x[bi[:, None], pi[:, None], dims[None, :]] if bi.size else np.zeros((0, dims.size))
    replacement = rng.choice(3, size=bi.size, p=[cfg.p_mask, cfg.p_keep, cfg.p_random])
    for m in range(bi.size):
        if replacement[m] == MASKED:
            out[bi[m], pi[m], dims] = cfg.sentinel
        elif replacement[m] == RANDOM:
            out[bi[m], pi[m], dims] = rng.choice(LIKERT_LEVELS, size=dims.size)
    if skipped:
        log.debug("masking skipped %d windows without completed prompts", skipped)
    return MaskResult(out, bi, pi, targets, replacement, tuple(int(d) for d in dims), skipped)


# ---------------------------------------------------------------------------
# configs and logs


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    patience: int = 5
    # global gradient-norm clip; None disables
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ContractError(f"invalid training config {self}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ContractError("clip_norm must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, epoch: int, split: str, loss: float, auc: float | None = None) -> None:
        self.rows.append({"epoch": epoch, "split": split, "loss": loss, "auc": auc})

    def losses(self, split: str) -> list[float]:
        return [r["loss"] for r in self.rows if r["split"] == split]

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "auc"])
        for r in self.rows:
            w.writerow([r["epoch"], r["split"], repr(float(r["loss"])),
                        "" if r["auc"] is None else repr(float(r["auc"]))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


class TrainingDiverged(NumericError):
    pass


def _check_finite(loss: float, what: str, epoch: int, step: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"{what} loss became {loss} at epoch {epoch}, step {step}")


def _clip(params: dict[str, Tensor], max_norm: float | None) -> None:
    if max_norm is None:
        return
    sq = sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad *= max_norm / norm


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, v in snap.items():
        params[k].data = v.copy()


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _safe_auc(scores, labels) -> float | None:
    try:
        return roc_auc(scores, labels)
    except UndefinedAUC:
        return None


# ---------------------------------------------------------------------------
# classification


def _prob_fn(model):
    return model.classify if isinstance(model, EMATransformer) else model.forward


def _trainable(model) -> dict[str, Tensor]:
    if isinstance(model, EMATransformer):
        return model.encoder_params()
    return model.params


def predict(model, data: WindowArrays, batch_size: int = 512) -> np.ndarray:
    """Eval-mode completion probabilities for every window."""
    fn = _prob_fn(model)
    out = [fn(data.x[s:s + batch_size], data.times[s:s + batch_size], data.origins[s:s + batch_size]).data
           for s in range(0, len(data), batch_size)]
    return np.concatenate(out)


def bce_value(p: np.ndarray, y: np.ndarray) -> float:
    pc = np.clip(p, ad.BCE_CLAMP, 1.0 - ad.BCE_CLAMP)
    return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))


def fit_classifier(model, train: WindowArrays, val: WindowArrays | None, cfg: TrainConfig,
                   epoch_log: EpochLog | None = None) -> EpochLog:
    """Minibatch Adam on BCE with early stopping on validation loss.

    Without validation data all epochs run. With it, training stops after
    ``patience`` epochs without improvement and the best parameters are restored.
    """
    epoch_log = epoch_log if epoch_log is not None else EpochLog()
    rng = np.random.default_rng(cfg.seed)
    params = _trainable(model)
    fn = _prob_fn(model)
    penalty = getattr(model, "penalty", lambda params=None: None)
    opt = Adam(params, lr=cfg.lr)
    best, best_snap, stale = math.inf, None, 0
    for epoch in range(1, cfg.epochs + 1):
        losses, preds, labels = [], [], []
        for step, idx in enumerate(_batches(len(train), cfg.batch_size, rng)):
            opt.zero_grad()
            with Tape() as tape:
                p = fn(train.x[idx], train.times[idx], train.origins[idx], train=True, rng=rng)
                loss = ad.bce_loss(p, train.y[idx])
                extra = penalty(params)
                total = ad.add(loss, extra) if extra is not None else loss
            _check_finite(total.item(), "classification", epoch, step)
            ad.backward(total, tape)
            _clip(params, cfg.clip_norm)
            opt.step()
            losses.append(loss.item() * len(idx))
            preds.append(p.data)
            labels.append(train.y[idx])
        epoch_log.add(epoch, "train", sum(losses) / len(train),
                      _safe_auc(np.concatenate(preds), np.concatenate(labels)))
        if val is None or len(val) == 0:
            continue
        pv = predict(model, val)
        vloss = bce_value(pv, val.y)
        _check_finite(vloss, "validation", epoch, -1)
        epoch_log.add(epoch, "val", vloss, _safe_auc(pv, val.y))
        if vloss < best:
            best, best_snap, stale = vloss, _snapshot(params), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best val loss %.4f)", epoch, best)
                break
    if best_snap is not None:
        _restore(params, best_snap)
    return epoch_log


def finetune(model: EMATransformer | TransformerConfig, train: WindowArrays, val: WindowArrays | None,
             cfg: TrainConfig, epoch_log: EpochLog | None = None) -> tuple[EMATransformer, EpochLog]:
    """Train the classifier head and encoder end to end on completion labels.

    Pass a config to start from fresh weights, or a (pre-trained) model to
    continue from its encoder. The model is updated in place.
    """
    if isinstance(model, TransformerConfig):
        model = EMATransformer.create(model, np.random.default_rng([cfg.seed, 1]))
    if train.x.shape[-1] != model.config.input_dim:
        raise ContractError(f"data width {train.x.shape[-1]} does not match model input_dim {model.config.input_dim}")
    if val is not None and set(train.pids) & set(val.pids):
        raise ContractError("training and validation windows share participants")
    return model, fit_classifier(model, train, val, cfg, epoch_log)


def train_baseline(kind: str, train: WindowArrays, val: WindowArrays | None, cfg: TrainConfig,
                   summary: bool = True, hidden: int = 64, epoch_log: EpochLog | None = None):
    """Fit a LogReg (N=1 windows only) or an LSTM baseline."""
    model = make_baseline(kind, np.random.default_rng([cfg.seed, 2]), summary=summary, hidden=hidden)
    if isinstance(model, LogReg):
        model.fit_scaler(train.x)
    elif isinstance(model, LSTMClassifier) and train.x.ndim != 3:
        raise ContractError("LSTM baselines consume [B, N, d] windows")
    return model, fit_classifier(model, train, val, cfg, epoch_log)


# ---------------------------------------------------------------------------
# pre-training


def imputation_loss(hidden: Tensor, params: dict[str, Tensor], masks: MaskResult) -> tuple[Tensor, Tensor]:
    """(MSE over masked targets only, predictions [M, n_items])."""
    pred = impute_head(hidden, params, masks.batch_idx, masks.pos_idx)
    return ad.mse_loss(pred, masks.targets), pred


@dataclass
class PretrainReport:
    items: tuple[str, ...]
    item_mse: dict[str, float]
    train_mse: float
    log: EpochLog

    def table(self) -> list[dict]:
        return [{"item": k, "mse": v} for k, v in self.item_mse.items()]


def _imputation_eval(model: EMATransformer, data: WindowArrays, masks: MaskResult,
                     batch_size: int = 512) -> np.ndarray:
    """Squared errors [M, n_items] for a fixed masking of ``data``."""
    sq = []
    for s in range(0, len(data), batch_size):
        sel = (masks.batch_idx >= s) & (masks.batch_idx < s + batch_size)
        if not sel.any():
            continue
        hidden, _ = encoder_forward(model.params, model.config, masks.x[s:s + batch_size],
                                    data.times[s:s + batch_size], data.origins[s:s + batch_size])
        pred = impute_head(hidden, model.params, masks.batch_idx[sel] - s, masks.pos_idx[sel]).data
        sq.append((pred - masks.targets[sel]) ** 2)
    return np.concatenate(sq) if sq else np.zeros((0, len(masks.item_dims)))


def pretrain(config: TransformerConfig | EMATransformer, train: WindowArrays, val: WindowArrays | None,
             mask_cfg: MaskingConfig, cfg: TrainConfig) -> tuple[EMATransformer, PretrainReport]:
    """Masked item imputation; returns the model (with its imputation head) and a per-item error table.

    The table is computed on ``val`` under a fixed seeded masking, or on the
    training windows when no validation data is given.
    """
    rng = np.random.default_rng(cfg.seed)
    model = config if isinstance(config, EMATransformer) else \
        EMATransformer.create(config, np.random.default_rng([cfg.seed, 1]))
    model.params.update(init_impute_head(model.config, len(mask_cfg.item_dims), np.random.default_rng([cfg.seed, 3])))
    params = model.params
    opt = Adam(params, lr=cfg.lr)
    epoch_log = EpochLog()
    fixed = apply_masking(train.x, mask_cfg, np.random.default_rng([cfg.seed, 4]))
    val_masks = apply_masking(val.x, mask_cfg, np.random.default_rng([cfg.seed, 5])) if val is not None else None
    best, best_snap, stale = math.inf, None, 0
    for epoch in range(1, cfg.epochs + 1):
        masks_all = apply_masking(train.x, mask_cfg, rng) if mask_cfg.resample_each_epoch else fixed
        total, count = 0.0, 0
        for step, idx in enumerate(_batches(len(train), cfg.batch_size, rng)):
            sel = np.isin(masks_all.batch_idx, idx)
            if not sel.any():
                continue
            # re-index masked rows into the minibatch
            where = np.full(len(train), -1)
            where[idx] = np.arange(idx.size)
            sub = MaskResult(masks_all.x[idx], where[masks_all.batch_idx[sel]], masks_all.pos_idx[sel],
                             masks_all.targets[sel], masks_all.replacement[sel], masks_all.item_dims, 0)
            opt.zero_grad()
            with Tape() as tape:
                hidden, _ = encoder_forward(params, model.config, sub.x, train.times[idx], train.origins[idx],
                                            train=True, rng=rng)
                loss, _ = imputation_loss(hidden, params, sub)
            _check_finite(loss.item(), "imputation", epoch, step)
            ad.backward(loss, tape)
            _clip(params, cfg.clip_norm)
            opt.step()
            total += loss.item() * sub.n_masked
            count += sub.n_masked
        if count == 0:
            raise ContractError("no maskable positions in the pre-training data")
        epoch_log.add(epoch, "train", total / count)
        if val_masks is None or val_masks.n_masked == 0:
            continue
        vloss = float(_imputation_eval(model, val, val_masks).mean())
        _check_finite(vloss, "validation imputation", epoch, -1)
        epoch_log.add(epoch, "val", vloss)
        if vloss < best:
            best, best_snap, stale = vloss, _snapshot(params), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_snap is not None:
        _restore(params, best_snap)
    train_sq = _imputation_eval(model, train, fixed)
    if val_masks is not None and val_masks.n_masked:
        report_sq = _imputation_eval(model, val, val_masks)
    else:
        report_sq = train_sq
    names = mask_cfg.item_names
    report = PretrainReport(names, {n: float(report_sq[:, i].mean()) for i, n in enumerate(names)},
                            float(train_sq.mean()) if train_sq.size else 0.0, epoch_log)
    return model, report
