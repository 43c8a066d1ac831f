"""Per-prompt feature vectors and sliding-window samples.

Layout of the 20 feature dims:

    0..7    emotion items, (v - 1) / 4, zero when the prompt was missed
    8       completion flag
    9       time of day, minutes-in-day / 1440
    10..17  running population variance of each raw item over completed prompts
    18      long-term completion rate
    19      short-term completion rate (previous calendar day)
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ContractError
from .data import ITEMS, MINUTES_PER_DAY, Dataset, PromptRecord

N_FEATURES = 20
ITEM_DIMS = tuple(range(8))
COMPLETION_DIM = 8
TIME_DIM = 9
VARIANCE_DIMS = tuple(range(10, 18))
LONG_CR_DIM = 18
SHORT_CR_DIM = 19
RAW_DIMS = tuple(range(10))

FEATURE_NAMES = (
    list(ITEMS) + ["completed", "time_of_day"]
    + [f"var_{name}" for name in ITEMS] + ["cr_long", "cr_short"]
)


@dataclass
class WindowSample:
    features: np.ndarray      # [N, 20]
    timestamps: np.ndarray    # [N], minutes since study start
    label: int                # completion of the prompt after the window
    participant_id: str
    origin: float = 0.0       # timestamp of the participant's first prompt

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return np.arange(1, self.n + 1)


def long_term_cr(history: Sequence[int], j: int) -> float:
    if j < 0 or j > len(history):
        raise ContractError(f"long_term_cr: j={j} outside 0..{len(history)}")
    if j == 0:
        return 0.0
    return float(sum(history[:j])) / j


def short_term_cr(records: Sequence[PromptRecord], current_day: int) -> float:
    """Completed / triggered on day ``current_day - 1``; 0 when none were triggered."""
    prev = [r for r in records if math.floor(r.timestamp / MINUTES_PER_DAY) == current_day - 1]
    if not prev:
        return 0.0
    return sum(r.completed for r in prev) / len(prev)


def running_variance(values: Sequence[float]) -> float:
    """Population variance; 0 for fewer than two observations."""
    if len(values) < 2:
        return 0.0
    return float(np.var(np.asarray(values, dtype=np.float64)))


def featurize_participant(records: Sequence[PromptRecord]) -> np.ndarray:
    """[n_i, 20] features; row j only uses prompts 1..j."""
    n = len(records)
    out = np.zeros((n, N_FEATURES))
    # running sums for the variance of completed items
    s1 = np.zeros(len(ITEMS))
    s2 = np.zeros(len(ITEMS))
    n_obs = 0
    n_done = 0
    day_counts: dict[int, list[int]] = {}
    for j, r in enumerate(records):
        day = int(math.floor(r.timestamp / MINUTES_PER_DAY))
        tally = day_counts.setdefault(day, [0, 0])
        tally[0] += 1
        if r.completed:
            v = np.asarray(r.items, dtype=np.float64)
            out[j, :8] = (v - 1.0) / 4.0
            out[j, COMPLETION_DIM] = 1.0
            s1 += v
            s2 += v * v
            n_obs += 1
            n_done += 1
            tally[1] += 1
        out[j, TIME_DIM] = (r.timestamp % MINUTES_PER_DAY) / MINUTES_PER_DAY
        if n_obs >= 2:
            mean = s1 / n_obs
            out[j, 10:18] = np.maximum(s2 / n_obs - mean * mean, 0.0)
        out[j, LONG_CR_DIM] = n_done / (j + 1)
        prev = day_counts.get(day - 1)
        out[j, SHORT_CR_DIM] = prev[1] / prev[0] if prev else 0.0
    return out


def build_features(ds: Dataset) -> dict[str, np.ndarray]:
    return {pid: featurize_participant(recs) for pid, recs in ds.participants.items()}


def sliding_windows(features: np.ndarray, records: Sequence[PromptRecord], n: int,
                    participant_id: str | None = None) -> list[WindowSample]:
    """All windows of ``n`` consecutive prompts, labelled by the next prompt's completion."""
    if n < 1:
        raise ContractError(f"window length must be >= 1, got {n}")
    pid = participant_id if participant_id is not None else (records[0].participant_id if records else "")
    times = np.array([r.timestamp for r in records])
    labels = [int(r.completed) for r in records]
    origin = float(times[0]) if len(times) else 0.0
    return [
        WindowSample(features[k:k + n], times[k:k + n], labels[k + n], pid, origin)
        for k in range(len(records) - n)
    ]


def dataset_windows(ds: Dataset, n: int, feats: dict[str, np.ndarray] | None = None) -> list[WindowSample]:
    feats = feats if feats is not None else build_features(ds)
    out: list[WindowSample] = []
    for pid, recs in ds.participants.items():
        out.extend(sliding_windows(feats[pid], recs, n, pid))
    return out


def stack_windows(windows: Sequence[WindowSample]):
    """Batch arrays: features [B, N, 20], timestamps [B, N], origins [B], labels [B]."""
    x = np.stack([w.features for w in windows])
    t = np.stack([w.timestamps for w in windows])
    o = np.array([w.origin for w in windows])
    y = np.array([w.label for w in windows], dtype=np.float64)
    return x, t, o, y


def write_feature_csv(ds: Dataset, path: str | Path | None = None,
                      feats: dict[str, np.ndarray] | None = None) -> str:
    feats = feats if feats is not None else build_features(ds)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["participant_id", "prompt_index", *FEATURE_NAMES])
    for pid, recs in ds.participants.items():
        for r, row in zip(recs, feats[pid]):
            w.writerow([pid, r.prompt_index, *(repr(float(v)) for v in row)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
