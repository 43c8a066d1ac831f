"""EMA study logs: records, CSV round-tripping, validation and a synthetic
study generator calibrated to a target compliance rate."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

ITEMS = ("enthusiastic", "happy", "relaxed", "bored", "sad", "angry", "restless", "urge")
CSV_COLUMNS = ("participant_id", "prompt_index", "timestamp_min", "completed") + ITEMS
MINUTES_PER_DAY = 1440.0


class DataError(ValueError):
    """Raised for malformed EMA logs."""


@dataclass(frozen=True)
class PromptRecord:
    participant_id: str
    prompt_index: int
    timestamp: float
    completed: bool
    items: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.completed != (self.items is not None):
            raise DataError(
                f"{self.participant_id}#{self.prompt_index}: items must be present iff completed")


@dataclass
class Dataset:
    participants: dict[str, list[PromptRecord]]
    provenance: str = "loaded"

    def __eq__(self, other) -> bool:
        return isinstance(other, Dataset) and self.participants == other.participants

    @property
    def n_prompts(self) -> int:
        return sum(len(r) for r in self.participants.values())

    def ids(self) -> list[str]:
        return list(self.participants)

    def subset(self, ids: Iterable[str]) -> "Dataset":
        return Dataset({i: self.participants[i] for i in ids}, self.provenance)


# ---------------------------------------------------------------------------
# CSV


def _fmt_time(t: float) -> str:
    return repr(float(t))


def write_csv(ds: Dataset, path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for pid, recs in ds.participants.items():
        for r in recs:
            items = [str(v) for v in r.items] if r.items is not None else [""] * len(ITEMS)
            w.writerow([pid, r.prompt_index, _fmt_time(r.timestamp), int(r.completed), *items])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def load_csv(path: str | Path) -> Dataset:
    """Read an EMA log; rows are grouped by participant and sorted by timestamp."""
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_csv(fh.read())


def parse_csv(text: str) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty file: header row required") from None
    header = [h.strip() for h in header]
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    col = {c: header.index(c) for c in CSV_COLUMNS}

    grouped: dict[str, list[tuple[int, PromptRecord]]] = {}
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            raise DataError(f"row {rowno}: expected {len(header)} fields, got {len(row)}")
        get = lambda name: row[col[name]].strip()  # noqa: E731
        pid = get("participant_id")
        if not pid:
            raise DataError(f"row {rowno}, column participant_id: empty")
        try:
            idx = int(get("prompt_index"))
        except ValueError:
            raise DataError(f"row {rowno}, column prompt_index: not an integer") from None
        try:
            ts = float(get("timestamp_min"))
        except ValueError:
            raise DataError(f"row {rowno}, column timestamp_min: not a number") from None
        if not math.isfinite(ts) or ts < 0:
            raise DataError(f"row {rowno}, column timestamp_min: must be a non-negative number")
        done = get("completed")
        if done not in ("0", "1"):
            raise DataError(f"row {rowno}, column completed: expected 0 or 1, got {done!r}")
        completed = done == "1"
        cells = [get(name) for name in ITEMS]
        if completed:
            items = []
            for name, cell in zip(ITEMS, cells):
                try:
                    v = int(cell)
                except ValueError:
                    raise DataError(f"row {rowno}, column {name}: expected Likert 1..5, got {cell!r}") from None
                if not 1 <= v <= 5:
                    raise DataError(f"row {rowno}, column {name}: Likert value {v} outside 1..5")
                items.append(v)
            item_tuple: tuple[int, ...] | None = tuple(items)
        else:
            filled = [n for n, c in zip(ITEMS, cells) if c]
            if filled:
                raise DataError(f"row {rowno}, column {filled[0]}: items must be empty when completed=0")
            item_tuple = None
        grouped.setdefault(pid, []).append((rowno, PromptRecord(pid, idx, ts, completed, item_tuple)))

    participants = {}
    for pid, rows in grouped.items():
        rows.sort(key=lambda r: r[1].timestamp)
        for (_, a), (rowno, b) in zip(rows, rows[1:]):
            if b.timestamp <= a.timestamp:
                raise DataError(f"row {rowno}, column timestamp_min: participant {pid} has "
                                f"non-increasing timestamps ({a.timestamp} then {b.timestamp})")
        seen = [r.prompt_index for _, r in rows]
        if seen != sorted(seen) or len(set(seen)) != len(seen):
            raise DataError(f"participant {pid}: prompt_index not strictly increasing in time order")
        participants[pid] = [r for _, r in rows]
    return Dataset(participants, "loaded")


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    n_participants: int
    n_prompts: int
    prompts_per_participant: dict[str, int]
    compliance: float
    timestamp_violations: list[str] = field(default_factory=list)
    item_violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.timestamp_violations and not self.item_violations

    def summary(self) -> str:
        return (f"participants={self.n_participants} prompts={self.n_prompts} "
                f"compliance={self.compliance:.4f} "
                f"timestamp_violations={len(self.timestamp_violations)} "
                f"item_violations={len(self.item_violations)}")


def validate(ds: Dataset) -> ValidationReport:
    counts, ts_bad, item_bad = {}, [], []
    done = total = 0
    for pid, recs in ds.participants.items():
        counts[pid] = len(recs)
        for a, b in zip(recs, recs[1:]):
            if b.timestamp <= a.timestamp:
                ts_bad.append(f"{pid}#{b.prompt_index}: {b.timestamp} after {a.timestamp}")
        for r in recs:
            total += 1
            done += r.completed
            if r.items is not None:
                for name, v in zip(ITEMS, r.items):
                    if not 1 <= v <= 5:
                        item_bad.append(f"{pid}#{r.prompt_index}: {name}={v}")
    return ValidationReport(len(counts), total, counts, done / total if total else 0.0, ts_bad, item_bad)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    n_participants: int = 200
    days: int = 14
    prompts_per_day: float = 4.0
    inter_prompt_hours: float = 4.0
    jitter_minutes: float = 45.0
    day_start_hour: float = 9.0
    target_compliance: float = 0.628
    baseline_sd: float = 0.5
    rho: float = 0.7
    # per-participant habits: sd of per-daily-slot offsets to the time-of-day term, in units of w_tod
    routine_sd: float = 6.0
    w_bored: float = 0.6
    w_angry: float = 0.4
    w_streak: float = 0.8
    w_tod: float = 0.3
    late_evening_hour: float = 20.0
    # 0: emotions at the prompt itself drive its non-response; 1: the previous prompt's
    emotion_lag: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.n_participants < 1 or self.days < 1 or self.prompts_per_day <= 0:
            raise ValueError("n_participants, days and prompts_per_day must be positive")
        if self.inter_prompt_hours <= 0 or self.jitter_minutes < 0:
            raise ValueError("inter_prompt_hours must be positive and jitter non-negative")
        if not 0.0 < self.target_compliance < 1.0:
            raise ValueError("target_compliance must lie in (0, 1)")
        if self.jitter_minutes * 2 >= self.inter_prompt_hours * 60:
            raise ValueError("jitter too large: prompts could swap order")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.routine_sd < 0 or self.baseline_sd < 0:
            raise ValueError("routine_sd and baseline_sd must be non-negative")
        if self.emotion_lag not in (0, 1):
            raise ValueError("emotion_lag must be 0 or 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# latent emotions are stationary N(0, 1); these cut points give Likert 1..5
LIKERT_CUTS = np.array([-1.0, -0.35, 0.35, 1.0])


def _quantize(latent: np.ndarray) -> np.ndarray:
    return np.searchsorted(LIKERT_CUTS, latent) + 1


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _schedule(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Prompt times in minutes and within-day slot numbers for one participant."""
    gap = cfg.inter_prompt_hours * 60.0
    base = int(math.floor(cfg.prompts_per_day))
    frac = cfg.prompts_per_day - base
    times, slots = [], []
    for day in range(cfg.days):
        k = base + (1 if frac > 0 and rng.random() < frac else 0)
        start = day * MINUTES_PER_DAY + cfg.day_start_hour * 60.0
        for s in range(k):
            times.append(start + s * gap + rng.uniform(-cfg.jitter_minutes, cfg.jitter_minutes))
            slots.append(s)
    return np.asarray(times), np.asarray(slots, dtype=int)


def _simulate(cfg: SynthConfig, baselines: np.ndarray, rng: np.random.Generator):
    """Yields (times, completed, likert[n, 8]) per participant."""
    bored_i, angry_i = ITEMS.index("bored"), ITEMS.index("angry")
    late = cfg.late_evening_hour * 60.0
    innov = math.sqrt(1.0 - cfg.rho ** 2)
    for b in baselines:
        times, slots = _schedule(cfg, rng)
        n = len(times)
        routine = cfg.routine_sd * rng.standard_normal(int(math.ceil(cfg.prompts_per_day)))
        latent = np.empty((n, len(ITEMS)))
        latent[0] = rng.standard_normal(len(ITEMS))
        for j in range(1, n):
            latent[j] = cfg.rho * latent[j - 1] + innov * rng.standard_normal(len(ITEMS))
        likert = _quantize(latent)
        centered = likert - 3.0
        completed = np.zeros(n, dtype=bool)
        u = rng.random(n)
        for j in range(n):
            src = j - cfg.emotion_lag
            bored = centered[src, bored_i] if src >= 0 else 0.0
            angry = centered[src, angry_i] if src >= 0 else 0.0
            recent = completed[max(0, j - 3):j]
            streak = recent.mean() if recent.size else 1.0
            evening = 1.0 if (times[j] % MINUTES_PER_DAY) >= late else 0.0
            p_miss = _sigmoid(-b + cfg.w_bored * bored + cfg.w_angry * angry
                              - cfg.w_streak * streak + cfg.w_tod * (evening + routine[slots[j]]))
            completed[j] = u[j] >= p_miss
        yield times, completed, likert


def calibrate_baseline_mean(cfg: SynthConfig, z: np.ndarray, rng: np.random.Generator,
                            tol: float = 0.005) -> float:
    """Bisection on the mean baseline logit so the generated study hits the target compliance.

    Each evaluation replays ``rng`` from its current state with baselines
    ``mu + baseline_sd * z``. No draw in the simulation depends on ``mu``, so
    the rate is monotone in it and the final study realises the found rate.
    """
    state = rng.bit_generator.state

    def rate(mu: float) -> float:
        sim_rng = np.random.default_rng()
        sim_rng.bit_generator.state = state
        done = total = 0
        for _, c, _ in _simulate(cfg, mu + cfg.baseline_sd * z, sim_rng):
            done += int(c.sum())
            total += c.size
        return done / total

    lo, hi = -6.0, 6.0
    mid = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        r = rate(mid)
        if abs(r - cfg.target_compliance) < tol / 4:
            break
        if r < cfg.target_compliance:
            lo = mid
        else:
            hi = mid
    return mid


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    width = max(3, len(str(cfg.n_participants - 1)))
    z = rng.standard_normal(cfg.n_participants)
    mu = calibrate_baseline_mean(cfg, z, rng)
    baselines = mu + cfg.baseline_sd * z
    participants = {}
    for i, (times, completed, likert) in enumerate(_simulate(cfg, baselines, rng)):
        pid = f"P{i:0{width}d}"
        times = np.round(times, 3)
        participants[pid] = [
            PromptRecord(pid, j + 1, float(times[j]), bool(completed[j]),
                         tuple(int(v) for v in likert[j]) if completed[j] else None)
            for j in range(len(times))
        ]
    return Dataset(participants, f"synthetic(seed={cfg.seed}, config={cfg.digest()})")
