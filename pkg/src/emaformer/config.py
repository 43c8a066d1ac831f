"""Run configuration: JSON schema, validation and conversion to experiment objects.

A run config looks like::

    {
      "seed": 0,
      "data": {"synthetic": {"n_participants": 200, "days": 14}},   # or {"path": "ema.csv"}
      "featurize": {"n": [10]},
      "model": {"n_layers": 2, "d_model": 32},                      # transformer defaults
      "models": [
        {"kind": "logreg", "n": [1]},
        {"kind": "transformer", "encodings": ["time_concat"], "pretrain": ["none", "five"]}
      ],
      "masking": {"mask_fraction": 0.15},
      "training": {"epochs": 100, "lr": 0.001},
      "pretraining": {"epochs": 30},
      "eval": {"k": 5, "val_fraction": 0.1},
      "output": "runs/demo"
    }

Unknown keys anywhere are rejected before any work starts.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import jsonschema

from .autodiff import ContractError
from .data import SynthConfig
from .encoding import KINDS
from .evaluation import MODEL_KINDS, PRETRAIN_OPTIONS, ExperimentSpec, ModelSpec
from .training import MASK_TASKS, MaskingConfig, TrainConfig
from .transformer import TransformerConfig


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}


def _obj(props: dict, required: tuple[str, ...] = ()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


def _from_dataclass(cls, overrides: dict | None = None, skip: tuple[str, ...] = ()) -> dict:
    props = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        default = f.default
        if isinstance(default, bool):
            props[f.name] = _BOOL
        elif isinstance(default, int):
            props[f.name] = _INT
        elif isinstance(default, float):
            props[f.name] = _NUM
        elif isinstance(default, str):
            props[f.name] = _STR
        else:
            props[f.name] = {}
    props.update(overrides or {})
    return _obj(props)


_TRAIN = _from_dataclass(TrainConfig, {"clip_norm": {"type": ["number", "null"]}}, skip=("seed",))

SCHEMA = _obj({
    "seed": _INT,
    "data": {
        "type": "object",
        "properties": {
            "path": _STR,
            "synthetic": _from_dataclass(SynthConfig, skip=("seed",)),
        },
        "additionalProperties": False,
        "minProperties": 1,
        "maxProperties": 1,
    },
    "featurize": _obj({"n": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}}),
    "model": _from_dataclass(TransformerConfig, {"encoding": {"enum": sorted(KINDS)}}),
    "models": {"type": "array", "minItems": 1, "items": _obj({
        "kind": {"enum": list(MODEL_KINDS)},
        "name": _STR,
        "n": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "encodings": {"type": "array", "items": {"enum": sorted(KINDS)}, "minItems": 1},
        "pretrain": {"type": "array", "items": {"enum": list(PRETRAIN_OPTIONS)}, "minItems": 1},
        "model": {"type": "object"},
    }, required=("kind",))},
    "masking": _from_dataclass(MaskingConfig, {
        "task": {"enum": list(MASK_TASKS)},
        "items": {"type": ["array", "null"], "items": _STR},
    }),
    "training": _TRAIN,
    "pretraining": _TRAIN,
    "eval": _obj({"k": _INT, "val_fraction": _NUM, "align_targets": _BOOL, "attention_fold": _INT}),
    "output": _STR,
}, required=("data", "models"))


@dataclass
class RunConfig:
    raw: dict
    seed: int
    data_path: Path | None
    synth: SynthConfig | None
    spec: ExperimentSpec
    output: Path | None
    source: Path | None = None
    extra: dict = field(default_factory=dict)

    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _path_of(err: jsonschema.ValidationError) -> str:
    parts = []
    for p in err.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else (f".{p}" if parts else str(p)))
    return "".join(parts) or "<root>"


def validate_raw(raw: dict) -> None:
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        where = _path_of(err)
        if err.validator == "required":
            missing = err.message.split("'")[1]
            where = f"{where}.{missing}" if where != "<root>" else missing
            raise ConfigError(f"config error at {where}: required field missing")
        raise ConfigError(f"config error at {where}: {err.message}")


def _build(cls, section: dict, **extra):
    try:
        return cls(**{**section, **extra})
    except (ContractError, ValueError, TypeError) as exc:
        raise ConfigError(f"config error in {cls.__name__}: {exc}") from exc


def parse_run_config(raw: dict, seed: int | None = None, out: str | Path | None = None,
                     data: str | Path | None = None, source: Path | None = None) -> RunConfig:
    """Validate ``raw`` and apply command-line overrides."""
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output"] = str(out)
    if data is not None:
        raw["data"] = {"path": str(data)}
    validate_raw(raw)
    root_seed = int(raw.get("seed", 0))

    data_path, synth = None, None
    if "path" in raw["data"]:
        data_path = Path(raw["data"]["path"])
        if source is not None and not data_path.is_absolute():
            data_path = (source.parent / data_path)
        if not data_path.exists():
            raise ConfigError(f"config error at data.path: file not found: {data_path}")
    else:
        synth = _build(SynthConfig, raw["data"]["synthetic"], seed=root_seed)
        try:
            synth.validate()
        except ValueError as exc:
            raise ConfigError(f"config error at data.synthetic: {exc}") from exc

    default_n = tuple(raw.get("featurize", {}).get("n", [10]))
    base_model = raw.get("model", {})
    _build(TransformerConfig, base_model)
    models = []
    for i, m in enumerate(raw["models"]):
        kind = m["kind"]
        n = tuple(m.get("n", [1] if kind.startswith("logreg") else list(default_n)))
        overrides = {**base_model, **m.get("model", {})} if kind == "transformer" else m.get("model", {})
        encodings = tuple(m.get("encodings", [base_model.get("encoding", "time_concat")]))
        if kind == "transformer":
            for e in encodings:
                _build(TransformerConfig, {**overrides, "encoding": e})
        elif kind.startswith("logreg") and overrides:
            raise ConfigError(f"config error at models[{i}].model: logistic regression takes no model options")
        elif set(overrides) - {"hidden"}:
            raise ConfigError(f"config error at models[{i}].model: LSTMs only accept 'hidden'")
        try:
            models.append(ModelSpec(kind, m.get("name"), n, encodings, tuple(m.get("pretrain", ["none"])), overrides))
        except ContractError as exc:
            raise ConfigError(f"config error at models[{i}]: {exc}") from exc

    ev = raw.get("eval", {})
    train = _build(TrainConfig, raw.get("training", {}), seed=root_seed)
    pre = _build(TrainConfig, raw["pretraining"], seed=root_seed) if "pretraining" in raw else None
    mask_raw = dict(raw.get("masking", {}))
    if mask_raw.get("items") is not None:
        mask_raw["items"] = tuple(mask_raw["items"])
    masking = _build(MaskingConfig, mask_raw)
    try:
        spec = ExperimentSpec(tuple(models), k=ev.get("k", 5), seed=root_seed,
                              val_fraction=ev.get("val_fraction", 0.1), train=train, pretrain_train=pre,
                              masking=masking, align_targets=ev.get("align_targets", False),
                              attention_fold=ev.get("attention_fold", 0))
        spec.cells()
    except ContractError as exc:
        raise ConfigError(f"config error: {exc}") from exc
    if not 0.0 < spec.val_fraction < 1.0:
        raise ConfigError("config error at eval.val_fraction: must lie in (0, 1)")
    if spec.k < 2:
        raise ConfigError("config error at eval.k: need at least 2 folds")
    output = Path(raw["output"]) if "output" in raw else None
    return RunConfig(raw, root_seed, data_path, synth, spec, output, source)


def load_run_config(path: str | Path, **overrides) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_run_config(raw, source=path, **overrides)


def synth_from_json(path: str | Path | None, seed: int | None) -> SynthConfig:
    """SynthConfig from an optional JSON file (either bare fields or a run config's data section)."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read synthetic config {path}: {exc}") from exc
        raw = raw.get("data", {}).get("synthetic", raw) if "data" in raw else raw
        raw = {k: v for k, v in raw.items() if k != "seed"} if seed is not None else raw
    errors = list(jsonschema.Draft7Validator(_from_dataclass(SynthConfig)).iter_errors(raw))
    if errors:
        raise ConfigError(f"config error at {_path_of(errors[0])}: {errors[0].message}")
    cfg = _build(SynthConfig, raw)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"config error: {exc}") from exc
    return cfg
