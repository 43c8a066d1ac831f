"""``emaformer`` command line: gen-data, featurize, run, grad-check, export-attention.

Exit codes: 0 success, 1 user or config error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .autodiff import ContractError
from .checkpoint import load_model, save
from .config import ConfigError, load_run_config, synth_from_json
from .data import DataError, generate_synthetic, load_csv, validate, write_csv
from .evaluation import extract_attention_summary, run_experiment
from .features import dataset_windows, write_feature_csv
from .gradcheck import run_suite
from .training import WindowArrays
from .transformer import EMATransformer

log = logging.getLogger("emaformer")

EXIT_OK, EXIT_USER, EXIT_RUNTIME = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("EMA_LOG_LEVEL", "warn").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"EMA_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_gen_data(args) -> int:
    cfg = synth_from_json(args.config, args.seed)
    out = Path(args.out or f"ema_synthetic_seed{cfg.seed}.csv")
    ds = generate_synthetic(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out)
    print(f"wrote {out}")
    print(validate(ds).summary())
    return EXIT_OK


def cmd_featurize(args) -> int:
    if not args.data:
        raise ConfigError("featurize needs --data PATH")
    ds = load_csv(args.data)
    out = Path(args.out or "features.csv")
    write_feature_csv(ds, out)
    print(f"wrote {out} ({ds.n_prompts} rows)")
    return EXIT_OK


def _cell_name(key) -> str:
    model, n, enc, pre = key
    return f"{model}_N{n}_{enc}_{pre}"


def cmd_run(args) -> int:
    if not args.config:
        raise ConfigError("run needs --config PATH")
    rc = load_run_config(args.config, seed=args.seed, out=args.out, data=args.data)
    out = rc.output or Path("run_output")
    if rc.data_path is not None:
        ds = load_csv(rc.data_path)
        data_info = {"path": str(rc.data_path), "sha256": _sha256(rc.data_path)}
    else:
        ds = generate_synthetic(rc.synth)
        data_info = {"synthetic": rc.raw["data"]["synthetic"], "seed": rc.synth.seed,
                     "provenance": ds.provenance,
                     "sha256": hashlib.sha256(write_csv(ds).encode()).hexdigest()}
    report = validate(ds)
    if not report.ok:
        raise DataError(f"dataset failed validation: {report.summary()}")
    log.info("data: %s", report.summary())

    table, outcomes = run_experiment(ds, rc.spec, jobs=args.jobs)

    # every file below is written from this process only
    ckpt_dir, log_dir = out / "checkpoints", out / "logs"
    for d in (out, ckpt_dir, log_dir):
        d.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "metrics.csv")
    table.to_json(out / "metrics.json")
    attention, pretrain = {}, {}
    for o in outcomes:
        name = f"{_cell_name(o.key)}_fold{o.fold}"
        if o.checkpoint is not None:
            save(o.checkpoint, ckpt_dir / f"{name}.npz")
        if o.log_csv is not None:
            (log_dir / f"{name}.csv").write_text(o.log_csv, encoding="utf-8")
        if o.attention is not None:
            attention[_cell_name(o.key)] = {"fold": o.fold, **o.attention}
        if o.pretrain_errors is not None:
            pretrain.setdefault(_cell_name(o.key), {})[str(o.fold)] = o.pretrain_errors
    (out / "attention.json").write_text(json.dumps(attention, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if pretrain:
        (out / "pretrain.json").write_text(json.dumps(pretrain, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest = {
        "config": rc.raw,
        "config_sha256": rc.digest(),
        "seed": rc.seed,
        "data": data_info,
        "cells": [list(c.key) for c in table.cells],
        "versions": {"emaformer": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "command": ["emaformer", *sys.argv[1:]],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(table.summary())
    print(f"outputs in {out}")
    failed = [c for c in table.cells if c.status != "ok"]
    for c in failed:
        print(f"cell {_cell_name(c.key)} failed: {c.diagnostics[0].splitlines()[0]}", file=sys.stderr)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = run_suite(seeds=range(args.seeds), tol=args.tol)
    width = max(len(name) for name, _, _ in results)
    for name, worst, ok in results:
        print(f"{name:<{width}}  max_rel_err={worst:.3e}  {'PASS' if ok else 'FAIL'}")
    failed = [name for name, _, ok in results if not ok]
    if failed:
        print(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"all {len(results)} checks passed (tol {args.tol:g})")
    return EXIT_OK


def cmd_export_attention(args) -> int:
    if not args.checkpoint or not args.data:
        raise ConfigError("export-attention needs --checkpoint PATH and --data PATH")
    model = load_model(args.checkpoint)
    if not isinstance(model, EMATransformer):
        raise ConfigError(f"{args.checkpoint} is not a transformer checkpoint")
    ds = load_csv(args.data)
    windows = dataset_windows(ds, args.n)
    if not windows:
        raise ConfigError(f"no windows of length {args.n} in {args.data}")
    summary = extract_attention_summary(model, WindowArrays.from_windows(windows), query=args.query)
    out = Path(args.out or "attention.json")
    out.write_text(json.dumps(summary.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emaformer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic EMA study as CSV")
    p.add_argument("--config", help="JSON with SynthConfig fields (or a run config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("featurize", help="write per-prompt feature vectors as CSV")
    p.add_argument("--data", help="EMA CSV")
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("run", help="cross-validated experiment from a run config")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int, help="override the root seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--data", help="use this EMA CSV instead of the configured data")
    p.add_argument("--jobs", type=int, default=None, help="parallel fold workers (default: all cores)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grad-check", help="finite-difference check of every differentiable op")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export-attention", help="per-lag and per-feature attention summary of a checkpoint")
    p.add_argument("--checkpoint", help="transformer checkpoint (.npz)")
    p.add_argument("--data", help="EMA CSV to draw windows from")
    p.add_argument("--n", type=int, default=10, help="window length")
    p.add_argument("--query", choices=("all", "last"), default="all")
    p.add_argument("--out", help="output JSON path")
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        if getattr(args, "jobs", None) is not None and args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        return args.func(args)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (ContractError, ArithmeticError, OSError, RuntimeError) as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
