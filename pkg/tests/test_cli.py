import hashlib
import json
import time

import pytest

from emaformer import autodiff as ad
from emaformer import gradcheck
from emaformer.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USER, main
from emaformer.data import load_csv, validate

MINIMAL = {
    "seed": 0,
    "data": {"synthetic": {"n_participants": 20, "days": 4}},
    "models": [{"kind": "logreg", "n": [1]}, {"kind": "logreg_raw", "n": [1]}],
    "training": {"epochs": 5},
    "eval": {"k": 5},
}


def _write(tmp_path, cfg, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_data_round_trip(tmp_path, capsys):
    out = tmp_path / "d.csv"
    assert main(["gen-data", "--seed", "7", "--out", str(out)]) == EXIT_OK
    report = capsys.readouterr().out
    assert "compliance" in report
    ds = load_csv(out)
    assert validate(ds).ok
    assert abs(validate(ds).compliance - 0.628) < 0.02


def test_gen_data_same_seed_same_file(tmp_path):
    cfg = _write(tmp_path, {"n_participants": 10, "days": 3})
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["gen-data", "--config", str(cfg), "--seed", "7", "--out", str(a)])
    main(["gen-data", "--config", str(cfg), "--seed", "7", "--out", str(b)])
    assert _sha(a) == _sha(b)


def test_featurize(tmp_path):
    cfg = _write(tmp_path, {"n_participants": 3, "days": 2})
    data = tmp_path / "d.csv"
    main(["gen-data", "--config", str(cfg), "--out", str(data)])
    before = _sha(data)
    assert main(["featurize", "--data", str(data), "--out", str(tmp_path / "f.csv")]) == EXIT_OK
    assert (tmp_path / "f.csv").read_text().splitlines()[0].startswith("participant_id,prompt_index")
    assert _sha(data) == before


def test_minimal_run_is_fast_and_deterministic(tmp_path):
    cfg = _write(tmp_path, MINIMAL)
    start = time.perf_counter()
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--jobs", "1"]) == EXIT_OK
    assert time.perf_counter() - start < 60
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--jobs", "1"]) == EXIT_OK
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    for name in ("metrics.json", "attention.json", "manifest.json"):
        assert (a / name).exists()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["models"] == MINIMAL["models"]
    assert len(manifest["config_sha256"]) == 64
    assert len(list((a / "checkpoints").glob("*.npz"))) == 10
    assert (a / "metrics.csv").read_text().splitlines()[0] == "model,N,encoding,pretrain,fold,auc"


def test_run_with_transformer_writes_attention(tmp_path):
    cfg = dict(MINIMAL, models=[{"kind": "transformer", "n": [4], "pretrain": ["one"]}],
               model={"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 16, "d_pe": 4},
               training={"epochs": 1}, pretraining={"epochs": 1}, eval={"k": 2})
    assert main(["run", "--config", str(_write(tmp_path, cfg)), "--out", str(tmp_path / "o"), "--jobs", "1"]) == 0
    att = json.loads((tmp_path / "o" / "attention.json").read_text())
    (cell,) = att.values()
    assert len(cell["lag_weights"]) == 1 and len(cell["lag_weights"][0]) == 4
    assert (tmp_path / "o" / "pretrain.json").exists()
    ckpt = next((tmp_path / "o" / "checkpoints").glob("*fold0.npz"))
    data = tmp_path / "d.csv"
    main(["gen-data", "--config", str(_write(tmp_path, {"n_participants": 4, "days": 2}, "s.json")),
          "--out", str(data)])
    out = tmp_path / "att.json"
    assert main(["export-attention", "--checkpoint", str(ckpt), "--data", str(data), "--n", "4",
                 "--out", str(out)]) == EXIT_OK
    assert sum(json.loads(out.read_text())["feature_weights"].values()) == pytest.approx(1.0)


def test_missing_data_path_names_field(tmp_path, capsys):
    cfg = dict(MINIMAL, data={"path": str(tmp_path / "nope.csv")})
    assert main(["run", "--config", str(_write(tmp_path, cfg))]) == EXIT_USER
    assert "data.path" in capsys.readouterr().err


def test_missing_required_section(tmp_path, capsys):
    cfg = {k: v for k, v in MINIMAL.items() if k != "data"}
    assert main(["run", "--config", str(_write(tmp_path, cfg))]) == EXIT_USER
    assert "data" in capsys.readouterr().err


def test_unknown_key_rejected_before_work(tmp_path, capsys):
    cfg = dict(MINIMAL, training={"epochs": 5, "learning_rate": 0.1})
    out = tmp_path / "never"
    assert main(["run", "--config", str(_write(tmp_path, cfg)), "--out", str(out)]) == EXIT_USER
    assert "learning_rate" in capsys.readouterr().err
    assert not out.exists()


def test_bad_log_level(tmp_path, monkeypatch):
    monkeypatch.setenv("EMA_LOG_LEVEL", "loud")
    assert main(["grad-check", "--seeds", "1"]) == EXIT_USER


def test_grad_check_passes_and_lists_ops(capsys):
    assert main(["grad-check", "--seeds", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ("matmul", "softmax_rows", "layer_norm", "encoder_bce_N3", "lstm_bptt_N3"):
        assert name in out
    assert "max_rel_err" in out


def test_grad_check_detects_corrupted_gradient(monkeypatch, capsys):
    def bad_square(x):
        return ad._emit("bad_square", (x,), x.data ** 2, lambda g: (g * 3.0 * x.data,))

    def build(rng):
        return (lambda t: ad.sum_reduce(bad_square(t))), [ad.Tensor(rng.uniform(0.5, 1.0, size=4))]
    monkeypatch.setattr(gradcheck, "CASES", [gradcheck.GradCase("bad_square", build)])
    assert main(["grad-check", "--seeds", "1"]) == EXIT_RUNTIME
    captured = capsys.readouterr()
    assert "bad_square" in captured.out and "FAIL" in captured.out
