import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emaformer import autodiff as ad
from emaformer.autodiff import ContractError, Tensor
from emaformer.baselines import LogReg, LSTMClassifier, make_baseline
from emaformer.data import SynthConfig, generate_synthetic
from emaformer.features import COMPLETION_DIM, LONG_CR_DIM, SHORT_CR_DIM, dataset_windows
from emaformer.gradcheck import _case_lstm, finite_diff_check
from emaformer.metrics import roc_auc
from emaformer.training import (KEPT, LIKERT_LEVELS, RANDOM, EpochLog, MaskingConfig, TrainConfig,
                                WindowArrays, apply_masking, finetune, imputation_loss,
                                n_mask_positions, predict, pretrain, split_validation, train_baseline)
from emaformer.transformer import EMATransformer, TransformerConfig, encoder_forward, init_impute_head

TINY = TransformerConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, d_pe=4, dropout=0.0)


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(SynthConfig(n_participants=20, days=5, seed=3))


@pytest.fixture(scope="module")
def win10(ds):
    return WindowArrays.from_windows(dataset_windows(ds, 10))


def _full_windows(rng, b, n):
    x = rng.uniform(0, 1, size=(b, n, 20))
    x[:, :, :8] = rng.choice(LIKERT_LEVELS, size=(b, n, 8))
    x[:, :, COMPLETION_DIM] = 1.0
    return x


# ---- masking ------------------------------------------------------------

def test_mask_positions_ceil():
    assert [n_mask_positions(n, 0.15) for n in (1, 5, 10, 20, 21)] == [1, 1, 2, 3, 4]
    assert n_mask_positions(10, 0.0) == 0


def test_zero_fraction_leaves_batch_unchanged(win10):
    m = apply_masking(win10.x, MaskingConfig(mask_fraction=0.0), np.random.default_rng(0))
    assert np.array_equal(m.x, win10.x) and m.n_masked == 0 and m.targets.shape == (0, 5)


def test_masking_config_contracts():
    with pytest.raises(ContractError):
        MaskingConfig(mask_fraction=1.0)
    with pytest.raises(ContractError):
        MaskingConfig(p_mask=0.5)
    with pytest.raises(ContractError):
        MaskingConfig(task="two")
    with pytest.raises(ContractError):
        MaskingConfig(items=("joy",))


@pytest.mark.parametrize("task,width", [("one", 1), ("five", 5), ("all", 8)])
def test_task_masks_expected_dims(task, width):
    rng = np.random.default_rng(1)
    x = _full_windows(rng, 200, 10)
    cfg = MaskingConfig(task=task, p_mask=1.0, p_keep=0.0, p_random=0.0)
    m = apply_masking(x, cfg, rng)
    assert len(m.item_dims) == width and m.targets.shape == (400, width)
    changed = np.argwhere(m.x != x)
    assert set(changed[:, 2]) == set(m.item_dims)
    rows = m.x[m.batch_idx, m.pos_idx]
    assert np.all(rows[:, list(m.item_dims)] == -1.0)


def test_masking_selects_only_completed_positions():
    rng = np.random.default_rng(2)
    x = _full_windows(rng, 300, 10)
    x[:, ::2, COMPLETION_DIM] = 0.0
    m = apply_masking(x, MaskingConfig(), rng)
    assert np.all(x[m.batch_idx, m.pos_idx, COMPLETION_DIM] == 1.0)


def test_masking_skips_windows_without_completions():
    rng = np.random.default_rng(3)
    x = _full_windows(rng, 4, 5)
    x[1, :, COMPLETION_DIM] = 0.0
    m = apply_masking(x, MaskingConfig(), rng)
    assert m.skipped == 1 and 1 not in m.batch_idx


def test_targets_are_original_values():
    rng = np.random.default_rng(4)
    x = _full_windows(rng, 50, 10)
    m = apply_masking(x, MaskingConfig(task="all"), rng)
    assert np.array_equal(m.targets, x[m.batch_idx[:, None], m.pos_idx[:, None], np.arange(8)[None, :]])
    kept = m.replacement == KEPT
    assert np.array_equal(m.x[m.batch_idx[kept], m.pos_idx[kept], :8], m.targets[kept])
    rnd = m.replacement == RANDOM
    assert np.isin(m.x[m.batch_idx[rnd], m.pos_idx[rnd], :8], LIKERT_LEVELS).all()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 25), task=st.sampled_from(["one", "five", "all"]))
def test_masking_never_touches_protected_dims(seed, n, task):
    rng = np.random.default_rng(seed)
    x = _full_windows(rng, 8, n)
    x[:, :, COMPLETION_DIM] = rng.integers(0, 2, size=(8, n))
    m = apply_masking(x, MaskingConfig(task=task), rng)
    changed_dims = set(np.argwhere(m.x != x)[:, 2].tolist())
    assert changed_dims <= set(m.item_dims)
    assert not changed_dims & {COMPLETION_DIM, LONG_CR_DIM, SHORT_CR_DIM}


def test_masking_statistics_small_sample():
    rng = np.random.default_rng(5)
    x = _full_windows(rng, 5000, 20)
    m = apply_masking(x, MaskingConfig(), rng)
    assert m.n_masked / (5000 * 20) == pytest.approx(0.15)
    mix = np.bincount(m.replacement, minlength=3) / m.n_masked
    assert np.allclose(mix, [0.8, 0.1, 0.1], atol=0.02)


# ---- imputation loss ---------------------------------------------------

def test_imputation_loss_only_uses_masked_targets(win10):
    rng = np.random.default_rng(6)
    model = EMATransformer.create(TINY, rng)
    params = {**model.params, **init_impute_head(TINY, 5, rng)}
    data = win10.take(np.arange(16))
    m = apply_masking(data.x, MaskingConfig(), rng)
    hidden, _ = encoder_forward(params, TINY, m.x, data.times, data.origins)
    loss, pred = imputation_loss(hidden, params, m)
    # residual over the whole grid, zero outside masked (position, item) pairs
    full_pred = np.zeros(data.x.shape[:2] + (5,))
    full_tgt = np.zeros_like(full_pred)
    full_pred[m.batch_idx, m.pos_idx] = pred.data
    full_tgt[m.batch_idx, m.pos_idx] = m.targets
    assert loss.item() == pytest.approx(np.sum((full_pred - full_tgt) ** 2) / m.targets.size, rel=1e-12)
    # perturbing unmasked item values' targets cannot matter
    assert loss.item() == ad.mse_loss(pred, m.targets).item()


# ---- pre-training -------------------------------------------------------

def test_pretrain_deterministic_and_seed_sensitive(win10):
    data = win10.take(np.arange(40))
    cfg = TrainConfig(epochs=3, batch_size=16)
    _, r1 = pretrain(TINY, data, None, MaskingConfig(), cfg)
    _, r2 = pretrain(TINY, data, None, MaskingConfig(), cfg)
    _, r3 = pretrain(TINY, data, None, MaskingConfig(), TrainConfig(epochs=3, batch_size=16, seed=1))
    assert r1.log.losses("train") == r2.log.losses("train")
    assert r1.train_mse == r2.train_mse
    assert r1.train_mse != r3.train_mse


def test_pretrain_constant_items_converges(ds):
    win = WindowArrays.from_windows(dataset_windows(ds, 5))
    x = win.x.copy()
    x[:, :, :8] = 0.5
    x[:, :, 10:18] = 0.0
    const = WindowArrays(x, win.times, win.origins, win.y, win.pids)
    ids = sorted(set(win.pids))
    train, val = const.by_participants(ids[:15]), const.by_participants(ids[15:])
    _, report = pretrain(TINY, train, val, MaskingConfig(), TrainConfig(epochs=10, lr=3e-3))
    assert max(report.item_mse.values()) < 1e-3
    assert set(report.item_mse) == {"happy", "bored", "sad", "angry", "restless"}


def test_pretrain_reduces_error(win10):
    data = win10.take(np.arange(64))
    _, report = pretrain(TINY, data, None, MaskingConfig(), TrainConfig(epochs=30, lr=3e-3))
    losses = report.log.losses("train")
    assert losses[-1] < 0.7 * losses[0]


def test_pretrain_fixed_masks_option(win10):
    data = win10.take(np.arange(20))
    _, report = pretrain(TINY, data, None, MaskingConfig(resample_each_epoch=False), TrainConfig(epochs=2))
    assert len(report.log.losses("train")) == 2


# ---- fine-tuning --------------------------------------------------------

def test_lr_zero_leaves_parameters_bitwise(win10):
    model = EMATransformer.create(TINY, np.random.default_rng(0))
    before = {k: v.data.copy() for k, v in model.params.items()}
    finetune(model, win10.take(np.arange(64)), None, TrainConfig(lr=0.0, epochs=2))
    assert all(np.array_equal(before[k], v.data) for k, v in model.params.items())


def test_finetune_rejects_overlapping_validation(win10):
    with pytest.raises(ContractError):
        finetune(TINY, win10, win10, TrainConfig(epochs=1))


def test_finetune_rejects_width_mismatch(win10):
    bad = WindowArrays(win10.x[:, :, :10], win10.times, win10.origins, win10.y, win10.pids)
    with pytest.raises(ContractError):
        finetune(TINY, bad, None, TrainConfig(epochs=1))


def test_validation_split_disjoint():
    ids = [f"p{i:03d}" for i in range(37)]
    train, val = split_validation(ids, 0.1, np.random.default_rng(0))
    assert not set(train) & set(val)
    assert sorted(train + val) == sorted(ids) and len(val) == 4


def test_finetune_deterministic(win10):
    ids = sorted(set(win10.pids))
    tr, va = win10.by_participants(ids[:16]), win10.by_participants(ids[16:])
    cfg = TrainConfig(epochs=3, batch_size=32)
    m1, l1 = finetune(TransformerConfig(**{**TINY.to_dict(), "dropout": 0.1}), tr, va, cfg)
    m2, l2 = finetune(TransformerConfig(**{**TINY.to_dict(), "dropout": 0.1}), tr, va, cfg)
    assert l1.to_csv() == l2.to_csv()
    assert all(np.array_equal(m1.params[k].data, m2.params[k].data) for k in m1.params)


def test_early_stopping_restores_best(win10):
    ids = sorted(set(win10.pids))
    tr, va = win10.by_participants(ids[:16]), win10.by_participants(ids[16:])
    model, log = finetune(TINY, tr, va, TrainConfig(epochs=40, lr=1e-2, patience=2))
    val_losses = log.losses("val")
    final = float(np.mean(-(va.y * np.log(np.clip(predict(model, va), 1e-7, 1)) +
                            (1 - va.y) * np.log(np.clip(1 - predict(model, va), 1e-7, 1)))))
    assert final == pytest.approx(min(val_losses), abs=1e-12)
    assert len(val_losses) < 40


def test_epoch_log_csv():
    log = EpochLog()
    log.add(1, "train", 0.5, 0.75)
    log.add(1, "val", 0.25)
    assert log.to_csv() == "epoch,split,loss,auc\n1,train,0.5,0.75\n1,val,0.25,\n"


def test_small_overfit(win10):
    data = win10.take(np.arange(40))
    model, _ = finetune(TransformerConfig(n_layers=1, n_heads=2, d_model=32, d_ff=64, d_pe=8, dropout=0.0),
                        data, None, TrainConfig(epochs=150, lr=3e-3, batch_size=20))
    p = np.clip(predict(model, data), 1e-7, 1 - 1e-7)
    assert -np.mean(data.y * np.log(p) + (1 - data.y) * np.log(1 - p)) < 0.1


# ---- baselines ----------------------------------------------------------

def _n1(rng, n, margin=0.0):
    x = rng.normal(size=(n, 1, 20))
    s = x[:, 0, 3] + x[:, 0, 15]
    x[:, 0, 3] += np.sign(s) * margin
    y = (s > 0).astype(float)
    return WindowArrays(x, np.zeros((n, 1)), np.zeros(n), y, np.array([f"p{i % 5}" for i in range(n)]))


def test_logreg_separable_training_auc_one():
    data = _n1(np.random.default_rng(0), 200, margin=0.5)
    model, _ = train_baseline("logreg", data, None, TrainConfig(epochs=100, lr=0.05))
    assert roc_auc(predict(model, data), data.y) == 1.0


def test_logreg_raw_only_cannot_see_summary_dims():
    data = _n1(np.random.default_rng(1), 300)
    summary, _ = train_baseline("logreg", data, None, TrainConfig(epochs=60, lr=0.05), summary=True)
    raw, _ = train_baseline("logreg", data, None, TrainConfig(epochs=60, lr=0.05), summary=False)
    assert raw.params["lr.w"].shape == (10, 1) and summary.params["lr.w"].shape == (20, 1)
    assert roc_auc(predict(summary, data), data.y) > roc_auc(predict(raw, data), data.y) + 0.1


def test_logreg_penalty():
    model = LogReg(params={"lr.w": Tensor(np.full((20, 1), 2.0)), "lr.b": Tensor(np.zeros(1))})
    assert model.penalty().item() == pytest.approx(0.5 * 1e-4 * 80.0)


def test_wrong_framing_rejected():
    with pytest.raises(ContractError):
        LogReg().forward(np.zeros((3, 5, 20)))
    with pytest.raises(ContractError):
        LSTMClassifier().forward(np.zeros((3, 20)))
    with pytest.raises(ContractError):
        make_baseline("svm", np.random.default_rng(0))


def test_lstm_bptt_gradcheck():
    for seed in range(3):
        f, inputs = _case_lstm(np.random.default_rng(seed))
        assert finite_diff_check(f, inputs) < 1e-4


def test_vanilla_lstm_gradcheck():
    rng = np.random.default_rng(7)
    model = LSTMClassifier(input_dim=4, hidden=3, rng=rng)
    x = rng.uniform(size=(2, 3, 4))
    y = np.array([0.0, 1.0])
    names = list(model.params)
    err = finite_diff_check(lambda *t: ad.bce_loss(model.forward(x, params=dict(zip(names, t))), y),
                            [model.params[n] for n in names])
    assert err < 1e-4


def test_lstm_final_state_reference():
    rng = np.random.default_rng(8)
    model = LSTMClassifier(input_dim=3, hidden=2, rng=rng)
    x = rng.normal(size=(1, 4, 3))
    p = {k: v.data for k, v in model.params.items()}
    sig = lambda z: 1 / (1 + np.exp(-z))
    h, c = np.zeros(2), np.zeros(2)
    for t in range(4):
        z = x[0, t] @ p["fwd.w"] + h @ p["fwd.u"] + p["fwd.b"]
        i, f, g, o = sig(z[:2]), sig(z[2:4]), np.tanh(z[4:6]), sig(z[6:])
        c = f * c + i * g
        h = o * np.tanh(c)
    ref = sig(h @ p["out.w"] + p["out.b"])
    assert model.forward(x).data[0] == pytest.approx(ref[0], rel=1e-12)


def test_attention_lstm_feature_weights(win10):
    model = LSTMClassifier(attention=True, hidden=8, rng=np.random.default_rng(0))
    w = model.feature_weights(win10.x[:5]).data
    assert w.shape == (5, 10, 20) and np.allclose(w.sum(axis=-1), 1.0)
    assert model.mean_feature_weights(win10.x[:5]).sum() == pytest.approx(1.0)
    with pytest.raises(ContractError):
        LSTMClassifier().feature_weights(win10.x[:5])


def test_lstm_learns_sequence_signal():
    rng = np.random.default_rng(9)
    x = rng.uniform(size=(300, 5, 20))
    y = (x[:, 0, 2] > 0.5).astype(float)  # oldest step carries the label
    data = WindowArrays(x, np.zeros((300, 5)), np.zeros(300), y, np.array(["p"] * 300))
    model, _ = train_baseline("lstm", data, None, TrainConfig(epochs=30, lr=1e-2, batch_size=32), hidden=16)
    assert roc_auc(predict(model, data), y) > 0.9
