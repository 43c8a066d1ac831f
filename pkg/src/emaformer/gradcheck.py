"""Finite-difference verification of tape gradients, plus the registry of
checks run by ``emaformer grad-check``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward


def finite_diff_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the input tensors to a scalar tensor. The denominator of each
    coordinate's error is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    backward(out, tape)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(*inputs).item()
            flat[i] = orig - eps
            down = f(*inputs).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


def _weights(rng, n):
    return Tensor(rng.uniform(0.5, 1.5, size=n))


def _case_matmul(rng):
    w = rng.normal(size=(3, 2))
    return (lambda a, b: ad.sum_reduce(ad.mul(ad.matmul(a, b), Tensor(w)))), [_rand(rng, 3, 4), _rand(rng, 4, 2)]


def _case_batched_matmul(rng):
    w = rng.normal(size=(2, 3, 2))
    return (lambda a, b: ad.sum_reduce(ad.mul(ad.matmul(a, b), Tensor(w)))), [_rand(rng, 2, 3, 4), _rand(rng, 4, 2)]


def _case_bmm(rng):
    w = rng.normal(size=(2, 3, 5))
    return (lambda a, b: ad.sum_reduce(ad.mul(ad.matmul(a, ad.transpose(b)), Tensor(w)))), \
        [_rand(rng, 2, 3, 4), _rand(rng, 2, 5, 4)]


def _weighted_unary(op, shape, lo=-1.0, hi=1.0):
    def build(rng):
        w = rng.normal(size=shape)
        x = _rand(rng, *shape, lo=lo, hi=hi)
        return (lambda x: ad.sum_reduce(ad.mul(op(x), Tensor(w)))), [x]
    return build


def _relu_input_away_from_kink(rng):
    w = rng.normal(size=(4, 5))
    x = rng.uniform(0.1, 1.0, size=(4, 5)) * rng.choice([-1.0, 1.0], size=(4, 5))
    return (lambda x: ad.sum_reduce(ad.mul(ad.relu(x), Tensor(w)))), [Tensor(x)]


def _case_binary(op):
    def build(rng):
        w = rng.normal(size=(3, 4))
        return (lambda a, b: ad.sum_reduce(ad.mul(op(a, b), Tensor(w)))), [_rand(rng, 3, 4), _rand(rng, 3, 4)]
    return build


def _case_add_bias(rng):
    w = rng.normal(size=(2, 3, 4))
    return (lambda x, b: ad.sum_reduce(ad.mul(ad.add_bias(x, b), Tensor(w)))), [_rand(rng, 2, 3, 4), _rand(rng, 4)]


def _case_layer_norm(rng):
    w = rng.normal(size=(2, 3, 5))
    return (lambda x, g, b: ad.sum_reduce(ad.mul(ad.layer_norm(x, g, b), Tensor(w)))), \
        [_rand(rng, 2, 3, 5), _weights(rng, 5), _rand(rng, 5)]


def _case_concat(rng):
    w = rng.normal(size=(3, 7))
    return (lambda a, b: ad.sum_reduce(ad.mul(ad.concat_last_axis([a, b]), Tensor(w)))), \
        [_rand(rng, 3, 4), _rand(rng, 3, 3)]


def _case_heads(rng):
    w = rng.normal(size=(2, 3, 8))

    def f(x):
        return ad.sum_reduce(ad.mul(ad.merge_heads(ad.scale(ad.split_heads(x, 4), 1.7), 4), Tensor(w)))
    return f, [_rand(rng, 2, 3, 8)]


def _case_gather(rng):
    w = rng.normal(size=(3, 4))
    return (lambda x: ad.sum_reduce(ad.mul(ad.gather_positions(x, [0, 1, 1], [2, 0, 2]), Tensor(w)))), \
        [_rand(rng, 2, 3, 4)]


def _case_slice(rng):
    w = rng.normal(size=(3, 2))
    return (lambda x: ad.sum_reduce(ad.mul(ad.slice_last_axis(x, 1, 3), Tensor(w)))), [_rand(rng, 3, 5)]


def _case_mean_all(rng):
    return (lambda x: ad.mul(ad.mean_reduce(ad.mul(x, x)), ad.mean_reduce(x))), [_rand(rng, 3, 4)]


def _case_mean_axis(rng):
    w = rng.normal(size=(2, 4))
    return (lambda x: ad.sum_reduce(ad.mul(ad.mean_reduce(x, axis=1), Tensor(w)))), [_rand(rng, 2, 3, 4)]


def _case_select_step(rng):
    w = rng.normal(size=(2, 4))
    return (lambda x: ad.sum_reduce(ad.mul(ad.select_step(x, 1), Tensor(w)))), [_rand(rng, 2, 3, 4)]


def _case_reshape(rng):
    w = rng.normal(size=(6, 2))
    return (lambda x: ad.sum_reduce(ad.mul(ad.reshape(x, (6, 2)), Tensor(w)))), [_rand(rng, 3, 4)]


def _case_transpose(rng):
    w = rng.normal(size=(2, 4, 3))
    return (lambda x: ad.sum_reduce(ad.mul(ad.transpose(x), Tensor(w)))), [_rand(rng, 2, 3, 4)]


def _case_dropout(rng):
    w = rng.normal(size=(3, 4))
    seed = int(rng.integers(2**31))
    # same mask on every evaluation
    return (lambda x: ad.sum_reduce(ad.mul(ad.dropout(x, 0.3, np.random.default_rng(seed), True),
                                           Tensor(w)))), [_rand(rng, 3, 4)]


def _case_bce(rng):
    y = rng.integers(0, 2, size=(6,)).astype(float)
    return (lambda p: ad.bce_loss(p, y)), [Tensor(rng.uniform(0.05, 0.95, size=6))]


def _case_mse(rng):
    y = rng.uniform(size=(3, 2))
    return (lambda p: ad.mse_loss(p, y)), [_rand(rng, 3, 2)]


def _case_encoder(n_steps: int):
    def build(rng):
        from .transformer import TransformerConfig, init_params, forward_logits
        cfg = TransformerConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16, dropout=0.0,
                                encoding="time_concat", d_pe=4, pe_base=30.0)
        params = init_params(cfg, rng)
        x = rng.uniform(0, 1, size=(2, n_steps, cfg.input_dim))
        # spread times so every PE channel varies across the window; near-constant
        # channels give key weights a true gradient of ~0, which is pure roundoff
        times = np.cumsum(rng.uniform(500, 3000, size=(2, n_steps)), axis=1)
        y = np.array([1.0, 0.0])
        names = list(params)

        def f(*tensors):
            p = dict(zip(names, tensors))
            return ad.bce_loss(ad.sigmoid(forward_logits(p, cfg, x, times)), y)
        return f, [params[n] for n in names]
    return build


def _case_lstm(rng):
    from .baselines import LSTMClassifier
    model = LSTMClassifier(input_dim=4, hidden=3, attention=True, rng=rng)
    x = rng.uniform(0, 1, size=(2, 3, 4))
    y = np.array([1.0, 0.0])
    names = list(model.params)

    def f(*tensors):
        return ad.bce_loss(model.forward(x, params=dict(zip(names, tensors))), y)
    return f, [model.params[n] for n in names]


CASES: list[GradCase] = [
    GradCase("matmul", _case_matmul),
    GradCase("matmul_shared", _case_batched_matmul),
    GradCase("matmul_batched_transpose", _case_bmm),
    GradCase("add", _case_binary(ad.add)),
    GradCase("sub", _case_binary(ad.sub)),
    GradCase("mul", _case_binary(ad.mul)),
    GradCase("scale", _weighted_unary(lambda x: ad.scale(x, -2.5), (3, 4))),
    GradCase("add_bias", _case_add_bias),
    GradCase("relu", _relu_input_away_from_kink),
    GradCase("sigmoid", _weighted_unary(ad.sigmoid, (3, 4), -3, 3)),
    GradCase("tanh", _weighted_unary(ad.tanh, (3, 4), -2, 2)),
    GradCase("softmax_rows", _weighted_unary(ad.softmax_rows, (2, 3, 4), -2, 2)),
    GradCase("layer_norm", _case_layer_norm),
    GradCase("concat_last_axis", _case_concat),
    GradCase("split_merge_heads", _case_heads),
    GradCase("gather_positions", _case_gather),
    GradCase("slice_last_axis", _case_slice),
    GradCase("mean_reduce", _case_mean_all),
    GradCase("mean_axis", _case_mean_axis),
    GradCase("select_step", _case_select_step),
    GradCase("reshape", _case_reshape),
    GradCase("transpose", _case_transpose),
    GradCase("dropout", _case_dropout),
    GradCase("bce_loss", _case_bce),
    GradCase("mse_loss", _case_mse),
    GradCase("encoder_bce_N2", _case_encoder(2)),
    GradCase("encoder_bce_N3", _case_encoder(3)),
    GradCase("lstm_bptt_N3", _case_lstm),
]


def run_suite(seeds: Sequence[int] = range(10), tol: float = 1e-4,
              cases: Sequence[GradCase] | None = None) -> list[tuple[str, float, bool]]:
    """Worst error over ``seeds`` for every registered case."""
    results = []
    for case in cases if cases is not None else CASES:
        worst = 0.0
        for seed in seeds:
            f, inputs = case.build(np.random.default_rng(seed))
            worst = max(worst, finite_diff_check(f, inputs))
        results.append((case.name, float(worst), bool(worst < tol)))
    return results
