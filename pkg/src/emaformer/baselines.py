"""Baseline classifiers: logistic regression on single prompts and LSTMs on windows.

Each model exposes ``params`` (a flat name -> Tensor map), ``forward(x, ...)``
returning completion probabilities of shape [B], and ``penalty(params)``, an
extra loss term (or None) added during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .features import N_FEATURES, RAW_DIMS

BASELINE_KINDS = ("logreg", "lstm", "attention_lstm")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class LogReg:
    """Logistic regression on the N=1 feature vector.

    ``summary=False`` keeps only the raw dims (items, completion, time of day).
    Inputs are standardised with statistics taken from the training set by
    :meth:`fit_scaler`.
    """

    summary: bool = True
    l2: float = 1e-4
    rng: np.random.Generator | None = None
    params: dict[str, Tensor] = field(default_factory=dict)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if not self.params:
            rng = self.rng if self.rng is not None else np.random.default_rng(0)
            d = len(self.dims)
            self.params = {"lr.w": _uniform(rng, d, (d, 1)), "lr.b": Tensor(np.zeros(1), requires_grad=True)}

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(range(N_FEATURES)) if self.summary else RAW_DIMS

    def _frame(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            if x.shape[1] != 1:
                raise ContractError(f"LogReg consumes N=1 windows, got N={x.shape[1]}")
            x = x[:, 0, :]
        if x.ndim != 2 or x.shape[1] != N_FEATURES:
            raise ContractError(f"LogReg expects [B, {N_FEATURES}] feature vectors, got {x.shape}")
        return x[:, list(self.dims)]

    def fit_scaler(self, x) -> None:
        z = self._frame(x)
        self.mean = z.mean(axis=0)
        sd = z.std(axis=0)
        self.std = np.where(sd > 1e-12, sd, 1.0)

    def forward(self, x, times=None, origins=None, train=False, rng=None, params=None) -> Tensor:
        p = params if params is not None else self.params
        z = self._frame(x)
        if self.mean is not None:
            z = (z - self.mean) / self.std
        logits = ad.linear(Tensor(z), p["lr.w"], p["lr.b"])
        return ad.sigmoid(ad.reshape(logits, (z.shape[0],)))

    def penalty(self, params=None):
        w = (params if params is not None else self.params)["lr.w"]
        return ad.scale(ad.sum_reduce(ad.mul(w, w)), 0.5 * self.l2)


def _lstm_params(prefix, input_dim, hidden, rng):
    return {
        prefix + "w": _uniform(rng, hidden, (input_dim, 4 * hidden)),
        prefix + "u": _uniform(rng, hidden, (hidden, 4 * hidden)),
        prefix + "b": _uniform(rng, hidden, (4 * hidden,)),
    }


def lstm_scan(x: Tensor, params: dict[str, Tensor], prefix: str, hidden: int, reverse: bool = False) -> Tensor:
    """Run one LSTM direction over [B, N, d] and return the final hidden state [B, hidden].

    Gate order in the packed weights is input, forget, cell, output.
    """
    B, N, _ = x.shape
    h = Tensor(np.zeros((B, hidden)))
    c = Tensor(np.zeros((B, hidden)))
    w, u, b = params[prefix + "w"], params[prefix + "u"], params[prefix + "b"]
    # input contributions for all steps in one product
    xw = ad.linear(x, w, b)
    steps = range(N - 1, -1, -1) if reverse else range(N)
    for t in steps:
        z = ad.add(ad.select_step(xw, t), ad.matmul(h, u))
        i = ad.sigmoid(ad.slice_last_axis(z, 0, hidden))
        f = ad.sigmoid(ad.slice_last_axis(z, hidden, 2 * hidden))
        g = ad.tanh(ad.slice_last_axis(z, 2 * hidden, 3 * hidden))
        o = ad.sigmoid(ad.slice_last_axis(z, 3 * hidden, 4 * hidden))
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
    return h


@dataclass
class LSTMClassifier:
    """Single-layer LSTM over a window; the final state feeds a sigmoid unit.

    With ``attention=True`` the inputs are first reweighted by a softmax over
    features computed from each row, and the LSTM runs in both directions.
    """

    input_dim: int = N_FEATURES
    hidden: int = 64
    attention: bool = False
    rng: np.random.Generator | None = None
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden < 1:
            raise ContractError("LSTM dimensions must be positive")
        if not self.params:
            self.params = self.init_params(self.rng if self.rng is not None else np.random.default_rng(0))

    @property
    def kind(self) -> str:
        return "attention_lstm" if self.attention else "lstm"

    def init_params(self, rng) -> dict[str, Tensor]:
        d, hd = self.input_dim, self.hidden
        params = {}
        if self.attention:
            params["att.w"] = _uniform(rng, d, (d, d))
            params["att.b"] = _uniform(rng, d, (d,))
        params.update(_lstm_params("fwd.", d, hd, rng))
        width = hd
        if self.attention:
            params.update(_lstm_params("bwd.", d, hd, rng))
            width = 2 * hd
        params["out.w"] = _uniform(rng, width, (width, 1))
        params["out.b"] = _uniform(rng, width, (1,))
        return params

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[-1] != self.input_dim:
            raise ContractError(f"LSTM expects [B, N, {self.input_dim}] windows, got {x.shape}")
        return x

    def feature_weights(self, x, params=None) -> Tensor:
        """Per-row softmax weights over input features, [B, N, d]."""
        p = params if params is not None else self.params
        if not self.attention:
            raise ContractError("vanilla LSTM has no feature attention")
        return ad.softmax_rows(ad.linear(Tensor(self._check(x)), p["att.w"], p["att.b"]))

    def forward(self, x, times=None, origins=None, train=False, rng=None, params=None) -> Tensor:
        p = params if params is not None else self.params
        x = self._check(x)
        inp = Tensor(x)
        if self.attention:
            # scaled by d so uniform weights leave the inputs unchanged
            inp = ad.scale(ad.mul(self.feature_weights(x, p), inp), float(self.input_dim))
        h = lstm_scan(inp, p, "fwd.", self.hidden)
        if self.attention:
            h = ad.concat_last_axis([h, lstm_scan(inp, p, "bwd.", self.hidden, reverse=True)])
        logits = ad.linear(h, p["out.w"], p["out.b"])
        return ad.sigmoid(ad.reshape(logits, (x.shape[0],)))

    def penalty(self, params=None):
        return None

    def mean_feature_weights(self, x) -> np.ndarray:
        """Average attention weight of each input feature over all rows of ``x``."""
        return self.feature_weights(x).data.reshape(-1, self.input_dim).mean(axis=0)


def make_baseline(kind: str, rng: np.random.Generator, summary: bool = True, hidden: int = 64):
    if kind == "logreg":
        return LogReg(summary=summary, rng=rng)
    if kind == "lstm":
        return LSTMClassifier(hidden=hidden, attention=False, rng=rng)
    if kind == "attention_lstm":
        return LSTMClassifier(hidden=hidden, attention=True, rng=rng)
    raise ContractError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")
