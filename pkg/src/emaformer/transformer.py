"""Encoder-only transformer over EMA feature windows.

Parameters live in a flat ``{name: Tensor}`` map so that checkpoints,
optimisers and gradient checks all see the same structure. The layer
functions below take that map explicitly; :class:`EMATransformer` only
bundles it with a config.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericError, Tensor
from .encoding import EncodingStrategy, apply_encoding, pe_table
from .features import N_FEATURES


@dataclass
class TransformerConfig:
    n_layers: int = 6
    n_heads: int = 8
    d_model: int = 64
    d_ff: int = 256
    dropout: float = 0.1
    encoding: str = "time_concat"
    d_pe: int = 16
    pe_base: float = 10000.0
    time_unit: float = 240.0
    input_dim: int = N_FEATURES
    pooling: str = "last"
    # additive encodings only: add the PE to raw features instead of after projection
    add_before_projection: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff, self.input_dim) < 1:
            raise ContractError("transformer dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")
        if self.pooling not in ("last", "mean"):
            raise ContractError(f"pooling must be 'last' or 'mean', got {self.pooling!r}")
        strategy = self.strategy
        if strategy.concat and self.d_pe >= self.d_model:
            raise ContractError("d_pe must be smaller than d_model for concat encodings")
        if not strategy.concat and self.add_before_projection and self.input_dim % 2:
            raise ContractError("pre-projection addition needs an even input_dim")

    @property
    def strategy(self) -> EncodingStrategy:
        return EncodingStrategy(self.encoding, self.d_pe, self.pe_base, self.time_unit)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def projection_width(self) -> int:
        return self.d_model - self.d_pe if self.strategy.concat else self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def param_shapes(cfg: TransformerConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "input.w": (cfg.input_dim, cfg.projection_width),
        "input.b": (cfg.projection_width,),
    }
    for layer in range(cfg.n_layers):
        p = f"layer{layer}."
        # no key bias: it shifts every score in a row equally, so softmax ignores it
        for m in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{m}"] = (d, d)
            if m != "k":
                shapes[p + f"attn.b{m}"] = (d,)
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "ff.w1"] = (d, f)
        shapes[p + "ff.b1"] = (f,)
        shapes[p + "ff.w2"] = (f, d)
        shapes[p + "ff.b2"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
    shapes["cls.w"] = (d, 1)
    shapes["cls.b"] = (1,)
    return shapes


def init_params(cfg: TransformerConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            params[name] = Tensor(np.ones(shape), requires_grad=True)
        elif name.endswith(".beta"):
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            fan_in = shape[0] if len(shape) == 2 else _fan_in_for_bias(name, cfg)
            params[name] = _uniform(rng, fan_in, shape)
    return params


def _fan_in_for_bias(name: str, cfg: TransformerConfig) -> int:
    if name == "input.b":
        return cfg.input_dim
    if name.endswith("ff.b2"):
        return cfg.d_ff
    return cfg.d_model


def init_impute_head(cfg: TransformerConfig, n_items: int, rng: np.random.Generator) -> dict[str, Tensor]:
    return {
        "imp.w": _uniform(rng, cfg.d_model, (cfg.d_model, n_items)),
        "imp.b": _uniform(rng, cfg.d_model, (n_items,)),
    }


def count_params(cfg: TransformerConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


# ---------------------------------------------------------------------------
# attention


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, np.ndarray]:
    """softmax(q kᵀ / sqrt(d)) v for [N, d] or [B, N, d] inputs; also returns the weights."""
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1] or q.shape[:-2] != k.shape[:-2]:
        raise ContractError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = ad.softmax_rows(scores)
    return ad.matmul(weights, v), weights.data


def multihead(x: Tensor, params: dict[str, Tensor], prefix: str, n_heads: int) -> tuple[Tensor, np.ndarray]:
    """Multi-head self-attention over [B, N, d]; attention weights come back as [B, h, N, N]."""
    B, N, _ = x.shape
    q = ad.split_heads(ad.linear(x, params[prefix + "wq"], params[prefix + "bq"]), n_heads)
    k = ad.split_heads(ad.matmul(x, params[prefix + "wk"]), n_heads)
    v = ad.split_heads(ad.linear(x, params[prefix + "wv"], params[prefix + "bv"]), n_heads)
    heads, weights = scaled_dot_attention(q, k, v)
    out = ad.linear(ad.merge_heads(heads, n_heads), params[prefix + "wo"], params[prefix + "bo"])
    return out, weights.reshape(B, n_heads, N, N)


# ---------------------------------------------------------------------------
# encoder


def _batched(x, times, origins):
    x = np.asarray(x, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if x.ndim == 2:
        x, times = x[None], times[None]
    if origins is None:
        origins = np.zeros(x.shape[0])
    return x, times, np.broadcast_to(np.asarray(origins, dtype=np.float64), (x.shape[0],))


def encoder_forward(params: dict[str, Tensor], cfg: TransformerConfig, x, times, origins=None,
                    train: bool = False, rng: np.random.Generator | None = None
                    ) -> tuple[Tensor, list[np.ndarray]]:
    """Hidden states [B, N, d_model] and per-layer attention weights [B, h, N, N]."""
    x, times, origins = _batched(x, times, origins)
    if x.shape[-1] != cfg.input_dim:
        raise ContractError(f"window width {x.shape[-1]} != input_dim {cfg.input_dim}")
    strategy = cfg.strategy
    if not strategy.concat and cfg.add_before_projection:
        x = x + pe_table(times, strategy, cfg.input_dim, origins)
        h = ad.linear(Tensor(x), params["input.w"], params["input.b"])
    else:
        h = ad.linear(Tensor(x), params["input.w"], params["input.b"])
        h = apply_encoding(h, times, strategy, origins)
    h = ad.dropout(h, cfg.dropout, rng, train)

    attention = []
    for layer in range(cfg.n_layers):
        p = f"layer{layer}."
        a, weights = multihead(h, params, p + "attn.", cfg.n_heads)
        attention.append(weights)
        h = ad.layer_norm(ad.add(h, ad.dropout(a, cfg.dropout, rng, train)),
                          params[p + "ln1.gamma"], params[p + "ln1.beta"], cfg.ln_eps)
        f = ad.relu(ad.linear(h, params[p + "ff.w1"], params[p + "ff.b1"]))
        f = ad.linear(ad.dropout(f, cfg.dropout, rng, train), params[p + "ff.w2"], params[p + "ff.b2"])
        h = ad.layer_norm(ad.add(h, ad.dropout(f, cfg.dropout, rng, train)),
                          params[p + "ln2.gamma"], params[p + "ln2.beta"], cfg.ln_eps)
        if not np.isfinite(h.data).all():
            raise NumericError(f"non-finite hidden state after encoder layer {layer}")
    return h, attention


def pool(hidden: Tensor, pooling: str = "last") -> Tensor:
    if pooling == "mean":
        return ad.mean_reduce(hidden, axis=1)
    return ad.select_step(hidden, hidden.shape[1] - 1)


def classify_logits(hidden: Tensor, params: dict[str, Tensor], pooling: str = "last") -> Tensor:
    z = ad.linear(pool(hidden, pooling), params["cls.w"], params["cls.b"])
    return ad.reshape(z, (z.shape[0],))


def classify_head(hidden: Tensor, params: dict[str, Tensor], pooling: str = "last") -> Tensor:
    """P(next prompt completed) per window, shape [B]."""
    return ad.sigmoid(classify_logits(hidden, params, pooling))


def impute_head(hidden: Tensor, params: dict[str, Tensor], batch_idx, pos_idx) -> Tensor:
    """Predicted normalised item values at the masked positions, shape [M, n_items]."""
    if len(batch_idx) == 0:
        raise ContractError("impute_head needs at least one masked position")
    rows = ad.gather_positions(hidden, batch_idx, pos_idx)
    return ad.sigmoid(ad.linear(rows, params["imp.w"], params["imp.b"]))


def forward_logits(params, cfg: TransformerConfig, x, times, origins=None, train=False, rng=None) -> Tensor:
    hidden, _ = encoder_forward(params, cfg, x, times, origins, train, rng)
    return classify_logits(hidden, params, cfg.pooling)


@dataclass
class EMATransformer:
    config: TransformerConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, config: TransformerConfig, rng: np.random.Generator) -> "EMATransformer":
        return cls(config, init_params(config, rng))

    def encoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith("imp.")}

    def forward(self, x, times, origins=None, train=False, rng=None):
        return encoder_forward(self.params, self.config, x, times, origins, train, rng)

    def classify(self, x, times, origins=None, train=False, rng=None, params=None) -> Tensor:
        """P(next prompt completed) per window as a tape-tracked tensor."""
        p = params if params is not None else self.params
        return ad.sigmoid(forward_logits(p, self.config, x, times, origins, train, rng))

    def predict_proba(self, x, times, origins=None, batch_size: int = 512) -> np.ndarray:
        x, times, origins = _batched(x, times, origins)
        out = []
        for s in range(0, x.shape[0], batch_size):
            sl = slice(s, s + batch_size)
            hidden, _ = self.forward(x[sl], times[sl], origins[sl])
            out.append(classify_head(hidden, self.params, self.config.pooling).data)
        return np.concatenate(out) if out else np.zeros(0)

    def attention(self, x, times, origins=None) -> list[np.ndarray]:
        return self.forward(x, times, origins)[1]
