"""Sinusoidal position / time encodings, injected by addition or concatenation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

KINDS = {
    "pos_add": ("position", "add"),
    "pos_concat": ("position", "concat"),
    "time_add": ("time", "add"),
    "time_concat": ("time", "concat"),
}


@dataclass(frozen=True)
class EncodingStrategy:
    kind: str = "time_concat"
    d_pe: int = 16
    base: float = 10000.0
    # minutes per unit of encoded time: 240 puts consecutive prompts about 1 apart
    time_unit: float = 240.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown encoding {self.kind!r}; expected one of {sorted(KINDS)}")
        if self.base <= 1.0:
            raise ContractError("encoding base must exceed 1")
        if self.concat and (self.d_pe < 2 or self.d_pe % 2):
            raise ContractError(f"d_pe must be even and >= 2 for concat encodings, got {self.d_pe}")
        if self.time_unit <= 0:
            raise ContractError("time_unit must be positive")

    @property
    def source(self) -> str:
        return KINDS[self.kind][0]

    @property
    def concat(self) -> bool:
        return KINDS[self.kind][1] == "concat"


def sinusoidal_pe(value, d: int, base: float = 10000.0) -> np.ndarray:
    """``out[2i] = sin(value / base**(2i/d))``, ``out[2i+1]`` the matching cosine.

    ``value`` may be an array; the encoding is appended as a trailing axis.
    """
    if d % 2 or d < 2:
        raise ContractError(f"sinusoidal_pe needs an even width >= 2, got {d}")
    v = np.asarray(value, dtype=np.float64)[..., None]
    freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angles = v * freq
    out = np.empty(v.shape[:-1] + (d,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def encoding_values(timestamps, strategy: EncodingStrategy, origin=0.0) -> np.ndarray:
    """Scalar fed to the sinusoid for each row: 1..N for positions, scaled time otherwise."""
    ts = np.asarray(timestamps, dtype=np.float64)
    if strategy.source == "position":
        return np.broadcast_to(np.arange(1, ts.shape[-1] + 1, dtype=np.float64), ts.shape)
    o = np.asarray(origin, dtype=np.float64)
    if o.ndim == 1 and ts.ndim == 2:
        o = o[:, None]
    return (ts - o) / strategy.time_unit


def pe_table(timestamps, strategy: EncodingStrategy, width: int, origin=0.0) -> np.ndarray:
    return sinusoidal_pe(encoding_values(timestamps, strategy, origin), width, strategy.base)


def apply_encoding(x: Tensor, timestamps, strategy: EncodingStrategy, origin=0.0) -> Tensor:
    """Add or concatenate the encoding to ``x`` ([N, d] or [B, N, d])."""
    width = strategy.d_pe if strategy.concat else x.shape[-1]
    if not strategy.concat and width % 2:
        raise ContractError(f"additive encoding needs an even model width, got {width}")
    pe = pe_table(timestamps, strategy, width, origin)
    if pe.shape[:-1] != x.shape[:-1]:
        raise ContractError(f"timestamps shape {np.shape(timestamps)} does not match input {x.shape}")
    if strategy.concat:
        return ad.concat_last_axis([x, Tensor(pe)])
    return ad.add(x, Tensor(pe))
