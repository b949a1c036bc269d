"""Top-k sparsification and uplink payload sizing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import log2_binomial_exact

LN2 = math.log(2.0)


@dataclass(frozen=True)
class SparsityLevel:
    """Gradient sparsity ``delta = d / k`` for a model of dimension ``d``."""

    delta: float
    d: int

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ValueError("d must be positive")
        if not self.delta >= 1.0:
            raise ValueError(f"delta must be >= 1, got {self.delta}")

    @property
    def k(self) -> int:
        return k_from_delta(self.delta, self.d)

    @property
    def effective_delta(self) -> float:
        return self.d / self.k


def k_from_delta(delta: float, d: int) -> int:
    return int(min(max(round(d / delta), 1), d))


@dataclass(frozen=True)
class PayloadSize:
    bits_values: float
    bits_positions: float
    bits_total: float


def top_k(x: np.ndarray, k: int) -> np.ndarray:
    """Keep the ``k`` largest-magnitude entries of ``x``, zero the rest.

    Ties in magnitude keep the lower index first.
    """
    x = np.asarray(x)
    d = x.size
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}], got {k}")
    if k == d:
        return x.copy()
    # stable sort on -|x| keeps ascending index order within equal magnitudes
    keep = np.argsort(-np.abs(x), kind="stable")[:k]
    out = np.zeros_like(x)
    out[keep] = x[keep]
    return out


def payload_exact(level: SparsityLevel, fpp: int = 32, s0: float = 0.0, s1: float = 1.0) -> PayloadSize:
    """Bits for ``k`` signed values plus an enumerative code of their positions."""
    if fpp not in (32, 64):
        raise ValueError("fpp must be 32 or 64")
    if s0 < 0 or s1 < 0:
        raise ValueError("s0 and s1 must be non-negative")
    k = level.k
    values = float((fpp + 1) * k)
    positions = log2_binomial_exact(level.d, k)
    return PayloadSize(values, positions, s1 * (values + positions) + s0)


def payload_approx(level: SparsityLevel, fpp: int = 32, s0: float = 0.0, s1: float = 1.0) -> float:
    """Stirling-approximated payload ``s1 (d/delta)(log2 delta + fpp + 1) + s0``."""
    return payload_approx_bits(level.delta, level.d, fpp, s0, s1)


def payload_approx_bits(delta, d: int, fpp: int = 32, s0: float = 0.0, s1: float = 1.0):
    """Array-friendly form of :func:`payload_approx`."""
    kappa = fpp + 1
    delta = np.asarray(delta, dtype=np.float64)
    out = s1 * (d / delta) * (np.log2(delta) + kappa) + s0
    return float(out) if out.ndim == 0 else out
