"""Scalar special functions, exact combinatorics and seeded random streams."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

INV_E = math.exp(-1.0)
_EXACT_BINOM_MAX_D = 20_000


class WBranch(str, Enum):
    PRINCIPAL = "principal"
    LOWER = "lower"


class LambertDomainError(ValueError):
    """Argument lies outside the real domain of the requested Lambert W branch."""


def _lambert_initial(x: float, branch: WBranch) -> float:
    if x < -0.25:
        # Branch-point series in p = +-sqrt(2(ex + 1)).
        p = math.sqrt(max(2.0 * (math.e * x + 1.0), 0.0))
        if branch is WBranch.LOWER:
            p = -p
        return -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p ** 3
    if branch is WBranch.LOWER:
        l1 = math.log(-x)
        l2 = math.log(-l1)
        return l1 - l2 + l2 / l1
    if x < 3.0:
        return math.log1p(x) if x > -0.25 else x
    l1 = math.log(x)
    l2 = math.log(l1)
    return l1 - l2 + l2 / l1


def lambert_w(x: float, branch: WBranch | str = WBranch.PRINCIPAL) -> float:
    """Real Lambert W on the principal (W0) or lower (W-1) branch.

    Halley iteration from a branch-point series, a log asymptotic guess, or
    ``log1p(x)`` for moderate principal arguments.
    """
    branch = WBranch(branch)
    x = float(x)
    if not math.isfinite(x) and not (branch is WBranch.PRINCIPAL and x == math.inf):
        raise LambertDomainError(f"W({x}) undefined on {branch.value} branch")
    if x < -INV_E:
        # Allow a few ulps of slack so -1/e itself is accepted.
        if x < -INV_E * (1.0 + 4e-16):
            raise LambertDomainError(f"W({x}) undefined: argument below -1/e")
        return -1.0
    if branch is WBranch.LOWER and x >= 0.0:
        raise LambertDomainError(f"W_-1({x}) undefined: argument must be negative")
    if x == 0.0:
        return 0.0
    if x == math.inf:
        return math.inf
    if x == -INV_E:
        return -1.0

    w = _lambert_initial(x, branch)
    for _ in range(64):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1)
        if denom == 0.0:
            break
        step = f / denom
        w_new = w - step
        if branch is WBranch.LOWER and w_new > -1.0:
            w_new = 0.5 * (w - 1.0)
        if branch is WBranch.PRINCIPAL and w_new < -1.0:
            w_new = 0.5 * (w - 1.0)
        if abs(w_new - w) <= 4e-16 * max(1.0, abs(w_new)):
            return w_new
        w = w_new
    return w


def _log2_int(n: int) -> float:
    bits = n.bit_length()
    if bits <= 1000:
        return math.log2(n)
    shift = bits - 64
    return math.log2(n >> shift) + shift


def log2_binomial_exact(d: int, k: int) -> float:
    """log2 C(d, k), exact big-integer for moderate d, compensated log-sum above."""
    d = int(d)
    k = int(k)
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    if k < 0 or k > d:
        raise ValueError(f"k must lie in [0, {d}], got {k}")
    k = min(k, d - k)
    if k == 0:
        return 0.0
    if d <= _EXACT_BINOM_MAX_D:
        return _log2_int(math.comb(d, k))
    i = np.arange(1, k + 1, dtype=np.float64)
    # C(d,k) = prod (d-k+i)/i
    terms = np.log1p((d - k) / i)
    return math.fsum(terms.tolist()) / math.log(2.0)


def finite_diff_grad(
    loss: Callable[[np.ndarray], float], w: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of ``loss`` at ``w``."""
    if h <= 0:
        raise ValueError("h must be positive")
    w = np.asarray(w, dtype=np.float64)
    grad = np.empty_like(w)
    probe = w.copy()
    for i in range(w.size):
        orig = probe.flat[i]
        probe.flat[i] = orig + h
        fp = loss(probe)
        probe.flat[i] = orig - h
        fm = loss(probe)
        probe.flat[i] = orig
        grad.flat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class SeedSpec:
    """Master seed from which labelled, independent Philox streams are derived.

    The key for a stream is the first 128 bits of SHA-256 over
    ``"<master_seed>/<label>"``, so streams depend only on the seed and the
    label, never on the order in which they are requested.
    """

    master_seed: int

    def __post_init__(self) -> None:
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")

    def key(self, label: str) -> np.ndarray:
        digest = hashlib.sha256(f"{int(self.master_seed)}/{label}".encode()).digest()
        return np.frombuffer(digest[:16], dtype=np.uint64).copy()

    def stream(self, label: str) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key(label)))


def as_seed(seed: SeedSpec | int) -> SeedSpec:
    return seed if isinstance(seed, SeedSpec) else SeedSpec(int(seed))
