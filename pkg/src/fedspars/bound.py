"""Convergence-bound evaluation and round counts for FT-LSGD-DB."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np


@dataclass(frozen=True)
class BoundInputs:
    theta: float
    M: int
    T: int
    L: float
    sigma: float
    G: float
    H: int
    rho: float
    b0: int
    F0_gap: float
    deltas: tuple[float, ...]

    @property
    def eta(self) -> float:
        return self.theta * math.sqrt(self.M) / math.sqrt(self.T)

    def premise_holds(self) -> bool:
        return self.eta <= 1.0 / (2.0 * self.L)


class BoundValue(NamedTuple):
    value: float
    terms: tuple[float, float, float]
    premise_ok: bool
    warning: str | None


def rms_delta(deltas: Sequence[float]) -> float:
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.size == 0:
        raise ValueError("empty sparsity series")
    if np.any(deltas < 1):
        raise ValueError("sparsities must be >= 1")
    return float(np.sqrt(np.mean(deltas ** 2)))


def theorem1_rhs(inp: BoundInputs) -> BoundValue:
    """Right side of the convergence bound, term by term.

    ``4 gap / (theta sqrt(MT)) + 8 rho theta L sigma^2 / ((rho-1) b0 sqrt(M) T^1.5)
    + (4 delta^2 + 1) 8 M theta^2 L^2 G^2 H^2 / T``.
    """
    if inp.rho <= 1:
        raise ValueError("rho must exceed 1")
    delta = rms_delta(inp.deltas)
    M, T, th = inp.M, inp.T, inp.theta
    t1 = 4.0 * inp.F0_gap / (th * math.sqrt(M * T))
    t2 = 8.0 * inp.rho * th * inp.L * inp.sigma ** 2 / ((inp.rho - 1.0) * inp.b0 * math.sqrt(M) * T ** 1.5)
    t3 = (4.0 * delta ** 2 + 1.0) * 8.0 * M * th ** 2 * inp.L ** 2 * inp.G ** 2 * inp.H ** 2 / T
    ok = inp.premise_holds()
    warning = None if ok else f"step premise violated: eta={inp.eta:g} > 1/(2L)={1.0 / (2.0 * inp.L):g}"
    return BoundValue(t1 + t2 + t3, (t1, t2, t3), ok, warning)


@dataclass(frozen=True)
class RoundConsts:
    b0: int
    M: int
    L: float
    G: float
    J: float
    sigma: float
    eps: float


class RoundCounts(NamedTuple):
    T: float
    K: float
    K_two_term: float


def rounds_K(delta: float, H: int, c: RoundConsts, form: str = "printed") -> RoundCounts:
    """Iterations ``T(delta, H)`` and rounds ``K = T / H`` to reach ``eps``.

    ``form="printed"`` is the published closed form ``x + y + sqrt(x + y/2)``;
    ``form="solved"`` is the exact positive root of ``eps = a / sqrt(T) + b / T``.
    """
    x = 8.0 * c.b0 * c.M * c.L * c.G ** 2 * c.J ** 2 * H ** 2 * (4.0 * delta ** 2 + 1.0) / (c.eps * c.sigma ** 2)
    y = 72.0 * c.L * c.sigma ** 2 * c.J ** 2 / (c.eps ** 2 * c.b0 * c.M)
    if form == "printed":
        T = x + y + math.sqrt(x + y / 2.0)
    elif form == "solved":
        a = 12.0 * c.sigma * c.J * math.sqrt(c.L) / math.sqrt(c.M * c.b0)
        # eps*T - a*sqrt(T) - eps*x = 0
        root = (a + math.sqrt(a * a + 4.0 * c.eps ** 2 * x)) / (2.0 * c.eps)
        T = root * root
    else:
        raise ValueError(f"unknown form {form!r}")
    return RoundCounts(T, T / H, (x + y) / H)


@dataclass
class BoundReport:
    label: str
    measured: float
    bound: float
    terms: tuple[float, float, float]
    premise_ok: bool
    holds: bool | None
    note: str | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def measured_grad_norm(trace) -> float:
    """``(1/MT) sum_t sum_m |grad f_m(w_hat_m^t)|^2`` from per-iteration means."""
    vals = np.array([r.grad_norm_sq_mean for r in trace], dtype=np.float64)
    if np.any(np.isnan(vals)):
        raise ValueError("trace lacks gradient-norm instrumentation")
    return float(np.mean(vals))


def verify_bound_on_run(trace, inp: BoundInputs) -> BoundReport:
    """Compare the measured average squared gradient norm with the bound.

    The constants in ``inp`` are empirical, so this is an
    empirical-constants check: a failure points at underestimated constants
    as much as at the bound. If the step premise fails, the bound is not
    asserted.
    """
    measured = measured_grad_norm(trace)
    bv = theorem1_rhs(inp)
    holds = measured <= bv.value if bv.premise_ok else None
    return BoundReport("empirical-constants check", measured, bv.value, bv.terms, bv.premise_ok, holds, bv.warning)
