"""Compression control: choose per-device sparsity and the synchronization period.

The outer loop alternates a continuous primal solve over the sparsities at a
fixed period ``H`` (inner convex approximation with a Lambert-W closed form)
and an integer master problem over ``H`` built from the collected cuts.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .energy import EnergyModel
from .numerics import LambertDomainError, WBranch, lambert_w

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
SCHEMES = ("flexible", "syn_sgd_spars", "greedy_spars", "unified_spar", "oracle")


@dataclass(frozen=True)
class CompressionPlan:
    deltas: tuple[float, ...]
    H: int
    objective: float | None = None
    gap: float | None = None
    scheme: str = "flexible"

    def validate(self, em: EnergyModel, tol: float = 1e-9) -> None:
        if len(self.deltas) != em.M:
            raise ValueError("plan size does not match the population")
        lo, hi = em.delta_lb * (1 - tol), em.delta_ub * (1 + tol)
        if any(not lo <= x <= hi for x in self.deltas):
            raise ValueError("plan sparsity outside [delta_lb, delta_ub]")
        if self.H not in em.H_set:
            raise ValueError(f"H={self.H} not in the candidate set")

    def to_json(self) -> str:
        return json.dumps(
            {"deltas": list(self.deltas), "H": self.H, "objective": self.objective, "gap": self.gap, "scheme": self.scheme},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "CompressionPlan":
        obj = json.loads(text)
        return cls(tuple(float(x) for x in obj["deltas"]), int(obj["H"]), obj.get("objective"), obj.get("gap"), obj.get("scheme", "flexible"))


# ---------------------------------------------------------------------------
# objective pieces


def _comm(delta, em: EnergyModel):
    """Per-device approximate upload energy ``C_m (log2 d + kappa)/d + P_m s0 / R_m``."""
    delta = np.asarray(delta, dtype=np.float64)
    return em.comm_coeff() * (np.log2(delta) + em.kappa) / delta + em.comm_offset()


def gamma1(deltas, H: int, em: EnergyModel) -> float:
    deltas = np.asarray(deltas, dtype=np.float64)
    return float(em.c_alpha * H * np.sum(deltas ** 2) + em.c_beta / (math.sqrt(em.M) * H))


def gamma2(deltas, H: int, em: EnergyModel) -> float:
    return float(np.sum(_comm(deltas, em)) + H * np.sum(em.comp))


def objective(deltas, H: int, em: EnergyModel) -> float:
    """Modeled total training energy with the Stirling payload approximation."""
    return gamma1(deltas, H, em) * gamma2(deltas, H, em)


def objective_grad(deltas, H: int, em: EnergyModel) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64)
    g1 = gamma1(deltas, H, em)
    g2 = gamma2(deltas, H, em)
    dg1 = 2.0 * em.c_alpha * H * deltas
    dg2 = em.comm_coeff() * (1.0 / LN2 - np.log2(deltas) - em.kappa) / deltas ** 2
    return dg1 * g2 + g1 * dg2


def surrogate(deltas, deltas_prev, H: int, em: EnergyModel) -> float:
    """Product-of-convex approximation ``G1(x) G2(x0) + G1(x0) G2(x)`` around ``x0``."""
    return gamma1(deltas, H, em) * gamma2(deltas_prev, H, em) + gamma1(deltas_prev, H, em) * gamma2(deltas, H, em)


# ---------------------------------------------------------------------------
# closed-form inner step


@dataclass
class ClosedFormInfo:
    branch: list[str] = field(default_factory=list)
    fallbacks: int = 0


def closed_form_delta(delta_prev, H: int, em: EnergyModel, info: ClosedFormInfo | None = None) -> np.ndarray:
    """Exact minimizer of the surrogate over the sparsity box, per device.

    The stationary point is ``exp(-W(-6AE e^{3B}/(D C_m))/3 + B)``. Both real
    branches and both box endpoints are scored on the surrogate and the best
    is kept. If the Lambert argument is outside ``[-1/e, 0)`` the surrogate
    is monotone on the reals and the endpoints plus a bounded 1-D search
    decide.
    """
    delta_prev = np.asarray(delta_prev, dtype=np.float64)
    A = em.c_alpha * H
    B = 1.0 - em.kappa * LN2
    C = em.comm_coeff()
    D = gamma1(delta_prev, H, em)
    E2 = gamma2(delta_prev, H, em)
    E = E2 * LN2
    lb, ub = em.delta_lb, em.delta_ub
    out = np.empty(em.M)

    for m in range(em.M):

        def phi(x, m=m):
            return A * E2 * x * x + D * C[m] * (math.log2(x) + em.kappa) / x

        cands = [lb, ub]
        denom = D * C[m]
        x = -math.inf if denom == 0 else -6.0 * A * E * math.exp(3.0 * B) / denom
        used = "fallback"
        if -math.exp(-1.0) <= x < 0.0:
            for br in (WBranch.LOWER, WBranch.PRINCIPAL):
                try:
                    w = lambert_w(x, br)
                except LambertDomainError:
                    continue
                y = -w / 3.0 + B
                if y < 709:
                    cands.append(min(max(math.exp(y), lb), ub))
            used = "lambert"
        else:
            res = minimize_scalar(phi, bounds=(lb, ub), method="bounded", options={"xatol": 1e-10 * ub})
            cands.append(float(res.x))
            if info is not None:
                info.fallbacks += 1
            log.info("closed form: Lambert argument %.3g outside [-1/e, 0) for device %d; using endpoint search", x, m)
        vals = [phi(c) for c in cands]
        best = int(np.argmin(vals))
        out[m] = cands[best]
        if info is not None:
            info.branch.append(used)
    return out


# ---------------------------------------------------------------------------
# primal problem


@dataclass
class PrimalResult:
    H: int
    deltas: np.ndarray
    lam_lb: np.ndarray
    lam_ub: np.ndarray
    value: float
    converged: bool
    iterations: int
    history: list[np.ndarray] | None = None
    steps: list[float] | None = None


def kkt_multipliers(deltas, H: int, em: EnergyModel, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Box multipliers from the stationarity residual at active bounds."""
    deltas = np.asarray(deltas, dtype=np.float64)
    grad = objective_grad(deltas, H, em)
    at_lb = np.abs(deltas - em.delta_lb) <= tol * em.delta_lb
    at_ub = np.abs(deltas - em.delta_ub) <= tol * em.delta_ub
    lam_lb = np.where(at_lb, np.maximum(0.0, grad), 0.0)
    lam_ub = np.where(at_ub, np.maximum(0.0, -grad), 0.0)
    return lam_lb, lam_ub


def solve_primal_ica(
    H: int,
    em: EnergyModel,
    gamma0: float = 0.9,
    xi: float = 1e-5,
    iota: float = 1e-5,
    max_inner: int = 10_000,
    delta0: Sequence[float] | None = None,
    record: bool = False,
) -> PrimalResult:
    """Minimize the modeled energy over the sparsities at fixed ``H``.

    Iterates ``x <- x + gamma (x*(x) - x)`` with ``x*`` the surrogate
    minimizer and ``gamma <- gamma (1 - xi gamma)``, from ``x = delta_lb``,
    until the squared step is at most ``iota``.
    """
    if not 0 < gamma0 <= 1:
        raise ValueError("gamma0 must lie in (0, 1]")
    x = np.full(em.M, em.delta_lb) if delta0 is None else np.asarray(delta0, dtype=np.float64).copy()
    gamma = gamma0
    history = [x.copy()] if record else None
    steps = [] if record else None
    converged = False
    it = 0
    best_x, best_val = x.copy(), objective(x, H, em)
    for it in range(1, max_inner + 1):
        target = closed_form_delta(x, H, em)
        x_new = x + gamma * (target - x)
        if record:
            history.append(x_new.copy())
            steps.append(gamma)
        gamma = gamma * (1.0 - xi * gamma)
        moved = float(np.sum((x_new - x) ** 2))
        x = x_new
        val = objective(x, H, em)
        if val < best_val:
            best_x, best_val = x.copy(), val
        if moved <= iota:
            converged = True
            break
    if not converged:
        log.warning("ICA did not converge within %d inner iterations at H=%d", max_inner, H)
        x = best_x
    lam_lb, lam_ub = kkt_multipliers(x, H, em)
    return PrimalResult(H, x, lam_lb, lam_ub, objective(x, H, em), converged, it, history, steps)


# ---------------------------------------------------------------------------
# master problem


@dataclass(frozen=True)
class Cut:
    """Cut built from the primal solution at ``H_source``.

    ``kind="printed"`` evaluates the frozen-sparsity energy expression at any
    ``H`` plus the frozen multiplier terms. That is an upper estimate of the
    best energy at ``H``, so it does not bound the optimum from below.
    ``kind="valid"`` is a certified under-estimator: exact at ``H_source``
    and, elsewhere, the larger of a term-wise rescaling of the primal value
    and the box lower bound.
    """

    deltas: tuple[float, ...]
    lam_lb: tuple[float, ...]
    lam_ub: tuple[float, ...]
    H_source: int
    kind: str = "valid"

    def printed_value(self, H: int, em: EnergyModel) -> float:
        d = np.asarray(self.deltas)
        mult = np.sum(np.asarray(self.lam_lb) * (em.delta_lb - d) + np.asarray(self.lam_ub) * (d - em.delta_ub))
        return objective(d, H, em) + float(mult)

    def value(self, H: int, em: EnergyModel) -> float:
        if self.kind == "printed":
            return self.printed_value(H, em)
        at_source = self.printed_value(self.H_source, em)
        if H == self.H_source:
            return at_source
        r = H / self.H_source
        scale = min(r, r * r, 1.0 / r, 1.0)
        return max(scale * at_source, box_lower_bound(H, em))


def box_lower_bound(H: int, em: EnergyModel) -> float:
    """Energy with every monomial at its own minimum over the sparsity box."""
    a_min = em.c_alpha * em.M * em.delta_lb ** 2
    b_min = float(np.sum(_comm(np.full(em.M, em.delta_ub), em)))
    c = em.c_beta / math.sqrt(em.M)
    e0 = float(np.sum(em.comp))
    return (H * a_min + c / H) * (b_min + H * e0)


def solve_master(cuts: Sequence[Cut], H_set: Sequence[int], em: EnergyModel) -> tuple[int, float]:
    """``min_H max_l cut_l(H)`` by enumeration; ties go to the smallest ``H``."""
    if not cuts:
        raise ValueError("cut pool is empty")
    best_H, best_val = None, math.inf
    for H in sorted(H_set):
        val = max(c.value(H, em) for c in cuts)
        if val < best_val:
            best_H, best_val = H, val
    return best_H, best_val


@dataclass
class BendersState:
    iteration: int
    H: int
    UBD: float
    LBD: float
    primal_value: float
    H_next: int
    cuts: int


@dataclass
class FlexibleResult:
    plan: CompressionPlan
    history: list[BendersState]
    converged: bool
    primal: dict[int, PrimalResult]

    @property
    def gap(self) -> float:
        return self.history[-1].UBD - self.history[-1].LBD


def solve_flexible(
    em: EnergyModel,
    eps: float = 1e-5,
    iota: float = 1e-5,
    xi: float = 1e-5,
    I_out: int = 50,
    gamma0: float = 0.9,
    H_init: int | None = None,
    cut: str = "valid",
    polish: bool = True,
) -> FlexibleResult:
    """Benders-style alternation between primal ICA solves and the master problem.

    Stops when ``UBD - LBD <= eps``, when the master proposes a period whose
    primal problem is already solved (no new information), or at ``I_out``.
    With ``polish`` the incumbent sparsities are refined by continuing the
    inner iteration at the chosen period until steps reach float resolution;
    the ``iota`` stop alone leaves a relative error near ``iota / delta^2``.
    """
    if cut not in ("valid", "printed"):
        raise ValueError("cut must be 'valid' or 'printed'")
    H = em.H_set[0] if H_init is None else H_init
    if H not in em.H_set:
        raise ValueError("H_init must belong to the candidate set")
    UBD, LBD = math.inf, -math.inf
    best: tuple[np.ndarray, int] | None = None
    cuts: list[Cut] = []
    primal: dict[int, PrimalResult] = {}
    history: list[BendersState] = []
    converged = False
    for i in range(1, I_out + 1):
        pr = primal.get(H)
        if pr is None:
            pr = primal[H] = solve_primal_ica(H, em, gamma0=gamma0, xi=xi, iota=iota)
        if pr.value < UBD:
            UBD = pr.value
            best = (pr.deltas.copy(), H)
        cuts.append(Cut(tuple(pr.deltas), tuple(pr.lam_lb), tuple(pr.lam_ub), H, cut))
        H_next, eta = solve_master(cuts, em.H_set, em)
        LBD = eta
        history.append(BendersState(i, H, UBD, LBD, pr.value, H_next, len(cuts)))
        if UBD - LBD <= eps or H_next in primal:
            converged = True
            break
        H = H_next
    deltas, H_best = best
    if polish:
        scale = float(np.max(deltas))
        pr = solve_primal_ica(H_best, em, gamma0=gamma0, xi=xi, iota=(1e-13 * scale) ** 2, delta0=deltas, max_inner=2000)
        if pr.value < UBD:
            UBD = pr.value
            deltas = pr.deltas.copy()
    # cuts inherit the inner solver's stopping error, so a polished UBD can
    # dip below LBD by that much; the history keeps the raw bounds
    gap = max(UBD - LBD, 0.0)
    if not converged:
        log.warning("Benders loop hit I_out=%d with gap %.3g", I_out, gap)
    plan = CompressionPlan(tuple(float(x) for x in deltas), int(H_best), float(UBD), float(gap), "flexible")
    return FlexibleResult(plan, history, converged, primal)


# ---------------------------------------------------------------------------
# oracle and baselines


def delta_grid(em: EnergyModel, n: int) -> np.ndarray:
    return np.geomspace(em.delta_lb, em.delta_ub, n)


def oracle_brute_force(em: EnergyModel, grid_n: int = 400) -> CompressionPlan:
    """Exhaustive minimization over a log-spaced sparsity grid and the period set.

    Ties resolve to the lowest lexicographic grid index, then the smallest ``H``.
    """
    if em.M > 3:
        raise ValueError("brute force oracle supports at most 3 participants")
    grid = delta_grid(em, grid_n)
    comm = em.comm_coeff()[:, None] * (np.log2(grid) + em.kappa)[None, :] / grid[None, :] + em.comm_offset()[:, None]
    sq = grid ** 2
    e0 = float(np.sum(em.comp))
    c = em.c_beta / math.sqrt(em.M)
    best = (math.inf, None, None)
    for H in em.H_set:
        if em.M == 1:
            vals = (em.c_alpha * H * sq + c / H) * (comm[0] + H * e0)
            flat = int(np.argmin(vals))
            idx = (flat,)
            v = float(vals[flat])
        else:
            # chunk over the first device to bound memory
            v, idx = math.inf, None
            for i0 in range(grid_n):
                if em.M == 2:
                    S = sq[i0] + sq
                    Cm = comm[0, i0] + comm[1]
                else:
                    S = sq[i0] + sq[:, None] + sq[None, :]
                    Cm = comm[0, i0] + comm[1][:, None] + comm[2][None, :]
                vals = (em.c_alpha * H * S + c / H) * (Cm + H * e0)
                flat = int(np.argmin(vals))
                if vals.flat[flat] < v:
                    v = float(vals.flat[flat])
                    idx = (i0,) + np.unravel_index(flat, vals.shape)
        if v < best[0]:
            best = (v, H, idx)
    v, H, idx = best
    deltas = tuple(float(grid[i]) for i in idx)
    return CompressionPlan(deltas, int(H), v, None, "oracle")


def _unified(em: EnergyModel, grid_n: int = 4000) -> CompressionPlan:
    grid = delta_grid(em, grid_n)
    best = (math.inf, None, None)
    for H in em.H_set:
        vals = np.array([objective(np.full(em.M, x), H, em) for x in grid])
        j = int(np.argmin(vals))
        lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, grid_n - 1)]
        res = minimize_scalar(lambda x: objective(np.full(em.M, x), H, em), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12 * hi})
        x, v = (float(res.x), float(res.fun)) if res.fun < vals[j] else (float(grid[j]), float(vals[j]))
        if v < best[0]:
            best = (v, H, x)
    v, H, x = best
    return CompressionPlan(tuple([x] * em.M), int(H), v, None, "unified_spar")


def solve_baselines(em: EnergyModel, scheme: str, **kwargs) -> CompressionPlan:
    """Comparison schemes.

    ``syn_sgd_spars``: ``H = 1`` with sparsities from the primal solver.
    ``greedy_spars``: per-round energy only; it falls with sparsity and
    grows with ``H``, so the answer is ``(delta_ub, ..., min H)``.
    ``unified_spar``: one shared sparsity and ``H`` by grid enumeration.
    """
    if scheme == "syn_sgd_spars":
        pr = solve_primal_ica(1, em, **kwargs)
        return CompressionPlan(tuple(float(x) for x in pr.deltas), 1, pr.value, None, scheme)
    if scheme == "greedy_spars":
        deltas = tuple([float(em.delta_ub)] * em.M)
        H = min(em.H_set)
        return CompressionPlan(deltas, H, objective(deltas, H, em), None, scheme)
    if scheme == "unified_spar":
        return _unified(em, **kwargs)
    raise ValueError(f"unknown baseline {scheme!r}")


def solve_scheme(em: EnergyModel, scheme: str) -> CompressionPlan:
    if scheme == "flexible":
        return solve_flexible(em).plan
    if scheme == "oracle":
        return oracle_brute_force(em)
    return solve_baselines(em, scheme)
