"""FT-LSGD-DB: local SGD with per-device top-k error feedback and growing batches."""
from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .compression import SparsityLevel, top_k
from .energy import ChannelParams, EnergyModel, GpuParams
from .numerics import SeedSpec, as_seed
from .taskdata import Dataset, LossModel, Partition, global_loss, loss_and_grad

TRACE_CSV_COLUMNS = ("t", "loss", "grad_norm_sq_mean", "bits_total", "energy_comm_J", "energy_comp_J")


class DivergenceError(RuntimeError):
    def __init__(self, t: int, what: str):
        super().__init__(f"non-finite {what} at iteration {t}")
        self.t = t


@dataclass
class Participant:
    id: int
    shard: np.ndarray
    sparsity: SparsityLevel
    channel: ChannelParams | None = None
    gpu: GpuParams | None = None
    w_hat: np.ndarray | None = None
    err: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.sparsity.k


@dataclass(frozen=True)
class TrainConfig:
    T: int
    H: int
    eta: float
    b0: int = 1
    rho: float = 1.0
    batch_cap: int | None = None

    def __post_init__(self) -> None:
        if self.T < 1 or self.H < 1 or self.b0 < 1:
            raise ValueError("T, H and b0 must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.rho < 1:
            raise ValueError("rho must be >= 1")

    def batch_size(self, t: int) -> int:
        """``min(floor(rho^t b0), batch_cap)``."""
        cap = math.inf if self.batch_cap is None else self.batch_cap
        if self.rho == 1.0:
            return int(min(self.b0, cap))
        log_b = t * math.log(self.rho) + math.log(self.b0)
        if log_b > math.log(cap) + 1.0 or log_b > 700:
            return int(cap)
        return int(min(math.floor(self.rho ** t * self.b0), cap))

    def check_step_premise(self, L_hat: float) -> bool:
        """Warn when ``eta > 1/(2L)``; returns whether the premise holds."""
        ok = self.eta <= 1.0 / (2.0 * L_hat)
        if not ok:
            warnings.warn(f"eta={self.eta:g} exceeds 1/(2L)={1.0 / (2.0 * L_hat):g}", stacklevel=2)
        return ok


def eta_from_theta(theta: float, M: int, T: int) -> float:
    """Constant step ``theta sqrt(M) / sqrt(T)``."""
    return theta * math.sqrt(M) / math.sqrt(T)


@dataclass(frozen=True)
class RoundTrace:
    t: int
    loss: float
    grad_norm_sq_mean: float
    bits: tuple[float, ...]
    energy_comm: tuple[float, ...]
    energy_comp: tuple[float, ...]
    batch_size: int

    @property
    def bits_total(self) -> float:
        return float(sum(self.bits))

    @property
    def energy_comm_total(self) -> float:
        return float(sum(self.energy_comm))

    @property
    def energy_comp_total(self) -> float:
        return float(sum(self.energy_comp))

    @property
    def energy_total(self) -> float:
        return self.energy_comm_total + self.energy_comp_total


@dataclass
class SyncState:
    """Everything the lemma checks need at one synchronization step."""

    t: int
    w: np.ndarray
    w_half: list[np.ndarray]
    err_before: list[np.ndarray]
    err_after: list[np.ndarray]
    uploads: list[np.ndarray]
    w_hat_mean: np.ndarray
    w_tilde: np.ndarray
    deltas: Sequence[float]
    eta: float
    H: int
    G_hat: float


@dataclass
class LemmaReport:
    checks: int = 0
    violations: list[dict] = field(default_factory=list)
    max_error_identity_residual: float = 0.0
    max_virtual_residual: float = 0.0
    max_memory_ratio: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations


def check_virtual_sequence(
    t: int, w_hat_mean: np.ndarray, w_tilde: np.ndarray, errs: Sequence[np.ndarray], tol: float = 1e-9
) -> tuple[float, dict | None]:
    """Averaged local iterate minus virtual iterate equals the mean error memory."""
    resid = float(np.max(np.abs(w_hat_mean - w_tilde - np.mean(errs, axis=0))))
    if resid > tol:
        return resid, {"t": t, "m": None, "invariant": "virtual_sequence", "residual": resid}
    return resid, None


def check_lemma_invariants(
    state: SyncState,
    report: LemmaReport | None = None,
    tol_identity: float = 1e-12,
    tol_virtual: float = 1e-9,
) -> LemmaReport:
    """Check the error-feedback identity, the virtual-sequence identity and the memory bound.

    (i)   ``e_new + g == e + w - w_half`` per component;
    (ii)  ``mean(w_hat) - w_tilde == mean(e)``;
    (iii) ``|e_m|^2 <= 4 delta_m^2 eta^2 G^2 H^2`` with the observed ``G``.
    """
    report = LemmaReport() if report is None else report
    report.checks += 1
    for m, (wh, e0, e1, g) in enumerate(zip(state.w_half, state.err_before, state.err_after, state.uploads)):
        lhs = e1 + g
        rhs = e0 + state.w - wh
        resid = float(np.max(np.abs(lhs - rhs)))
        report.max_error_identity_residual = max(report.max_error_identity_residual, resid)
        if resid > tol_identity:
            report.violations.append({"t": state.t, "m": m, "invariant": "error_identity", "residual": resid})
        bound = 4.0 * state.deltas[m] ** 2 * state.eta ** 2 * state.G_hat ** 2 * state.H ** 2
        e_sq = float(e1 @ e1)
        if bound > 0:
            report.max_memory_ratio = max(report.max_memory_ratio, e_sq / bound)
        if e_sq > bound * (1 + 1e-12) + 1e-300:
            report.violations.append({"t": state.t, "m": m, "invariant": "bounded_memory", "value": e_sq, "bound": bound})
    resid, bad = check_virtual_sequence(state.t, state.w_hat_mean, state.w_tilde, state.err_after, tol_virtual)
    report.max_virtual_residual = max(report.max_virtual_residual, resid)
    if bad:
        report.violations.append(bad)
    return report


@dataclass
class RunResult:
    w: np.ndarray
    trace: list[RoundTrace]
    lemma_report: LemmaReport | None = None
    server_iterates: list[np.ndarray] | None = None
    local_iterates: list[list[np.ndarray]] | None = None
    G_observed: float = 0.0
    stopped_at: int | None = None

    def __iter__(self):
        yield self.w
        yield self.trace


def _make_participant_rngs(participants: Sequence[Participant], seed: SeedSpec):
    return [seed.stream(f"minibatch:{p.id}") for p in participants]


def _sample(rng: np.random.Generator, shard: np.ndarray, b: int) -> np.ndarray:
    b = min(b, shard.size)
    return shard[rng.choice(shard.size, size=b, replace=False)]


def run_ftlsgd_db(
    participants: Sequence[Participant],
    model: LossModel,
    ds: Dataset,
    cfg: TrainConfig,
    energy: EnergyModel | None = None,
    seed: SeedSpec | int = 0,
    w0: np.ndarray | None = None,
    check_invariants: bool = False,
    record_iterates: bool = False,
    instrument: bool = True,
    stop_loss: float | None = None,
    workers: int = 1,
) -> RunResult:
    """Run FT-LSGD-DB for ``cfg.T`` iterations.

    Local iterates are stored as offsets from the server model, so
    ``w_hat_m = w + offset_m`` and the upload residual is ``e_m - offset_m``.
    Gradients are taken at the local iterate. Aggregation sums uploads in
    ascending participant id. With ``stop_loss`` the run ends after the first
    iteration whose global loss is at or below the target.
    """
    seed = as_seed(seed)
    parts = sorted(participants, key=lambda p: p.id)
    M = len(parts)
    d = model.d
    if any(p.sparsity.d != d for p in parts):
        raise ValueError("participant sparsity dimension does not match model")
    if energy is not None:
        if energy.M != M:
            raise ValueError("energy model size does not match participants")
        for p in parts:
            if not energy.delta_lb - 1e-9 <= p.sparsity.delta <= energy.delta_ub + 1e-9:
                raise ValueError(f"participant {p.id} sparsity outside [delta_lb, delta_ub]")

    partition = Partition(tuple(p.shard for p in parts), skew=float("nan"))
    w = np.zeros(d) if w0 is None else np.array(w0, dtype=np.float64)
    offsets = [np.zeros(d) for _ in parts]
    errs = [np.zeros(d) for _ in parts]
    rngs = _make_participant_rngs(parts, seed)
    ks = [p.k for p in parts]
    eff_deltas = [d / k for k in ks]

    if energy is not None:
        comp_cost = [float(energy.comp[m]) for m in range(M)]
        comm_cost = [
            float(energy.tx_power[m] * energy.payload_bits(parts[m].sparsity.delta, exact=True) / energy.rates[m])
            for m in range(M)
        ]
        bits_per_upload = [energy.payload_bits(parts[m].sparsity.delta, exact=True) for m in range(M)]
    else:
        comp_cost = [0.0] * M
        comm_cost = [0.0] * M
        bits_per_upload = [0.0] * M

    cum_comm = [0.0] * M
    cum_comp = [0.0] * M
    trace: list[RoundTrace] = []
    report = LemmaReport() if check_invariants else None
    w_tilde = w.copy() if check_invariants else None
    server_iterates = [] if record_iterates else None
    local_iterates = [] if record_iterates else None
    G_obs = 0.0
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def local_step(m: int, b: int):
        w_hat = w + offsets[m]
        idx = _sample(rngs[m], parts[m].shard, b)
        _, g = loss_and_grad(model, w_hat, idx, ds)
        full_sq = np.nan
        if instrument:
            _, gf = loss_and_grad(model, w_hat, parts[m].shard, ds)
            full_sq = float(gf @ gf)
        return w_hat, g, full_sq

    stopped_at = None
    loss = None
    try:
        for t in range(cfg.T):
            b = cfg.batch_size(t)
            if pool is None:
                results = [local_step(m, b) for m in range(M)]
            else:
                results = list(pool.map(lambda m: local_step(m, b), range(M)))
            grad_sq = []
            if record_iterates:
                local_iterates.append([r[0] for r in results])
            q_sum = np.zeros(d) if check_invariants else None
            for m, (_, g, full_sq) in enumerate(results):
                if not np.all(np.isfinite(g)):
                    raise DivergenceError(t, "gradient")
                G_obs = max(G_obs, float(np.linalg.norm(g)))
                offsets[m] = offsets[m] - cfg.eta * g
                grad_sq.append(full_sq)
                cum_comp[m] += comp_cost[m]
                if check_invariants:
                    q_sum += g
            if check_invariants:
                w_tilde = w_tilde - cfg.eta * (q_sum / M)

            bits = [0.0] * M
            if (t + 1) % cfg.H == 0:
                agg = np.zeros(d)
                w_half = [w + off for off in offsets]
                err_before = errs
                new_errs = []
                uploads = []
                for m in range(M):
                    u = errs[m] - offsets[m]
                    g_m = top_k(u, ks[m])
                    new_errs.append(u - g_m)
                    uploads.append(g_m)
                    agg += g_m
                    bits[m] = bits_per_upload[m]
                    cum_comm[m] += comm_cost[m]
                w_new = w - agg / M
                if check_invariants:
                    state = SyncState(
                        t=t,
                        w=w,
                        w_half=w_half,
                        err_before=err_before,
                        err_after=new_errs,
                        uploads=uploads,
                        w_hat_mean=w_new,
                        w_tilde=w_tilde,
                        deltas=eff_deltas,
                        eta=cfg.eta,
                        H=cfg.H,
                        G_hat=G_obs,
                    )
                    check_lemma_invariants(state, report)
                errs = new_errs
                offsets = [np.zeros(d) for _ in range(M)]
                w = w_new
            elif check_invariants:
                w_hat_mean = np.mean([w + off for off in offsets], axis=0)
                resid, bad = check_virtual_sequence(t, w_hat_mean, w_tilde, errs)
                report.max_virtual_residual = max(report.max_virtual_residual, resid)
                if bad:
                    report.violations.append(bad)

            # the server model only moves at synchronizations
            if loss is None or (t + 1) % cfg.H == 0:
                loss = global_loss(model, w, ds, partition)
            if not math.isfinite(loss):
                raise DivergenceError(t, "loss")
            if record_iterates:
                server_iterates.append(w.copy())
            trace.append(
                RoundTrace(
                    t=t,
                    loss=loss,
                    grad_norm_sq_mean=float(np.mean(grad_sq)),
                    bits=tuple(bits),
                    energy_comm=tuple(cum_comm),
                    energy_comp=tuple(cum_comp),
                    batch_size=b,
                )
            )
            if stop_loss is not None and loss <= stop_loss:
                stopped_at = t
                break
    finally:
        if pool is not None:
            pool.shutdown()

    for m, p in enumerate(parts):
        p.w_hat = w + offsets[m]
        p.err = errs[m]
    return RunResult(w, trace, report, server_iterates, local_iterates, G_obs, stopped_at)


def reference_sync_sgd(
    participants: Sequence[Participant],
    model: LossModel,
    ds: Dataset,
    cfg: TrainConfig,
    seed: SeedSpec | int = 0,
    w0: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Plain synchronous distributed SGD with averaged gradients; returns ``w`` after every step.

    Uses the same mini-batch streams as :func:`run_ftlsgd_db`.
    """
    seed = as_seed(seed)
    parts = sorted(participants, key=lambda p: p.id)
    M = len(parts)
    rngs = _make_participant_rngs(parts, seed)
    w = np.zeros(model.d) if w0 is None else np.array(w0, dtype=np.float64)
    out = []
    for t in range(cfg.T):
        b = cfg.batch_size(t)
        agg = np.zeros(model.d)
        for m in range(M):
            idx = _sample(rngs[m], parts[m].shard, b)
            _, g = loss_and_grad(model, w, idx, ds)
            agg += cfg.eta * g
        w = w - agg / M
        out.append(w.copy())
    return out


def make_participants(partition, deltas: Sequence[float], d: int, em: EnergyModel | None = None) -> list[Participant]:
    parts = []
    for m, shard in enumerate(partition.shards):
        parts.append(
            Participant(
                id=m,
                shard=shard,
                sparsity=SparsityLevel(float(deltas[m]), d),
                channel=None if em is None else em.channels[m],
                gpu=None if em is None else em.gpus[m],
            )
        )
    return parts


def trace_records(trace: Sequence[RoundTrace]) -> list[dict]:
    recs = []
    for r in trace:
        rec = asdict(r)
        rec["bits"] = list(r.bits)
        rec["energy_comm"] = list(r.energy_comm)
        rec["energy_comp"] = list(r.energy_comp)
        recs.append(rec)
    return recs


def write_trace_jsonl(trace: Sequence[RoundTrace], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in trace_records(trace):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace_jsonl(path: str | Path) -> list[RoundTrace]:
    out = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            for key in ("bits", "energy_comm", "energy_comp"):
                rec[key] = tuple(rec[key])
            out.append(RoundTrace(**rec))
    return out


def write_trace_csv(trace: Sequence[RoundTrace], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_CSV_COLUMNS)
        for r in trace:
            writer.writerow(
                [r.t, repr(r.loss), repr(r.grad_norm_sq_mean), repr(r.bits_total), repr(r.energy_comm_total), repr(r.energy_comp_total)]
            )
