"""Experiment configuration, scheme comparison runs and intensity sweeps."""
from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .bound import BoundInputs, verify_bound_on_run
from .compression import SparsityLevel
from .control import CompressionPlan, solve_scheme
from .energy import ChannelParams, EnergyModel, GpuParams, calibrate_big_o
from .fedcore import (
    DivergenceError,
    RunResult,
    TrainConfig,
    make_participants,
    read_trace_jsonl,
    run_ftlsgd_db,
    write_trace_csv,
    write_trace_jsonl,
)
from .numerics import SeedSpec
from .taskdata import (
    Constants,
    Dataset,
    LossModel,
    Partition,
    accuracy,
    estimate_constants,
    global_loss,
    make_synthetic,
    partition,
)

BANDWIDTH_OFFSETS = (-0.03, -0.01, 0.01, 0.03)


class ConfigError(ValueError):
    pass


def _from_dict(cls, data: dict[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**data)


@dataclass
class TaskSection:
    kind: str = "logistic"
    n: int = 2400
    dim: int = 50
    skew: float = 0.0
    seed: int = 0
    noise: float | None = None
    hidden: int = 8
    target_loss: float | None = None


@dataclass
class PopulationSection:
    """Four-group heterogeneous population.

    Group ``g`` uses bandwidth ``(bandwidth_mean + offset_g * L_het) *
    bandwidth_unit`` Hz; offsets default to -0.03, -0.01, +0.01, +0.03 (the
    first group has the worst channel). With ``bandwidth_mean = 1`` and a unit
    of 1e9 the bandwidths are in GHz.
    """

    groups: int = 4
    per_group: int = 3
    L_het: float = 10.0
    bandwidth_mean: float = 1.0
    bandwidth_unit: float = 1e9
    bandwidth_offsets: list[float] = field(default_factory=lambda: list(BANDWIDTH_OFFSETS))
    tx_power: float = 0.2
    noise_power: float = 0.01
    fading: str = "rayleigh"
    fading_scale: float = 1.0
    rate_samples: int = 100_000
    gpu_energy_J: float = 0.2
    gpu_energy_by_group: list[float] | None = None


@dataclass
class EnergySection:
    s0: float = 0.0
    s1: float = 1.0
    fpp: int = 32
    c_alpha: float = 1.0
    c_beta: float = 1.0
    delta_lb: float = math.exp(1.5)
    delta_ub: float | None = None
    H_set: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 16, 32])
    calibration_pilots: list[list[float]] | None = None


@dataclass
class TrainingSection:
    T: int = 1000
    eta: float | None = 0.1
    theta: float | None = None
    b0: int = 8
    rho: float = 1.0
    batch_cap: int | None = None
    stop_at_target: bool = False


@dataclass
class ExperimentConfig:
    task: TaskSection = field(default_factory=TaskSection)
    population: PopulationSection = field(default_factory=PopulationSection)
    energy: EnergySection = field(default_factory=EnergySection)
    training: TrainingSection = field(default_factory=TrainingSection)
    schemes: list[str] = field(default_factory=lambda: ["flexible", "unified_spar", "greedy_spars", "syn_sgd_spars"])
    output_dir: str = "runs/experiment"
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        from .control import SCHEMES

        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ConfigError(f"unknown schemes {bad}")
        if len(self.population.bandwidth_offsets) != self.population.groups:
            raise ConfigError("need one bandwidth offset per group")
        if self.population.gpu_energy_by_group is not None and len(self.population.gpu_energy_by_group) != self.population.groups:
            raise ConfigError("need one GPU energy per group")
        if (self.training.eta is None) == (self.training.theta is None):
            raise ConfigError("set exactly one of training.eta and training.theta")
        for g in range(self.population.groups):
            if self.population.bandwidth_mean + self.population.bandwidth_offsets[g] * self.population.L_het <= 0:
                raise ConfigError("heterogeneity level drives a group bandwidth to zero")

    @property
    def M(self) -> int:
        return self.population.groups * self.population.per_group

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        data = dict(data)
        sections = {
            "task": TaskSection,
            "population": PopulationSection,
            "energy": EnergySection,
            "training": TrainingSection,
        }
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"[{key}] must be a mapping")
                kwargs[key] = _from_dict(sections[key], value, key)
            elif key in ("schemes", "output_dir", "seed"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown top-level key {key!r}")
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# building blocks


@dataclass
class Setup:
    cfg: ExperimentConfig
    ds: Dataset
    part: Partition
    model: LossModel
    em: EnergyModel
    groups: list[int]


def group_of(cfg: ExperimentConfig) -> list[int]:
    return [g for g in range(cfg.population.groups) for _ in range(cfg.population.per_group)]


def build_population(cfg: ExperimentConfig, d: int) -> EnergyModel:
    pop = cfg.population
    channels = []
    gpus = []
    base_gpu = GpuParams()
    for g in group_of(cfg):
        bw = (pop.bandwidth_mean + pop.bandwidth_offsets[g] * pop.L_het) * pop.bandwidth_unit
        channels.append(
            ChannelParams(
                bandwidth=bw,
                tx_power=pop.tx_power,
                noise_power=pop.noise_power,
                fading=pop.fading,
                rate=None,
                scale=pop.fading_scale,
            )
        )
        joules = pop.gpu_energy_J if pop.gpu_energy_by_group is None else pop.gpu_energy_by_group[g]
        gpus.append(base_gpu.with_energy(joules))
    en = cfg.energy
    return EnergyModel(
        d=d,
        channels=channels,
        gpus=gpus,
        s0=en.s0,
        s1=en.s1,
        fpp=en.fpp,
        c_alpha=en.c_alpha,
        c_beta=en.c_beta,
        delta_lb=en.delta_lb,
        delta_ub=en.delta_ub,
        H_set=tuple(en.H_set),
        rate_samples=pop.rate_samples,
        seed=cfg.seed,
    )


def build(cfg: ExperimentConfig) -> Setup:
    tk = cfg.task
    ds = make_synthetic(tk.kind, tk.n, tk.dim, SeedSpec(tk.seed), noise=tk.noise, hidden=tk.hidden)
    part = partition(ds, cfg.M, tk.skew, SeedSpec(tk.seed))
    model = LossModel(tk.kind, tk.dim, tk.hidden)
    em = build_population(cfg, model.d)
    return Setup(cfg, ds, part, model, em, group_of(cfg))


def train_config(cfg: ExperimentConfig, H: int) -> TrainConfig:
    tr = cfg.training
    eta = tr.eta if tr.eta is not None else tr.theta * math.sqrt(cfg.M) / math.sqrt(tr.T)
    return TrainConfig(T=tr.T, H=H, eta=eta, b0=tr.b0, rho=tr.rho, batch_cap=tr.batch_cap)


def simulate(
    setup: Setup,
    deltas: Sequence[float],
    H: int,
    check_invariants: bool = False,
    stop: bool | None = None,
    record_iterates: bool = False,
) -> RunResult:
    cfg = setup.cfg
    parts = make_participants(setup.part, deltas, setup.model.d, setup.em)
    stop = cfg.training.stop_at_target if stop is None else stop
    stop_loss = cfg.task.target_loss if stop else None
    return run_ftlsgd_db(
        parts,
        setup.model,
        setup.ds,
        train_config(cfg, H),
        setup.em,
        SeedSpec(cfg.seed),
        check_invariants=check_invariants,
        record_iterates=record_iterates,
        stop_loss=stop_loss,
    )


def first_hit(trace, target: float | None) -> int | None:
    if target is None:
        return None
    for r in trace:
        if r.loss <= target:
            return r.t
    return None


def calibrate(setup: Setup) -> tuple[float, float]:
    """Fit the round-count constants from pilot runs listed in the config."""
    pilots = setup.cfg.energy.calibration_pilots
    if not pilots:
        return setup.em.c_alpha, setup.em.c_beta
    if setup.cfg.task.target_loss is None:
        raise ConfigError("calibration needs task.target_loss")
    obs = []
    for delta, H in pilots:
        H = int(H)
        res = simulate(setup, [delta] * setup.em.M, H, stop=True)
        hit = first_hit(res.trace, setup.cfg.task.target_loss)
        if hit is None:
            raise ConfigError(f"pilot (delta={delta}, H={H}) never reached the target loss")
        obs.append(([delta] * setup.em.M, H, (hit + 1) / H))
    c_a, c_b = calibrate_big_o(obs, setup.em.M)
    setup.em.c_alpha, setup.em.c_beta = c_a, c_b
    return c_a, c_b


def summarize_run(setup: Setup, scheme: str, plan: CompressionPlan, res: RunResult) -> dict[str, Any]:
    target = setup.cfg.task.target_loss
    hit = first_hit(res.trace, target)
    last = res.trace[-1]
    at = res.trace[hit] if hit is not None else None
    row = {
        "scheme": scheme,
        "H": plan.H,
        "deltas": list(plan.deltas),
        "objective": plan.objective,
        "status": "ok",
        "iterations": len(res.trace),
        "iters_to_target": None if hit is None else hit + 1,
        "rounds_to_target": None if hit is None else (hit + 1) // plan.H,
        "energy_to_target_J": None if at is None else at.energy_total,
        "comm_to_target_J": None if at is None else at.energy_comm_total,
        "comp_to_target_J": None if at is None else at.energy_comp_total,
        "total_J": last.energy_total,
        "comm_J": last.energy_comm_total,
        "comp_J": last.energy_comp_total,
        "final_loss": last.loss,
        "final_accuracy": None,
    }
    if setup.model.kind != "least_squares":
        row["final_accuracy"] = accuracy(setup.model, res.w, setup.ds)
    return row


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    """Solve each scheme's plan, simulate it and write traces plus a summary.

    Files: ``<scheme>.jsonl`` (per-iteration records), ``<scheme>.csv`` (run
    summary columns) and ``summary.json`` (config, plans, cross-scheme table).
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    setup = build(cfg)
    c_a, c_b = calibrate(setup)
    rows = []
    for scheme in cfg.schemes:
        plan = solve_scheme(setup.em, scheme)
        try:
            res = simulate(setup, plan.deltas, plan.H)
        except DivergenceError as exc:
            rows.append({"scheme": scheme, "H": plan.H, "deltas": list(plan.deltas), "objective": plan.objective,
                         "status": "diverged", "error": str(exc), "iteration": exc.t})
            continue
        write_trace_jsonl(res.trace, out / f"{scheme}.jsonl")
        write_trace_csv(res.trace, out / f"{scheme}.csv")
        rows.append(summarize_run(setup, scheme, plan, res))
    summary = {
        "config": cfg.to_dict(),
        "calibrated": {"c_alpha": c_a, "c_beta": c_b},
        "zeta_com": setup.em.zeta_com(),
        "zeta_cmp": setup.em.zeta_cmp(),
        "runs": rows,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------------------
# intensity sweeps


def with_intensity(em: EnergyModel, zeta_com: float | None = None, zeta_cmp: float | None = None) -> EnergyModel:
    """Copy of ``em`` with transmit powers or GPU powers rescaled to hit a target intensity.

    Rates and timings are kept, so heterogeneity across devices is preserved.
    """
    out = copy.copy(em)
    if zeta_com is not None:
        f = zeta_com / em.zeta_com()
        out.tx_power = em.tx_power * f
        out.channels = [ChannelParams(**{**asdict(ch), "tx_power": ch.tx_power * f}) for ch in em.channels]
    if zeta_cmp is not None:
        f = zeta_cmp / em.zeta_cmp()
        out.comp = em.comp * f
        out.gpus = [g.scaled_power(f) for g in em.gpus]
    return out


def sweep_intensity(cfg: ExperimentConfig, axis: str, values: Sequence[float], em: EnergyModel | None = None) -> list[dict[str, Any]]:
    """Solve the flexible plan at each intensity and tabulate per-group sparsity and ``H``."""
    if axis not in ("zeta_com", "zeta_cmp"):
        raise ValueError("axis must be zeta_com or zeta_cmp")
    values = [float(v) for v in values]
    if any(v <= 0 for v in values) or values != sorted(values):
        raise ValueError("sweep values must be positive and sorted")
    from .control import solve_flexible

    if em is None:
        em = build_population(cfg, LossModel(cfg.task.kind, cfg.task.dim, cfg.task.hidden).d)
    groups = group_of(cfg)
    rows = []
    for v in values:
        scaled = with_intensity(em, **{axis: v})
        plan = solve_flexible(scaled).plan
        per_group = []
        for g in range(cfg.population.groups):
            per_group.append(float(np.mean([plan.deltas[m] for m in range(em.M) if groups[m] == g])))
        rows.append({axis: v, "H": plan.H, "group_deltas": per_group, "objective": plan.objective})
    return rows


def sweep_heterogeneity(cfg: ExperimentConfig, levels: Sequence[float], schemes: Sequence[str] | None = None) -> list[dict[str, Any]]:
    """Modeled energy of each scheme's plan as the group bandwidth spread ``L_het`` grows."""
    schemes = list(cfg.schemes if schemes is None else schemes)
    d = LossModel(cfg.task.kind, cfg.task.dim, cfg.task.hidden).d
    rows = []
    for level in levels:
        c = copy.deepcopy(cfg)
        c.population.L_het = float(level)
        c.validate()
        em = build_population(c, d)
        em.c_alpha, em.c_beta = cfg.energy.c_alpha, cfg.energy.c_beta
        rows.append({"L_het": float(level), **{s: solve_scheme(em, s).objective for s in schemes}})
    return rows


def write_sweep_csv(rows: Sequence[dict[str, Any]], axis: str, path: str | Path) -> None:
    n_groups = len(rows[0]["group_deltas"]) if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([axis, "H", *[f"delta_g{g + 1}" for g in range(n_groups)], "objective"])
        for r in rows:
            w.writerow([repr(r[axis]), r["H"], *[repr(x) for x in r["group_deltas"]], repr(r["objective"])])


# ---------------------------------------------------------------------------
# verification of a finished run


def _f_star_lower(setup: Setup) -> float:
    if setup.model.kind != "least_squares":
        return 0.0
    # equal shard weights: minimize the mean of shard losses
    rows, rhs = [], []
    for s in setup.part.shards:
        wgt = 1.0 / math.sqrt(len(s))
        rows.append(setup.ds.X[s] * wgt)
        rhs.append(setup.ds.y[s] * wgt)
    w_star = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]
    return global_loss(setup.model, w_star, setup.ds, setup.part)


def verify_run(run_dir: str | Path) -> dict[str, Any]:
    """Re-run each scheme deterministically with invariant checks and test the bound."""
    run_dir = Path(run_dir)
    summary = json.loads((run_dir / "summary.json").read_text())
    cfg = ExperimentConfig.from_dict(summary["config"])
    setup = build(cfg)
    setup.em.c_alpha = summary["calibrated"]["c_alpha"]
    setup.em.c_beta = summary["calibrated"]["c_beta"]
    reports = {}
    for row in summary["runs"]:
        scheme = row["scheme"]
        if row.get("status") != "ok":
            reports[scheme] = {"status": row.get("status"), "checked": False}
            continue
        stored = read_trace_jsonl(run_dir / f"{scheme}.jsonl")
        res = simulate(setup, row["deltas"], row["H"], check_invariants=True, record_iterates=True)
        same = [asdict(a) for a in stored] == [asdict(b) for b in res.trace]
        finite = all(math.isfinite(r.loss) and math.isfinite(r.energy_total) for r in stored)
        monotone = all(
            all(b >= a for a, b in zip(p.energy_comm, q.energy_comm)) and all(b >= a for a, b in zip(p.energy_comp, q.energy_comp))
            for p, q in zip(stored, stored[1:])
        )
        rep: dict[str, Any] = {
            "trace_reproduced": same,
            "finite": finite,
            "cumulative_monotone": monotone,
            "lemmas_ok": res.lemma_report.ok,
            "lemma_violations": res.lemma_report.violations[:10],
        }
        tc = train_config(cfg, row["H"])
        if tc.rho > 1:
            consts = estimate_constants(setup.model, setup.ds, setup.part, probe_points=_probe_points(res), batch_size=1)
            F0 = global_loss(setup.model, np.zeros(setup.model.d), setup.ds, setup.part)
            inp = BoundInputs(
                theta=tc.eta * math.sqrt(tc.T) / math.sqrt(cfg.M),
                M=cfg.M,
                T=len(res.trace),
                L=consts.L_hat,
                sigma=consts.sigma_hat,
                G=consts.G_hat,
                H=row["H"],
                rho=tc.rho,
                b0=tc.b0,
                F0_gap=F0 - _f_star_lower(setup),
                deltas=tuple(SparsityLevel(x, setup.model.d).effective_delta for x in row["deltas"]),
            )
            br = verify_bound_on_run(res.trace, inp)
            rep["bound"] = asdict(br)
        else:
            rep["bound"] = {"label": "empirical-constants check", "holds": None, "note": "rho = 1: batch-growth term unbounded"}
        (run_dir / f"{scheme}.verify.json").write_text(json.dumps(rep, indent=2, sort_keys=True, default=float) + "\n")
        reports[scheme] = rep
    return reports


def _probe_points(res: RunResult, n: int = 100) -> list[np.ndarray]:
    """``n`` local iterates spread evenly along the run, where the gradients were taken."""
    its = [x for step in res.local_iterates for x in step]
    idx = np.linspace(0, len(its) - 1, n).round().astype(int)
    return [its[i] for i in idx]
