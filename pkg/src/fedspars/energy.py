"""Communication / computation energy pricing and the total-energy objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import nnls

from .compression import SparsityLevel, payload_approx_bits, payload_exact
from .numerics import SeedSpec, as_seed

DELTA_MIN = math.exp(1.5)
FADING_KINDS = ("fixed_rate", "rayleigh", "static")


@dataclass(frozen=True)
class ChannelParams:
    """Uplink channel of one device.

    ``fading`` selects how the average rate is obtained: ``fixed_rate`` uses
    ``rate`` (bits/s) directly, ``rayleigh`` averages over ``|h|^2 ~ Exp(scale)``,
    ``static`` uses ``|h|^2 = scale``.
    """

    bandwidth: float = 1e6
    tx_power: float = 0.2
    noise_power: float = 1e-2
    fading: str = "fixed_rate"
    rate: float | None = 1e9
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.fading not in FADING_KINDS:
            raise ValueError(f"unknown fading kind {self.fading!r}")
        if self.fading == "fixed_rate" and not (self.rate and self.rate > 0):
            raise ValueError("fixed_rate channels need a positive rate")
        for name in ("bandwidth", "noise_power", "scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.tx_power < 0:
            raise ValueError("tx_power must be non-negative")


@dataclass(frozen=True)
class GpuParams:
    """Static/dynamic GPU power and time model for one SGD iteration."""

    P0: float = 60.0
    T0: float = 1e-3
    alpha_g: float = 2e-8
    beta_g: float = 4e-8
    a: float = 5e5
    b: float = 1e6
    v_core: float = 1.0
    f_core: float = 1.38e9
    f_mem: float = 8.77e8

    def __post_init__(self) -> None:
        if not (self.f_core > 0 and self.f_mem > 0):
            raise ValueError("frequencies must be positive")
        if not (self.power() > 0 and self.time() > 0):
            raise ValueError("GPU power and time must be positive")

    def power(self) -> float:
        return self.P0 + self.alpha_g * self.f_mem + self.beta_g * self.v_core ** 2 * self.f_core

    def time(self) -> float:
        return self.T0 + self.a / self.f_mem + self.b / self.f_core

    def scaled_power(self, factor: float) -> "GpuParams":
        """Same timing, all power coefficients multiplied by ``factor``."""
        return replace(self, P0=self.P0 * factor, alpha_g=self.alpha_g * factor, beta_g=self.beta_g * factor)

    def with_energy(self, joules: float) -> "GpuParams":
        """Solve the static time ``T0`` so one iteration costs ``joules``."""
        T0 = joules / self.power() - self.a / self.f_mem - self.b / self.f_core
        return replace(self, T0=T0)


def avg_rate(
    ch: ChannelParams, n_samples: int = 100_000, seed: SeedSpec | int = 0, label: str = "fading"
) -> float:
    """Average rate ``W E[log2(1 + P|h|^2 / N0)]`` in bits/s."""
    if ch.fading == "fixed_rate":
        return float(ch.rate)
    snr = ch.tx_power / ch.noise_power
    if ch.fading == "static":
        return ch.bandwidth * math.log2(1.0 + snr * ch.scale)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    gains = as_seed(seed).stream(label).exponential(ch.scale, n_samples)
    return float(ch.bandwidth * np.mean(np.log2(1.0 + snr * gains)))


def comm_energy(ch: ChannelParams, payload_bits: float, rate: float | None = None) -> float:
    if payload_bits < 0:
        raise ValueError("payload_bits must be non-negative")
    rate = avg_rate(ch) if rate is None else rate
    return ch.tx_power * payload_bits / rate


def comp_energy_per_iter(g: GpuParams) -> float:
    return g.power() * g.time()


@dataclass
class EnergyModel:
    """All constants needed to price rounds and whole training runs.

    ``c_alpha`` / ``c_beta`` weight the two round-count terms of the objective;
    they are unrelated to the GPU coefficients ``alpha_g`` / ``beta_g``.
    """

    d: int
    channels: Sequence[ChannelParams]
    gpus: Sequence[GpuParams]
    s0: float = 0.0
    s1: float = 1.0
    fpp: int = 32
    c_alpha: float = 1.0
    c_beta: float = 1.0
    delta_lb: float = DELTA_MIN
    delta_ub: float | None = None
    H_set: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    rate_samples: int = 100_000
    seed: int = 0
    rates: np.ndarray = field(init=False, repr=False)
    tx_power: np.ndarray = field(init=False, repr=False)
    comp: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.channels) != len(self.gpus) or len(self.channels) == 0:
            raise ValueError("need one channel and one GPU per participant")
        if self.delta_ub is None:
            self.delta_ub = float(self.d)
        if self.delta_lb < DELTA_MIN * (1 - 1e-12):
            raise ValueError("delta_lb must be >= e^{3/2}")
        if not self.delta_lb <= self.delta_ub <= self.d:
            raise ValueError("need delta_lb <= delta_ub <= d")
        H = tuple(sorted({int(h) for h in self.H_set}))
        if not H or H[0] < 1:
            raise ValueError("H_set must be a non-empty set of positive integers")
        self.H_set = H
        if self.fpp not in (32, 64):
            raise ValueError("fpp must be 32 or 64")
        seed = SeedSpec(self.seed)
        self.rates = np.array(
            [avg_rate(ch, self.rate_samples, seed, f"fading:{m}") for m, ch in enumerate(self.channels)]
        )
        self.tx_power = np.array([ch.tx_power for ch in self.channels], dtype=np.float64)
        self.comp = np.array([comp_energy_per_iter(g) for g in self.gpus])

    @property
    def M(self) -> int:
        return len(self.channels)

    @property
    def kappa(self) -> int:
        return self.fpp + 1

    def comm_coeff(self) -> np.ndarray:
        """Per-participant ``P_m s1 d / R_m`` (J per unit of approximate payload shape)."""
        return self.tx_power * self.s1 * self.d / self.rates

    def comm_offset(self) -> np.ndarray:
        return self.tx_power * self.s0 / self.rates

    def zeta_com(self) -> float:
        return float(np.mean(self.tx_power * self.s1 / self.rates))

    def zeta_cmp(self) -> float:
        return float(np.mean(self.comp))

    def payload_bits(self, delta: float, exact: bool) -> float:
        level = SparsityLevel(float(delta), self.d)
        if exact:
            return payload_exact(level, self.fpp, self.s0, self.s1).bits_total
        return payload_approx_bits(level.delta, self.d, self.fpp, self.s0, self.s1)


def round_energy(plan, em: EnergyModel, exact: bool = False) -> float:
    """Energy of all devices between two synchronizations (``H`` local steps + one upload)."""
    deltas = np.asarray(plan.deltas, dtype=np.float64)
    if deltas.shape != (em.M,):
        raise ValueError("plan must carry one sparsity per participant")
    total = 0.0
    for m in range(em.M):
        bits = em.payload_bits(deltas[m], exact)
        total += em.tx_power[m] * bits / em.rates[m] + plan.H * em.comp[m]
    return float(total)


def rounds_surrogate(deltas, H: int, em: EnergyModel) -> float:
    """Two-term round-count model ``sum_m (c_alpha H delta_m^2 + c_beta / (M^{3/2} H))``."""
    deltas = np.asarray(deltas, dtype=np.float64)
    M = em.M
    return float(em.c_alpha * H * np.sum(deltas ** 2) + M * em.c_beta / (M ** 1.5 * H))


def total_energy_objective(
    plan,
    em: EnergyModel,
    exact: bool = False,
    rounds_fn: Callable[[float, int], float] | None = None,
) -> float:
    """Round energy times modeled number of rounds.

    ``rounds_fn(rms_delta, H)`` replaces the two-term round model, e.g. with
    the full closed-form round count from :mod:`fedspars.bound`.
    """
    E = round_energy(plan, em, exact)
    if rounds_fn is not None:
        deltas = np.asarray(plan.deltas, dtype=np.float64)
        return E * rounds_fn(float(np.sqrt(np.mean(deltas ** 2))), plan.H)
    return E * rounds_surrogate(plan.deltas, plan.H, em)


def calibrate_big_o(pilots: Sequence[tuple[Sequence[float], int, float]], M: int) -> tuple[float, float]:
    """Fit ``(c_alpha, c_beta)`` to observed rounds-to-target by non-negative least squares.

    Each pilot is ``(deltas, H, rounds)``. At least two pilots at distinct
    ``(delta, H)`` are needed for a unique fit.
    """
    if len(pilots) < 2:
        raise ValueError("need at least two pilot runs")
    A = []
    y = []
    for deltas, H, rounds in pilots:
        deltas = np.asarray(deltas, dtype=np.float64)
        A.append([H * np.sum(deltas ** 2), 1.0 / (math.sqrt(M) * H)])
        y.append(rounds)
    coef, _ = nnls(np.array(A), np.array(y, dtype=np.float64))
    return float(coef[0]), float(coef[1])
