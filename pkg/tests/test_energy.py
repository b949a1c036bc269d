from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import exp1

from fedspars.energy import (
    ChannelParams,
    EnergyModel,
    GpuParams,
    avg_rate,
    calibrate_big_o,
    comm_energy,
    comp_energy_per_iter,
    round_energy,
    rounds_surrogate,
    total_energy_objective,
)


class TestRate:
    def test_fixed_rate(self):
        assert avg_rate(ChannelParams(fading="fixed_rate", rate=1e9)) == 1e9

    def test_unit_snr_gives_one_bit_per_hz(self):
        ch = ChannelParams(bandwidth=3e5, tx_power=0.5, noise_power=0.5, fading="static", rate=None, scale=1.0)
        assert avg_rate(ch) == pytest.approx(3e5, rel=1e-15)

    def test_rayleigh_matches_monte_carlo_oracle(self):
        ch = ChannelParams(bandwidth=1e6, tx_power=1.0, noise_power=0.1, fading="rayleigh", rate=None, scale=1.0)
        got = avg_rate(ch, n_samples=100_000, seed=3)
        rng = np.random.default_rng(2024)
        acc = 0.0
        n, chunk = 10_000_000, 1_000_000
        for _ in range(n // chunk):
            acc += float(np.sum(np.log2(1.0 + 10.0 * rng.exponential(1.0, chunk))))
        oracle = 1e6 * acc / n
        assert abs(got - oracle) / oracle < 0.005
        # exact ergodic capacity of a Rayleigh channel at SNR 10
        exact = 1e6 * math.exp(0.1) * exp1(0.1) / math.log(2)
        assert oracle == pytest.approx(exact, rel=1e-3)

    def test_rayleigh_is_reproducible(self):
        ch = ChannelParams(fading="rayleigh", rate=None)
        assert avg_rate(ch, 1000, 5, "a") == avg_rate(ch, 1000, 5, "a")
        assert avg_rate(ch, 1000, 5, "a") != avg_rate(ch, 1000, 5, "b")

    def test_channel_validation(self):
        with pytest.raises(ValueError):
            ChannelParams(fading="nakagami")
        with pytest.raises(ValueError):
            ChannelParams(fading="fixed_rate", rate=None)
        with pytest.raises(ValueError):
            ChannelParams(bandwidth=0.0)


class TestEnergies:
    def test_hundred_megabyte_upload(self):
        assert comm_energy(ChannelParams(tx_power=0.2), 8e8, rate=1e9) == pytest.approx(0.16)

    def test_empty_upload(self):
        assert comm_energy(ChannelParams(), 0.0, rate=1e6) == 0.0

    def test_direct_substitution(self):
        assert comm_energy(ChannelParams(tx_power=0.5), 1e6, rate=1e7) == pytest.approx(0.05)

    def test_static_only_gpu(self):
        g = GpuParams(P0=50.0, T0=0.01, alpha_g=0.0, beta_g=0.0, a=0.0, b=0.0)
        assert comp_energy_per_iter(g) == pytest.approx(0.5)

    def test_v100_calibration(self):
        assert comp_energy_per_iter(GpuParams().with_energy(0.2)) == pytest.approx(0.2, rel=1e-12)

    def test_memory_clock_raises_energy_when_time_fixed(self):
        g = GpuParams(a=0.0)
        g2 = GpuParams(a=0.0, f_mem=2 * g.f_mem)
        assert comp_energy_per_iter(g2) > comp_energy_per_iter(g)

    def test_scaled_power_is_linear(self):
        g = GpuParams()
        assert comp_energy_per_iter(g.scaled_power(3.0)) == pytest.approx(3.0 * comp_energy_per_iter(g))


def _model(M=1, tx=(0.0,), rates=(1e6,), joules=(0.2,), **kw):
    return EnergyModel(
        d=kw.pop("d", 100),
        channels=[ChannelParams(tx_power=p, fading="fixed_rate", rate=r) for p, r in zip(tx, rates)],
        gpus=[GpuParams().with_energy(j) for j in joules],
        **kw,
    )


class TestRoundEnergy:
    def test_single_device_compute_only(self):
        em = _model()
        assert round_energy(SimpleNamespace(deltas=[10.0], H=1), em) == pytest.approx(0.2)

    def test_compute_linear_in_H(self):
        em = _model(M=2, tx=(0.0, 0.0), rates=(1e6, 1e6), joules=(0.2, 0.3))
        e1 = round_energy(SimpleNamespace(deltas=[5.0, 5.0], H=3), em)
        e2 = round_energy(SimpleNamespace(deltas=[5.0, 5.0], H=6), em)
        assert e2 == pytest.approx(2 * e1)

    def test_hand_summed_heterogeneous_pair(self):
        em = _model(M=2, tx=(0.2, 0.5), rates=(1e4, 4e4), joules=(0.1, 0.3), d=200, s0=16.0, s1=1.5)
        plan = SimpleNamespace(deltas=[10.0, 25.0], H=4)
        # device 0: k=20, device 1: k=8
        bits0 = 1.5 * (33 * 20 + math.log2(math.comb(200, 20))) + 16
        bits1 = 1.5 * (33 * 8 + math.log2(math.comb(200, 8))) + 16
        hand = 0.2 * bits0 / 1e4 + 4 * 0.1 + 0.5 * bits1 / 4e4 + 4 * 0.3
        assert round_energy(plan, em, exact=True) == pytest.approx(hand, rel=1e-12)

    def test_plan_size_checked(self):
        with pytest.raises(ValueError):
            round_energy(SimpleNamespace(deltas=[5.0, 5.0], H=1), _model())


class TestObjective:
    def test_zero_round_constants(self):
        em = _model(tx=(0.3,), c_alpha=0.0, c_beta=0.0)
        assert total_energy_objective(SimpleNamespace(deltas=[7.0], H=2), em) == 0.0

    def test_single_device_expansion(self):
        rng = np.random.default_rng(7)
        P, R, E0 = rng.uniform(0.1, 1), 10 ** rng.uniform(4, 6), rng.uniform(0.01, 0.5)
        ca, cb, s0, s1, d = 10 ** rng.uniform(-4, -2), 10 ** rng.uniform(0, 2), rng.uniform(0, 50), rng.uniform(0.5, 2), 5000
        em = _model(tx=(P,), rates=(R,), joules=(E0,), d=d, c_alpha=ca, c_beta=cb, s0=s0, s1=s1)
        delta, H = 37.5, 8
        bits = s1 * (d / delta) * (math.log2(delta) + 33) + s0
        expanded = (P * bits / R + H * E0) * (ca * H * delta ** 2 + cb / H)
        assert total_energy_objective(SimpleNamespace(deltas=[delta], H=H), em) == pytest.approx(expanded, rel=1e-12)

    def test_permutation_invariance(self):
        em = _model(M=3, tx=(0.2, 0.2, 0.4), rates=(1e5, 1e5, 3e5), joules=(0.1, 0.1, 0.2), c_alpha=1e-3, c_beta=5.0)
        a = total_energy_objective(SimpleNamespace(deltas=[6.0, 9.0, 12.0], H=4), em)
        b = total_energy_objective(SimpleNamespace(deltas=[9.0, 6.0, 12.0], H=4), em)
        assert a == pytest.approx(b, rel=1e-15)

    def test_rounds_surrogate_form(self):
        em = _model(M=2, tx=(0.1, 0.1), rates=(1e5, 1e5), joules=(0.1, 0.1), c_alpha=2.0, c_beta=3.0)
        assert rounds_surrogate([2.0, 3.0], 4, em) == pytest.approx(2.0 * 4 * 13 + 3.0 / (math.sqrt(2) * 4))

    def test_intensities(self):
        em = _model(M=2, tx=(0.2, 0.4), rates=(1e5, 2e5), joules=(0.1, 0.3), s1=2.0)
        assert em.zeta_com() == pytest.approx(0.5 * (0.2 * 2 / 1e5 + 0.4 * 2 / 2e5))
        assert em.zeta_cmp() == pytest.approx(0.2)

    def test_validation(self):
        with pytest.raises(ValueError):
            _model(delta_lb=2.0)
        with pytest.raises(ValueError):
            _model(delta_ub=1000.0)
        with pytest.raises(ValueError):
            _model(H_set=(0, 2))
        with pytest.raises(ValueError):
            _model(fpp=16)


class TestCalibration:
    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-5, 1e-1), st.floats(1.0, 1e4), st.integers(1, 16))
    def test_recovers_planted_constants(self, ca, cb, M):
        pilots = []
        for delta, H in [(5.0, 1), (20.0, 4), (10.0, 16)]:
            rounds = ca * H * M * delta ** 2 + cb / (math.sqrt(M) * H)
            pilots.append(([delta] * M, H, rounds))
        a, b = calibrate_big_o(pilots, M)
        assert a == pytest.approx(ca, rel=1e-6)
        assert b == pytest.approx(cb, rel=1e-6)

    def test_needs_two_pilots(self):
        with pytest.raises(ValueError):
            calibrate_big_o([([5.0], 1, 10.0)], 1)

    def test_constants_non_negative(self):
        a, b = calibrate_big_o([([5.0], 1, 100.0), ([50.0], 8, 1.0)], 1)
        assert a >= 0 and b >= 0
