from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedspars.compression import SparsityLevel, payload_exact
from fedspars.energy import ChannelParams, EnergyModel, GpuParams
from fedspars.fedcore import (
    DivergenceError,
    LemmaReport,
    Participant,
    SyncState,
    TrainConfig,
    check_lemma_invariants,
    eta_from_theta,
    make_participants,
    read_trace_jsonl,
    reference_sync_sgd,
    run_ftlsgd_db,
    write_trace_csv,
    write_trace_jsonl,
)
from fedspars.taskdata import LossModel, global_grad, make_synthetic, partition


def _setup(kind="least_squares", n=400, dim=20, M=4, seed=0, noise=None):
    ds = make_synthetic(kind, n, dim, seed, noise=noise)
    part = partition(ds, M, 0.0, seed)
    return ds, part, LossModel(kind, dim)


class TestTrainConfig:
    def test_batch_schedule(self):
        cfg = TrainConfig(T=10, H=1, eta=0.1, b0=4, rho=1.5, batch_cap=20)
        assert [cfg.batch_size(t) for t in range(6)] == [4, 6, 9, 13, 20, 20]

    def test_constant_batch(self):
        cfg = TrainConfig(T=10, H=1, eta=0.1, b0=3)
        assert cfg.batch_size(10 ** 9) == 3

    def test_huge_exponent_saturates(self):
        cfg = TrainConfig(T=10, H=1, eta=0.1, b0=3, rho=2.0, batch_cap=50)
        assert cfg.batch_size(10 ** 6) == 50

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 64), st.floats(1.0, 1.5), st.integers(1, 500), st.integers(0, 400))
    def test_schedule_monotone_and_capped(self, b0, rho, cap, t):
        cfg = TrainConfig(T=10, H=1, eta=0.1, b0=b0, rho=rho, batch_cap=cap)
        assert cfg.batch_size(t) <= cfg.batch_size(t + 1) <= max(cap, 1)

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(T=0, H=1, eta=0.1)
        with pytest.raises(ValueError):
            TrainConfig(T=1, H=1, eta=0.0)
        with pytest.raises(ValueError):
            TrainConfig(T=1, H=1, eta=0.1, rho=0.9)

    def test_step_premise_warns(self):
        cfg = TrainConfig(T=1, H=1, eta=1.0)
        with pytest.warns(UserWarning):
            assert not cfg.check_step_premise(1.0)
        assert TrainConfig(T=1, H=1, eta=0.1).check_step_premise(1.0)

    def test_eta_from_theta(self):
        assert eta_from_theta(0.5, 4, 100) == pytest.approx(0.1)


class TestReduction:
    def test_dense_single_step_equals_reference_sgd(self):
        ds, part, model = _setup()
        parts = make_participants(part, [1.0] * 4, model.d)
        cfg = TrainConfig(T=50, H=1, eta=0.05, b0=5)
        res = run_ftlsgd_db(parts, model, ds, cfg, seed=3, record_iterates=True)
        ref = reference_sync_sgd(parts, model, ds, cfg, seed=3)
        for a, b in zip(res.server_iterates, ref):
            assert np.array_equal(a, b)

    def test_dense_run_keeps_zero_error(self):
        ds, part, model = _setup()
        parts = make_participants(part, [1.0] * 4, model.d)
        res = run_ftlsgd_db(parts, model, ds, TrainConfig(T=24, H=3, eta=0.05, b0=4), seed=1, check_invariants=True)
        assert all(np.all(p.err == 0) for p in parts)
        assert res.lemma_report.ok

    def test_gradient_descent_converges(self):
        ds, part, model = _setup(M=1, n=200, dim=5)
        shard = part.shards[0]
        parts = make_participants(part, [1.0], model.d)
        cfg = TrainConfig(T=400, H=1, eta=0.3, b0=len(shard))
        res = run_ftlsgd_db(parts, model, ds, cfg, seed=0)
        assert np.linalg.norm(global_grad(model, res.w, ds, part)) < 1e-6


class TestErrorFeedback:
    def test_hand_computed_sync(self):
        # d=3, one device, k=1, H=1 starting from zero error
        ds = make_synthetic("least_squares", 4, 3, 0)
        model = LossModel("least_squares", 3)
        part = partition(ds, 1, 0.0, 0)
        p = Participant(0, part.shards[0], SparsityLevel(3.0, 3))
        cfg = TrainConfig(T=1, H=1, eta=0.1, b0=4)
        res = run_ftlsgd_db([p], model, ds, cfg, seed=0)
        X, y = ds.X, ds.y
        g = X.T @ (X @ np.zeros(3) - y) / 4
        u = -(-0.1 * g)  # e - (w_half - w) with e = 0
        j = int(np.argmax(np.abs(u)))
        kept = np.zeros(3)
        kept[j] = u[j]
        np.testing.assert_allclose(res.w, -kept, atol=1e-15)
        np.testing.assert_allclose(p.err, u - kept, atol=1e-15)
        # identity: e_new + upload == e_old + w - w_half
        np.testing.assert_allclose(p.err + kept, 0.1 * g, atol=1e-15)

    def test_instrumented_run_has_no_violations(self):
        ds, part, model = _setup(dim=32, n=800)
        parts = make_participants(part, [16.0] * 4, model.d)
        res = run_ftlsgd_db(parts, model, ds, TrainConfig(T=200, H=4, eta=0.02, b0=4), seed=0, check_invariants=True)
        rep = res.lemma_report
        assert rep.ok, rep.violations[:3]
        assert rep.checks == 50
        assert rep.max_error_identity_residual <= 1e-12
        assert rep.max_virtual_residual <= 1e-9
        assert 0 < rep.max_memory_ratio <= 1.0

    def test_checker_flags_broken_identity(self):
        z = np.zeros(2)
        state = SyncState(
            t=0, w=z, w_half=[np.array([1.0, 0.0])], err_before=[z], err_after=[np.array([0.5, 0.0])],
            uploads=[np.array([0.0, 0.0])], w_hat_mean=z, w_tilde=z, deltas=[2.0], eta=0.1, H=1, G_hat=1.0,
        )
        rep = check_lemma_invariants(state, LemmaReport())
        kinds = {v["invariant"] for v in rep.violations}
        assert "error_identity" in kinds
        assert "bounded_memory" in kinds
        assert "virtual_sequence" in kinds


class TestEnergyAccounting:
    def _em(self, M, d):
        return EnergyModel(
            d=d,
            channels=[ChannelParams(tx_power=0.1 * (m + 1), fading="fixed_rate", rate=1e4 * (m + 1)) for m in range(M)],
            gpus=[GpuParams().with_energy(0.01 * (m + 1)) for m in range(M)],
        )

    def test_cumulative_energy_matches_exact_payload(self):
        ds, part, model = _setup(M=2, dim=20)
        em = self._em(2, 20)
        parts = make_participants(part, [5.0, 10.0], 20, em)
        res = run_ftlsgd_db(parts, model, ds, TrainConfig(T=12, H=3, eta=0.05, b0=4), em, seed=0)
        last = res.trace[-1]
        for m, delta in enumerate([5.0, 10.0]):
            bits = payload_exact(SparsityLevel(delta, 20)).bits_total
            assert last.energy_comm[m] == pytest.approx(4 * 0.1 * (m + 1) * bits / (1e4 * (m + 1)))
            assert last.energy_comp[m] == pytest.approx(12 * 0.01 * (m + 1))
        for a, b in zip(res.trace, res.trace[1:]):
            assert all(y >= x for x, y in zip(a.energy_comm, b.energy_comm))
        uploads = [r for r in res.trace if r.bits_total > 0]
        assert [r.t for r in uploads] == [2, 5, 8, 11]

    def test_plan_outside_box_rejected(self):
        ds, part, model = _setup(M=2, dim=20)
        em = self._em(2, 20)
        parts = make_participants(part, [2.0, 10.0], 20, em)
        with pytest.raises(ValueError):
            run_ftlsgd_db(parts, model, ds, TrainConfig(T=2, H=1, eta=0.05), em)


class TestDeterminismAndIO:
    def test_same_seed_same_trace(self):
        ds, part, model = _setup(kind="logistic", dim=10)
        cfg = TrainConfig(T=30, H=2, eta=0.1, b0=4, rho=1.05, batch_cap=40)
        a = run_ftlsgd_db(make_participants(part, [4.0] * 4, 10), model, ds, cfg, seed=9)
        b = run_ftlsgd_db(make_participants(part, [4.0] * 4, 10), model, ds, cfg, seed=9)
        assert a.trace == b.trace
        assert np.array_equal(a.w, b.w)

    def test_threaded_workers_match_serial(self):
        ds, part, model = _setup(kind="logistic", dim=10)
        cfg = TrainConfig(T=20, H=2, eta=0.1, b0=4)
        a = run_ftlsgd_db(make_participants(part, [4.0] * 4, 10), model, ds, cfg, seed=2)
        b = run_ftlsgd_db(make_participants(part, [4.0] * 4, 10), model, ds, cfg, seed=2, workers=3)
        assert a.trace == b.trace

    def test_trace_round_trip(self, tmp_path):
        ds, part, model = _setup(kind="logistic", dim=10)
        res = run_ftlsgd_db(make_participants(part, [4.0] * 4, 10), model, ds, TrainConfig(T=10, H=2, eta=0.1), seed=2)
        write_trace_jsonl(res.trace, tmp_path / "t.jsonl")
        assert read_trace_jsonl(tmp_path / "t.jsonl") == res.trace
        write_trace_csv(res.trace, tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "t,loss,grad_norm_sq_mean,bits_total,energy_comm_J,energy_comp_J"
        assert len(lines) == 11

    def test_stop_at_target(self):
        ds, part, model = _setup(kind="logistic", dim=10)
        res = run_ftlsgd_db(make_participants(part, [1.0] * 4, 10), model, ds, TrainConfig(T=500, H=1, eta=0.5, b0=8), seed=0, stop_loss=0.5)
        assert res.stopped_at == len(res.trace) - 1
        assert res.trace[-1].loss <= 0.5 < res.trace[-2].loss

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_reported(self):
        ds, part, model = _setup(dim=10)
        with pytest.raises(DivergenceError) as exc:
            run_ftlsgd_db(make_participants(part, [1.0] * 4, 10), model, ds, TrainConfig(T=2000, H=1, eta=50.0, b0=8), seed=0)
        assert exc.value.t >= 0
