from fractions import Fraction

import numpy as np
import pytest

from diffproto.diffusion import (
    DiffusionTrace,
    NoiseSchedule,
    SamplerConfig,
    ancestral_step,
    ddim_step,
    ddim_timesteps,
    direct_step,
    forward_diffuse,
    linear_schedule,
    predicted_eps,
    sample_prototypes,
)
from diffproto.numerics import RngStream
from diffproto.protonet import PrototypeSet


class ZeroDenoiser:
    def predict(self, state, vanilla, t):
        return np.zeros_like(np.asarray(state))


class ConstantDenoiser:
    def __init__(self, value):
        self.value = np.asarray(value)

    def predict(self, state, vanilla, t):
        return self.value.astype(np.asarray(state).dtype)


class OracleDenoiser:
    """Always returns the true signal; used to close the reverse loop."""

    def __init__(self, signal):
        self.signal = np.asarray(signal)

    def predict(self, state, vanilla, t):
        return self.signal


class TestLinearSchedule:
    @pytest.mark.parametrize("T", [10, 100, 1000])
    def test_endpoints_exact(self, T):
        sched = linear_schedule(T)
        assert sched.betas[1] == 1e-4
        assert sched.betas[T] == 1e-2

    def test_midpoint_value(self):
        sched = linear_schedule(100)
        # (1e-4*50 + 1e-2*49)/99, evaluated independently
        assert sched.betas[50] == (1e-4 * 50 + 1e-2 * 49) / 99
        assert abs(sched.betas[50] - 0.005) < 1e-17

    def test_alpha_bar_strictly_decreasing(self):
        for T in (10, 100, 1000):
            ab = linear_schedule(T).alpha_bars[1:]
            assert (np.diff(ab) < 0).all()

    def test_rejects_tiny_T(self):
        with pytest.raises(ValueError):
            linear_schedule(1)

    @pytest.mark.parametrize("T", [10, 100])
    def test_matches_exact_rational_schedule(self, T):
        # symbolic oracle: beta_t = ((T-t) + 100(t-1)) / (10000 (T-1)) as a Fraction
        sched = linear_schedule(T)
        for t in range(1, T + 1):
            exact_beta = Fraction(T - t + 100 * (t - 1), 10000 * (T - 1))
            assert abs(sched.betas[t] - float(exact_beta)) <= 2e-18  # within 1 ulp
            # unit variance budget: abar + (1 - abar) == 1 holds exactly in rationals
            exact_abar = Fraction(1)
            for s in range(1, t + 1):
                exact_abar *= 1 - Fraction(T - s + 100 * (s - 1), 10000 * (T - 1))
            assert exact_abar + (1 - exact_abar) == 1
            assert abs(sched.alpha_bars[t] - float(exact_abar)) < 1e-14
            assert abs(sched.one_minus_alpha_bars[t] - float(1 - exact_abar)) < 1e-14


class TestForwardDiffuse:
    def setup_method(self):
        self.sched = linear_schedule(100)
        self.rng = RngStream(31)
        self.signal = self.rng.standard_normal((5, 32))

    def test_zero_noise(self):
        out = forward_diffuse(self.signal, 40, np.zeros_like(self.signal), self.sched)
        np.testing.assert_allclose(out, np.sqrt(self.sched.alpha_bars[40]) * self.signal, rtol=1e-12)

    def test_zero_signal(self):
        eps = self.rng.standard_normal((5, 32))
        out = forward_diffuse(np.zeros_like(eps), 70, eps, self.sched)
        np.testing.assert_allclose(out, np.sqrt(self.sched.one_minus_alpha_bars[70]) * eps, rtol=1e-12)

    def test_monte_carlo_statistics(self):
        t = 50
        draws = 20_000
        eps = self.rng.standard_normal((draws,) + self.signal.shape)
        samples = np.array([forward_diffuse(self.signal, t, e, self.sched) for e in eps])
        target_mean = np.sqrt(self.sched.alpha_bars[t]) * self.signal
        mean_err = np.linalg.norm(samples.mean(axis=0) - target_mean)
        assert mean_err <= 0.01 * np.linalg.norm(self.signal)
        var = samples.var(axis=0).mean()
        expected_var = self.sched.one_minus_alpha_bars[t]
        assert abs(var - expected_var) <= 0.02 * expected_var


class TestPredictedEps:
    def setup_method(self):
        self.sched = linear_schedule(100)
        self.rng = RngStream(32)

    def test_exact_inversion(self):
        signal = self.rng.standard_normal((4, 8))
        eps = self.rng.standard_normal((4, 8))
        for t in (1, 13, 100):
            state = forward_diffuse(signal, t, eps, self.sched)
            back = predicted_eps(signal, state, t, self.sched)
            np.testing.assert_allclose(back, eps, atol=1e-10)

    def test_consistent_prediction_gives_zero(self):
        state = self.rng.standard_normal((3, 5))
        t = 37
        pred = state / np.sqrt(self.sched.alpha_bars[t])
        np.testing.assert_allclose(predicted_eps(pred, state, t, self.sched), 0.0, atol=1e-12)

    def test_random_triple_against_rearrangement_oracle(self):
        state = self.rng.standard_normal((2, 3))
        pred = self.rng.standard_normal((2, 3))
        t = 64
        got = predicted_eps(pred, state, t, self.sched)
        # independent evaluation of the rearranged forward map
        abar = self.sched.alpha_bars[t]
        oracle = (state - abar**0.5 * pred) * (1.0 - abar) ** -0.5
        np.testing.assert_allclose(got, oracle, rtol=1e-12)

    def test_sentinel_t_rejected(self):
        with pytest.raises(ValueError):
            predicted_eps(np.zeros((1, 1)), np.zeros((1, 1)), 0, self.sched)


class TestAncestralStep:
    def test_closed_loop_contracts_to_signal(self):
        sched = linear_schedule(100)
        rng = RngStream(33)
        signal = rng.standard_normal((5, 16))
        state = rng.standard_normal((5, 16))  # arbitrary start at t=T
        for t in range(100, 0, -1):
            state = ancestral_step(state, signal, t, sched, noise=None)
        assert np.abs(state - signal).max() <= 1e-6

    def test_last_step_deterministic(self):
        sched = linear_schedule(100)
        rng = RngStream(34)
        state = rng.standard_normal((2, 4))
        pred = rng.standard_normal((2, 4))
        noise = rng.standard_normal((2, 4)) * 100
        a = ancestral_step(state, pred, 1, sched, noise)
        b = ancestral_step(state, pred, 1, sched, None)
        np.testing.assert_array_equal(a, b)

    def test_zero_inputs_give_zero(self):
        sched = linear_schedule(100)
        out = ancestral_step(np.zeros((3, 3)), np.zeros((3, 3)), 42, sched, np.zeros((3, 3)))
        np.testing.assert_array_equal(out, 0.0)


class TestDirectStep:
    def test_zero_denoiser_zero_output(self):
        state = RngStream(35).standard_normal((4, 6))
        out = direct_step(state, state, 10, ZeroDenoiser())
        np.testing.assert_array_equal(out, 0.0)

    def test_constant_denoiser_fixed_point(self):
        value = RngStream(36).standard_normal((3, 4))
        d = ConstantDenoiser(value)
        once = direct_step(np.zeros_like(value), value, 9, d)
        twice = direct_step(once, value, 8, d)
        np.testing.assert_array_equal(once, twice)

    @pytest.mark.parametrize("shape", [(2, 8), (5, 32)])
    def test_shape_contract(self, shape):
        state = np.zeros(shape, dtype=np.float32)
        out = direct_step(state, state, 3, ZeroDenoiser())
        assert out.shape == shape


class TestDdimTimesteps:
    def test_ten_steps_at_stride_ten(self):
        steps = ddim_timesteps(100, 10)
        assert len(steps) == 10
        assert steps[0] == 100 and steps[-1] == 1

    def test_stride_one_full_sequence(self):
        assert ddim_timesteps(100, 1) == list(range(100, 0, -1))

    def test_stride_T_two_endpoints(self):
        assert ddim_timesteps(100, 100) == [100, 1]

    def test_strictly_decreasing_across_strides(self):
        for stride in (1, 2, 3, 5, 7, 10, 20, 50, 100):
            steps = ddim_timesteps(100, stride)
            assert all(a > b for a, b in zip(steps, steps[1:]))


class TestSamplePrototypes:
    def setup_method(self):
        self.sched = linear_schedule(100)
        self.vanilla = PrototypeSet(RngStream(37).standard_normal((5, 16)).astype(np.float32))

    @pytest.mark.parametrize("mode,stride", [("direct", 10), ("direct", 1), ("ddim", 10), ("ancestral", 1)])
    def test_zero_denoiser_returns_vanilla_exactly(self, mode, stride):
        cfg = SamplerConfig(mode=mode, stride=stride)
        protos, _ = sample_prototypes(ZeroDenoiser(), self.vanilla, self.sched, cfg, RngStream(1))
        assert protos.vectors.tobytes() == self.vanilla.vectors.tobytes()

    def test_fixed_seed_reproducible(self):
        d = ConstantDenoiser(np.full((5, 16), 0.25, dtype=np.float32))
        cfg = SamplerConfig(mode="direct", stride=10, mc_samples=3)
        a, _ = sample_prototypes(d, self.vanilla, self.sched, cfg, RngStream(5))
        b, _ = sample_prototypes(d, self.vanilla, self.sched, cfg, RngStream(5))
        assert a.vectors.tobytes() == b.vectors.tobytes()
        assert a.samples.tobytes() == b.samples.tobytes()

    def test_trace_matches_timesteps(self):
        cfg = SamplerConfig(mode="direct", stride=10)
        _, trace = sample_prototypes(
            ZeroDenoiser(), self.vanilla, self.sched, cfg, RngStream(2), record_trace=True
        )
        ts = trace.timesteps()
        assert ts[:-1] == ddim_timesteps(100, 10)
        assert ts[-1] == 0
        assert all(a > b for a, b in zip(ts, ts[1:]))

    def test_trace_export(self, tmp_path):
        cfg = SamplerConfig(mode="direct", stride=50)
        _, trace = sample_prototypes(
            ZeroDenoiser(), self.vanilla, self.sched, cfg, RngStream(3), record_trace=True
        )
        out = tmp_path / "trace.tsv"
        trace.export_text(out)
        lines = out.read_text().splitlines()
        assert lines[0] == "t\tclass\tcoord\tvalue"
        n_entries = len(ddim_timesteps(100, 50)) + 1  # visited timesteps + final t=0
        assert len(lines) == 1 + n_entries * 5 * 16

    def test_ancestral_requires_stride_one(self):
        cfg = SamplerConfig(mode="ancestral", stride=10)
        with pytest.raises(ValueError, match="stride"):
            sample_prototypes(ZeroDenoiser(), self.vanilla, self.sched, cfg, RngStream(4))

    def test_mean_prototypes_aggregate(self):
        d = ConstantDenoiser(np.full((5, 16), 0.5, dtype=np.float32))
        cfg = SamplerConfig(mode="direct", stride=10, mc_samples=4, aggregate="mean_prototypes")
        protos, _ = sample_prototypes(d, self.vanilla, self.sched, cfg, RngStream(6))
        assert protos.samples is None
        np.testing.assert_allclose(protos.vectors, self.vanilla.vectors + 0.5, rtol=1e-6)
