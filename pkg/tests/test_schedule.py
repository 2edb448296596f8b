import math

import pytest
import torch

from depthdiff.errors import ParameterError
from depthdiff.schedule import (
    build_schedule,
    ddim_sample,
    ddim_step,
    ddim_timesteps,
    ensemble_infer,
    ensemble_seeds,
    forward_noise,
)


@pytest.fixture
def sd_schedule():
    return build_schedule(1000, 0.00085, 0.012, "scaled_linear")


def oracle(z0, sched):
    """Noise predictor that knows the clean latent."""

    def predict(z_t, t):
        a = sched.alpha_bar(t)
        return (z_t - a.sqrt() * z0) / (1 - a).sqrt()

    return predict


class TestNoiseSchedule:
    def test_single_step(self):
        sched = build_schedule(1, 0.5, 0.5, "linear")
        assert sched.alpha_bar(1).item() == pytest.approx(0.5)
        assert sched.snr_max == pytest.approx(1.0)

    def test_two_linear_steps(self):
        sched = build_schedule(2, 0.1, 0.2, "linear")
        assert sched.alphas_cumprod.tolist() == pytest.approx([0.9, 0.72])

    def test_alpha_bar_zero_is_one(self):
        assert build_schedule(2, 0.1, 0.2, "linear").alpha_bar(0).item() == 1.0

    def test_scaled_linear_is_decreasing_and_ends_noisy(self, sd_schedule):
        a = sd_schedule.alphas_cumprod
        assert bool((a[1:] < a[:-1]).all())
        assert a[-1].item() < 1e-2
        assert bool((sd_schedule.snr[1:] < sd_schedule.snr[:-1]).all())

    def test_default_training_schedule_ends_as_noisy(self, tiny_config):
        s = tiny_config.schedule
        sched = build_schedule(200, s.beta_start, s.beta_end, s.kind)
        assert sched.alphas_cumprod[-1].item() < 1e-2

    @pytest.mark.parametrize(
        "args", [(0, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0)]
    )
    def test_rejects_bad_parameters(self, args):
        with pytest.raises(ParameterError):
            build_schedule(*args, kind="linear")

    def test_rejects_unknown_kind(self):
        with pytest.raises(ParameterError):
            build_schedule(10, 0.1, 0.2, "cosine")

    def test_timestep_range(self, sd_schedule):
        with pytest.raises(ParameterError):
            sd_schedule.snr_at(0)
        with pytest.raises(ParameterError):
            sd_schedule.alpha_bar(1001)


class TestForwardNoise:
    def test_quarter_alpha_bar(self):
        sched = build_schedule(1, 0.75, 0.75, "linear")
        z0, eps = torch.tensor([2.0]), torch.tensor([1.0])
        z_t = forward_noise(z0, 1, eps, sched)
        assert z_t.item() == pytest.approx(0.5 * 2.0 + math.sqrt(0.75))

    def test_tiny_beta_keeps_signal(self):
        sched = build_schedule(1, 1e-8, 1e-8, "linear")
        z0 = torch.tensor([0.3, -0.7], dtype=torch.float64)
        assert torch.allclose(forward_noise(z0, 1, torch.ones(2, dtype=torch.float64), sched), z0, atol=1e-3)

    def test_per_sample_timesteps(self, sd_schedule):
        z0 = torch.ones(2, 1, 2, 2, dtype=torch.float64)
        z_t = forward_noise(z0, torch.tensor([1, 1000]), torch.zeros_like(z0), sd_schedule)
        assert z_t[0].mean().item() == pytest.approx(sd_schedule.alpha_bar(1).sqrt().item())
        assert z_t[1].mean().item() == pytest.approx(sd_schedule.alpha_bar(1000).sqrt().item())

    def test_noise_variance(self, sd_schedule):
        eps = torch.randn(100_000, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        z_t = forward_noise(torch.zeros_like(eps), 500, eps, sd_schedule)
        expected = 1 - sd_schedule.alpha_bar(500).item()
        assert z_t.var().item() == pytest.approx(expected, rel=0.02)


class TestDDIM:
    def test_last_step_returns_clean_estimate(self, sd_schedule):
        z0 = torch.randn(1, 4, 2, 2, dtype=torch.float64)
        eps = torch.randn_like(z0)
        z_t = forward_noise(z0, 30, eps, sd_schedule)
        assert torch.allclose(ddim_step(z_t, eps, 30, 0, sd_schedule), z0, atol=1e-10)

    def test_steps_must_decrease(self, sd_schedule):
        z = torch.zeros(1, 1, 1, 1)
        with pytest.raises(ParameterError):
            ddim_step(z, z, 10, 10, sd_schedule)

    def test_timesteps(self):
        ts = ddim_timesteps(1000, 50)
        assert ts[0] == 1000 and ts[-1] == 1
        assert all(a > b for a, b in zip(ts, ts[1:]))
        assert ddim_timesteps(1000, 1) == [1000]

    def test_rejects_more_steps_than_timesteps(self):
        with pytest.raises(ParameterError):
            ddim_timesteps(10, 11)

    @pytest.mark.parametrize("n_steps", [1, 5, 20, 50])
    def test_oracle_predictor_recovers_clean_latent(self, sd_schedule, n_steps):
        g = torch.Generator().manual_seed(n_steps)
        z0 = torch.randn(1, 4, 3, 3, generator=g, dtype=torch.float64)
        z_T = torch.randn(z0.shape, generator=g, dtype=torch.float64)
        out = ddim_sample(oracle(z0, sd_schedule), z_T, sd_schedule, n_steps)
        assert (out - z0).abs().max().item() < 1e-4


class TestEnsemble:
    r = 4

    @staticmethod
    def shrink(z, z_x, t):
        return 0.5 * z + 0.1 * z_x

    @pytest.fixture
    def z_x(self):
        return torch.randn(48, 2, 2, generator=torch.Generator().manual_seed(1))

    def run(self, z_x, runs, seeds, n_steps=5):
        sched = build_schedule(50, 0.001, 0.02, "scaled_linear")
        return ensemble_infer(self.shrink, z_x, runs, seeds, sched, n_steps, self.r)

    def test_output_is_normalized_depth(self, z_x):
        d = self.run(z_x, 2, ensemble_seeds(0, 2))
        assert d.values.shape == (8, 8)
        assert d.unit == "normalized"
        assert d.values.abs().max() <= 1.0

    def test_repeated_seed_matches_single_run(self, z_x):
        single = self.run(z_x, 1, [7])
        repeated = self.run(z_x, 8, [7] * 8)
        assert torch.allclose(single.values, repeated.values, atol=1e-6)

    def test_deterministic(self, z_x):
        seeds = ensemble_seeds(3, 4)
        assert torch.equal(self.run(z_x, 4, seeds).values, self.run(z_x, 4, seeds).values)

    def test_averaging_reduces_variance(self, z_x):
        singles = torch.stack([self.run(z_x, 1, ensemble_seeds(s, 1)).values for s in range(10)])
        means = torch.stack([self.run(z_x, 8, ensemble_seeds(s, 8)).values for s in range(10)])
        assert means.var(dim=0).mean() < singles.var(dim=0).mean()

    def test_rejects_zero_runs(self, z_x):
        with pytest.raises(ParameterError):
            self.run(z_x, 0, [])

    def test_rejects_seed_count_mismatch(self, z_x):
        with pytest.raises(ParameterError):
            self.run(z_x, 2, [1])
