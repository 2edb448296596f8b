import pytest
import torch
from torch.nn import functional as F

from depthdiff.errors import ParameterError, ShapeError
from depthdiff.loss import latent_loss, total_loss, variance_loss
from depthdiff.ops import gradient_check


def errors(*values):
    return torch.tensor(values, dtype=torch.float64).view(1, 1, 1, -1)


class TestLatentLoss:
    def test_perfect_prediction(self, seed):
        eps = torch.randn(2, 3, 4, 4)
        assert latent_loss(eps, eps, torch.rand(2, 4, 4)).item() == 0.0

    def test_unit_error_with_unit_weights(self):
        eps = torch.zeros(1, 2, 2, 2)
        assert latent_loss(eps + 1, eps, torch.ones(1, 2, 2)).item() == 1.0

    def test_weights_scale_each_position(self):
        eps = torch.zeros(1, 1, 1, 2)
        w = torch.tensor([[[0.0, 2.0]]])
        assert latent_loss(eps + 1, eps, w).item() == 1.0

    def test_full_shape_weights(self):
        eps = torch.zeros(1, 2, 1, 1)
        w = torch.tensor([1.0, 3.0]).view(1, 2, 1, 1)
        assert latent_loss(eps + 1, eps, w).item() == 2.0

    def test_rejects_mismatched_weights(self):
        with pytest.raises(ShapeError):
            latent_loss(torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 2, 2), torch.ones(1, 3, 3))

    def test_rejects_mismatched_pair(self):
        with pytest.raises(ShapeError):
            latent_loss(torch.zeros(1, 2, 2, 2), torch.zeros(1, 1, 2, 2), torch.ones(1, 2, 2))


class TestVarianceLoss:
    def test_constant_error_has_no_variance(self):
        eps = torch.zeros(2, 1, 2, 2)
        assert variance_loss(eps + 0.3, eps).item() == pytest.approx(0.0, abs=1e-12)

    def test_population_variance(self):
        eps_hat = torch.tensor([0.0, 2.0]).view(1, 1, 1, 2)
        assert variance_loss(eps_hat, torch.zeros_like(eps_hat)).item() == 1.0

    def test_four_errors(self):
        eps_hat = errors(1.0, 2.0, 3.0, 4.0)
        assert variance_loss(eps_hat, torch.zeros_like(eps_hat)).item() == pytest.approx(1.25)

    def test_invalid_positions_do_not_count(self, seed):
        eps = torch.randn(2, 3, 2, 2, dtype=torch.float64)
        eps_hat = torch.randn(2, 3, 2, 2, dtype=torch.float64)
        valid = torch.ones(2, 2, 2, dtype=torch.bool)
        valid[1, 0, 1] = False
        before = variance_loss(eps_hat, eps, valid)

        moved = eps_hat.clone()
        moved[1, :, 0, 1] += 100.0
        assert torch.equal(variance_loss(moved, eps, valid), before)

        kept = (eps_hat - eps)[valid.unsqueeze(1).expand_as(eps)]
        assert before.item() == pytest.approx(torch.var(kept, correction=0).item())

    def test_no_valid_positions(self):
        eps = torch.zeros(1, 2, 2, 2)
        valid = torch.zeros(1, 2, 2, dtype=torch.bool)
        assert variance_loss(eps + torch.arange(8.0).view_as(eps), eps, valid).item() == 0.0


class TestTotalLoss:
    def test_combines_terms(self):
        eps_hat = torch.tensor([0.0, 2.0]).view(1, 1, 1, 2)
        eps = torch.zeros_like(eps_hat)
        report = total_loss(eps_hat, eps, torch.ones(1, 1, 2), lam=0.5)
        assert report.latent.item() == 2.0
        assert report.var.item() == 1.0
        assert report.total.item() == 2.5
        assert report.as_dict() == {"L_latent": 2.0, "L_var": 1.0, "L_total": 2.5}

    def test_lam_zero_drops_variance(self):
        eps_hat = torch.tensor([0.0, 2.0]).view(1, 1, 1, 2)
        report = total_loss(eps_hat, torch.zeros_like(eps_hat), torch.ones(1, 1, 2), lam=0.0)
        assert report.total.item() == report.latent.item()

    def test_rejects_negative_lam(self):
        eps = torch.zeros(1, 1, 1, 1)
        with pytest.raises(ParameterError):
            total_loss(eps, eps, torch.ones(1, 1, 1), lam=-1.0)

    def test_unit_weights_without_variance_is_mse(self, seed):
        eps_hat = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        eps = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        report = total_loss(eps_hat, eps, torch.ones(2, 4, 4, dtype=torch.float64), lam=0.0)
        assert torch.allclose(report.total, F.mse_loss(eps_hat, eps), rtol=1e-12, atol=0)

    def test_constant_errors_minimize_total_for_fixed_mean_square(self):
        g = torch.Generator().manual_seed(0)
        w = torch.ones(1, 1, 3, dtype=torch.float64)
        constant = total_loss(errors(1.0, 1.0, 1.0), torch.zeros(1, 1, 1, 3, dtype=torch.float64), w)
        assert constant.total.item() == pytest.approx(1.0)
        for _ in range(100):
            e = torch.randn(3, generator=g, dtype=torch.float64)
            e = e / e.pow(2).mean().sqrt()
            report = total_loss(e.view(1, 1, 1, 3), torch.zeros(1, 1, 1, 3, dtype=torch.float64), w)
            assert report.latent.item() == pytest.approx(1.0)
            assert report.total.item() >= constant.total.item() - 1e-12

    def test_gradient_matches_finite_differences(self, seed):
        eps = torch.randn(2, 2, 3, 3, dtype=torch.float64)
        w = torch.rand(2, 3, 3, dtype=torch.float64) * 2
        valid = torch.rand(2, 3, 3) > 0.3
        assert gradient_check(lambda e: total_loss(e, eps, w, lam=1.0).total, [torch.randn(2, 2, 3, 3)])
        assert gradient_check(
            lambda e: total_loss(e, eps, w, lam=0.5, valid=valid).total, [torch.randn(2, 2, 3, 3)]
        )
