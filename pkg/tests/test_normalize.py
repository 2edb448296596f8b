import pytest
import torch

from depthdiff.errors import DegenerateDepthError, EmptyInputError, ShapeError
from depthdiff.normalize import (
    DepthMap,
    PercentileStats,
    denormalize,
    normalize,
    normalize_values,
    percentiles,
)


def depth_map(values, valid=None):
    values = torch.as_tensor(values, dtype=torch.float64)
    if values.dim() == 1:
        values = values[None]
    return DepthMap.from_values(values, valid)


class TestPercentiles:
    def test_one_to_hundred(self):
        stats = percentiles(depth_map(torch.arange(1, 101)))
        assert stats.d2 == pytest.approx(2.98)
        assert stats.d98 == pytest.approx(98.02)

    def test_two_pixels_interpolate(self):
        stats = percentiles(depth_map([1.0, 9.0]))
        assert stats.d2 == pytest.approx(1.16)
        assert stats.d98 == pytest.approx(8.84)

    def test_invalid_pixels_are_ignored(self):
        values = torch.tensor([[1.0, 9.0, 1000.0]])
        stats = percentiles(depth_map(values, torch.tensor([[True, True, False]])))
        assert stats.d98 == pytest.approx(8.84)

    def test_constant_map_is_degenerate(self):
        with pytest.raises(DegenerateDepthError):
            percentiles(depth_map(torch.full((4, 4), 3.0)))

    def test_no_valid_pixels(self):
        with pytest.raises(EmptyInputError):
            percentiles(depth_map(torch.zeros(2, 2)))


class TestNormalize:
    stats = PercentileStats(2.0, 10.0)

    def test_endpoints_and_midpoint(self):
        out = normalize_values(torch.tensor([2.0, 6.0, 10.0]), self.stats)
        assert out.tolist() == [-1.0, 0.0, 1.0]

    def test_tails_are_clamped(self):
        out = normalize_values(torch.tensor([0.5, 50.0]), self.stats)
        assert out.tolist() == [-1.0, 1.0]

    def test_denormalize_endpoints(self):
        d = DepthMap(torch.tensor([[-1.0, 1.0]]), torch.ones(1, 2, dtype=torch.bool), "normalized")
        assert denormalize(d, self.stats).values.tolist() == [[2.0, 10.0]]

    def test_round_trip_inside_range(self, seed):
        d = depth_map(torch.rand(8, 8) * 20 + 1)
        stats = percentiles(d)
        back = denormalize(normalize(d, stats), stats)
        inside = (d.values >= stats.d2) & (d.values <= stats.d98)
        assert torch.allclose(back.values[inside], d.values[inside], atol=1e-9)

    def test_invalid_pixels_stay_invalid(self):
        d = depth_map(torch.tensor([[1.0, 5.0, 0.0, 9.0]]))
        out = normalize(d, percentiles(d))
        assert out.valid.tolist() == [[True, True, False, True]]
        assert out.values[0, 2] == 0
        assert out.unit == "normalized"

    @pytest.mark.parametrize("a, b", [(2.5, 3.0), (0.1, 0.0), (7.0, 40.0)])
    def test_affine_equivariance(self, a, b, seed):
        d = depth_map(torch.rand(16, 16, dtype=torch.float64) * 20 + 1)
        moved = depth_map(a * d.values + b)
        expected = normalize(d, percentiles(d)).values
        assert torch.allclose(normalize(moved, percentiles(moved)).values, expected, atol=1e-9)

    def test_at_most_two_percent_per_tail(self, seed):
        d = depth_map(torch.rand(1000, dtype=torch.float64) * 10 + 1)
        stats = percentiles(d)
        n = d.values.numel()
        assert int((d.values < stats.d2).sum()) <= 0.02 * n
        assert int((d.values > stats.d98).sum()) <= 0.02 * n
        out = normalize(d, stats).values
        assert int((out == -1.0).sum()) <= 0.02 * n
        assert int((out == 1.0).sum()) <= 0.02 * n

    def test_degenerate_stats_rejected(self):
        with pytest.raises(DegenerateDepthError):
            normalize_values(torch.zeros(2), PercentileStats(1.0, 1.0))


class TestDepthMap:
    def test_from_values_marks_nonpositive_and_nan_invalid(self):
        d = depth_map(torch.tensor([[1.0, 0.0, -2.0, float("nan"), float("inf")]]))
        assert d.valid.tolist() == [[True, False, False, False, False]]

    def test_mask_shape_must_match(self):
        with pytest.raises(ShapeError):
            DepthMap(torch.zeros(2, 2), torch.zeros(2, 3, dtype=torch.bool))
