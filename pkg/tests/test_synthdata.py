import pytest
import torch

from depthdiff.errors import ParameterError
from depthdiff.normalize import percentiles
from depthdiff.synthdata import Primitive, SceneSpec, generate, render_sample


@pytest.fixture
def spec():
    return SceneSpec(image_size=16, seed=11)


class TestRender:
    def test_empty_scene_is_background(self, spec):
        sample = render_sample(spec, 0, primitives=[])
        assert torch.equal(sample.depth.values, torch.full((16, 16), spec.d_max))
        assert bool(sample.depth.valid.all())
        shading = sample.image[0]
        assert torch.equal(shading, torch.full_like(shading, shading[0, 0].item()))

    def test_full_frame_primitive_sets_constant_depth(self, spec):
        wall = Primitive("rect", cx=0.5, cy=0.5, half_w=1.0, half_h=1.0, depth=4.0)
        sample = render_sample(spec, 0, primitives=[wall])
        assert torch.allclose(sample.depth.values, torch.full((16, 16), 4.0))

    def test_nearest_primitive_wins(self, spec):
        far = Primitive("rect", 0.5, 0.5, 1.0, 1.0, depth=8.0)
        near = Primitive("ellipse", 0.5, 0.5, 0.2, 0.2, depth=2.0)
        for order in ([far, near], [near, far]):
            depth = render_sample(spec, 0, primitives=order).depth.values
            assert depth[8, 8].item() == pytest.approx(2.0)
            assert depth[0, 0].item() == pytest.approx(8.0)

    def test_image_channels_in_unit_range(self, spec):
        sample = generate(spec, 1)[0]
        assert sample.image.shape == (3, 16, 16)
        assert sample.image.dtype == torch.float32
        assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0

    def test_depth_within_range(self, spec):
        for sample in generate(spec, 5):
            assert spec.d_min <= sample.depth.values.min() <= sample.depth.values.max() <= spec.d_max


class TestGenerate:
    def test_bit_identical_across_calls(self, spec):
        a, b = generate(spec, 3), generate(spec, 3)
        for x, y in zip(a, b):
            assert torch.equal(x.image, y.image)
            assert torch.equal(x.depth.values, y.depth.values)

    def test_prefix_stable(self, spec):
        assert torch.equal(generate(spec, 2)[1].image, generate(spec, 4)[1].image)

    def test_seed_changes_scenes(self, spec):
        other = SceneSpec(image_size=16, seed=12)
        assert not torch.equal(generate(spec, 1)[0].image, generate(other, 1)[0].image)

    def test_scenes_have_usable_depth_range(self, spec):
        for sample in generate(spec, 5):
            assert not percentiles(sample.depth).degenerate

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"d_min": 5.0, "d_max": 5.0},
            {"image_size": 1},
            {"min_primitives": 5, "max_primitives": 2},
            {"tail_exponent": 0.0},
        ],
    )
    def test_rejects_bad_spec(self, kwargs):
        with pytest.raises(ParameterError):
            generate(SceneSpec(**kwargs), 1)

    def test_needs_a_sample(self, spec):
        with pytest.raises(ParameterError):
            generate(spec, 0)


def near_fraction(tail_exponent, n):
    spec = SceneSpec(tail_exponent=tail_exponent, seed=0)
    midpoint = (spec.d_min + spec.d_max) / 2
    near = total = 0
    for sample in generate(spec, n):
        near += int((sample.depth.values < midpoint).sum())
        total += sample.depth.values.numel()
    return near / total


@pytest.mark.slow
def test_tail_exponent_crowds_the_near_range():
    assert near_fraction(2.0, 1000) >= 0.6
    assert near_fraction(2.0, 200) > near_fraction(1.0, 200)


def pooled_depths(spec, n):
    return torch.cat([s.depth.values[s.depth.valid].double() for s in generate(spec, n)])


@pytest.mark.slow
@pytest.mark.parametrize("tail_exponent", [2.0, 3.0])
def test_depth_histogram_is_right_skewed(tail_exponent):
    d = pooled_depths(SceneSpec(tail_exponent=tail_exponent, seed=0), 200)
    centered = d - d.mean()
    skewness = (centered**3).mean() / (centered**2).mean() ** 1.5
    assert skewness.item() > 0


@pytest.mark.slow
def test_image_predicts_inverse_depth_linearly():
    samples = generate(SceneSpec(image_size=32, seed=5), 64)
    features, targets = [], []
    for s in samples:
        valid = s.depth.valid
        pixels = s.image.double()[:, valid].T
        features.append(torch.cat([pixels, torch.ones(len(pixels), 1, dtype=torch.float64)], dim=1))
        targets.append(1.0 / s.depth.values[valid].double())
    X, y = torch.cat(features), torch.cat(targets)
    coef = torch.linalg.lstsq(X, y[:, None]).solution
    residual = y - (X @ coef).squeeze(1)
    r2 = 1 - (residual**2).sum() / ((y - y.mean()) ** 2).sum()
    assert r2.item() > 0.3
