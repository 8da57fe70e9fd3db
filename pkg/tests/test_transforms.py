import numpy as np
import pytest

from conftest import check_grad
from fibalab import tensor as T
from fibalab.forge.transforms import (TransformDraw, TransformSpec, apply_draws, apply_transform_set,
                                      gaussian_kernel3, sample_draw)


def test_identity_spec_is_identity(rng):
    x = rng.uniform(size=(1, 12, 12))
    out = apply_transform_set(x, TransformSpec.identity(), 5)
    assert np.array_equal(out.data, x)


def test_zero_affine_resamples_exactly(rng):
    x = rng.uniform(size=(2, 1, 9, 9))
    draws = [TransformDraw(angle=0.0, shift=(0.0, 1e-30)) for _ in range(2)]
    assert np.allclose(apply_draws(x, draws).data, x, atol=0, rtol=0)


def test_integer_shift_moves_pixels(rng):
    x = rng.uniform(size=(1, 1, 8, 8))
    out = apply_draws(x, [TransformDraw(shift=(1.0, 0.0))]).data
    assert np.allclose(out[0, 0, 1:], x[0, 0, :-1])


def test_blur_of_impulse_is_gaussian_kernel():
    x = np.zeros((1, 1, 7, 7))
    x[0, 0, 3, 3] = 1.0
    sigma = 0.8
    out = apply_draws(x, [TransformDraw(blur_sigma=sigma)]).data[0, 0]
    ax = np.array([-1.0, 0.0, 1.0])
    k = np.exp(-(ax[:, None] ** 2 + ax[None] ** 2) / (2 * sigma ** 2))
    assert np.allclose(out[2:5, 2:5], k / k.sum(), atol=1e-15)
    assert np.allclose(gaussian_kernel3(sigma), k / k.sum())


def test_sampled_parameters_within_ranges():
    spec = TransformSpec()
    rng = np.random.default_rng(3)
    blurred = 0
    for _ in range(500):
        d = sample_draw(spec, rng, channels=3)
        assert 0.65 <= d.gain <= 0.9
        assert abs(d.offset) <= 0.15
        assert np.all(np.abs(d.channel_delta) <= 0.1)
        assert abs(d.angle) <= 5.0
        assert abs(d.shift[0]) <= 0.05 * 48 and abs(d.shift[1]) <= 0.05 * 48
        if d.blur_sigma is not None:
            assert 0.1 <= d.blur_sigma <= 2.0
            blurred += 1
    assert 0.3 < blurred / 500 < 0.5


def test_transform_is_deterministic_per_seed(rng):
    x = rng.uniform(size=(1, 10, 10))
    a = apply_transform_set(x, TransformSpec(), 42).data
    b = apply_transform_set(x, TransformSpec(), 42).data
    assert np.array_equal(a, b)


def test_fixed_draw_gradient_matches_finite_differences():
    for i in range(20):
        rng = np.random.default_rng([99, i])
        draw = sample_draw(TransformSpec(blur_probability=1.0), rng, 1, (8, 8))
        draw.gain, draw.offset = 0.8, 0.05  # keep away from the colour clip
        x = rng.uniform(0.2, 0.8, size=(1, 1, 8, 8))
        w = rng.normal(size=(1, 1, 8, 8))
        # bilinear weights are piecewise linear in the coordinates, smooth in x
        err = check_grad(lambda t: T.tsum(apply_draws(t, [draw]) * w), x)
        assert err < 1e-4
