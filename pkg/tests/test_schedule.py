import numpy as np
import pytest

from powdr.schedule import forward_noise, linear_schedule


def test_schedule_endpoints():
    s = linear_schedule(1000, 1e-4, 0.02)
    assert s.beta[1] == 1e-4
    assert s.beta[1000] == 0.02
    assert s.alpha_bar[0] == 1.0


def test_alpha_bar_matches_cumprod_oracle():
    s = linear_schedule(1000, 1e-4, 0.02)
    betas = np.linspace(1e-4, 0.02, 1000)
    oracle = np.cumprod(1.0 - betas)
    np.testing.assert_allclose(s.alpha_bar[1:], oracle, rtol=1e-12)
    assert s.alpha_bar[1000] < 1e-4
    assert oracle[-1] == pytest.approx(4.0358e-5, rel=1e-3)


def test_two_step_hand_product():
    s = linear_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.beta[1:], [0.1, 0.2])
    np.testing.assert_allclose(s.alpha_bar[1:], [0.9, 0.9 * 0.8], rtol=1e-15)


def test_single_step():
    s = linear_schedule(1, 0.01, 0.02)
    assert s.beta[1] == 0.01


def test_invariants():
    s = linear_schedule(1000)
    assert np.all(np.diff(s.beta[1:]) > 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert 0 < s.alpha_bar[-1] < 1
    for t in range(1, 1001):
        assert s.alpha_bar[t] == s.alpha_bar[t - 1] * s.alpha[t]
    total = np.sqrt(s.alpha_bar) ** 2 + np.sqrt(1 - s.alpha_bar) ** 2
    np.testing.assert_allclose(total, 1.0, atol=1e-12)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.02, 0.01), (10, 0.1, 1.0)])
def test_argument_errors(args):
    with pytest.raises(ValueError):
        linear_schedule(*args)


def test_forward_noise_cases():
    s = linear_schedule(1000)
    x0 = np.random.default_rng(0).normal(size=(8, 2, 2, 2))
    np.testing.assert_allclose(forward_noise(x0, 500, np.zeros_like(x0), s),
                               np.sqrt(s.alpha_bar[500]) * x0)
    # abar = 0.75 by hand: sqrt(0.25) * 1 = 0.5
    class Fake:
        T = 1
        alpha_bar = np.array([1.0, 0.75])
    out = forward_noise(np.zeros(4), 1, np.ones(4), Fake)
    np.testing.assert_allclose(out, 0.5)


def test_forward_noise_t0_convention_is_identity():
    class Fake:
        T = 1
        alpha_bar = np.array([1.0, 1.0])
    x0 = np.arange(6.0)
    np.testing.assert_array_equal(forward_noise(x0, 1, np.ones(6), Fake), x0)


def test_forward_noise_errors():
    s = linear_schedule(10)
    with pytest.raises(ValueError):
        forward_noise(np.zeros(3), 11, np.zeros(3), s)
    with pytest.raises(ValueError):
        forward_noise(np.zeros(3), 0, np.zeros(3), s)
    with pytest.raises(ValueError, match="shape"):
        forward_noise(np.zeros(3), 1, np.zeros(4), s)


def test_per_item_steps():
    s = linear_schedule(1000)
    x0 = np.ones((3, 8, 2, 2, 2))
    out = forward_noise(x0, np.array([1, 500, 1000]), np.zeros_like(x0), s)
    np.testing.assert_allclose(out[:, 0, 0, 0, 0], np.sqrt(s.alpha_bar[[1, 500, 1000]]))


def test_variance_preservation():
    s = linear_schedule(1000)
    r = np.random.default_rng(7)
    x0 = r.standard_normal(10**6)
    eps = r.standard_normal(10**6)
    for t in (1, 250, 999):
        v = forward_noise(x0, t, eps, s).var()
        assert v == pytest.approx(1.0, rel=0.01)
