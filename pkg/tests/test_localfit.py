import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from elrdd.errors import DataSupportError, InputError, NumericalError
from elrdd.kernel import compute_kernel_constants, equivalent_kernel
from elrdd.localfit import (Sample, amse_bandwidth, build_weights,
                            cdf_pilot_density_derivatives,
                            density_and_derivative, global_poly_derivative,
                            local_poly_derivative, local_poly_fit, pilot_moments,
                            silverman_pilot, smoother_weights)

KC = compute_kernel_constants("triangular")


def grid_sample(fun, n=2001, lo=-1.0, hi=1.0):
    x = np.linspace(lo, hi, n)
    return Sample(x, {"y": fun(x)}, 0.0)


def test_sample_validation():
    with pytest.raises(InputError):
        Sample([0.0, 1.0], {"y": [1.0]}, 0.0)
    with pytest.raises(InputError):
        Sample([0.0, np.nan], {"y": [1.0, 2.0]}, 0.0)
    s = Sample([0.0, 1.0, -1.0], {"y": [1, 2, 3]}, 0.0)
    assert s.n == 3
    with pytest.raises(InputError):
        s["nope"]
    assert s.side_mask("plus").tolist() == [True, True, False]


def test_weights_at_cutoff_and_outside():
    x = np.concatenate([[0.0, 0.2], np.linspace(-0.9, -0.01, 20), np.linspace(0.01, 0.9, 20)])
    s = Sample(x, {}, 0.0)
    w = build_weights(s, 0.1, KC, min_side_count=1)
    assert abs(w.w_plus[0] - 6.0) < 1e-12 and w.w_minus[0] == 0.0
    assert w.w_plus[1] == 0.0 and w.w_minus[1] == 0.0       # 2h away
    assert np.all(w.w_plus[x < 0] == 0) and np.all(w.w_minus[x >= 0] == 0)
    assert np.all(w.w_plus[np.abs(x) > 0.1] == 0)


def test_weights_match_equivalent_kernel():
    rng = np.random.default_rng(0)
    s = Sample(rng.uniform(-1, 1, 500), {}, 0.0)
    h = 0.3
    w = build_weights(s, h, KC)
    u = s.x / h
    np.testing.assert_allclose(w.w_plus, equivalent_kernel("triangular", KC, "plus", u))
    np.testing.assert_allclose(w.w_minus, equivalent_kernel("triangular", KC, "minus", u))


@pytest.mark.parametrize("order", [1, 2])
def test_weight_orthogonality(order):
    s = Sample(np.linspace(-1, 1, 40001), {}, 0.0)
    h = 0.5
    w = build_weights(s, h, KC, order=order)
    u = s.x / h
    for wv in (w.w_plus, w.w_minus):
        tot = wv.sum()
        # Riemann sum of the equivalent kernel integrates to one
        assert abs(tot * (s.x[1] - s.x[0]) / h - 1) < 1e-3
        for j in range(1, order + 1):
            assert abs((wv * u**j).sum() / tot) < 1e-3


def test_weights_support_error():
    s = Sample(np.linspace(-1, 1, 30), {}, 0.0)
    with pytest.raises(DataSupportError, match="side"):
        build_weights(s, 0.1, KC)
    with pytest.raises(InputError):
        build_weights(s, -1.0, KC)


def test_polynomial_reproduction_examples():
    s = grid_sample(lambda x: 2 + 3 * x)
    assert abs(local_poly_derivative(s, "y", "minus", 0, 0.3).value - 2.0) < 1e-8
    assert abs(local_poly_derivative(s, "y", "minus", 1, 0.3).value - 3.0) < 1e-8
    s2 = grid_sample(lambda x: x**2)
    assert abs(local_poly_derivative(s2, "y", "plus", 2, 0.5).value - 2.0) < 2e-2


@given(st.integers(0, 3), st.lists(st.floats(-3, 3), min_size=4, max_size=4),
       st.sampled_from(["plus", "minus"]))
def test_polynomial_reproduction_property(p, coef, side):
    coef = np.array(coef[: p + 1])
    s = grid_sample(lambda x: np.polyval(coef[::-1], x), n=801)
    b = local_poly_fit(s, s["y"], side, 0.6, p)
    np.testing.assert_allclose(b, coef, atol=1e-7 * (1 + np.abs(coef).max()))


def test_singular_fit():
    s = Sample(np.array([0.1] * 5 + [-0.1] * 5), {"y": np.arange(10.0)}, 0.0)
    with pytest.raises(NumericalError):
        local_poly_derivative(s, "y", "plus", 1, 0.5)
    with pytest.raises(InputError):
        local_poly_derivative(s, "y", "plus", 4, 0.5)


def test_smoother_weights_match_fit():
    rng = np.random.default_rng(3)
    s = Sample(rng.uniform(-1, 1, 300), {"y": rng.standard_normal(300)}, 0.0)
    idx, ell = smoother_weights(s, "plus", 0.4)
    assert abs(ell.sum() - 1) < 1e-12
    fit = local_poly_derivative(s, "y", "plus", 0, 0.4).value
    assert abs(ell @ s["y"][idx] - fit) < 1e-10


def test_density_uniform():
    rng = np.random.default_rng(5)
    s = Sample(rng.uniform(-1, 1, 200_000), {}, 0.0)
    phi, phi1 = density_and_derivative(s, 0.2, 0.3)
    assert abs(phi - 0.5) < 0.05 and abs(phi1) < 0.1
    one = Sample(np.array([0.0]), {}, 0.0)
    assert density_and_derivative(one, 1.0, 1.0)[0] == 1.0


def test_density_slope_sign():
    # Beta(2,4) rescaled: f(0) = 0.625, f'(0) = -1.25
    rng = np.random.default_rng(9)
    x = 2 * rng.beta(2, 4, 400_000) - 1
    phi, phi1 = density_and_derivative(Sample(x, {}, 0.0), 0.1, 0.25)
    assert abs(phi - 0.625) < 0.02
    assert abs(phi1 + 1.25) < 0.15


def test_cdf_pilot():
    rng = np.random.default_rng(11)
    s = Sample(rng.uniform(0, 1, 50_000), {}, 0.5)
    p2, p3 = cdf_pilot_density_derivatives(s)
    assert abs(p2) < 0.5 and abs(p3) < 0.5
    s2 = Sample(np.sqrt(rng.uniform(0, 1, 50_000)), {}, 0.5)   # density 2x
    p2, _ = cdf_pilot_density_derivatives(s2)
    assert abs(p2) < 0.5
    with pytest.raises(DataSupportError):
        cdf_pilot_density_derivatives(Sample(np.array([0.1, 0.2, 0.3]), {}, 0.0))


def test_pilot_moments_and_silverman():
    rng = np.random.default_rng(13)
    x = rng.uniform(-1, 1, 100_000)
    s = Sample(x, {"c": np.ones_like(x)}, 0.0)
    s2m, s2p, phi = pilot_moments(s, "c", 0.5)
    assert s2m == 0 and s2p == 0 and abs(phi - 0.5) < 0.05
    z = rng.standard_normal(100_000)
    z = (z - z.mean()) / z.std(ddof=1)
    assert abs(silverman_pilot(Sample(z, {}, 0.0)) - 0.184) < 1e-12
    with pytest.raises(DataSupportError):
        pilot_moments(Sample(np.array([-0.9, 0.01, 0.02, 0.9]), {"c": np.ones(4)}, 0.0),
                      "c", 0.5)


def test_global_pilot_recovers_polynomial():
    s = grid_sample(lambda x: 1 + x + 0.5 * x**2 + 2 * x**3)
    # order p = 2 regression on r_3 returns 3! * 2 = 12
    assert abs(global_poly_derivative(s, "y", "plus", 2) - 12.0) < 1e-8


def test_amse_bandwidth_scaling():
    h1 = amse_bandwidth(1000, 1, "plus", 0.25, 0.5, 2.0, KC)
    h2 = amse_bandwidth(8000, 1, "plus", 0.25, 0.5, 2.0, KC)
    # p = 2: rate n^{-1/7}
    assert abs(h2 / h1 - 8 ** (-1 / 7)) < 1e-12
    assert amse_bandwidth(1000, 1, "plus", 0.25, 0.5, 0.0, KC) == np.inf


def moment_ratio_bias(h, g, f):
    """Population moment-ratio bias of the minus intercept by quadrature."""
    k = lambda x: equivalent_kernel("triangular", KC, "minus", x / h)
    num = integrate.quad(lambda x: k(x) * g(x) * f(x), -h, 0, epsabs=1e-14, epsrel=1e-13)[0]
    den = integrate.quad(lambda x: k(x) * f(x), -h, 0, epsabs=1e-14, epsrel=1e-13)[0]
    return abs(num / den - g(0.0))


def beta24_density(x):
    return stats.beta.pdf((x + 1) / 2, 2, 4) / 2


def test_bias_order():
    hs = np.array([0.4, 0.2, 0.1, 0.05])
    g = lambda x: np.sin(2 * x) + np.cos(x)
    err = np.array([moment_ratio_bias(h, g, beta24_density) for h in hs])
    slope = np.polyfit(np.log(hs), np.log(err), 1)[0]
    assert 1.7 <= slope <= 2.3


def test_linear_moment_ratio_exact():
    s = Sample(np.linspace(-1, 1, 4001), {}, 0.0)
    w = build_weights(s, 0.37, KC)
    for g0, g1 in ((1.0, 2.0), (-3.0, 0.5)):
        y = g0 + g1 * s.x
        # sample moment ratio on a fine grid approximates the exact identity
        assert abs((w.w_minus * y).sum() / w.w_minus.sum() - g0) < 1e-4


def test_bias_order_steep_polynomial_small_h():
    # quintic with large coefficients is pre-asymptotic at h = 0.4
    g = lambda x: np.polyval([7.33, 21.54, 20.21, 7.18, 1.27, 0.48], x)
    hs = np.array([0.05, 0.025, 0.0125])
    err = np.array([moment_ratio_bias(h, g, beta24_density) for h in hs])
    slope = np.polyfit(np.log(hs), np.log(err), 1)[0]
    assert 1.9 <= slope <= 2.1
