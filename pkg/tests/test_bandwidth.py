import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, optimize

from elrdd.bandwidth import (H_MAX, CurvatureEstimates, ErrorPolynomial, bbar,
                             coverage_optimal_bandwidth, covariate_constants,
                             density_bandwidth, estimate_curvature,
                             leading_terms, min_support_bandwidth,
                             multi_constants, select_H, sharp_constants)
from elrdd.designs import DesignSpec
from elrdd.errors import DataSupportError, DegenerateDesignError
from elrdd.kernel import compute_kernel_constants
from elrdd.localfit import Sample
from elrdd.montecarlo import DGPSpec, design_for, population_curvature, true_plan

KC = compute_kernel_constants("triangular")


def scalar_poly(iota, ups, norm=1.0):
    return ErrorPolynomial(0.0, iota**2 / norm, ups / norm)


def numeric_argmin(poly):
    f = lambda s: float(poly(np.exp(s))) ** 2
    res = optimize.minimize_scalar(f, bounds=(np.log(0.05), np.log(20)),
                                   method="bounded", options={"xatol": 1e-12})
    return float(np.exp(res.x))


def test_closed_form_examples():
    H, closed, _ = select_H(scalar_poly(1.0, 5.0))
    assert closed and abs(H - 1.0) < 1e-15
    H, closed, _ = select_H(scalar_poly(0.5, 2.5))
    assert closed and abs(H - 2 ** (1 / 6)) < 1e-12
    assert abs(numeric_argmin(scalar_poly(0.5, 2.5)) - 2 ** (1 / 6)) < 1e-6


@given(st.floats(0.05, 5), st.floats(0.05, 50))
def test_closed_form_matches_numeric(iota, ups):
    poly = scalar_poly(iota, ups)
    H, closed, _ = select_H(poly)
    if closed:
        assert abs(H - numeric_argmin(poly)) < 1e-6 * max(1.0, H)


def test_covariate_objective_reduces_to_scalar():
    # theta_1 = 0, theta_2 = 1, sum of the variance terms = 5
    poly = ErrorPolynomial(-0.0, 1.0, 5.0)
    H, closed, _ = select_H(poly)
    assert abs(H - 1.0) < 1e-15
    # forced numeric path with a negligible H^2 coefficient
    H, closed, _ = select_H(ErrorPolynomial(-1e-9, 1.0, 5.0))
    assert not closed and abs(H - 1.0) < 1e-6


def test_numeric_search_with_h2_term():
    poly = ErrorPolynomial(-0.8, 0.3, 2.0)
    H, closed, _ = select_H(poly)
    grid = np.exp(np.linspace(np.log(0.05), np.log(20), 200_001))
    assert not closed
    assert poly.objective(H) <= poly.objective(grid).min() + 1e-9


def test_degenerate_and_clamp():
    with pytest.raises(DegenerateDesignError):
        select_H(ErrorPolynomial(0.0, 0.0, 0.0))
    H, closed, notes = select_H(ErrorPolynomial(0.0, 0.0, 3.0))
    assert H == H_MAX and not closed and notes


def test_bartlett_factor_example():
    poly = scalar_poly(1.0, 5.0)
    H, _, _ = select_H(poly)
    assert abs(1 + 1000 ** (-2 / 3) * poly(H) - 1.06) < 1e-12


def test_density_bandwidth_formula():
    n = 1000
    # closed-form triangular integrals by quadrature
    K = lambda u: 1 - abs(u)
    rough = integrate.quad(lambda u: K(u) ** 2, -1, 1)[0]
    mom2 = integrate.quad(lambda u: u**2 * K(u), -1, 1)[0]
    assert abs(rough - 2 / 3) < 1e-12 and abs(mom2 - 1 / 6) < 1e-12
    h = density_bandwidth(n, 0.5, 1.0, KC)
    assert abs(h - 12 ** 0.2 * n ** -0.2) < 1e-12
    assert density_bandwidth(n, 0.5, 0.0, KC) == np.inf


def test_bbar_positive_for_normal_errors():
    # sharp, homoskedastic normal residuals
    s2 = 0.1295**2
    val = bbar(KC, s2, s2, 0, 0, 3 * s2**2, 3 * s2**2)
    expected = 0.5 * (KC.gamma[4] / KC.gamma[2]) * 3 * s2 \
        + (4 * KC.gamma[3] - 2 * KC.gamma[2] ** 2) * s2 / 2
    assert abs(val - expected) < 1e-15 and val > 0


def sharp_estimates(zp, zm, k2p, k2m, k3p, k3m, k4p, k4m, phi=0.5):
    kappa = {("plus", 2): k2p, ("minus", 2): k2m, ("plus", 3): k3p,
             ("minus", 3): k3m, ("plus", 4): k4p, ("minus", 4): k4m}
    return CurvatureEstimates("sharp", phi, 0.0, {}, kappa, np.array([zp, zm]))


SCALAR_INPUTS = [(2.0, -1.0, 0.02, 0.03, 0.001, -0.002, 0.0013, 0.0025),
                 (0.5, 3.0, 1.0, 0.5, 0.0, 0.2, 3.0, 0.9)]


@pytest.mark.parametrize("vals", SCALAR_INPUTS)
def test_covariate_constants_without_covariates_reduce_to_sharp(vals):
    zp, zm, k2p, k2m, k3p, k3m, k4p, k4m = vals
    phi = 0.5
    kp = [1.0, 0.0, k2p, k3p, k4p]
    km = [1.0, 0.0, k2m, k3m, k4m]
    C = np.zeros((2, 5, 1, 1, 2, 2))
    for k in range(5):
        C[0, k, 0, 0, 0, 0] = kp[k]
        C[1, k, 0, 0, 1, 1] = km[k]
    Pi = np.array([[1.0], [1.0]])
    th = covariate_constants(KC, phi, np.array([zp, zm]), C, Pi)
    iota, ups, norm = sharp_constants(KC, phi, zp, zm, sharp_estimates(*vals).kappa)
    assert abs(th[0]) < 1e-12
    assert abs(th[1] - iota**2 / norm) < 1e-12 * max(1, th[1])
    assert abs(th[2:].sum() - ups / norm) < 1e-10 * max(1, abs(ups / norm))


@pytest.mark.parametrize("vals", SCALAR_INPUTS)
def test_joint_constants_with_one_outcome_reduce_to_sharp(vals):
    zp, zm, k2p, k2m, k3p, k3m, k4p, k4m = vals
    phi = 0.5
    est = sharp_estimates(*vals)
    poly_s, _ = leading_terms("sharp", est, KC)
    out = multi_constants(KC, phi, [zp], [zm], np.array([[k2p]]), np.array([[k2m]]),
                          np.array([[[k3p]]]), np.array([[[k3m]]]),
                          np.array([[[[k4p]]]]), np.array([[[[k4m]]]]))
    poly_m = ErrorPolynomial(0.0, out["iKi"] / out["normaliser"],
                             out["upsilon"] / out["normaliser"])
    np.testing.assert_allclose([poly_m.h5, poly_m.hinv], [poly_s.h5, poly_s.hinv],
                               rtol=1e-12)
    if poly_s.hinv > 0:
        assert abs(select_H(poly_m)[0] - select_H(poly_s)[0]) < 1e-8


ALL_DGPS = [("sharp_model1", {}), ("fuzzy_model", {}), ("sharp_cov_model2", {}),
            ("multi_outcome", {"J": 2}), ("multi_outcome", {"J": 3}),
            ("categorical_logit", {})]


@pytest.mark.parametrize("kind,params", ALL_DGPS)
def test_population_plan_is_locally_optimal(kind, params):
    dgp = DGPSpec(kind, 1000, 0, params)
    plan = true_plan(dgp)
    H = plan.H_star
    obj = plan.terms.objective
    assert obj(H) <= obj(0.5 * H) and obj(H) <= obj(2 * H)
    assert plan.h > 0 and np.isfinite(plan.bartlett_factor)
    if plan.closed_form:
        assert plan.upsilon > 0
        iki = plan.terms.h5
        assert abs(H - (plan.terms.hinv / (5 * iki)) ** (1 / 6)) < 1e-14


def test_population_sharp_values():
    plan = true_plan(DGPSpec("sharp_model1", 1000, 0))
    assert plan.closed_form
    assert abs(plan.H_star - 1.3789) < 5e-4
    assert abs(plan.bartlett_factor - 1.06766) < 5e-5
    fuzzy = true_plan(DGPSpec("fuzzy_model", 1000, 0))
    assert abs(fuzzy.H_star - plan.H_star) < 1e-12


def test_factor_tends_to_one():
    dgp = DGPSpec("sharp_model1", 1000, 0)
    poly, _ = leading_terms("sharp", population_curvature(dgp), KC)
    est = population_curvature(dgp)
    factors = [coverage_optimal_bandwidth(DesignSpec("sharp"), est, KC, n).bartlett_factor
               for n in (10**3, 10**6, 10**12)]
    assert factors[0] > factors[1] > factors[2] > 1
    assert factors[2] - 1 < 1e-6


def test_min_support_clamp():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.uniform(-1, 0, 500), rng.uniform(0, 1, 500)])
    s = Sample(x, {"y": rng.standard_normal(1000)}, 0.0)
    h_lo = min_support_bandwidth(s, 10)
    assert ((x >= 0) & (x < h_lo)).sum() >= 10 and ((x < 0) & (x > -h_lo)).sum() >= 10
    est = sharp_estimates(2.0, -1.0, 0.02, 0.03, 0.0, 0.0, 0.0012, 0.0027)
    plan = coverage_optimal_bandwidth(DesignSpec("sharp"), est, KC, 10**9, sample=s)
    assert plan.clamped and plan.h == h_lo and not plan.closed_form
    with pytest.raises(DataSupportError):
        min_support_bandwidth(Sample(x[:15], {"y": x[:15]}, -0.5), 10)


def test_estimated_curvature_noiseless_quadratic():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, 20_000)
    s = Sample(x, {"y": x**2}, 0.0)
    est = estimate_curvature(DesignSpec("sharp"), s)
    assert abs(est.phi - 0.5) < 0.05
    np.testing.assert_allclose(est.zeta, 1.0, atol=0.15)


def test_estimated_residual_moments_normal():
    # single-sample sd of the kappa_4 estimate is ~15% at n = 20000, so the
    # Monte Carlo oracle averages six independent samples
    ks = []
    for seed in range(2, 8):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, 20_000)
        s = Sample(x, {"y": x**2 + 0.5 * rng.standard_normal(x.size)}, 0.0)
        est = estimate_curvature(DesignSpec("sharp"), s)
        ks.append([[est.kappa[side, j] for j in (2, 3, 4)] for side in ("plus", "minus")])
        assert all(h > 0 for k, h in est.pilots.items() if "tilde" not in k)
    k2, k3, k4 = np.mean(ks, axis=0).T
    assert np.all(np.abs(k2 - 0.25) < 0.15 * 0.25)
    assert np.all(np.abs(k3) < 0.15 * 0.25 ** 1.5)
    assert np.all(np.abs(k4 - 0.1875) < 0.15 * 0.1875)


@pytest.mark.parametrize("kind,params", ALL_DGPS)
def test_estimated_plan_alpha_independent(kind, params):
    from elrdd.montecarlo import generate
    dgp = DGPSpec(kind, 2000, 11, params)
    spec = design_for(dgp)
    s = generate(dgp)
    est = estimate_curvature(spec, s)
    plans = [coverage_optimal_bandwidth(spec, est, KC, s.n, sample=s) for _ in range(3)]
    assert len({p.h.hex() for p in plans}) == 1
    p = plans[0]
    obj = p.terms.objective
    assert obj(p.H_star) <= obj(0.5 * p.H_star) and obj(p.H_star) <= obj(2 * p.H_star)
