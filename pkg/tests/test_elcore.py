import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from elrdd.designs import DesignSpec, build_moment_system
from elrdd.elcore import (BoundSystem, _Profile, bind, el_criterion,
                          maximize_dual, profile_lr)
from elrdd.errors import InputError
from elrdd.kernel import compute_kernel_constants
from elrdd.localfit import Sample, build_weights

KC = compute_kernel_constants("triangular")


def primal_criterion(U):
    """-2 sum log(n p_i) subject to sum p_i U_i = 0 by a conic solver."""
    n = U.shape[0]
    p = cp.Variable(n)
    prob = cp.Problem(cp.Maximize(cp.sum(cp.log(p))),
                      [cp.sum(p) == 1, U.T @ p == 0])
    try:
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10,
                   tol_feas=1e-10)
    except cp.error.SolverError:
        # the interior-point method fails when zero is outside the hull
        return np.inf
    if prob.status not in ("optimal", "optimal_inaccurate"):
        return np.inf
    return float(-2 * (prob.value + n * np.log(n)))


def hand_sample():
    x = np.array([-0.8, -0.3, -0.1, 0.2, 0.6])
    y = np.array([1.0, 1.4, 0.7, 2.1, 2.6])
    return Sample(x, {"y": y}, 0.0)


def bound_for(kind, sample, h=1.0, **kw):
    spec = DesignSpec(kind, **kw)
    w = build_weights(sample, h, KC, min_side_count=1)
    return bind(build_moment_system(spec, sample), w)


def test_exact_fit_gives_zero():
    ev = maximize_dual(np.zeros((6, 2)))
    assert ev.criterion == 0 and np.all(ev.lam == 0)
    s = Sample(np.array([-0.5, -0.2, 0.3, 0.4]), {"y": np.array([1., 1., 3., 3.])}, 0.0)
    b = bound_for("sharp", s)
    ev = el_criterion(b, [3.0, 1.0])
    assert ev.criterion == 0 and np.allclose(ev.lam, 0)


def test_infeasible_sentinel():
    U = np.array([[1.0, -1.0], [2.0, 0.5], [0.1, 0.3]])
    ev = maximize_dual(U)
    assert ev.criterion == np.inf and not ev.feasible


def test_hand_dataset_matches_primal():
    b = bound_for("sharp", hand_sample())
    theta = [2.0, 1.0]
    ev = el_criterion(b, theta)
    U = b.system.omega(b.weights) * (b.system.values - b.system.design @ theta)
    assert ev.criterion > 0.1
    assert abs(ev.criterion - primal_criterion(U)) < 1e-6
    # plus weights have opposite signs, so 2.1 < g_+ < 2.6 is infeasible
    assert el_criterion(b, [2.3, 1.0]).criterion == np.inf
    assert ev.gradient_norm <= 1e-8 and ev.converged


def test_input_errors():
    b = bound_for("sharp", hand_sample())
    with pytest.raises(InputError):
        el_criterion(b, [1.0])
    with pytest.raises(InputError):
        el_criterion(b, [np.nan, 1.0])
    with pytest.raises(InputError):
        el_criterion(b.system, [1.0, 1.0])
    with pytest.raises(InputError):
        profile_lr(b, [np.inf])


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_dual_nonnegative_and_stationary(seed):
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((rng.integers(4, 30), rng.integers(1, 4)))
    ev = maximize_dual(U)
    assert ev.criterion >= 0
    if np.isfinite(ev.criterion):
        z = 1 + U @ ev.lam
        g = (U / z[:, None]).sum(0)
        Hn = (U / z[:, None]).T @ (U / z[:, None])
        assert np.sqrt(g @ np.linalg.solve(Hn, g)) <= 1e-8


def test_lr_zero_at_estimate():
    s = hand_sample()
    b = bound_for("sharp", s)
    beta = b.beta_check()
    assert abs(profile_lr(b, beta[0] - beta[1]).lr) < 1e-6
    # the moment equations hold at the sample solution
    np.testing.assert_allclose(b.moments(beta).sum(0), 0, atol=1e-12)


def nested_profile(bound, tau):
    """Minimise the primal criterion over the nuisance by bounded search."""
    sys = bound.system
    full_U = lambda nu: sys.omega(bound.weights) * (
        sys.values - sys.design @ sys.embed(tau, [nu]))
    y = sys.values[:, 0]
    lo, hi = y.min() - abs(tau) - 1, y.max() + abs(tau) + 1
    grid = np.linspace(lo, hi, 161)
    vals = np.array([primal_criterion(full_U(v)) for v in grid])
    i = int(np.argmin(vals))
    res = optimize.minimize_scalar(lambda v: primal_criterion(full_U(v)),
                                   bounds=(grid[max(i - 1, 0)], grid[min(i + 1, 160)]),
                                   method="bounded", options={"xatol": 1e-10})
    return min(res.fun, vals[i])


@pytest.mark.parametrize("tau", [0.4, 1.0, 1.6])
def test_profile_matches_nested_primal(tau):
    b = bound_for("sharp", hand_sample())
    lr = profile_lr(b, tau).lr
    assert abs(lr - nested_profile(b, tau)) < 1e-5


def test_lr_nonnegative_and_large_tau_limit():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, 400)
    s = Sample(x, {"y": x + (x >= 0) + rng.standard_normal(400) * 0.3}, 0.0)
    b = bound_for("sharp", s, h=0.5)
    vals = [profile_lr(b, t).lr for t in np.linspace(-5, 7, 13)]
    assert all(v >= 0 for v in vals)
    # boundary weights change sign, so as |tau| grows the plus-side moment
    # w_+(Y - g_+) / g_+ tends to -w_+ and LR levels off at the criterion
    # of the weight moment profiled over g_-
    w, y = b.weights, s["y"]

    def weight_moment(gm):
        U = np.column_stack([w.w_plus, w.w_minus * (y - gm)])
        return maximize_dual(U[np.any(U != 0, 1)]).criterion

    limit = optimize.minimize_scalar(weight_moment, bounds=(-1, 1), method="bounded",
                                     options={"xatol": 1e-10}).fun
    assert abs(profile_lr(b, 1e6).lr - limit) < 1e-4
    assert abs(profile_lr(b, -1e6).lr - limit) < 1e-4
    # far from the estimate the ratio exceeds every usual critical value
    assert limit > 6.635 and min(vals[0], vals[-1]) > 6.635


@given(st.floats(0.2, 5.0), st.floats(-10, 10), st.floats(-1.5, 1.5))
@settings(max_examples=25)
def test_scale_equivariance(a, c, tau):
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, 200)
    y = 0.5 * x + (x >= 0) + 0.4 * rng.standard_normal(200)
    s1 = Sample(x, {"y": y}, 0.0)
    s2 = Sample(x, {"y": a * y + c}, 0.0)
    l1 = profile_lr(bound_for("sharp", s1, h=0.6), tau).lr
    l2 = profile_lr(bound_for("sharp", s2, h=0.6), a * tau).lr
    if np.isfinite(l1):
        assert abs(l1 - l2) <= 1e-8 * max(1.0, l1)
    else:
        assert l2 == np.inf


@pytest.mark.parametrize("kind", ["fuzzy_alt", "sharp_cov", "multi_outcome"])
def test_exact_hessian_matches_finite_differences(kind):
    rng = np.random.default_rng(4)
    n = 300
    x = rng.uniform(-1, 1, n)
    d = (rng.uniform(size=n) < 0.3 + 0.4 * (x >= 0)).astype(float)
    z = rng.standard_normal(n)
    cols = {"y": x + d + 0.5 * rng.standard_normal(n), "d": d, "z": z,
            "y2": x ** 2 + rng.standard_normal(n)}
    kw = {"fuzzy_alt": dict(outcome_columns=("y",), treatment_column="d"),
          "sharp_cov": dict(outcome_columns=("y",), covariate_columns=("z",)),
          "multi_outcome": dict(outcome_columns=("y", "y2"))}[kind]
    b = bound_for(kind, Sample(x, cols, 0.0), h=0.7, **kw)
    beta = b.beta_check()
    tau = b.system.rho(beta) + 0.15
    prof = _Profile(b, tau)
    eta = beta[b.system.dim_rho:] + 0.05
    val, ev, theta = prof.value(eta, lam0=np.zeros(b.system.dim_d))
    g, H = prof.derivatives(eta, ev, theta)
    eps = 1e-5
    k = eta.size
    g_fd = np.zeros(k)
    H_fd = np.zeros((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = eps
        vp, evp, thp = prof.value(eta + e, lam0=ev.lam)
        vm, evm, thm = prof.value(eta - e, lam0=ev.lam)
        g_fd[j] = (vp - vm) / (2 * eps)
        H_fd[:, j] = (prof.derivatives(eta + e, evp, thp)[0]
                      - prof.derivatives(eta - e, evm, thm)[0]) / (2 * eps)
    np.testing.assert_allclose(g, g_fd, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(H, H_fd, rtol=1e-4, atol=1e-5)


def random_instance(seed, kind):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 9))
    x = np.sort(rng.uniform(-1, 1, n))
    x[0], x[-1] = -abs(x[0]) - 0.05, abs(x[-1]) + 0.05
    y = rng.standard_normal(n)
    cols = {"y": y}
    kw = {}
    if kind == "fuzzy_alt":
        cols["d"] = rng.integers(0, 2, n).astype(float)
        kw = dict(treatment_column="d")
    s = Sample(x, cols, 0.0)
    b = bound_for(kind, s, h=1.2, **kw)
    theta = b.beta_check() + 0.3 * rng.standard_normal(2) \
        if np.linalg.matrix_rank(b.B.sum(0)) == 2 else rng.standard_normal(2)
    return b, theta


def primal_dual_gap(seed):
    kind = "sharp" if seed % 2 == 0 else "fuzzy_alt"
    b, theta = random_instance(seed, kind)
    sys = b.system
    U = sys.omega(b.weights) * (sys.values - sys.design @ theta)
    dual = el_criterion(b, theta).criterion
    primal = primal_criterion(U)
    if not np.isfinite(dual) or not np.isfinite(primal):
        return 0.0 if dual == primal else np.inf
    return abs(dual - primal)


@pytest.mark.parametrize("seed", range(10))
def test_primal_dual_small(seed):
    assert primal_dual_gap(seed) <= 1e-5
