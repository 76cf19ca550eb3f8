import numpy as np
import pytest
from hypothesis import given, strategies as st

from elrdd.designs import DESIGN_KINDS, DesignSpec, build_moment_system, simplex_transform
from elrdd.elcore import bind, profile_lr
from elrdd.errors import InputError
from elrdd.kernel import compute_kernel_constants
from elrdd.localfit import Sample, build_weights

KC = compute_kernel_constants("triangular")


def sample_with(rng, n=600, **extra):
    x = rng.uniform(-1, 1, n)
    cols = {"y": 0.5 * x + 0.4 * (x >= 0) + 0.3 * rng.standard_normal(n)}
    cols.update({k: v(x) for k, v in extra.items()})
    return Sample(x, cols, 0.0)


@pytest.mark.parametrize("kind,kw,d,q,drho", [
    ("sharp", {}, 2, 2, 1),
    ("fuzzy_alt", dict(treatment_column="d"), 2, 2, 1),
    ("sharp_cov", dict(covariate_columns=("z1", "z2")), 4, 4, 1),
    ("fuzzy_cov_alt", dict(covariate_columns=("z1",), treatment_column="d"), 3, 3, 1),
    ("multi_outcome", dict(outcome_columns=("y", "z1")), 4, 4, 2),
    ("balance_test", dict(outcome_columns=("z1", "z2", "z3")), 6, 6, 3),
    ("categorical_sharp", dict(outcome_columns=("c1", "c2")), 4, 4, 2),
    ("categorical_fuzzy", dict(outcome_columns=("c1", "c2"), treatment_column="d"), 4, 4, 2),
])
def test_block_structure(kind, kw, d, q, drho):
    rng = np.random.default_rng(0)
    cat = rng.integers(0, 3, 600)
    s = sample_with(rng, d=lambda x: (x >= 0).astype(float),
                    z1=lambda x: rng.standard_normal(x.size),
                    z2=lambda x: rng.standard_normal(x.size),
                    z3=lambda x: rng.standard_normal(x.size),
                    c1=lambda x: (cat == 1).astype(float),
                    c2=lambda x: (cat == 2).astype(float))
    spec = DesignSpec(kind, **kw)
    sys = build_moment_system(spec, s)
    assert sys.dim_d == d and sys.dim_theta == q and sys.dim_rho == drho
    assert spec.d_rho == drho and sys.values.shape == (600, d)
    w = build_weights(s, 0.5, KC)
    theta = rng.standard_normal(q)
    assert sys.eval_blocks(3, theta, w).shape == (d,)
    # constraint is affine in the nuisance
    nu1, nu2 = rng.standard_normal(q - drho), rng.standard_normal(q - drho)
    tau = rng.standard_normal(drho)
    diff = sys.embed(tau, nu1)[:drho] - sys.embed(tau, nu2)[:drho]
    np.testing.assert_allclose(diff, sys.Psi @ (nu1 - nu2), atol=1e-14)
    np.testing.assert_allclose(sys.rho(sys.embed(tau, nu1)), tau, atol=1e-14)


def test_sharp_rho():
    s = sample_with(np.random.default_rng(1))
    sys = build_moment_system(DesignSpec("sharp"), s)
    assert abs(sys.rho([1.0, 0.6])[0] - 0.4) < 1e-15


def test_balance_null():
    spec = DesignSpec("balance_test", ("a", "b", "c"))
    assert spec.d_rho == 3 and np.all(spec.null_value() == 0)


def test_spec_errors():
    with pytest.raises(InputError):
        DesignSpec("nope")
    with pytest.raises(InputError):
        DesignSpec("fuzzy_alt")
    with pytest.raises(InputError):
        DesignSpec("sharp_cov")
    with pytest.raises(InputError):
        DesignSpec("sharp", ("y", "y2"))
    assert set(DESIGN_KINDS) >= {"sharp", "fuzzy_alt", "sharp_cov", "fuzzy_cov_alt",
                                 "multi_outcome", "categorical_sharp",
                                 "categorical_fuzzy", "balance_test"}


def test_column_type_errors():
    rng = np.random.default_rng(2)
    s = sample_with(rng, d=lambda x: np.full(x.size, 0.5),
                    c1=lambda x: np.ones(x.size), c2=lambda x: np.ones(x.size))
    with pytest.raises(InputError, match="'d'"):
        build_moment_system(DesignSpec("fuzzy_alt", treatment_column="d"), s)
    with pytest.raises(InputError, match="exclusive"):
        build_moment_system(DesignSpec("categorical_sharp", ("c1", "c2")), s)
    with pytest.raises(InputError, match="binary"):
        build_moment_system(DesignSpec("categorical_sharp", ("y",)), s)


@pytest.mark.parametrize("seed", range(5))
def test_fuzzy_without_noncompliance_is_sharp(seed):
    rng = np.random.default_rng(seed)
    s = sample_with(rng, d=lambda x: (x >= 0).astype(float))
    w = build_weights(s, 0.4, KC)
    bs = bind(build_moment_system(DesignSpec("sharp"), s), w)
    bf = bind(build_moment_system(DesignSpec("fuzzy_alt", treatment_column="d"), s), w)
    for tau in np.linspace(-0.2, 1.0, 7):
        a, b = profile_lr(bs, tau).lr, profile_lr(bf, tau).lr
        assert abs(a - b) <= 1e-8 * max(1.0, a)


def test_independent_covariate_matches_sharp():
    from elrdd.inference import confidence_interval
    gaps = []
    for seed in range(3, 9):
        rng = np.random.default_rng(seed)
        n = 5000
        s = sample_with(rng, n=n, z=lambda x: rng.standard_normal(x.size))
        w = build_weights(s, 1.5 * n ** (-1 / 3), KC)
        bs = bind(build_moment_system(DesignSpec("sharp"), s), w)
        bc = bind(build_moment_system(DesignSpec("sharp_cov", covariate_columns=("z",)), s), w)
        es, ec = bs.beta_check(), bc.beta_check()
        assert abs(ec[2]) < 0.1                     # gamma near zero
        assert abs((es[0] - es[1]) - (ec[0] - ec[1])) < 1e-2
        a, c = confidence_interval(bs), confidence_interval(bc)
        gaps += [abs(a.lo - c.lo), abs(a.hi - c.hi)]
    assert np.mean(gaps) < 1e-2


@given(st.lists(st.floats(-8, 8), min_size=3, max_size=3))
def test_simplex_transform_roundtrip(eta):
    tr = simplex_transform(3)
    g = tr.forward(np.array(eta))
    assert np.all(g > 0) and g.sum() < 1
    np.testing.assert_allclose(tr.inverse(g), eta, atol=1e-6)
    J = tr.jacobian(np.array(eta))
    e = 1e-6
    fd = np.column_stack([(tr.forward(np.array(eta) + e * np.eye(3)[j])
                           - tr.forward(np.array(eta) - e * np.eye(3)[j])) / (2 * e)
                          for j in range(3)])
    np.testing.assert_allclose(J, fd, atol=1e-7)


def test_categorical_probabilities_stay_in_simplex(monkeypatch):
    from elrdd import elcore
    rng = np.random.default_rng(6)
    n = 3000
    x = rng.uniform(-1, 1, n)
    u = rng.uniform(size=n)
    p1 = 0.2 + 0.15 * (x >= 0)
    c1 = (u < p1).astype(float)
    c2 = ((u >= p1) & (u < p1 + 0.3)).astype(float)
    s = Sample(x, {"c1": c1, "c2": c2}, 0.0)
    sys = build_moment_system(DesignSpec("categorical_sharp", ("c1", "c2")), s)
    b = bind(sys, build_weights(s, 0.3, KC))
    seen = []
    value = elcore._Profile.value

    def recording(self, eta, lam0=None):
        out = value(self, eta, lam0)
        if np.isfinite(out[0]):
            seen.append(out[2])
        return out

    monkeypatch.setattr(elcore._Profile, "value", recording)
    for tau in ([0.15, 0.0], [0.5, -0.1], [-0.15, 0.3]):
        assert profile_lr(b, tau).lr >= 0
    assert len(seen) > 10
    for theta in seen:
        for g in (theta[:2], theta[2:]):
            assert np.all(g > 0) and np.all(g < 1) and g.sum() < 1


def test_population_fuzzy_target_bias_order():
    # fuzzy_alt population solution: g_1 = ratio of jumps + O(h^2)
    from scipy import integrate
    from elrdd.kernel import equivalent_kernel
    f = lambda x: 0.5
    my = lambda x: 1 + x + 0.8 * x ** 2 + np.where(x >= 0, 0.3 + 0.5 * x ** 2, 0.0)
    md = lambda x: 0.3 + 0.2 * x + np.where(x >= 0, 0.5 + 0.3 * x ** 2, 0.0)
    truth = 0.3 / 0.5

    def ratio(h):
        out = {}
        for side, lo, hi in (("plus", 0, h), ("minus", -h, 0)):
            k = lambda x: equivalent_kernel("triangular", KC, side, x / h) * f(x)
            den = integrate.quad(k, lo, hi, epsabs=1e-14)[0]
            out[side] = [integrate.quad(lambda x: k(x) * m(x), lo, hi, epsabs=1e-14)[0] / den
                         for m in (my, md)]
        (yp, dp), (ym, dm) = out["plus"], out["minus"]
        return (yp - ym) / (dp - dm)

    hs = np.array([0.4, 0.2, 0.1, 0.05])
    err = np.array([abs(ratio(h) - truth) for h in hs])
    slope = np.polyfit(np.log(hs), np.log(err), 1)[0]
    assert 1.7 <= slope <= 2.3
