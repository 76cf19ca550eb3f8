"""Simulation designs and a seeded coverage-study runner.

Every design draws the forcing variable as ``2 B - 1`` with ``B ~ Beta(2, 4)``
(via two gamma draws) and uses cutoff zero. Population values of every
constant behind the coverage-optimal bandwidth are derived analytically
from the design's polynomials and error laws, so the "true-constant"
bandwidth needs no estimation.

Replication ``r`` of a study with seed ``s`` draws from the Philox stream
``SeedSequence(s).spawn(R)[r]``, so results do not depend on how the
replications are scheduled across worker processes.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial.hermite_e import hermegauss
from scipy import stats

from .bandwidth import (CurvatureEstimates, categorical_moments,
                        coverage_optimal_bandwidth, covariate_tensors,
                        estimate_curvature)
from .designs import DesignSpec, build_moment_system
from .elcore import bind, profile_lr
from .errors import ELRDDError, InputError, NumericalError
from .inference import chi2_threshold, confidence_interval
from .kernel import compute_kernel_constants
from .localfit import MIN_SIDE_COUNT, Sample, build_weights

__all__ = [
    "DGP_KINDS",
    "DGPSpec",
    "CoverageReport",
    "generate",
    "design_for",
    "population_curvature",
    "true_plan",
    "run_coverage_study",
    "worker_count",
]

log = logging.getLogger(__name__)

DGP_KINDS = ("sharp_model1", "fuzzy_model", "sharp_cov_model2",
             "multi_outcome", "categorical_logit")
MODES = ("true_constants", "estimated", "both")
SIGMA = 0.5
FUZZY_A = 0.84
COV_RHO = 0.269
MULTI_COV = 0.2
MAX_FAILURE_RATE = 0.05

# one-sided mean polynomials, coefficients in increasing powers
G_MINUS = (0.48, 1.27, 7.18, 20.21, 21.54, 7.33)
G_PLUS = (0.52, 0.84, -3.00, 7.99, -9.01, 3.56)
G2_MINUS = (0.48, 1.27, -0.5 * 7.18, 0.7 * 20.21, 1.1 * 21.54, 1.5 * 7.33)
G2_PLUS = (0.52, 0.84, -0.1 * 3.00, -0.3 * 7.99, -0.1 * 9.01, 3.56)
G3_MINUS = (0.03, -2.26, -13.14, -30.89, -31.89, 12.1)
G3_PLUS = (0.09, 5.76, -42.56, 120.90, -139.71, 55.59)
MUY_MINUS = (0.36, 0.96, 5.47, 15.28, 15.87, 5.14)
MUY_PLUS = (0.38, 0.62, -2.84, 8.42, -10.24, 4.31)
MUY_SLOPE = {"minus": 0.22, "plus": 0.28}
MUZ_MINUS = (0.49, 1.06, 5.74, 17.14, 19.75, 7.47)
MUZ_PLUS = (0.49, 0.61, -0.23, -3.46, 6.43, -3.48)

# multinomial-logit index eta_j(x) = a_j + b_j x on each side (J = 2 non-base)
CATEGORICAL_DEFAULT = {
    "minus": {"a": (-0.6, -0.2), "b": (1.0, -0.5)},
    "plus": {"a": (-0.3, -0.5), "b": (0.8, 0.4)},
}


def _poly(coef) -> Polynomial:
    return Polynomial(np.asarray(coef, dtype=float))


def _softmax(eta):
    m = max(0.0, float(np.max(eta)))
    e = np.exp(np.asarray(eta) - m)
    return e / (np.exp(-m) + e.sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class DGPSpec:
    """A simulation design.

    Parameters
    ----------
    kind : str
        One of ``DGP_KINDS``.
    n : int
        Sample size (at least 100).
    seed : int
        Base seed.
    params : dict, optional
        ``multi_outcome``: ``{"J": 2 or 3}`` (default 3).
        ``categorical_logit``: ``{"minus": {"a": ..., "b": ...}, "plus": ...}``
        multinomial-logit coefficients per side.

    Attributes
    ----------
    truth : ndarray
        Treatment effect(s) implied by the design, set on construction.
    """

    kind: str
    n: int = 1000
    seed: int = 0
    params: dict = field(default_factory=dict)
    truth: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise InputError(
                f"unknown DGP {self.kind!r}; choose from {', '.join(DGP_KINDS)}")
        if int(self.n) < 100:
            raise InputError(f"n must be at least 100, got {self.n}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "params", dict(self.params))
        if self.kind == "multi_outcome" and self.J not in (1, 2, 3):
            raise InputError("multi_outcome supports J in {1, 2, 3}")
        object.__setattr__(self, "truth", _truth(self))

    @property
    def J(self) -> int:
        if self.kind == "multi_outcome":
            return int(self.params.get("J", 3))
        if self.kind == "categorical_logit":
            return len(self.logit_params["minus"]["a"])
        return 1

    @property
    def logit_params(self) -> dict:
        p = self.params.get("logit", CATEGORICAL_DEFAULT)
        return {s: {k: np.asarray(v, dtype=float) for k, v in p[s].items()}
                for s in ("minus", "plus")}


def _multi_polys(J):
    pairs = [(G_PLUS, G_MINUS), (G2_PLUS, G2_MINUS), (G3_PLUS, G3_MINUS)]
    return pairs[:J]


def _truth(dgp: DGPSpec) -> np.ndarray:
    k = dgp.kind
    if k in ("sharp_model1", "fuzzy_model"):
        # both potential-outcome means share one polynomial shape, so the
        # local Wald ratio equals the intercept gap
        return np.array([G_PLUS[0] - G_MINUS[0]])
    if k == "sharp_cov_model2":
        z0 = MUZ_PLUS[0]
        return np.array([(MUY_PLUS[0] + MUY_SLOPE["plus"] * z0)
                         - (MUY_MINUS[0] + MUY_SLOPE["minus"] * z0)])
    if k == "multi_outcome":
        return np.array([p[0] - m[0] for p, m in _multi_polys(dgp.J)])
    lp = dgp.logit_params
    return _softmax(lp["plus"]["a"]) - _softmax(lp["minus"]["a"])


def design_for(dgp: DGPSpec) -> DesignSpec:
    """Design used to analyse samples from ``dgp``."""
    k = dgp.kind
    if k == "sharp_model1":
        return DesignSpec("sharp", ("y",))
    if k == "fuzzy_model":
        return DesignSpec("fuzzy_alt", ("y",), "d")
    if k == "sharp_cov_model2":
        return DesignSpec("sharp_cov", ("y",), covariate_columns=("z",))
    names = tuple(f"y{j + 1}" for j in range(dgp.J))
    if k == "multi_outcome":
        return DesignSpec("multi_outcome", names)
    return DesignSpec("categorical_sharp", names)


def _forcing(rng, n):
    a = rng.standard_gamma(2.0, n)
    b = rng.standard_gamma(4.0, n)
    return 2.0 * a / (a + b) - 1.0


def _side_poly(x, plus_coef, minus_coef):
    return np.where(x >= 0, _poly(plus_coef)(x), _poly(minus_coef)(x))


def generate(dgp: DGPSpec, rng: np.random.Generator | None = None) -> Sample:
    """Draw one sample.

    Parameters
    ----------
    rng : Generator, optional
        Random stream; defaults to a Philox stream seeded with ``dgp.seed``.
    """
    if rng is None:
        rng = np.random.Generator(np.random.Philox(dgp.seed))
    n = dgp.n
    x = _forcing(rng, n)
    k = dgp.kind
    if k == "sharp_model1":
        y = _side_poly(x, G_PLUS, G_MINUS) + SIGMA * rng.standard_normal(n)
        return Sample(x, {"y": y}, 0.0)
    if k == "fuzzy_model":
        e = SIGMA * rng.standard_normal((n, 2))
        nu = rng.standard_normal(n)
        base = _side_poly(x, (0.0,) + G_PLUS[1:], (0.0,) + G_MINUS[1:])
        y0 = G_MINUS[0] + base + e[:, 0]
        y1 = G_PLUS[0] + base + e[:, 1]
        d = np.where(x >= 0, x + FUZZY_A >= nu, x - FUZZY_A >= nu).astype(float)
        return Sample(x, {"y": d * y1 + (1 - d) * y0, "d": d}, 0.0)
    if k == "sharp_cov_model2":
        cov = SIGMA**2 * np.array([[1.0, COV_RHO], [COV_RHO, 1.0]])
        e = rng.standard_normal((n, 2)) @ np.linalg.cholesky(cov).T
        z = _side_poly(x, MUZ_PLUS, MUZ_MINUS) + e[:, 1]
        slope = np.where(x >= 0, MUY_SLOPE["plus"], MUY_SLOPE["minus"])
        y = _side_poly(x, MUY_PLUS, MUY_MINUS) + slope * z + e[:, 0]
        return Sample(x, {"y": y, "z": z}, 0.0)
    if k == "multi_outcome":
        J = dgp.J
        cov = np.full((J, J), MULTI_COV) + (SIGMA**2 - MULTI_COV) * np.eye(J)
        e = rng.standard_normal((n, J)) @ np.linalg.cholesky(cov).T
        cols = {f"y{j + 1}": _side_poly(x, p, m) + e[:, j]
                for j, (p, m) in enumerate(_multi_polys(J))}
        return Sample(x, cols, 0.0)
    lp = dgp.logit_params
    J = dgp.J
    eta = np.where((x >= 0)[:, None],
                   lp["plus"]["a"] + np.outer(x, lp["plus"]["b"]),
                   lp["minus"]["a"] + np.outer(x, lp["minus"]["b"]))
    m = np.maximum(eta.max(axis=1, keepdims=True), 0.0)
    w = np.exp(eta - m)
    prob = np.column_stack([np.exp(-m[:, 0]), w])
    prob /= prob.sum(axis=1, keepdims=True)
    u = rng.random(n)
    cat = (u[:, None] > np.cumsum(prob, axis=1)).sum(axis=1)
    cat = np.minimum(cat, J)
    cols = {f"y{j + 1}": (cat == j + 1).astype(float) for j in range(J)}
    return Sample(x, cols, 0.0)


# ---------------------------------------------------------------------------
# Population constants

def _density_at_cutoff():
    """Density of ``2 B(2,4) - 1`` and its derivative at zero."""
    u = 0.5
    fb = 20.0 * u * (1 - u) ** 3
    dfb = 20.0 * (1 - u) ** 3 - 60.0 * u * (1 - u) ** 2
    return fb / 2.0, dfb / 4.0


def _derivs(poly: Polynomial):
    return float(poly(0.0)), float(poly.deriv(1)(0.0)), float(poly.deriv(2)(0.0))


def _normal_kappa(var):
    return {(s, j): v for s in ("plus", "minus")
            for j, v in ((2, var), (3, 0.0), (4, 3.0 * var**2))}


def population_curvature(dgp: DGPSpec) -> CurvatureEstimates:
    """Exact values of every constant behind the coverage error of ``dgp``."""
    phi, phi1 = _density_at_cutoff()
    k = dgp.kind
    spec = design_for(dgp)
    if k in ("sharp_model1", "fuzzy_model"):
        mu, zeta = {}, []
        for side, coef in (("plus", G_PLUS), ("minus", G_MINUS)):
            if k == "fuzzy_model":
                # Y - tau D has the untreated-outcome mean
                coef = (G_MINUS[0],) + coef[1:]
            m0, m1, m2 = _derivs(_poly(coef))
            mu.update({("y", side, 0): m0, ("y", side, 1): m1,
                       ("y", side, 2): m2})
            zeta.append(m2 * phi + 2.0 * m1 * phi1)
        tau = float(dgp.truth[0]) if k == "fuzzy_model" else None
        return CurvatureEstimates(spec.kind, phi, phi1, mu,
                                  _normal_kappa(SIGMA**2), np.array(zeta), {},
                                  tau, {}, "population")
    if k == "sharp_cov_model2":
        return _covariate_population(spec, phi, phi1)
    J = dgp.J
    if k == "multi_outcome":
        zeta = np.zeros((2, J))
        mu = {}
        for j, (p, m) in enumerate(_multi_polys(J)):
            for r, (side, coef) in enumerate((("plus", p), ("minus", m))):
                m0, m1, m2 = _derivs(_poly(coef))
                mu.update({(f"y{j + 1}", side, 0): m0,
                           (f"y{j + 1}", side, 1): m1,
                           (f"y{j + 1}", side, 2): m2})
                zeta[r, j] = m2 * phi + 2.0 * m1 * phi1
        S = np.full((J, J), MULTI_COV) + (SIGMA**2 - MULTI_COV) * np.eye(J)
        D4 = (np.einsum("kl,ab->klab", S, S) + np.einsum("ka,lb->klab", S, S)
              + np.einsum("kb,la->klab", S, S))
        moments = {}
        for side in ("plus", "minus"):
            moments.update({f"D2_{side}": S, f"D3_{side}": np.zeros((J, J, J)),
                            f"D4_{side}": D4})
        return CurvatureEstimates(spec.kind, phi, phi1, mu, {}, zeta, moments,
                                  None, {}, "population")
    # categorical logit: derivatives of softmax probabilities along x
    lp = dgp.logit_params
    zeta = np.zeros((2, J))
    mu, moments = {}, {}
    for r, side in enumerate(("plus", "minus")):
        a, b = lp[side]["a"], lp[side]["b"]
        p = _softmax(a)
        d1 = p * (b - p @ b)
        d2 = d1 * (b - p @ b) - p * (d1 @ b)
        zeta[r] = d2 * phi + 2.0 * d1 * phi1
        for j in range(J):
            mu.update({(f"y{j + 1}", side, 0): p[j], (f"y{j + 1}", side, 1): d1[j],
                       (f"y{j + 1}", side, 2): d2[j]})
        D2, D3, D4 = categorical_moments(p)
        moments.update({f"D2_{side}": D2, f"D3_{side}": D3, f"D4_{side}": D4})
    return CurvatureEstimates(spec.kind, phi, phi1, mu, {}, zeta, moments,
                              None, {}, "population")


def _covariate_population(spec, phi, phi1, nodes: int = 12):
    """Covariate-design constants by Gauss-Hermite quadrature.

    At the cutoff ``Z = mu_z(0) + e_z`` and ``Y = a_r + b_r Z + e_y`` with
    ``(e_y, e_z)`` bivariate normal.
    """
    s2 = SIGMA**2
    c_yz = COV_RHO * s2
    z_poly = {"plus": _poly(MUZ_PLUS), "minus": _poly(MUZ_MINUS)}
    a_poly = {"plus": _poly(MUY_PLUS), "minus": _poly(MUY_MINUS)}
    mu = {}
    for side in ("plus", "minus"):
        b = MUY_SLOPE[side]
        mz, ay = z_poly[side], a_poly[side]
        funcs = {
            "z": mz,
            "y": ay + b * mz,
            "z*y": ay * mz + b * (mz**2 + s2) + c_yz,
            "z*z": mz**2 + s2,
        }
        for name, f in funcs.items():
            for k, v in enumerate(_derivs(f)):
                mu[(name, side, k)] = v
    gamma = sum(mu[("z*y", s, 0)] - mu[("z", s, 0)] * mu[("y", s, 0)]
                for s in ("plus", "minus"))
    gamma /= sum(mu[("z*z", s, 0)] - mu[("z", s, 0)] ** 2
                 for s in ("plus", "minus"))
    mu_sc = {s: mu[("y", s, 0)] - mu[("z", s, 0)] * gamma for s in ("plus", "minus")}
    zeta = np.zeros(3)
    for r, s in enumerate(("plus", "minus")):
        for k, w in ((1, 2.0 * phi1), (2, phi)):
            zeta[r] += w * (mu[("y", s, k)] - mu[("z", s, k)] * gamma)
            zeta[2] += w * (mu[("z*y", s, k)] - mu[("z", s, k)] * mu_sc[s]
                            - mu[("z*z", s, k)] * gamma)

    t, wt = hermegauss(nodes)
    wt = wt / wt.sum()
    ey, ez = np.meshgrid(t, t, indexing="ij")
    w2 = np.outer(wt, wt).ravel()
    L = np.linalg.cholesky(s2 * np.array([[1.0, COV_RHO], [COV_RHO, 1.0]]))
    e = np.column_stack([ey.ravel(), ez.ravel()]) @ L.T
    eps, Zs, wts = {}, {}, {}
    for s in ("plus", "minus"):
        z = mu[("z", s, 0)] + e[:, 1]
        y = a_poly[s](0.0) + MUY_SLOPE[s] * z + e[:, 0]
        eps[s] = y - mu_sc[s] - z * gamma
        Zs[s] = z[:, None]
        for k in range(5):
            wts[(s, k)] = w2
    C, Pi = covariate_tensors(eps, Zs, wts)
    moments = {"C": C, "Pi": Pi, "gamma": np.array([gamma])}
    return CurvatureEstimates(spec.kind, phi, phi1, mu, {}, zeta, moments, None,
                              {}, "population")


def true_plan(dgp: DGPSpec, kernel="triangular"):
    """Bandwidth plan from the population constants."""
    kc = compute_kernel_constants(kernel)
    est = population_curvature(dgp)
    return coverage_optimal_bandwidth(design_for(dgp), est, kc, dgp.n)


# ---------------------------------------------------------------------------
# Coverage study

@dataclass
class CoverageReport:
    """Aggregated results of a coverage study.

    Attributes
    ----------
    coverage : dict
        ``column -> {level -> empirical coverage}`` over successful
        replications. Columns are ``EL-CO_tr``, ``ELB-CO_tr``, ``EL-CO``
        and ``ELB-CO`` (true or estimated bandwidth, without or with the
        Bartlett factor), or ``EL-fixed`` for a fixed bandwidth.
    std_error : dict
        Binomial standard errors, same layout.
    mean_h, mean_factor : dict
        ``"tr"`` / ``"est"`` / ``"fixed"`` -> averages over replications.
    mean_ci_length : dict
        ``column -> {level -> mean length}`` when intervals were computed.
    lr_values : ndarray
        ``LR(truth)`` per replication (NaN for failures), from the first
        bandwidth of the study.
    """

    design: str
    n: int
    replications: int
    levels: tuple
    mode: str
    seed: int
    truth: list
    coverage: dict
    std_error: dict
    mean_h: dict
    mean_factor: dict
    mean_ci_length: dict
    successes: int
    failures: int
    failure_messages: dict
    lr_values: np.ndarray = field(repr=False, default=None)

    def as_dict(self) -> dict:
        def fmt(d):
            return {c: {f"{lv:g}": float(v) for lv, v in row.items()}
                    for c, row in d.items()}
        return {
            "schema_version": 1,
            "design": self.design, "n": self.n,
            "replications": self.replications, "levels": list(self.levels),
            "mode": self.mode, "seed": self.seed, "truth": self.truth,
            "coverage": fmt(self.coverage), "std_error": fmt(self.std_error),
            "mean_h": self.mean_h, "mean_bartlett_factor": self.mean_factor,
            "mean_ci_length": fmt(self.mean_ci_length),
            "successes": self.successes, "failures": self.failures,
            "failure_messages": self.failure_messages,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def csv_rows(self):
        """``(column, level, coverage, std_error, mean_ci_length)`` rows."""
        for col, row in self.coverage.items():
            for lv, cov in row.items():
                length = self.mean_ci_length.get(col, {}).get(lv, float("nan"))
                yield col, lv, cov, self.std_error[col][lv], length


def worker_count() -> int:
    """Worker processes: ``EL_RDD_THREADS`` if set, else the CPU count."""
    env = os.environ.get("EL_RDD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"EL_RDD_THREADS must be an integer, got {env!r}") from None
    return max(1, os.cpu_count() or 1)


def _coverage_flags(bound, truth, levels, factor, ci_length):
    """LR at the truth plus coverage flags (and lengths) at each level."""
    d = bound.system.dim_rho
    lr = profile_lr(bound, truth).lr
    out = {"lr": lr, "plain": {}, "bartlett": {}, "len_plain": {},
           "len_bartlett": {}}
    for lv in levels:
        q = chi2_threshold(lv, d)
        out["plain"][lv] = bool(lr <= q)
        out["bartlett"][lv] = bool(lr <= q * factor)
    if ci_length and d == 1:
        from .inference import _LRCache
        cache = _LRCache(bound)
        for lv in levels:
            out["len_plain"][lv] = confidence_interval(bound, None, lv,
                                                       cache=cache).length
            out["len_bartlett"][lv] = confidence_interval(
                bound, factor, lv, True, cache=cache).length
    return out


def _one_replication(task):
    (dgp, seq, mode, levels, kernel, plan_tr, h_fixed, ci_length,
     min_side_count) = task
    rng = np.random.Generator(np.random.Philox(seq))
    try:
        sample = generate(dgp, rng)
        spec = design_for(dgp)
        kc = compute_kernel_constants(kernel)
        system = build_moment_system(spec, sample)
        truth = dgp.truth
        res = {}
        runs = []
        if h_fixed is not None:
            runs.append(("fixed", h_fixed, 1.0))
        if plan_tr is not None:
            runs.append(("tr", plan_tr.h, plan_tr.bartlett_factor))
        if mode in ("estimated", "both") and h_fixed is None:
            est = estimate_curvature(spec, sample, kernel)
            plan = coverage_optimal_bandwidth(spec, est, kc, sample.n, sample,
                                              min_side_count)
            runs.append(("est", plan.h, plan.bartlett_factor))
        for tag, h, factor in runs:
            w = build_weights(sample, h, kc, min_side_count=min_side_count)
            flags = _coverage_flags(bind(system, w), truth, levels, factor,
                                    ci_length)
            res[tag] = (h, factor, flags)
        return res
    except (ELRDDError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return {"error": f"{type(exc).__name__}: {exc}".split("\n")[0][:200]}


def run_coverage_study(dgp: DGPSpec, replications: int = 2000,
                       levels=(0.90, 0.95, 0.99), bandwidth_mode="true_constants",
                       kernel="triangular", workers: int | None = None,
                       h: float | None = None, ci_length: bool = False,
                       min_side_count: int = MIN_SIDE_COUNT,
                       allow_small: bool = False) -> CoverageReport:
    """Empirical coverage of the EL regions over seeded replications.

    Parameters
    ----------
    dgp : DGPSpec
    replications : int
        Number of replications (at least 100 unless ``allow_small``).
    levels : sequence of float
    bandwidth_mode : {"true_constants", "estimated", "both"}
        Bandwidth from the population constants (computed once), from the
        plug-in pipeline on each sample, or both on the same samples.
    workers : int, optional
        Process count; defaults to :func:`worker_count`.
    h : float, optional
        Fixed bandwidth; replaces the selector (column ``EL-fixed``).
    ci_length : bool
        Also invert the ratio to report mean interval lengths (scalar
        designs; costs roughly ten ratio evaluations per level).

    Raises
    ------
    NumericalError
        If more than 5% of replications fail.
    """
    if bandwidth_mode not in MODES:
        raise InputError(f"bandwidth_mode must be one of {MODES}")
    replications = int(replications)
    if replications < 100 and not allow_small:
        raise InputError("replications must be at least 100")
    if replications < 1:
        raise InputError("replications must be positive")
    levels = tuple(sorted(float(lv) for lv in levels))
    for lv in levels:
        chi2_threshold(lv)
    plan_tr = None
    if h is None and bandwidth_mode in ("true_constants", "both"):
        plan_tr = true_plan(dgp, kernel)
        if plan_tr.upsilon is not None and np.ndim(plan_tr.upsilon) == 0 \
                and dgp.kind in ("sharp_model1", "fuzzy_model"):
            if not plan_tr.upsilon > 0:
                raise NumericalError("population variance constant is not positive")
    seqs = np.random.SeedSequence(dgp.seed).spawn(replications)
    tasks = [(dgp, s, bandwidth_mode, levels, kernel, plan_tr, h, ci_length,
              min_side_count) for s in seqs]
    nw = workers if workers is not None else worker_count()
    nw = max(1, min(int(nw), replications))
    if nw == 1:
        results = [_one_replication(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=nw) as ex:
            results = list(ex.map(_one_replication, tasks,
                                  chunksize=max(1, replications // (4 * nw))))
    return _aggregate(dgp, replications, levels, bandwidth_mode, h, results)


_COLUMNS = {"tr": ("EL-CO_tr", "ELB-CO_tr"), "est": ("EL-CO", "ELB-CO"),
            "fixed": ("EL-fixed", None)}


def _aggregate(dgp, reps, levels, mode, h, results):
    fails = [r["error"] for r in results if "error" in r]
    ok = [r for r in results if "error" not in r]
    messages = {}
    for m in fails:
        messages[m] = messages.get(m, 0) + 1
    if len(fails) > MAX_FAILURE_RATE * reps:
        raise NumericalError(
            f"{len(fails)} of {reps} replications failed; first: {fails[0]}")
    if h is not None:
        tags = ["fixed"]
    else:
        tags = {"true_constants": ["tr"], "estimated": ["est"],
                "both": ["tr", "est"]}[mode]
    coverage, se, mean_h, mean_f, lengths = {}, {}, {}, {}, {}
    m = len(ok)
    for tag in tags:
        plain, corr = _COLUMNS[tag]
        mean_h[tag] = float(np.mean([r[tag][0] for r in ok])) if m else float("nan")
        mean_f[tag] = float(np.mean([r[tag][1] for r in ok])) if m else float("nan")
        for col, key in ((plain, "plain"), (corr, "bartlett")):
            if col is None:
                continue
            cov = {lv: float(np.mean([r[tag][2][key][lv] for r in ok]))
                   if m else float("nan") for lv in levels}
            coverage[col] = cov
            se[col] = {lv: float(np.sqrt(c * (1 - c) / m)) if m else float("nan")
                       for lv, c in cov.items()}
            lk = "len_" + key
            if m and ok[0][tag][2][lk]:
                vals = {lv: [r[tag][2][lk][lv] for r in ok] for lv in levels}
                lengths[col] = {lv: float(np.mean(v)) for lv, v in vals.items()}
    first = tags[0]
    lr = np.array([r[first][2]["lr"] if "error" not in r else np.nan
                   for r in results])
    return CoverageReport(
        design=dgp.kind, n=dgp.n, replications=reps, levels=levels, mode=mode,
        seed=dgp.seed, truth=dgp.truth.tolist(), coverage=coverage,
        std_error=se, mean_h=mean_h, mean_factor=mean_f,
        mean_ci_length=lengths, successes=m, failures=len(fails),
        failure_messages=messages, lr_values=lr,
    )
