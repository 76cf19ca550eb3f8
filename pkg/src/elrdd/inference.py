"""Confidence sets and tests by inverting the profile EL ratio.

A value ``tau`` belongs to the level-``1 - alpha`` region when
``LR(tau) / factor <= q``, with ``q`` the chi-square quantile with ``d_rho``
degrees of freedom and ``factor`` either one or the Bartlett factor of the
bandwidth plan. The region is closed: ``LR = q * factor`` counts as inside.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .bandwidth import (BandwidthPlan, CurvatureEstimates,
                        coverage_optimal_bandwidth, estimate_curvature)
from .designs import DesignSpec, build_moment_system
from .elcore import BoundSystem, bind, profile_lr
from .errors import ELRDDError, InputError
from .kernel import compute_kernel_constants, get_kernel
from .localfit import MIN_SIDE_COUNT, Sample, build_weights

__all__ = [
    "DEFAULT_LEVELS",
    "Interval",
    "JointTest",
    "InferenceResult",
    "chi2_threshold",
    "point_estimate",
    "confidence_interval",
    "joint_test",
    "region_membership",
    "analyze",
]

log = logging.getLogger(__name__)

DEFAULT_LEVELS = (0.90, 0.95, 0.99)
LR_TOL = 1e-6
SEARCH_CAP = 10.0


def chi2_threshold(level: float, df: int = 1) -> float:
    """Upper ``level`` quantile of the chi-square distribution."""
    if not 0.0 < level < 1.0:
        raise InputError(f"level must lie in (0, 1), got {level}")
    return float(stats.chi2.ppf(level, df))


def _factor(plan, bartlett: bool) -> float:
    if not bartlett or plan is None:
        return 1.0
    if isinstance(plan, BandwidthPlan):
        return float(plan.bartlett_factor)
    return float(plan)


def point_estimate(system: BoundSystem) -> np.ndarray:
    """Estimate of the parameters of interest.

    Every supported design is just identified, so the estimate is
    ``rho`` evaluated at the solution of the weighted moment equations;
    the profile ratio vanishes there.
    """
    beta = system.beta_check()
    return np.atleast_1d(system.system.rho(beta))


class _LRCache:
    """Memoised ``LR(tau)`` with warm starts from the nearest evaluation."""

    def __init__(self, system: BoundSystem):
        self.system = system
        self.store = {}
        self.calls = 0

    def __call__(self, tau) -> float:
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        key = tuple(tau.tolist())
        if key in self.store:
            return self.store[key][0]
        init = None
        if self.store and self.system.system.transform is None:
            near = min(self.store.items(),
                       key=lambda kv: np.sum((np.array(kv[0]) - tau) ** 2))
            if np.all(np.isfinite(near[1][1])):
                init = near[1][1]
        self.calls += 1
        res = None
        if init is not None:
            res = profile_lr(self.system, tau, init=init, multistart=False)
            if not (res.converged and np.isfinite(res.lr)):
                res = None
        if res is None:
            res = profile_lr(self.system, tau)
        self.store[key] = (res.lr, res.nuisance)
        return res.lr


@dataclass(frozen=True)
class Interval:
    """Scalar confidence interval.

    ``lo_bounded`` / ``hi_bounded`` are False when the ratio never exceeded
    the threshold within the search cap; the endpoint is then infinite.
    """

    lo: float
    hi: float
    level: float
    factor: float
    lo_bounded: bool = True
    hi_bounded: bool = True
    evaluations: int = 0

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def as_list(self):
        return [self.lo, self.hi]


def _endpoint(lr, est: float, thr: float, direction: float, scale: float):
    """Find ``t`` on one side of ``est`` with ``LR(t) = thr``."""
    cap = SEARCH_CAP * scale
    step = 0.05 * scale
    inner, f_in = est, lr(est) - thr
    outer = None
    while step <= cap:
        t = est + direction * step
        f = lr(t) - thr
        if f > 0:
            outer, f_out = t, f
            break
        inner, f_in = t, f
        step *= 2.0
    if outer is None:
        t = est + direction * cap
        f = lr(t) - thr
        if f > 0:
            outer, f_out = t, f
        else:
            return direction * np.inf, False
    if f_in > 0:
        # ratio above threshold at the estimate itself: collapsed interval
        return est, True
    # Illinois regula falsi, bisection whenever the ratio is infinite
    side = 0
    for _ in range(200):
        if np.isfinite(f_out):
            t = outer - f_out * (outer - inner) / (f_out - f_in)
            lo_t, hi_t = sorted((inner, outer))
            width = hi_t - lo_t
            if not lo_t + 1e-3 * width < t < hi_t - 1e-3 * width:
                t = 0.5 * (inner + outer)
        else:
            t = 0.5 * (inner + outer)
        f = lr(t) - thr
        if abs(f) <= LR_TOL:
            return t, True
        if f > 0:
            outer, f_out = t, f
            if side == 1:
                f_in *= 0.5
            side = 1
        else:
            inner, f_in = t, f
            if side == -1 and np.isfinite(f_out):
                f_out *= 0.5
            side = -1
        if abs(outer - inner) <= 1e-13 * max(scale, abs(est), 1.0):
            return inner, True
    return inner, True


def confidence_interval(system: BoundSystem, plan=None, level: float = 0.95,
                        bartlett: bool = False, estimate: float | None = None,
                        cache: _LRCache | None = None) -> Interval:
    """Invert the profile ratio for a scalar parameter.

    Parameters
    ----------
    system : BoundSystem
        Moment system bound to its observation weights.
    plan : BandwidthPlan or float, optional
        Source of the Bartlett factor (a float is used as the factor).
    level : float
        Nominal coverage.
    bartlett : bool
        Scale the threshold by the Bartlett factor.
    estimate : float, optional
        Point estimate; computed when omitted.
    cache : optional
        Shared ratio cache, so several levels reuse evaluations.

    Returns
    -------
    Interval
    """
    if system.system.dim_rho != 1:
        raise InputError("confidence_interval needs a scalar parameter; "
                         "use region_membership for joint regions")
    factor = _factor(plan, bartlett)
    thr = chi2_threshold(level, 1) * factor
    lr = cache if cache is not None else _LRCache(system)
    est = float(point_estimate(system)[0]) if estimate is None else float(estimate)
    scale = system.system.scale
    before = lr.calls
    lo, lo_ok = _endpoint(lr, est, thr, -1.0, scale)
    hi, hi_ok = _endpoint(lr, est, thr, 1.0, scale)
    if not (lo_ok and hi_ok):
        log.warning("profile ratio stays below the threshold within the "
                    "search range; interval reported as unbounded")
    return Interval(float(lo), float(hi), level, factor, lo_ok, hi_ok,
                    lr.calls - before)


@dataclass(frozen=True)
class JointTest:
    """Test of ``H0: rho = tau0``."""

    statistic: float
    p_value: float
    lr: float
    factor: float
    df: int


def joint_test(system: BoundSystem, plan=None, tau0=None,
               bartlett: bool = False) -> JointTest:
    """Ratio test of ``rho = tau0`` against the chi-square upper tail.

    ``statistic = LR(tau0) / factor``.
    """
    d = system.system.dim_rho
    tau0 = np.zeros(d) if tau0 is None else np.atleast_1d(np.asarray(tau0, float))
    if tau0.shape != (d,):
        raise InputError(f"tau0 must have length {d}")
    factor = _factor(plan, bartlett)
    lr = profile_lr(system, tau0).lr
    stat = lr / factor
    p = float(stats.chi2.sf(stat, d)) if np.isfinite(stat) else 0.0
    return JointTest(float(stat), p, float(lr), factor, d)


def region_membership(system: BoundSystem, plan=None, tau=None,
                      level: float = 0.95, bartlett: bool = False) -> bool:
    """Whether ``tau`` lies in the closed joint confidence region."""
    d = system.system.dim_rho
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if tau.shape != (d,):
        raise InputError(f"tau must have length {d}")
    factor = _factor(plan, bartlett)
    lr = profile_lr(system, tau).lr
    return bool(lr <= chi2_threshold(level, d) * factor)


@dataclass
class InferenceResult:
    """Output of :func:`analyze`.

    Attributes
    ----------
    point_estimate : ndarray
        Estimate of the parameters of interest (the ratio is zero there).
    ci : dict
        ``level -> Interval`` without correction (scalar designs).
    ci_bartlett : dict
        ``level -> Interval`` with the Bartlett factor (scalar designs).
    p_value : float
        ``1 - F(lr_at_null / factor)``; ``factor`` is the Bartlett factor
        when ``bartlett_applied``.
    p_value_uncorrected : float
    lr_at_null : float
    bandwidth_plan : BandwidthPlan or None
        ``None`` only when the bandwidth was supplied and the curvature
        constants could not be estimated.
    bartlett_applied : bool
    components : list of dict
        Per-parameter marginal results (joint designs).
    sensitivity : list of dict
        Results at multiples of the selected bandwidth.
    """

    design: str
    parameter_names: tuple
    point_estimate: np.ndarray
    levels: tuple
    ci: dict
    ci_bartlett: dict
    null: np.ndarray
    lr_at_null: float
    p_value: float
    p_value_uncorrected: float
    h: float
    bartlett_factor: float
    bartlett_applied: bool
    bandwidth_plan: BandwidthPlan | None
    kernel: str
    n: int
    counts: tuple
    curvature: CurvatureEstimates | None = None
    components: list = field(default_factory=list)
    sensitivity: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        """JSON-ready summary."""
        plan = self.bandwidth_plan
        out = {
            "design": self.design,
            "parameters": list(self.parameter_names),
            "estimate": self.point_estimate.tolist(),
            "null": self.null.tolist(),
            "lr": self.lr_at_null,
            "p_value": self.p_value,
            "p_value_uncorrected": self.p_value_uncorrected,
            "bartlett_applied": self.bartlett_applied,
            "h": self.h,
            "H_star": plan.H_star if plan is not None else None,
            "bartlett_factor": self.bartlett_factor,
            "kernel": self.kernel,
            "n": self.n,
            "window_counts": {"minus": self.counts[0], "plus": self.counts[1]},
        }
        if self.ci:
            out["ci"] = {f"{lv:g}": iv.as_list() for lv, iv in self.ci.items()}
            out["ci_bartlett"] = {f"{lv:g}": iv.as_list()
                                  for lv, iv in self.ci_bartlett.items()}
        if self.components:
            out["components"] = self.components
        if self.sensitivity:
            out["sensitivity"] = self.sensitivity
        diag = dict(self.diagnostics)
        if plan is not None:
            diag["bandwidth"] = plan.as_dict()
        if self.curvature is not None:
            diag["pilot_bandwidths"] = {k: float(v) for k, v in
                                        self.curvature.pilots.items()}
            diag["phi"] = self.curvature.phi
            diag["phi1"] = self.curvature.phi1
            if self.curvature.warnings:
                diag["curvature_notes"] = list(self.curvature.warnings)
        out["diagnostics"] = diag
        return _jsonable(out)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else (None if np.isnan(v) else
                                         ("inf" if v > 0 else "-inf"))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _marginal_spec(spec: DesignSpec, j: int) -> DesignSpec:
    col = spec.outcome_columns[j]
    if spec.kind == "categorical_fuzzy":
        return DesignSpec("fuzzy_alt", (col,), spec.treatment_column)
    return DesignSpec("sharp", (col,))


def _scalar_block(bound, levels, factor, est):
    cache = _LRCache(bound)
    ci = {lv: confidence_interval(bound, factor, lv, False, est, cache)
          for lv in levels}
    cib = {lv: confidence_interval(bound, factor, lv, True, est, cache)
           for lv in levels}
    return ci, cib


def analyze(sample: Sample, spec: DesignSpec, levels=DEFAULT_LEVELS,
            kernel="triangular", h: float | None = None, bartlett: bool = True,
            null=None, h_multipliers=None,
            min_side_count: int = MIN_SIDE_COUNT) -> InferenceResult:
    """Full inference for one design on one sample.

    Selects the coverage-optimal bandwidth (unless ``h`` is given), builds
    the moment system, and reports the estimate, the test of ``null``
    (zero by default) and, for scalar parameters, confidence intervals at
    every level with and without the Bartlett factor.

    Parameters
    ----------
    h : float, optional
        Bandwidth override; the Bartlett factor is then evaluated at this
        bandwidth with the estimated constants.
    h_multipliers : sequence of float, optional
        Also report results at ``m * h`` for each multiplier ``m``.
    """
    levels = tuple(sorted(float(lv) for lv in levels))
    for lv in levels:
        chi2_threshold(lv)
    kern = get_kernel(kernel)
    kc = compute_kernel_constants(kern)
    n = sample.n
    diagnostics = {}
    est = None
    plan = None
    try:
        est = estimate_curvature(spec, sample, kern)
        plan = coverage_optimal_bandwidth(spec, est, kc, n, sample,
                                          min_side_count)
    except ELRDDError as exc:
        if h is None:
            raise
        diagnostics["curvature_error"] = str(exc)
        log.warning("curvature constants unavailable: %s", exc)
    if h is not None:
        if not (np.isfinite(h) and h > 0):
            raise InputError(f"bandwidth must be positive, got {h}")
        h_used = float(h)
        diagnostics["bandwidth_override"] = h_used
    else:
        h_used = plan.h
    poly = plan.terms if plan is not None else None

    def factor_at(hv):
        if poly is None:
            return 1.0
        return float(1.0 + n ** (-2.0 / 3.0) * poly(hv * n ** (1.0 / 3.0)))

    factor = factor_at(h_used)
    system = build_moment_system(spec, sample)
    weights = build_weights(sample, h_used, kc, min_side_count=min_side_count)
    bound = bind(system, weights)
    est_tau = point_estimate(bound)
    d = system.dim_rho
    null_v = np.zeros(d) if null is None else np.atleast_1d(np.asarray(null, float))
    if null_v.shape != (d,):
        raise InputError(f"null must have length {d}")
    jt = joint_test(bound, factor, null_v, bartlett=True)
    lr0 = jt.lr
    p_unc = float(stats.chi2.sf(lr0, d)) if np.isfinite(lr0) else 0.0
    p_val = jt.p_value if bartlett else p_unc

    ci, cib = {}, {}
    components = []
    if d == 1:
        ci, cib = _scalar_block(bound, levels, factor, float(est_tau[0]))
    else:
        for j in range(d):
            mspec = _marginal_spec(spec, j)
            mb = bind(build_moment_system(mspec, sample), weights)
            m_est = float(point_estimate(mb)[0])
            mt = joint_test(mb, None, [null_v[j]])
            mci, _ = _scalar_block(mb, levels, 1.0, m_est)
            components.append({
                "name": spec.outcome_columns[j], "estimate": m_est,
                "lr": mt.lr, "p_value": mt.p_value,
                "ci": {f"{lv:g}": iv.as_list() for lv, iv in mci.items()},
            })

    sensitivity = []
    for m in (h_multipliers or ()):
        hm = float(m) * h_used
        entry = {"multiplier": float(m), "h": hm}
        try:
            wm = build_weights(sample, hm, kc, min_side_count=min_side_count)
            bm = bind(system, wm)
            em = point_estimate(bm)
            fm = factor_at(hm)
            tm = joint_test(bm, fm, null_v, bartlett=True)
            entry.update({"estimate": em.tolist(), "lr": tm.lr,
                          "bartlett_factor": fm,
                          "p_value": tm.p_value if bartlett else
                          float(stats.chi2.sf(tm.lr, d))})
            if d == 1:
                c1, c2 = _scalar_block(bm, levels, fm, float(em[0]))
                entry["ci"] = {f"{lv:g}": iv.as_list() for lv, iv in c1.items()}
                entry["ci_bartlett"] = {f"{lv:g}": iv.as_list()
                                        for lv, iv in c2.items()}
        except ELRDDError as exc:
            entry["error"] = str(exc)
        sensitivity.append(entry)

    if plan is not None and plan.notes:
        diagnostics["bandwidth_notes"] = list(plan.notes)
    return InferenceResult(
        design=spec.kind, parameter_names=tuple(spec.outcome_columns),
        point_estimate=est_tau, levels=levels, ci=ci, ci_bartlett=cib,
        null=null_v, lr_at_null=float(lr0), p_value=float(p_val),
        p_value_uncorrected=p_unc, h=h_used, bartlett_factor=factor,
        bartlett_applied=bool(bartlett), bandwidth_plan=plan, kernel=kern.name,
        n=n, counts=tuple(int(c) for c in weights.counts), curvature=est,
        components=components, sensitivity=sensitivity,
        diagnostics=diagnostics,
    )
