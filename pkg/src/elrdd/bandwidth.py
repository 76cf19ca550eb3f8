"""Coverage-optimal bandwidths and Bartlett factors.

For a bandwidth ``h = H n^{-1/3}`` the leading coverage-error term of every
supported design has the form ``n^{-2/3} P(H)`` with

    P(H) = a H^2 + b H^5 + c / H.

``b`` collects the squared smoothing bias, ``c`` the higher-order variance
terms and ``a`` the bias-variance interaction that only appears with
covariates. The selected constant is ``H* = argmin |P(H)|`` and the Bartlett
factor is ``1 + n^{-2/3} P(H*)``.

The constants in ``P`` depend on the density of the forcing variable, one-
sided derivatives of conditional means and one-sided conditional moments of
the design residual at the cutoff. :func:`estimate_curvature` computes plug-in
estimates of all of them with AMSE-optimal pilot bandwidths.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
from scipy import optimize

from .designs import DesignSpec
from .errors import DataSupportError, DegenerateDesignError, NumericalError
from .kernel import KernelConstants, compute_kernel_constants, get_kernel
from .localfit import (MIN_SIDE_COUNT, Sample, amse_bandwidth,
                       cdf_pilot_density_derivatives, density_and_derivative,
                       global_poly_derivative, global_poly_trend,
                       local_poly_derivative,
                       pilot_moments, silverman_pilot, smoother_weights)

__all__ = [
    "H_MIN",
    "H_MAX",
    "ErrorPolynomial",
    "CurvatureEstimates",
    "BandwidthPlan",
    "estimate_curvature",
    "leading_terms",
    "coverage_optimal_bandwidth",
    "bartlett_factor",
    "select_H",
    "bbar",
    "density_bandwidth",
    "density_slope_bandwidth",
    "sharp_constants",
    "multi_constants",
    "covariate_constants",
    "min_support_bandwidth",
]

log = logging.getLogger(__name__)

H_MIN = 0.05
H_MAX = 20.0
KAPPA_FLOOR = 1e-12
SIDES = ("plus", "minus")


@dataclass(frozen=True)
class ErrorPolynomial:
    """``P(H) = h2 H^2 + h5 H^5 + hinv / H``."""

    h2: float
    h5: float
    hinv: float

    def __call__(self, H):
        H = np.asarray(H, dtype=float)
        return self.h2 * H**2 + self.h5 * H**5 + self.hinv / H

    def objective(self, H):
        return np.abs(self(H))


def select_H(poly: ErrorPolynomial, H_min: float = H_MIN, H_max: float = H_MAX):
    """Minimise ``|P(H)|`` over ``[H_min, H_max]``.

    Uses the closed form ``(c / 5b)^{1/6}`` when ``a = 0`` and ``b, c > 0``;
    otherwise golden-section search on ``log H`` of the squared objective,
    started from the best point of a log-spaced grid.

    Returns
    -------
    H : float
    closed_form : bool
    notes : list of str
    """
    notes = []
    a, b, c = poly.h2, poly.h5, poly.hinv
    scale = max(abs(a), abs(b), abs(c))
    if not np.isfinite(scale):
        raise NumericalError("non-finite coverage-error constants")
    if scale == 0:
        raise DegenerateDesignError("all coverage-error constants vanish")
    tiny = 1e-14 * scale
    if abs(a) <= tiny and c > 0 and b <= tiny:
        notes.append("bias constant is zero; H* clamped to the upper limit")
        log.warning(notes[-1])
        return H_max, False, notes
    if abs(a) <= tiny and b > 0 and c > 0:
        H = (c / (5.0 * b)) ** (1.0 / 6.0)
        if H < H_min or H > H_max:
            notes.append(f"closed-form H*={H:.4g} clipped to [{H_min}, {H_max}]")
            H = float(np.clip(H, H_min, H_max))
            return H, False, notes
        return float(H), True, notes

    f = lambda s: float(poly(np.exp(s))) ** 2
    grid = np.linspace(np.log(H_min), np.log(H_max), 401)
    vals = np.array([f(s) for s in grid])
    i = int(np.argmin(vals))
    if i == 0 or i == grid.size - 1:
        notes.append("coverage-error minimiser on the search boundary")
        return float(np.exp(grid[i])), False, notes
    res = optimize.minimize_scalar(
        f, bracket=(grid[i - 1], grid[i], grid[i + 1]), method="golden",
        tol=1e-8,
    )
    s = float(res.x) if f(res.x) <= vals[i] else float(grid[i])
    return float(np.exp(s)), False, notes


@dataclass
class CurvatureEstimates:
    """Plug-in (or population) constants behind the coverage error.

    Attributes
    ----------
    kind : str
        Design name.
    phi, phi1 : float
        Density of the forcing variable at the cutoff and its derivative.
    mu : dict
        ``(column, side, k) -> mu^{(k)}``.
    kappa : dict
        ``(side, j) -> E[e^j | X = c^{side}]`` for the design residual
        (single-outcome designs without covariates).
    zeta : ndarray
        Bias-curvature terms: ``(zeta_plus, zeta_minus)`` for scalar designs,
        shape ``(2, J)`` for joint designs and length ``2 + d_Z`` for
        covariate designs.
    moments : dict
        Matrix moments: ``D2_plus`` etc. for joint designs; ``C`` (indexed
        ``[side, k, s, t, a, b]``), ``Pi`` and ``gamma`` for covariate designs.
    tau_pilot : float or ndarray, optional
        Pilot treatment effect used for fuzzy residuals.
    pilots : dict
        Every pilot bandwidth used.
    source : str
        ``"estimated"`` or ``"population"``.
    warnings : list of str
    """

    kind: str
    phi: float
    phi1: float
    mu: dict = field(default_factory=dict)
    kappa: dict = field(default_factory=dict)
    zeta: np.ndarray = None
    moments: dict = field(default_factory=dict)
    tau_pilot: object = None
    pilots: dict = field(default_factory=dict)
    source: str = "estimated"
    warnings: list = field(default_factory=list)


@dataclass
class BandwidthPlan:
    """Selected bandwidth and the constants behind it.

    Attributes
    ----------
    H_star : float
        Minimiser of the absolute leading coverage error.
    h : float
        Bandwidth actually used, ``H* n^{-1/3}`` unless clamped.
    iota, upsilon : float or ndarray
        Bias and variance constants (scalar and joint designs).
    theta_terms : ndarray
        The ten covariate-design constants (covariate designs only).
    terms : ErrorPolynomial
        Coefficients of ``P(H)``.
    bartlett_factor : float
        ``1 + n^{-2/3} P(H*)``.
    design_kind : str
    closed_form : bool
    n : int
    clamped : bool
        True when ``h`` was widened to reach the minimum side count.
    notes : list of str
    """

    H_star: float
    h: float
    iota: object
    upsilon: float
    theta_terms: object
    terms: ErrorPolynomial
    bartlett_factor: float
    design_kind: str
    closed_form: bool
    n: int
    clamped: bool = False
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        out = {
            "H_star": self.H_star, "h": self.h,
            "bartlett_factor": self.bartlett_factor,
            "closed_form": self.closed_form, "clamped": self.clamped,
            "design": self.design_kind, "n": self.n,
            "terms": {"H2": self.terms.h2, "H5": self.terms.h5,
                      "Hinv": self.terms.hinv},
        }
        if self.iota is not None:
            out["iota"] = np.asarray(self.iota).tolist()
        if self.upsilon is not None:
            out["upsilon"] = self.upsilon
        if self.theta_terms is not None:
            out["theta_terms"] = np.asarray(self.theta_terms).tolist()
        if self.notes:
            out["notes"] = list(self.notes)
        return out


# ---------------------------------------------------------------------------
# Leading-term constants


def bbar(kc: KernelConstants, k2p, k2m, k3p, k3m, k4p, k4m) -> float:
    """Higher-order variance constant of the two-intercept system."""
    g2, g3, g4 = kc.gamma[2], kc.gamma[3], kc.gamma[4]
    s = k2p + k2m
    return (0.5 * (g4 / g2) * (k4p + k4m) / s
            - (g3**2 / g2**2) * (k3p - k3m) ** 2 / (3.0 * s**2)
            + (4.0 * g3 - 2.0 * g2**2) * k2p * k2m / s)


def sharp_constants(kc: KernelConstants, phi, zeta_plus, zeta_minus, kappa):
    """``(iota, upsilon, normaliser)`` for single-outcome designs.

    ``kappa`` maps ``(side, j)`` to the residual moments; ``normaliser`` is
    ``gamma_2 phi (kappa_{2,+} + kappa_{2,-})``.
    """
    k = {key: float(v) for key, v in kappa.items()}
    iota = 0.5 * kc.varpi * (zeta_plus - zeta_minus)
    ups = bbar(kc, k["plus", 2], k["minus", 2], k["plus", 3], k["minus", 3],
               k["plus", 4], k["minus", 4])
    norm = kc.gamma[2] * phi * (k["plus", 2] + k["minus", 2])
    return float(iota), float(ups), float(norm)


def multi_constants(kc: KernelConstants, phi, zeta_plus, zeta_minus, D2p, D2m,
                    D3p, D3m, D4p, D4m):
    """Joint-outcome constants.

    Parameters
    ----------
    D2p, D2m : ndarray, shape (J, J)
        Conditional covariance of the outcome vector on each side.
    D3p, D3m : ndarray, shape (J, J, J)
        ``D3[k] = E[e_k e e']``.
    D4p, D4m : ndarray, shape (J, J, J, J)
        ``D4[k, l] = E[e_k e_l e e']``.

    Returns
    -------
    dict
        ``iota`` (vector), ``K``, ``iKi`` (``iota' K iota``), ``theta``
        (the three variance terms), ``upsilon`` and ``normaliser``
        (``J gamma_2 phi``).
    """
    g2, g3, g4 = kc.gamma[2], kc.gamma[3], kc.gamma[4]
    Dpi = np.linalg.inv(D2p)
    Dmi = np.linalg.inv(D2m)
    Hsum = np.linalg.inv(Dpi + Dmi)
    K = Dmi @ Hsum @ Dpi
    K = 0.5 * (K + K.T)
    J = K.shape[0]
    t1 = 0.5 * (g4 / g2) * sum(
        K[k, l] * (np.trace(K @ D4p[k, l]) + np.trace(K @ D4m[k, l]))
        for k in range(J) for l in range(J)
    )
    d3 = D3p - D3m
    t2 = -(g3**2 / g2**2) / 3.0 * sum(
        K[k, l] * np.trace(K @ d3[k] @ K @ d3[l])
        for k in range(J) for l in range(J)
    )
    t3 = (4.0 * g3 - 2.0 * g2**2) * np.trace(K @ Hsum)
    iota = 0.5 * kc.varpi * (np.asarray(zeta_plus) - np.asarray(zeta_minus))
    return {
        "iota": iota, "K": K, "iKi": float(iota @ K @ iota),
        "theta": np.array([t1, t2, t3]), "upsilon": float(t1 + t2 + t3),
        "normaliser": float(J * g2 * phi),
    }


def _s_factor(l: int, side: int) -> tuple:
    """Which ``Zbar`` coordinate carries ``S_l`` on a side (``None`` if zero).

    ``S = (1(X>=c), 1(X<c), Z)``; side 0 is plus, side 1 is minus.
    """
    if l == 0:
        return 0 if side == 0 else None
    if l == 1:
        return 0 if side == 1 else None
    return l - 1


def covariate_constants(kc: KernelConstants, phi, zeta, C, Pi):
    """The ten constants of the covariate-augmented designs.

    Parameters
    ----------
    zeta : ndarray, shape (2 + dZ,)
    C : ndarray, shape (2, 5, 1 + dZ, 1 + dZ, 2 + dZ, 2 + dZ)
        ``C[r, k, s, t] = E[eps^k Zbar_s Zbar_t S S' | X = c^r]`` with
        ``r = 0`` the plus side.
    Pi : ndarray, shape (2 + dZ, 1 + dZ)
        ``sum_r E[S Zbar' | X = c^r]``.

    Returns
    -------
    ndarray, shape (10,)
        ``theta_1 .. theta_10``; the error polynomial is
        ``-theta_1 H^2 + theta_2 H^5 + (theta_3 + ... + theta_10) / H``.
    """
    g2, g3, g4 = kc.gamma[2], kc.gamma[3], kc.gamma[4]
    w = kc.varpi
    zeta = np.asarray(zeta, dtype=float)
    C = np.asarray(C, dtype=float)
    nz = C.shape[2]          # 1 + dZ
    ns = C.shape[4]          # 2 + dZ
    Csum = C[0] + C[1]

    def Smom(k, ls):
        """sum_r E[eps^k prod_{l in ls} S_l S S' | r]; ls holds S or Zbar
        indices tagged ('S', l) / ('Z', s)."""
        out = np.zeros((ns, ns))
        for r in (0, 1):
            idx = []
            for tag, j in ls:
                if tag == "Z":
                    idx.append(j)
                else:
                    f = _s_factor(j, r)
                    if f is None:
                        break
                    idx.append(f)
            else:
                while len(idx) < 2:
                    idx.append(0)
                out += C[r, k, idx[0], idx[1]]
        return out

    Omega = Csum[2, 0, 0]
    Oi = np.linalg.inv(Omega)
    O = np.linalg.inv(Pi.T @ Oi @ Pi)
    N = Oi @ Pi @ O
    Q = Oi - Oi @ Pi @ O @ Pi.T @ Oi
    Q = 0.5 * (Q + Q.T)
    C1 = [Csum[1, 0, s] for s in range(nz)]
    Jl = [Smom(3, [("S", l)]) for l in range(ns)]
    Jlm = [[Smom(4, [("S", l), ("S", m)]) for m in range(ns)] for l in range(ns)]
    L = [[Smom(2, [("S", l), ("Z", s)]) for s in range(nz)] for l in range(ns)]

    t = np.zeros(10)
    t[0] = w / phi * sum((N.T @ C1[s] @ Q @ zeta)[s] for s in range(nz))
    t[1] = 0.25 * w**2 / (phi * g2) * zeta @ Q @ zeta
    t[2] = g2 / phi * sum(O[s, u] * np.trace(Q @ C1[s].T @ Q @ C1[u])
                          for s in range(nz) for u in range(nz))
    t[3] = -2.0 * g3 / (phi * g2) * sum(
        N[j, s] * np.trace(Jl[j] @ Q @ C1[s] @ Q)
        for j in range(ns) for s in range(nz))
    t[4] = 0.5 * g4 / (g2**2 * phi) * sum(
        Q[j, k] * np.trace(Q @ Jlm[j][k]) for j in range(ns) for k in range(ns))
    trQJ = np.array([np.trace(Q @ Jl[j]) for j in range(ns)])
    t[5] = -(g3**2) / (3.0 * g2**3 * phi) * trQJ @ Q @ trQJ
    t[6] = -g2 / phi * sum((N.T @ C1[s] @ Q @ C1[u].T @ N)[u, s]
                           for s in range(nz) for u in range(nz))
    t[7] = g2 / phi * sum((N.T @ C1[s] @ Q @ C1[u].T @ N)[s, u]
                          for s in range(nz) for u in range(nz))
    t[8] = -g2 / phi * sum(O[s, u] * np.trace(Q @ Csum[0, s, u])
                           for s in range(nz) for u in range(nz))
    t[9] = 2.0 * g3 / (g2 * phi) * sum((N.T @ L[l][s] @ Q)[s, l]
                                       for s in range(nz) for l in range(ns))
    return t


def leading_terms(spec: DesignSpec | str, est: CurvatureEstimates,
                  constants: KernelConstants):
    """Coefficients of the coverage-error polynomial for a design.

    Returns
    -------
    poly : ErrorPolynomial
    info : dict
        Named constants (``iota``, ``upsilon``, ``theta_terms`` ...).
    """
    kind = spec.kind if isinstance(spec, DesignSpec) else spec
    kc = constants
    if kind in ("sharp", "fuzzy_alt"):
        iota, ups, norm = sharp_constants(kc, est.phi, est.zeta[0],
                                          est.zeta[1], est.kappa)
        poly = ErrorPolynomial(0.0, iota**2 / norm, ups / norm)
        return poly, {"iota": iota, "upsilon": ups, "normaliser": norm}
    if kind in ("sharp_cov", "fuzzy_cov_alt"):
        th = covariate_constants(kc, est.phi, est.zeta, est.moments["C"],
                                 est.moments["Pi"])
        poly = ErrorPolynomial(-th[0], th[1], float(th[2:].sum()))
        return poly, {"theta_terms": th, "upsilon": float(th[2:].sum())}
    m = est.moments
    out = multi_constants(kc, est.phi, est.zeta[0], est.zeta[1], m["D2_plus"],
                          m["D2_minus"], m["D3_plus"], m["D3_minus"],
                          m["D4_plus"], m["D4_minus"])
    norm = out["normaliser"]
    poly = ErrorPolynomial(0.0, out["iKi"] / norm, out["upsilon"] / norm)
    return poly, {"iota": out["iota"], "upsilon": out["upsilon"],
                  "theta_terms": out["theta"], "K": out["K"],
                  "normaliser": norm}


def min_support_bandwidth(sample: Sample, min_side_count: int = MIN_SIDE_COUNT,
                          kernel="triangular") -> float:
    """Smallest bandwidth giving ``min_side_count`` weighted points per side."""
    out = 0.0
    for side in SIDES:
        d = np.sort(np.abs(sample.x[sample.side_mask(side)] - sample.cutoff))
        if d.size < min_side_count:
            raise DataSupportError(
                f"{side} side has {d.size} observations; "
                f"at least {min_side_count} required"
            )
        # kernels with K(1) = 0 give zero weight at distance exactly h
        out = max(out, d[min_side_count - 1] * (1.0 + 1e-9) + 1e-12)
    return out


def coverage_optimal_bandwidth(spec: DesignSpec, est: CurvatureEstimates,
                               constants: KernelConstants, n: int,
                               sample: Sample | None = None,
                               min_side_count: int = MIN_SIDE_COUNT,
                               H_min: float = H_MIN, H_max: float = H_MAX
                               ) -> BandwidthPlan:
    """Select ``h = H* n^{-1/3}`` and the matching Bartlett factor.

    When ``sample`` is given, ``h`` is widened if needed so that each side
    of the window holds ``min_side_count`` observations; the Bartlett factor
    is then evaluated at the widened ``H``.
    """
    poly, info = leading_terms(spec, est, constants)
    H, closed, notes = select_H(poly, H_min, H_max)
    h = H * n ** (-1.0 / 3.0)
    clamped = False
    if sample is not None:
        h_lo = min_support_bandwidth(sample, min_side_count)
        if h < h_lo:
            notes.append(f"h widened from {h:.4g} to {h_lo:.4g} for side counts")
            h = h_lo
            clamped = True
    H_used = h * n ** (1.0 / 3.0)
    factor = 1.0 + n ** (-2.0 / 3.0) * float(poly(H_used))
    return BandwidthPlan(
        H_star=float(H), h=float(h), iota=info.get("iota"),
        upsilon=info.get("upsilon"), theta_terms=info.get("theta_terms"),
        terms=poly, bartlett_factor=float(factor), design_kind=est.kind,
        closed_form=bool(closed and not clamped), n=int(n), clamped=clamped,
        notes=notes,
    )


def bartlett_factor(spec: DesignSpec, est: CurvatureEstimates,
                    plan: BandwidthPlan, n: int,
                    constants: KernelConstants | None = None) -> float:
    """``1 + n^{-2/3} P(H)`` at the plan's bandwidth for sample size ``n``."""
    poly = plan.terms
    if constants is not None:
        poly, _ = leading_terms(spec, est, constants)
    H = plan.h * plan.n ** (1.0 / 3.0)
    return float(1.0 + n ** (-2.0 / 3.0) * poly(H))


# ---------------------------------------------------------------------------
# Plug-in estimation


class _PilotFitter:
    """AMSE-bandwidth local polynomial fits with support safeguards."""

    def __init__(self, sample: Sample, kernel, kc: KernelConstants,
                 min_points: int = MIN_SIDE_COUNT):
        self.sample = sample
        self.kernel = get_kernel(kernel)
        self.kc = kc
        self.h0 = silverman_pilot(sample)
        self.min_points = min_points
        self.pilots = {}
        self.notes = []
        self._dist = {}
        for side in SIDES:
            d = np.sort(np.abs(sample.x[sample.side_mask(side)] - sample.cutoff))
            self._dist[side] = d

    def support(self, h, side, p):
        d = self._dist[side]
        need = max(self.min_points, 2 * (p + 1))
        if d.size < need:
            raise DataSupportError(
                f"{side} side has {d.size} observations; {need} required"
            )
        lo = d[need - 1] * (1.0 + 1e-9) + 1e-12
        hi = d[-1] * (1.0 + 1e-9) + 1e-12
        if not np.isfinite(h) or h > hi:
            return hi
        return max(h, lo)

    def bandwidth(self, values, side, k, label):
        s2m, s2p, phi = pilot_moments(self.sample, values, self.h0)
        sigma2 = s2p if side == "plus" else s2m
        mu_next = global_poly_derivative(self.sample, values, side, k + 1)
        h = amse_bandwidth(self.sample.n, k, side, sigma2, phi, mu_next, self.kc)
        h = self.support(h, side, k + 1)
        self.pilots[f"{label}:{side}:k={k}"] = h
        return h

    def fit(self, values, side, k, label):
        h = self.bandwidth(values, side, k, label)
        return local_poly_derivative(self.sample, values, side, k, h,
                                     self.kernel).value

    def mean(self, values, side, label):
        """k = 0 fit returning ``(estimate, idx, ell)`` for reuse."""
        h = self.bandwidth(values, side, 0, label)
        idx, ell = smoother_weights(self.sample, side, h, self.kernel)
        return float(ell @ np.asarray(values)[idx]), h


def density_bandwidth(n: int, phi_tilde, phi2, kc: KernelConstants) -> float:
    """Plug-in bandwidth for the density at the cutoff (``inf`` if ``phi2 = 0``)."""
    with np.errstate(divide="ignore"):
        return float(n ** -0.2 * (phi_tilde * kc.roughness
                                  / (np.float64(phi2)**2 * kc.second_moment**2)) ** 0.2)


def density_slope_bandwidth(n: int, phi_tilde, phi3, kc: KernelConstants) -> float:
    """Plug-in bandwidth for the density slope at the cutoff."""
    with np.errstate(divide="ignore"):
        return float(n ** (-1 / 7) * (3.0 * phi_tilde * kc.derivative_roughness
                                      / (np.float64(phi3)**2 * kc.second_moment**2)) ** (1 / 7))


def _density(sample: Sample, kernel, kc: KernelConstants, pilots: dict, notes):
    n = sample.n
    h0 = silverman_pilot(sample)
    _, _, phi_t = pilot_moments(sample, sample.x, h0)
    phi2, phi3 = cdf_pilot_density_derivatives(sample)
    span = np.max(np.abs(sample.x - sample.cutoff))

    def clip(h):
        if not np.isfinite(h) or h <= 0:
            return span
        return min(h, span)

    h_phi = density_bandwidth(n, phi_t, phi2, kc)
    kern_d = kernel
    if kc.derivative_roughness > 0:
        h_phi1 = density_slope_bandwidth(n, phi_t, phi3, kc)
    else:
        # kernels with a vanishing derivative cannot estimate a slope
        kern_d = "triangular"
        h_phi1 = density_slope_bandwidth(n, phi_t, phi3,
                                         compute_kernel_constants("triangular"))
        notes.append("density slope estimated with the triangular kernel")
    h_phi, h_phi1 = clip(h_phi), clip(h_phi1)
    phi, _ = density_and_derivative(sample, h_phi, h_phi1, kernel)
    _, phi1 = density_and_derivative(sample, h_phi, h_phi1, kern_d)
    if not phi > 0:
        raise DataSupportError("estimated density at the cutoff is zero")
    pilots.update({"h0": h0, "h_phi": h_phi, "h_phi1": h_phi1,
                   "phi_tilde": phi_t, "phi2_tilde": phi2, "phi3_tilde": phi3})
    return phi, phi1


def _curvature_terms(fitter: _PilotFitter, values, label, mu):
    """First and second one-sided derivatives of a column."""
    for side in SIDES:
        for k in (1, 2):
            mu[(label, side, k)] = fitter.fit(values, side, k, label)


def _zeta(mu, label, side, phi, phi1):
    return mu[(label, side, 2)] * phi + 2.0 * mu[(label, side, 1)] * phi1


def _residual_moments(fitter: _PilotFitter, resid: dict, label, kappa, notes):
    for side, e in resid.items():
        for j in (2, 3, 4):
            v = e**j
            h = fitter.bandwidth(v, side, 0, f"{label}^{j}")
            idx, ell = smoother_weights(fitter.sample, side, h, fitter.kernel)
            kappa[(side, j)] = float(ell @ v[idx])
        if kappa[(side, 2)] < KAPPA_FLOOR:
            notes.append(f"kappa_2 on the {side} side clipped to {KAPPA_FLOOR}")
            kappa[(side, 2)] = KAPPA_FLOOR


def _detrend(sample: Sample, resid, side):
    """Remove the anchored global trend from residual column(s) on a side."""
    resid = np.asarray(resid, dtype=float)
    if resid.ndim == 1:
        return resid - global_poly_trend(sample, resid, side)
    return np.column_stack([_detrend(sample, resid[:, j], side)
                            for j in range(resid.shape[1])])


def _tau_pilot(fitter: _PilotFitter, Y, D, mu, label_y, label_d):
    for side in SIDES:
        mu[(label_y, side, 0)], _ = fitter.mean(Y, side, label_y)
        mu[(label_d, side, 0)], _ = fitter.mean(D, side, label_d)
    jump_d = mu[(label_d, "plus", 0)] - mu[(label_d, "minus", 0)]
    if abs(jump_d) < 1e-8:
        raise DataSupportError("no discontinuity in treatment probability at the cutoff")
    return (mu[(label_y, "plus", 0)] - mu[(label_y, "minus", 0)]) / jump_d


def _tensor_moments(fitter, resid_cols: dict, label, mu_hat):
    """Joint-outcome residual moment arrays on both sides.

    Each moment order uses the geometric mean of the AMSE pilot bandwidths
    of the corresponding diagonal powers.
    """
    out = {}
    for side in SIDES:
        E = resid_cols[side]          # (n, J) residuals for this side's fit
        J = E.shape[1]
        ells = {}
        for j in (2, 3, 4):
            hs = [fitter.bandwidth(E[:, a] ** j, side, 0, f"{label}{a}^{j}")
                  for a in range(J)]
            h = float(np.exp(np.mean(np.log(hs))))
            fitter.pilots[f"{label}^{j}:{side}"] = h
            ells[j] = smoother_weights(fitter.sample, side, h, fitter.kernel)
        idx, ell = ells[2]
        Ei = E[idx]
        out[f"D2_{side}"] = np.einsum("i,ia,ib->ab", ell, Ei, Ei)
        idx, ell = ells[3]
        Ei = E[idx]
        out[f"D3_{side}"] = np.einsum("i,ik,ia,ib->kab", ell, Ei, Ei, Ei)
        idx, ell = ells[4]
        Ei = E[idx]
        out[f"D4_{side}"] = np.einsum("i,ik,il,ia,ib->klab", ell, Ei, Ei, Ei, Ei)
    return out


def categorical_moments(p: np.ndarray):
    """Residual moment arrays of mutually exclusive dummies with means ``p``.

    The outcome vector equals ``e_j`` with probability ``p_j`` and zero with
    probability ``1 - sum(p)``.
    """
    p = np.asarray(p, dtype=float)
    J = p.size
    atoms = np.vstack([np.eye(J), np.zeros(J)]) - p
    prob = np.append(p, 1.0 - p.sum())
    D2 = np.einsum("i,ia,ib->ab", prob, atoms, atoms)
    D3 = np.einsum("i,ik,ia,ib->kab", prob, atoms, atoms, atoms)
    D4 = np.einsum("i,ik,il,ia,ib->klab", prob, atoms, atoms, atoms, atoms)
    return D2, D3, D4


def covariate_tensors(eps: dict, Z: dict, weights: dict):
    """``C[r, k, s, t, a, b]`` and ``Pi`` from weighted atoms.

    Parameters
    ----------
    eps, Z : dict side -> ndarray
        Residuals (m,) and covariates (m, dZ) of the atoms on each side.
    weights : dict (side, k) -> ndarray
        Atom weights (local-linear smoother or quadrature weights) for
        each residual power ``k = 0..4``.
    """
    dz = Z["plus"].shape[1]
    C = np.zeros((2, 5, 1 + dz, 1 + dz, 2 + dz, 2 + dz))
    Pi = np.zeros((2 + dz, 1 + dz))
    for r, side in enumerate(SIDES):
        Zs = Z[side]
        m = Zs.shape[0]
        Zbar = np.column_stack([np.ones(m), Zs])
        T = np.zeros((m, 2))
        T[:, r] = 1.0
        S = np.column_stack([T, Zs])
        for k in range(5):
            w = weights[(side, k)] * eps[side] ** k
            C[r, k] = np.einsum("i,is,it,ia,ib->stab", w, Zbar, Zbar, S, S)
        Pi += np.einsum("i,ia,is->as", weights[(side, 0)], S, Zbar)
    return C, Pi


def estimate_curvature(spec: DesignSpec, sample: Sample,
                       kernel="triangular") -> CurvatureEstimates:
    """Plug-in estimates of every constant in the coverage error.

    Pipeline: rule-of-thumb pilot; window variances; global polynomial
    pilots of the next derivative; AMSE pilot bandwidths; one-sided local
    polynomial derivatives; residual moments by ``k = 0`` local fits; density
    and density slope at the cutoff with their own plug-in bandwidths.
    """
    kern = get_kernel(kernel)
    kc = compute_kernel_constants(kern)
    fitter = _PilotFitter(sample, kern, kc)
    notes = fitter.notes
    pilots = fitter.pilots
    phi, phi1 = _density(sample, kern, kc, pilots, notes)
    mu = {}
    kind = spec.kind

    if kind in ("sharp", "fuzzy_alt"):
        yname = spec.outcome_columns[0]
        Y = sample[yname]
        tau = None
        if kind == "fuzzy_alt":
            dname = spec.treatment_column
            D = sample[dname]
            tau = _tau_pilot(fitter, Y, D, mu, yname, dname)
            _curvature_terms(fitter, Y, yname, mu)
            _curvature_terms(fitter, D, dname, mu)
            zeta = np.array([
                _zeta(mu, yname, s, phi, phi1) - tau * _zeta(mu, dname, s, phi, phi1)
                for s in SIDES])
            V = Y - tau * D
            label = "Y-tau*D"
        else:
            _curvature_terms(fitter, Y, yname, mu)
            zeta = np.array([_zeta(mu, yname, s, phi, phi1) for s in SIDES])
            V = Y
            label = yname
        resid = {}
        for side in SIDES:
            m0, _ = fitter.mean(V, side, label)
            mu[(label, side, 0)] = m0
            resid[side] = _detrend(sample, V - m0, side)
        kappa = {}
        _residual_moments(fitter, resid, "resid", kappa, notes)
        return CurvatureEstimates(kind, phi, phi1, mu, kappa, zeta, {}, tau,
                                  dict(pilots), "estimated", notes)

    if kind in ("sharp_cov", "fuzzy_cov_alt"):
        return _estimate_covariate(spec, sample, fitter, phi, phi1, mu)

    # joint designs
    names = spec.outcome_columns
    Ys = np.column_stack([sample[c] for c in names])
    J = Ys.shape[1]
    tau = None
    if kind == "categorical_fuzzy":
        D = sample[spec.treatment_column]
        tau = np.array([_tau_pilot(fitter, Ys[:, j], D, mu, names[j],
                                   spec.treatment_column) for j in range(J)])
        for j in range(J):
            _curvature_terms(fitter, Ys[:, j], names[j], mu)
        _curvature_terms(fitter, D, spec.treatment_column, mu)
        zeta = np.array([[
            _zeta(mu, names[j], s, phi, phi1)
            - tau[j] * _zeta(mu, spec.treatment_column, s, phi, phi1)
            for j in range(J)] for s in SIDES])
        V = Ys - D[:, None] * tau
        labels = [f"{c}-tau*D" for c in names]
    else:
        for j in range(J):
            _curvature_terms(fitter, Ys[:, j], names[j], mu)
        zeta = np.array([[_zeta(mu, names[j], s, phi, phi1) for j in range(J)]
                         for s in SIDES])
        V = Ys
        labels = list(names)
    means = {}
    for side in SIDES:
        means[side] = np.array([fitter.mean(V[:, j], side, labels[j])[0]
                                for j in range(J)])
        for j in range(J):
            mu[(labels[j], side, 0)] = means[side][j]
    if kind == "categorical_sharp":
        moments = {}
        for side in SIDES:
            p = np.clip(means[side], 1e-6, None)
            if p.sum() >= 1 - 1e-6:
                p = p / (p.sum() + 1e-6)
                notes.append(f"{side} probabilities rescaled into the simplex")
            D2, D3, D4 = categorical_moments(p)
            moments.update({f"D2_{side}": D2, f"D3_{side}": D3,
                            f"D4_{side}": D4})
    else:
        resid = {side: _detrend(sample, V - means[side], side) for side in SIDES}
        moments = _tensor_moments(fitter, resid, "resid", means)
    for side in SIDES:
        w = np.linalg.eigvalsh(moments[f"D2_{side}"])
        if w.min() <= KAPPA_FLOOR * max(w.max(), 1.0):
            raise NumericalError(
                f"estimated outcome covariance on the {side} side is singular"
            )
    return CurvatureEstimates(kind, phi, phi1, mu, {}, zeta, moments, tau,
                              dict(pilots), "estimated", notes)


def _estimate_covariate(spec, sample, fitter, phi, phi1, mu):
    kind = spec.kind
    yname = spec.outcome_columns[0]
    Y = sample[yname]
    Z = np.column_stack([sample[c] for c in spec.covariate_columns])
    dz = Z.shape[1]
    tau = None
    if kind == "fuzzy_cov_alt":
        D = sample[spec.treatment_column]
        tau = _tau_pilot(fitter, Y, D, mu, yname, spec.treatment_column)
        Yv = Y - tau * D
        ylab = "Y-tau*D"
    else:
        Yv = Y
        ylab = yname
    zlab = [f"{c}" for c in spec.covariate_columns]
    pairs = list(combinations_with_replacement(range(dz), 2))
    cols = {ylab: Yv}
    for j in range(dz):
        cols[zlab[j]] = Z[:, j]
        cols[f"{zlab[j]}*{ylab}"] = Z[:, j] * Yv
    for j, k in pairs:
        cols[f"{zlab[j]}*{zlab[k]}"] = Z[:, j] * Z[:, k]
    hzero = []
    for label, v in cols.items():
        for side in SIDES:
            mu[(label, side, 0)], h = fitter.mean(v, side, label)
            if label != ylab and "*" + ylab not in label:
                hzero.append((side, h))
        _curvature_terms(fitter, v, label, mu)

    def vec(label_fn, side, k):
        return np.array([mu[(label_fn(j), side, k)] for j in range(dz)])

    def mat(side, k):
        M = np.zeros((dz, dz))
        for j, l in pairs:
            M[j, l] = M[l, j] = mu[(f"{zlab[j]}*{zlab[l]}", side, k)]
        return M

    muZ = {s: vec(lambda j: zlab[j], s, 0) for s in SIDES}
    muY = {s: mu[(ylab, s, 0)] for s in SIDES}
    muZY = {s: vec(lambda j: f"{zlab[j]}*{ylab}", s, 0) for s in SIDES}
    muZZ = {s: mat(s, 0) for s in SIDES}
    var = sum(muZZ[s] - np.outer(muZ[s], muZ[s]) for s in SIDES)
    cov = sum(muZY[s] - muZ[s] * muY[s] for s in SIDES)
    try:
        gamma = np.linalg.solve(var, cov)
    except np.linalg.LinAlgError:
        raise NumericalError("covariate variance at the cutoff is singular") from None
    mu_sc = {s: muY[s] - muZ[s] @ gamma for s in SIDES}

    zeta = np.zeros(2 + dz)
    for r, s in enumerate(SIDES):
        d1 = mu[(ylab, s, 1)] - vec(lambda j: zlab[j], s, 1) @ gamma
        d2 = mu[(ylab, s, 2)] - vec(lambda j: zlab[j], s, 2) @ gamma
        zeta[r] = 2.0 * phi1 * d1 + phi * d2
        for k, wgt in ((1, 2.0 * phi1), (2, phi)):
            zeta[2:] += wgt * (vec(lambda j: f"{zlab[j]}*{ylab}", s, k)
                               - vec(lambda j: zlab[j], s, k) * mu_sc[s]
                               - mat(s, k) @ gamma)

    eps_all = {s: _detrend(sample, Yv - mu_sc[s] - Z @ gamma, s) for s in SIDES}
    eps, Zs, wts = {}, {}, {}
    # k = 0 moments involve only the covariates: pool their pilot bandwidths
    for side in SIDES:
        hs = [h for s, h in hzero if s == side]
        h0 = float(np.exp(np.mean(np.log(hs))))
        fitter.pilots[f"C0:{side}"] = h0
        idx_sets = {0: smoother_weights(sample, side, h0, fitter.kernel)}
        for k in (1, 2, 3, 4):
            h = fitter.bandwidth(eps_all[side] ** k, side, 0, f"eps^{k}")
            idx_sets[k] = smoother_weights(sample, side, h, fitter.kernel)
        # use a common atom set: the union of windows, zero weight elsewhere
        idx = np.unique(np.concatenate([v[0] for v in idx_sets.values()]))
        pos = {i: p for p, i in enumerate(idx)}
        for k, (ik, ell) in idx_sets.items():
            w = np.zeros(idx.size)
            w[[pos[i] for i in ik]] = ell
            wts[(side, k)] = w
        eps[side] = eps_all[side][idx]
        Zs[side] = Z[idx]
    C, Pi = covariate_tensors(eps, Zs, wts)
    omega = C[0, 2, 0, 0] + C[1, 2, 0, 0]
    w = np.linalg.eigvalsh(omega)
    if w.min() <= 1e-12 * max(w.max(), 1.0):
        raise NumericalError("estimated moment covariance is singular")
    moments = {"C": C, "Pi": Pi, "gamma": gamma}
    return CurvatureEstimates(kind, phi, phi1, mu, {}, zeta, moments, tau,
                              dict(fitter.pilots), "estimated", fitter.notes)
