"""Observation weights and one-sided local polynomial estimators.

Conventions
-----------
* An observation at the cutoff belongs to the plus side.
* Weights store only the equivalent-kernel factor; the ``1/h`` of moment
  averages is applied by the caller.
* Local polynomial fits use kernel weights ``K((X - c)/h)/h`` restricted to
  one side and regress on powers of ``(X - c)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np

from .errors import DataSupportError, InputError, NumericalError
from .kernel import KernelConstants, KernelSpec, _side, get_kernel

__all__ = [
    "Sample",
    "WeightVector",
    "DerivativeEstimate",
    "MIN_SIDE_COUNT",
    "build_weights",
    "local_poly_fit",
    "local_poly_derivative",
    "smoother_weights",
    "density_and_derivative",
    "cdf_pilot_density_derivatives",
    "pilot_moments",
    "silverman_pilot",
    "global_poly_derivative",
    "global_poly_trend",
    "amse_bandwidth",
]

MIN_SIDE_COUNT = 10


@dataclass(frozen=True)
class Sample:
    """Forcing variable, aligned data columns and the cutoff.

    Parameters
    ----------
    x : array_like
        Forcing variable.
    columns : dict of str to array_like
        Outcome, treatment and covariate columns, each of length ``n``.
    cutoff : float
        Threshold ``c``; ``x >= c`` is the plus side.
    """

    x: np.ndarray
    columns: dict
    cutoff: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 1:
            raise InputError("x must be one-dimensional")
        if not np.all(np.isfinite(x)):
            raise InputError("x contains non-finite values")
        cols = {}
        for name, col in self.columns.items():
            arr = np.asarray(col, dtype=float)
            if arr.shape != x.shape:
                raise InputError(
                    f"column {name!r} has length {arr.shape} but x has {x.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise InputError(f"column {name!r} contains non-finite values")
            arr.setflags(write=False)
            cols[name] = arr
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "cutoff", float(self.cutoff))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, name):
        try:
            return self.columns[name]
        except KeyError:
            raise InputError(f"column {name!r} not in sample") from None

    def with_columns(self, **new) -> "Sample":
        cols = dict(self.columns)
        cols.update(new)
        return Sample(self.x, cols, self.cutoff)

    def side_mask(self, side: str) -> np.ndarray:
        if _side(side) == "plus":
            return self.x >= self.cutoff
        return self.x < self.cutoff


@dataclass(frozen=True)
class WeightVector:
    """Equivalent-kernel observation weights.

    Attributes
    ----------
    w_plus, w_minus : ndarray
        ``W_{+,i}`` and ``W_{-,i}``; disjoint supports.
    bandwidth : float
        Bandwidth ``h``.
    order : int
        Local polynomial order ``p``.
    counts : tuple of int
        Observations inside the window on the (minus, plus) side.
    """

    w_plus: np.ndarray
    w_minus: np.ndarray
    bandwidth: float
    order: int = 1
    counts: tuple = (0, 0)


@dataclass(frozen=True)
class DerivativeEstimate:
    """One-sided estimate of ``mu^{(k)}`` at the cutoff."""

    value: float
    order: int
    side: str
    bandwidth_used: float
    info: dict = field(default_factory=dict)

    def __float__(self):
        return float(self.value)


def build_weights(sample: Sample, h: float, kernel_constants: KernelConstants,
                  order: int = 1, min_side_count: int = MIN_SIDE_COUNT
                  ) -> WeightVector:
    """Equivalent-kernel weights ``W_{+,i}``, ``W_{-,i}`` at bandwidth ``h``.

    For ``order=1`` the plus weight is ``K_{*,+}((X_i - c)/h) 1(X_i >= c)``;
    in general it is ``e_1' M_{p,+}^{-1} r_p(u_i) K(u_i) 1(X_i >= c)``.

    Raises
    ------
    DataSupportError
        If either side has fewer than ``min_side_count`` observations in the
        window.
    """
    if not (np.isfinite(h) and h > 0):
        raise InputError(f"bandwidth must be positive, got {h}")
    kern = get_kernel(kernel_constants.kernel)
    u = (sample.x - sample.cutoff) / h
    Ku = kern.evaluate(u)
    powers = u[:, None] ** np.arange(order + 1)
    plus = sample.x >= sample.cutoff
    inwin = np.abs(u) <= 1.0
    n_plus = int(np.count_nonzero(plus & inwin & (Ku > 0)))
    n_minus = int(np.count_nonzero(~plus & inwin & (Ku > 0)))
    for side, cnt in (("minus", n_minus), ("plus", n_plus)):
        if cnt < min_side_count:
            raise DataSupportError(
                f"{side} side has {cnt} observations within bandwidth {h:.4g}; "
                f"at least {min_side_count} required"
            )
    out = {}
    for side, mask in (("plus", plus), ("minus", ~plus)):
        M = kernel_constants.gram(order, side)
        row = np.linalg.solve(M, np.eye(order + 1)[:, 0])
        out[side] = np.where(mask & inwin, (powers @ row) * Ku, 0.0)
    return WeightVector(out["plus"], out["minus"], float(h), int(order),
                        (n_minus, n_plus))


def _side_window(sample: Sample, side: str, h: float, kern: KernelSpec):
    u = (sample.x - sample.cutoff) / h
    k = kern.evaluate(u)
    sel = sample.side_mask(side) & (k > 0)
    return np.flatnonzero(sel), u[sel], k[sel] / h


def local_poly_fit(sample: Sample, values, side: str, h: float, p: int,
                   kernel: str | KernelSpec = "triangular") -> np.ndarray:
    """Weighted least-squares coefficients of a one-sided order-``p`` fit.

    Parameters
    ----------
    values : array_like, shape (n,) or (n, m)
        Response column(s).

    Returns
    -------
    ndarray, shape (p + 1,) or (p + 1, m)
        Coefficients on ``(X - c)^j``, ``j = 0..p``.
    """
    kern = get_kernel(kernel)
    values = np.asarray(values, dtype=float)
    idx, u, w = _side_window(sample, side, h, kern)
    if idx.size < p + 1:
        raise NumericalError(
            f"singular local fit: {idx.size} points on the {_side(side)} side "
            f"for order {p} at h={h:.4g}"
        )
    R = u[:, None] ** np.arange(p + 1)
    sw = np.sqrt(w)
    A = R * sw[:, None]
    b = values[idx] * (sw if values.ndim == 1 else sw[:, None])
    coef, _, rank, sv = np.linalg.lstsq(A, b, rcond=None)
    if rank < p + 1 or sv[-1] <= 1e-12 * sv[0]:
        raise NumericalError(
            f"singular local fit on the {_side(side)} side at h={h:.4g}"
        )
    scale = h ** -np.arange(p + 1, dtype=float)
    return coef * (scale if coef.ndim == 1 else scale[:, None])


def local_poly_derivative(sample: Sample, column, side: str, k: int, h: float,
                          kernel: str | KernelSpec = "triangular",
                          order: int | None = None) -> DerivativeEstimate:
    """One-sided local polynomial estimate of ``mu^{(k)}_{V,r}``.

    Fits order ``p = k + 1`` (unless ``order`` is given) and returns ``k!``
    times the coefficient on ``(X - c)^k``.

    Parameters
    ----------
    column : str or array_like
        Column name in ``sample`` or the response values themselves.
    """
    if k not in (0, 1, 2, 3):
        raise InputError(f"derivative order must be 0..3, got {k}")
    p = k + 1 if order is None else int(order)
    values = sample[column] if isinstance(column, str) else column
    coef = local_poly_fit(sample, values, side, h, p, kernel)
    return DerivativeEstimate(factorial(k) * float(coef[k]), k, _side(side),
                              float(h))


def smoother_weights(sample: Sample, side: str, h: float,
                     kernel: str | KernelSpec = "triangular"):
    """Local linear intercept as a linear smoother.

    Returns ``(idx, ell)`` such that the one-sided local linear estimate of
    ``E[V | X = c]`` equals ``ell @ V[idx]`` for every column ``V``. The
    weights sum to one.
    """
    kern = get_kernel(kernel)
    idx, u, w = _side_window(sample, side, h, kern)
    if idx.size < 2:
        raise NumericalError(
            f"singular local fit: {idx.size} points on the {_side(side)} side"
        )
    s0, s1, s2 = w.sum(), (w * u).sum(), (w * u * u).sum()
    det = s0 * s2 - s1 * s1
    if det <= 1e-14 * max(s0 * s2, 1e-300):
        raise NumericalError(f"singular local fit on the {_side(side)} side")
    ell = w * (s2 - s1 * u) / det
    return idx, ell


def density_and_derivative(sample: Sample, h_phi: float, h_phi1: float,
                           kernel: str | KernelSpec = "triangular"):
    """Kernel estimates of the forcing-variable density and its slope at c.

    Returns
    -------
    phi_hat : float
        ``(n h)^{-1} sum K((X_i - c)/h)``.
    phi1_hat : float
        ``(n h^2)^{-1} sum K'((c - X_i)/h)``, the derivative of the kernel
        density estimate at ``c``.
    """
    kern = get_kernel(kernel)
    n = sample.n
    d = sample.x - sample.cutoff
    phi = kern.evaluate(d / h_phi).sum() / (n * h_phi)
    phi1 = kern.derivative(-d / h_phi1).sum() / (n * h_phi1**2)
    return float(phi), float(phi1)


def _ols(R, y, label):
    """Least squares with a tiny ridge fallback for near-collinear designs."""
    G = R.T @ R
    rank = np.linalg.matrix_rank(R)
    if rank == R.shape[1]:
        cond = np.linalg.cond(G)
        if cond < 1e14:
            return np.linalg.solve(G, R.T @ y)
    ridge = 1e-10 * np.trace(G)
    if ridge <= 0:
        raise NumericalError(f"rank-deficient regressors in {label}")
    G2 = G + ridge * np.eye(G.shape[0])
    try:
        return np.linalg.solve(G2, R.T @ y)
    except np.linalg.LinAlgError:
        raise NumericalError(f"rank-deficient regressors in {label}") from None


def cdf_pilot_density_derivatives(sample: Sample):
    """Global pilots for the second and third density derivatives at c.

    Regresses the leave-one-out empirical CDF on a quartic in ``X - c``;
    ``phi2 = 3! b_3`` and ``phi3 = 4! b_4``.
    """
    n = sample.n
    if n < 6:
        raise DataSupportError(f"need at least 6 observations, got {n}")
    xs = np.sort(sample.x)
    F = (np.searchsorted(xs, sample.x, side="right") - 1) / (n - 1)
    d = sample.x - sample.cutoff
    scale = np.max(np.abs(d)) or 1.0
    R = (d / scale)[:, None] ** np.arange(5)
    if np.linalg.matrix_rank(R) < 5:
        raise NumericalError("rank-deficient regressors in the CDF pilot")
    b = _ols(R, F, "CDF pilot") / scale ** np.arange(5)
    return 6.0 * float(b[3]), 24.0 * float(b[4])


def silverman_pilot(sample: Sample) -> float:
    """Rule-of-thumb pilot bandwidth ``1.84 sd(X) n^{-1/5}``."""
    sd = float(np.std(sample.x, ddof=1)) if sample.n > 1 else 0.0
    if sd <= 0:
        raise DataSupportError("forcing variable has no spread")
    return 1.84 * sd * sample.n ** -0.2


def pilot_moments(sample: Sample, column, h0: float):
    """Window variances on each side and the pilot density at c.

    The minus window is ``[c - h0, c)`` and the plus window ``[c, c + h0]``.

    Returns
    -------
    sigma2_minus, sigma2_plus, phi_tilde : float
    """
    values = sample[column] if isinstance(column, str) else np.asarray(column)
    c = sample.cutoff
    lo = (sample.x >= c - h0) & (sample.x < c)
    hi = (sample.x >= c) & (sample.x <= c + h0)
    n_lo, n_hi = int(lo.sum()), int(hi.sum())
    for side, cnt in (("minus", n_lo), ("plus", n_hi)):
        if cnt < 2:
            raise DataSupportError(
                f"pilot window on the {side} side holds {cnt} observations"
            )
    s2m = float(np.var(values[lo], ddof=1))
    s2p = float(np.var(values[hi], ddof=1))
    phi = (n_lo + n_hi) / (2.0 * sample.n * h0)
    return s2m, s2p, phi


def global_poly_derivative(sample: Sample, column, side: str, p: int) -> float:
    """Global pilot for ``mu^{(p+1)}_{V,r}`` from a one-sided polynomial fit.

    Regresses ``V`` on powers ``0..p+1`` of ``X - c`` using the observations on
    ``side`` and returns ``(p+1)!`` times the leading coefficient.
    """
    values = sample[column] if isinstance(column, str) else np.asarray(column)
    mask = sample.side_mask(side)
    d = sample.x[mask] - sample.cutoff
    if d.size < p + 3:
        raise DataSupportError(
            f"global pilot needs {p + 3} points on the {_side(side)} side, "
            f"got {d.size}"
        )
    scale = np.max(np.abs(d)) or 1.0
    R = (d / scale)[:, None] ** np.arange(p + 2)
    b = _ols(R, values[mask], "global pilot")
    return factorial(p + 1) * float(b[-1]) / scale ** (p + 1)


def global_poly_trend(sample: Sample, column, side: str, degree: int = 4) -> np.ndarray:
    """One-sided global polynomial trend, anchored to zero at the cutoff.

    Returns ``m(X_i) - m(c)`` for observations on ``side`` (zero elsewhere),
    where ``m`` is the least-squares polynomial of the given degree. Used to
    flatten residuals before smoothing their powers: subtracting the trend
    leaves their conditional moments at the cutoff unchanged.
    """
    values = sample[column] if isinstance(column, str) else np.asarray(column)
    mask = sample.side_mask(side)
    d = sample.x[mask] - sample.cutoff
    degree = min(degree, d.size - 2)
    out = np.zeros(sample.n)
    if degree < 1:
        return out
    scale = np.max(np.abs(d)) or 1.0
    R = (d / scale)[:, None] ** np.arange(degree + 1)
    b = _ols(R, values[mask], "global trend")
    out[mask] = R[:, 1:] @ b[1:]
    return out


def amse_bandwidth(n: int, k: int, side: str, sigma2: float, phi: float,
                   mu_next: float, constants: KernelConstants,
                   p: int | None = None) -> float:
    """AMSE-optimal bandwidth for a one-sided ``k``-th derivative.

    ``h = (sigma2 ((p+1)!)^2 (2k+1) e'M^{-1}VM^{-1}e
    / (2 (p+1-k) phi mu_next^2 (e'M^{-1}l)^2 n))^{1/(2p+3)}`` with
    ``e = e_{k+1}``. Returns ``inf`` when the bias pilot is zero.
    """
    p = k + 1 if p is None else p
    M = constants.gram(p, side)
    V = constants.variance_matrix(p, side)
    lvec = constants.bias_vector(p, side)
    Minv = np.linalg.inv(M)
    e = np.zeros(p + 1)
    e[k] = 1.0
    var_c = e @ Minv @ V @ Minv @ e
    bias_c = e @ Minv @ lvec
    denom = 2.0 * (p + 1 - k) * phi * mu_next**2 * bias_c**2 * n
    num = sigma2 * factorial(p + 1) ** 2 * (2 * k + 1) * var_c
    if denom <= 0 or not np.isfinite(denom):
        return float("inf")
    return float((num / denom) ** (1.0 / (2 * p + 3)))
