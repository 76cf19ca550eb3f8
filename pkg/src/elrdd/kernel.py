"""Kernel functions and constants of the one-sided equivalent kernel.

All downstream formulas (observation weights, pilot bandwidths, the
coverage-error constants and the Bartlett factor) are driven by a small set
of integrals of the kernel over the half-lines ``[-1, 0]`` and ``[0, 1]``.
They are computed once per kernel by adaptive quadrature and cached.
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import InputError, NumericalError

__all__ = [
    "KERNEL_NAMES",
    "KernelSpec",
    "KernelConstants",
    "get_kernel",
    "compute_kernel_constants",
    "equivalent_kernel",
    "boundary_kernel",
]

KERNEL_NAMES = ("triangular", "uniform", "epanechnikov")

QUAD_TOL = 1e-10


def _triangular(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 1.0 - np.abs(u), 0.0)


def _triangular_deriv(u):
    # K'(0) is set to the average of the one-sided slopes, i.e. zero
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, -np.sign(u), 0.0)


def _uniform(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.5, 0.0)


def _uniform_deriv(u):
    return np.zeros_like(np.asarray(u, dtype=float))


def _epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


def _epanechnikov_deriv(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, -1.5 * u, 0.0)


@dataclass(frozen=True)
class KernelSpec:
    """A symmetric kernel supported on ``[-1, 1]``.

    Attributes
    ----------
    name : str
        One of ``KERNEL_NAMES``.
    evaluate : callable
        Vectorised density ``K(u)``; zero outside ``[-1, 1]``.
    derivative : callable
        Vectorised derivative ``K'(u)``.
    """

    name: str
    evaluate: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]

    def __call__(self, u):
        return self.evaluate(u)


_KERNELS = {
    "triangular": KernelSpec("triangular", _triangular, _triangular_deriv),
    "uniform": KernelSpec("uniform", _uniform, _uniform_deriv),
    "epanechnikov": KernelSpec("epanechnikov", _epanechnikov, _epanechnikov_deriv),
}


def get_kernel(kernel: str | KernelSpec = "triangular") -> KernelSpec:
    """Look up a kernel by name (a ``KernelSpec`` is passed through)."""
    if isinstance(kernel, KernelSpec):
        return kernel
    try:
        return _KERNELS[str(kernel).lower()]
    except KeyError:
        raise InputError(
            f"unknown kernel {kernel!r}; choose from {', '.join(KERNEL_NAMES)}"
        ) from None


def _quad(func, a, b, label):
    """Adaptive Gauss-Kronrod quadrature with a convergence check."""
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            value, err = integrate.quad(
                func, a, b, epsabs=QUAD_TOL, epsrel=1e-12, limit=200
            )
        except integrate.IntegrationWarning as exc:
            raise NumericalError(f"quadrature failed for {label}: {exc}") from None
    if not np.isfinite(value) or err > 10 * QUAD_TOL:
        raise NumericalError(
            f"quadrature failed for {label}: estimate {value}, error {err:.2e}"
        )
    return value


@dataclass(frozen=True)
class KernelConstants:
    """Half-line integrals of a kernel.

    Attributes
    ----------
    kernel : str
        Kernel name.
    m_plus, m_minus : ndarray
        One-sided moments ``m_{j,+} = int_0^1 u^j K(u) du`` and
        ``m_{j,-} = int_{-1}^0 u^j K(u) du`` for ``j = 0..max_moment``.
    k2_plus, k2_minus : ndarray
        One-sided moments of ``K(u)^2``, same index range.
    gamma : dict
        ``gamma[j] = int_{-1}^0 K_{*,-}(t)^j dt`` for ``j = 2, 3, 4``.
    varpi : float
        Second-order bias constant of the equivalent kernel,
        ``int_{-1}^0 t^2 K_{*,-}(t) dt``.
    roughness : float
        ``int K(u)^2 du`` over ``[-1, 1]``.
    second_moment : float
        ``int u^2 K(u) du`` over ``[-1, 1]``.
    derivative_roughness : float
        ``int K'(u)^2 du`` over ``[-1, 1]``.
    """

    kernel: str
    m_plus: np.ndarray
    m_minus: np.ndarray
    k2_plus: np.ndarray
    k2_minus: np.ndarray
    gamma: dict
    varpi: float
    roughness: float
    second_moment: float
    derivative_roughness: float

    @property
    def max_moment(self) -> int:
        return len(self.m_plus) - 1

    def moments(self, side: str) -> np.ndarray:
        """One-sided moments ``m_{j,r}`` for ``side`` in {'plus', 'minus'}."""
        return self.m_plus if _side(side) == "plus" else self.m_minus

    def gram(self, p: int, side: str) -> np.ndarray:
        """Matrix with entry ``(k, l) = m_{k+l, r}``, ``k, l = 0..p``."""
        m = self.moments(side)
        self._check(2 * p)
        idx = np.add.outer(np.arange(p + 1), np.arange(p + 1))
        return m[idx]

    def variance_matrix(self, p: int, side: str) -> np.ndarray:
        """Matrix with entry ``(k, l) = int u^{k+l} K(u)^2`` over the half-line."""
        k2 = self.k2_plus if _side(side) == "plus" else self.k2_minus
        self._check(2 * p)
        idx = np.add.outer(np.arange(p + 1), np.arange(p + 1))
        return k2[idx]

    def bias_vector(self, p: int, side: str) -> np.ndarray:
        """Vector with entries ``m_{p+1+k, r}``, ``k = 0..p``."""
        self._check(2 * p + 1)
        return self.moments(side)[p + 1: 2 * p + 2]

    def _check(self, j):
        if j > self.max_moment:
            raise InputError(
                f"moment of order {j} requested but only {self.max_moment} computed"
            )


def _side(side: str) -> str:
    s = str(side).lower()
    if s in ("plus", "+", "right"):
        return "plus"
    if s in ("minus", "-", "left"):
        return "minus"
    raise InputError(f"side must be 'plus' or 'minus', got {side!r}")


@functools.lru_cache(maxsize=None)
def _constants_cached(name: str, max_moment: int) -> KernelConstants:
    kern = get_kernel(name)
    K = lambda u: float(kern.evaluate(u))
    dK = lambda u: float(kern.derivative(u))

    m_plus = np.array([
        _quad(lambda u, j=j: u**j * K(u), 0.0, 1.0, f"m_{j},+")
        for j in range(max_moment + 1)
    ])
    m_minus = np.array([
        _quad(lambda u, j=j: u**j * K(u), -1.0, 0.0, f"m_{j},-")
        for j in range(max_moment + 1)
    ])
    k2_plus = np.array([
        _quad(lambda u, j=j: u**j * K(u) ** 2, 0.0, 1.0, f"int u^{j} K^2 (plus)")
        for j in range(max_moment + 1)
    ])
    k2_minus = np.array([
        _quad(lambda u, j=j: u**j * K(u) ** 2, -1.0, 0.0, f"int u^{j} K^2 (minus)")
        for j in range(max_moment + 1)
    ])

    m0, m1, m2, m3 = m_minus[:4]
    det = m0 * m2 - m1**2
    varpi = (m2**2 - m1 * m3) / det

    def kstar(t):
        return (m2 - m1 * t) / det * K(t)

    gamma = {
        j: _quad(lambda t, j=j: kstar(t) ** j, -1.0, 0.0, f"gamma_{j}")
        for j in (2, 3, 4)
    }
    roughness = (_quad(lambda u: K(u) ** 2, -1.0, 0.0, "int K^2")
                 + _quad(lambda u: K(u) ** 2, 0.0, 1.0, "int K^2"))
    second = (_quad(lambda u: u * u * K(u), -1.0, 0.0, "int u^2 K")
              + _quad(lambda u: u * u * K(u), 0.0, 1.0, "int u^2 K"))
    droughness = (_quad(lambda u: dK(u) ** 2, -1.0, 0.0, "int K'^2")
                  + _quad(lambda u: dK(u) ** 2, 0.0, 1.0, "int K'^2"))

    for arr in (m_plus, m_minus, k2_plus, k2_minus):
        arr.setflags(write=False)
    return KernelConstants(
        kernel=name, m_plus=m_plus, m_minus=m_minus, k2_plus=k2_plus,
        k2_minus=k2_minus, gamma=gamma, varpi=float(varpi),
        roughness=roughness, second_moment=second,
        derivative_roughness=droughness,
    )


def compute_kernel_constants(kernel: str | KernelSpec = "triangular",
                             max_moment: int = 8) -> KernelConstants:
    """Half-line moments, ``gamma_j`` and ``varpi`` of a kernel.

    Parameters
    ----------
    kernel : str or KernelSpec
        Kernel name or spec.
    max_moment : int, optional
        Highest moment order computed; must be at least 3. The default
        covers local polynomials up to order 3.

    Returns
    -------
    KernelConstants

    Raises
    ------
    NumericalError
        If a quadrature fails to converge; the message names the integral.
    """
    if max_moment < 3:
        raise InputError("max_moment must be at least 3")
    return _constants_cached(get_kernel(kernel).name, int(max_moment))


def equivalent_kernel(kernel: str | KernelSpec, constants: KernelConstants,
                      side: str, t):
    """Equivalent boundary kernel of local linear fitting.

    ``K_{*,r}(t) = (m_{2,r} - m_{1,r} t) / (m_{0,r} m_{2,r} - m_{1,r}^2) K(t)``
    restricted to the half-line of ``side``; zero elsewhere.
    """
    kern = get_kernel(kernel)
    side = _side(side)
    t = np.asarray(t, dtype=float)
    m0, m1, m2 = constants.moments(side)[:3]
    val = (m2 - m1 * t) / (m0 * m2 - m1**2) * kern.evaluate(t)
    inside = (t >= 0) & (t <= 1) if side == "plus" else (t <= 0) & (t >= -1)
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out


def boundary_kernel(kernel: str | KernelSpec, constants: KernelConstants,
                    side: str, t, order: int = 1):
    """Order-``p`` boundary kernel ``e_1' M_{p,r}^{-1} r_p(t) K(t)``.

    For ``order=1`` this coincides with :func:`equivalent_kernel`.
    """
    kern = get_kernel(kernel)
    side = _side(side)
    t = np.asarray(t, dtype=float)
    M = constants.gram(order, side)
    row = np.linalg.solve(M, np.eye(order + 1)[:, 0])
    powers = t[..., None] ** np.arange(order + 1)
    val = (powers @ row) * kern.evaluate(t)
    inside = (t >= 0) & (t <= 1) if side == "plus" else (t <= 0) & (t >= -1)
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out
