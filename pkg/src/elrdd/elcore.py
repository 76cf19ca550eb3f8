"""Dual empirical-likelihood criterion and its profile over nuisance parameters.

Every supported design has moment vectors that are affine in the parameter,
``U_i(theta) = a_i - B_i theta``. The criterion is

    l(theta) = 2 sup_lambda sum_i log(1 + lambda' U_i(theta)),

computed by damped Newton on the concave dual, and the profile ratio is

    LR(tau) = inf { l(theta) : rho(theta) = tau },

with ``theta = (tau + Psi nu, nu)`` for a free nuisance vector ``nu``. The outer
minimisation is a damped Newton method on ``nu``: the gradient follows from
the envelope theorem and the Hessian from implicit differentiation of the
inner first-order condition, so no finite differences are needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InputError, NumericalError

__all__ = [
    "MomentSystem",
    "BoundSystem",
    "NuisanceTransform",
    "ELEvaluation",
    "ProfileResult",
    "el_criterion",
    "maximize_dual",
    "profile_lr",
    "bind",
]

LAMBDA_CAP = 1e8
INNER_TOL = 1e-9
INNER_MAX_ITER = 200
OUTER_TOL = 1e-8
OUTER_MAX_ITER = 100
BOUNDARY_FRACTION = 0.99
FULL_STEP_DECREMENT = 1e-10


@dataclass(frozen=True)
class NuisanceTransform:
    """Smooth reparameterisation of the nuisance block.

    ``forward`` maps free coordinates to the nuisance vector, ``jacobian``
    returns its derivative, ``inverse`` maps back and ``admissible`` checks
    the full parameter vector (e.g. probabilities inside the simplex).
    """

    forward: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    admissible: Callable[[np.ndarray], bool]


@dataclass(frozen=True)
class MomentSystem:
    """Design-specific moment blocks for every observation.

    The stacked moment vector of observation ``i`` is
    ``omega_i * (values_i - design_i @ theta)`` where ``omega_i`` repeats
    ``W_{+,i}`` over the first block, ``W_{-,i}`` over the second and
    ``W_{+,i} + W_{-,i}`` over the third.

    Attributes
    ----------
    kind : str
        Design name.
    values : ndarray, shape (n, d)
        Stacked ``(V_1, V_2, V_3)``.
    design : ndarray, shape (n, d, q)
        Stacked ``(G_1; G_2; G_3)``.
    block_sizes : tuple of int
        ``(d_1, d_2, d_3)``.
    dim_rho : int
        Number of parameters of interest; they occupy the leading
        coordinates of ``theta``.
    Psi : ndarray, shape (dim_rho, q - dim_rho)
        Slope of the affine constraint ``theta_dagger = tau + Psi nu``.
    param_names : tuple of str
        Names of the ``theta`` coordinates.
    scale : float
        Data scale used for search brackets and multi-starts.
    transform : NuisanceTransform, optional
        Reparameterisation applied to ``nu`` during profiling.
    """

    kind: str
    values: np.ndarray
    design: np.ndarray
    block_sizes: tuple
    dim_rho: int
    Psi: np.ndarray
    param_names: tuple
    scale: float = 1.0
    transform: Optional[NuisanceTransform] = None
    labels: tuple = ()

    @property
    def dim_d(self) -> int:
        return self.values.shape[1]

    @property
    def dim_theta(self) -> int:
        return self.design.shape[2]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def delta(self) -> np.ndarray:
        """Jacobian ``(Psi; I)`` of ``theta`` with respect to ``nu``."""
        q, r = self.dim_theta, self.dim_rho
        return np.vstack([self.Psi, np.eye(q - r)])

    def rho(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        r = self.dim_rho
        return theta[:r] - self.Psi @ theta[r:]

    def embed(self, tau, nu) -> np.ndarray:
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        nu = np.asarray(nu, dtype=float)
        return np.concatenate([tau + self.Psi @ nu, nu])

    def omega(self, weights) -> np.ndarray:
        d1, d2, d3 = self.block_sizes
        wp, wm = weights.w_plus, weights.w_minus
        return np.column_stack(
            [np.repeat(wp[:, None], d1, 1), np.repeat(wm[:, None], d2, 1),
             np.repeat((wp + wm)[:, None], d3, 1)]
        )

    def eval_blocks(self, i: int, theta, weights) -> np.ndarray:
        """Stacked moment vector of observation ``i``."""
        theta = np.asarray(theta, dtype=float)
        om = self.omega(weights)[i]
        return om * (self.values[i] - self.design[i] @ theta)

    def bind(self, weights) -> "BoundSystem":
        return bind(self, weights)


@dataclass(frozen=True)
class BoundSystem:
    """Moment system combined with weights, restricted to active rows.

    Rows whose moment vector is identically zero contribute nothing to the
    criterion and are dropped.
    """

    system: MomentSystem
    a: np.ndarray
    B: np.ndarray
    weights: object
    n: int

    def moments(self, theta) -> np.ndarray:
        return self.a - self.B @ np.asarray(theta, dtype=float)

    def beta_check(self) -> np.ndarray:
        """Estimator solving ``sum_i U_i(theta) = 0``."""
        Bs = self.B.sum(0)
        asum = self.a.sum(0)
        sol, _, rank, _ = np.linalg.lstsq(Bs, asum, rcond=None)
        if rank < Bs.shape[1]:
            raise NumericalError("moment system is not identified at this bandwidth")
        return sol


def bind(system: MomentSystem, weights) -> BoundSystem:
    om = system.omega(weights)
    active = np.any(om != 0, axis=1)
    om = om[active]
    a = om * system.values[active]
    B = om[:, :, None] * system.design[active]
    return BoundSystem(system, a, B, weights, system.n)


@dataclass(frozen=True)
class ELEvaluation:
    """Result of the inner dual maximisation.

    Attributes
    ----------
    criterion : float
        ``2 sup sum log(1 + lambda' U_i)``; ``inf`` when zero lies outside the
        convex hull of the moment vectors.
    lam : ndarray
        Maximising multiplier.
    converged, feasible : bool
    inner_iterations : int
    gradient_norm : float
        Newton decrement at the returned multiplier (scale free).
    """

    criterion: float
    lam: np.ndarray
    converged: bool
    feasible: bool
    inner_iterations: int
    gradient_norm: float

    @property
    def lambda_(self):
        return self.lam


def _sign_infeasible(U: np.ndarray) -> bool:
    """True when some coordinate has one strict sign across all rows."""
    pos = np.any(U > 0, axis=0)
    neg = np.any(U < 0, axis=0)
    return bool(np.any(pos ^ neg))


def maximize_dual(U: np.ndarray, lam0: Optional[np.ndarray] = None,
                  tol: float = INNER_TOL, max_iter: int = INNER_MAX_ITER,
                  lambda_cap: float = LAMBDA_CAP) -> ELEvaluation:
    """Maximise ``sum log(1 + lambda' U_i)`` by damped Newton.

    The line search never leaves ``{lambda : 1 + lambda' U_i > 0}``: steps are
    capped at ``BOUNDARY_FRACTION`` of the distance to its boundary.

    Parameters
    ----------
    U : ndarray, shape (m, d)
        Moment vectors.
    lam0 : ndarray, optional
        Warm start; ignored when infeasible.
    """
    m, d = U.shape
    inf_eval = lambda it: ELEvaluation(np.inf, np.full(d, np.nan), True,
                                       False, it, np.nan)
    if m == 0 or not np.any(U):
        return ELEvaluation(0.0, np.zeros(d), True, True, 0, 0.0)
    if _sign_infeasible(U):
        return inf_eval(0)
    umax = np.max(np.abs(U))
    lam = np.zeros(d) if lam0 is None else np.array(lam0, dtype=float)
    z = 1.0 + U @ lam
    if not np.all(np.isfinite(lam)) or np.any(z <= 0):
        lam = np.zeros(d)
        z = np.ones(m)
    f = np.log(z).sum()
    dec = np.inf
    for it in range(1, max_iter + 1):
        Uz = U / z[:, None]
        g = Uz.sum(0)
        Hn = Uz.T @ Uz
        try:
            L = np.linalg.cholesky(Hn)
            step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(Hn, g, rcond=1e-13)[0]
        dec = float(g @ step)
        if dec <= tol * tol:
            return ELEvaluation(2.0 * f, lam, True, True, it - 1,
                                np.sqrt(max(dec, 0.0)))
        Ud = U @ step
        shrink = Ud < 0
        alpha = 1.0
        if np.any(shrink):
            alpha = min(1.0, BOUNDARY_FRACTION * np.min(-z[shrink] / Ud[shrink]))
        while True:
            z_new = z + alpha * Ud
            f_new = np.log(z_new).sum()
            if f_new >= f + 1e-4 * alpha * dec:
                break
            if alpha == 1.0 and dec < FULL_STEP_DECREMENT:
                # quadratic region: the ascent is below rounding of f
                break
            alpha *= 0.5
            if alpha < 1e-14:
                break
        if alpha < 1e-14:
            # no ascent possible: either converged to rounding or stalled at
            # the boundary of an unbounded problem
            if dec < 1e-12 * max(1.0, abs(f)):
                return ELEvaluation(2.0 * f, lam, True, True, it,
                                    np.sqrt(dec))
            return inf_eval(it)
        lam = lam + alpha * step
        z = z_new
        f = f_new
        if np.linalg.norm(lam) * umax > lambda_cap:
            return inf_eval(it)
    # iteration cap: distinguish slow divergence from a genuine failure
    if np.linalg.norm(lam) * umax > 1e4:
        return inf_eval(max_iter)
    raise NumericalError(
        f"dual Newton did not converge in {max_iter} iterations "
        f"(decrement {dec:.2e})"
    )


def el_criterion(system, theta, weights=None, sample=None,
                 lam0=None) -> ELEvaluation:
    """EL criterion ``l(theta)`` for a moment system.

    Parameters
    ----------
    system : MomentSystem or BoundSystem
        Unbound systems require ``weights``.
    theta : array_like
        Full parameter vector.
    weights : WeightVector, optional
    sample : Sample, optional
        Accepted for symmetry with the data-bound call; unused.
    """
    bound = _as_bound(system, weights)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (bound.system.dim_theta,):
        raise InputError(
            f"theta must have length {bound.system.dim_theta}, got {theta.shape}"
        )
    if not np.all(np.isfinite(theta)):
        raise InputError("theta contains non-finite values")
    return maximize_dual(bound.moments(theta), lam0)


def _as_bound(system, weights) -> BoundSystem:
    if isinstance(system, BoundSystem):
        return system
    if weights is None:
        raise InputError("weights are required to evaluate an unbound system")
    return bind(system, weights)


@dataclass
class ProfileResult:
    """Profile ratio at a hypothesised value.

    Attributes
    ----------
    lr : float
        ``LR(tau)``; ``inf`` when no feasible parameter was found.
    theta : ndarray
        Minimising full parameter vector (NaN when infeasible).
    nuisance : ndarray
        Free coordinates at the optimum.
    converged : bool
    diagnostics : dict
    """

    lr: float
    theta: np.ndarray
    nuisance: np.ndarray
    converged: bool
    diagnostics: dict = field(default_factory=dict)


class _Profile:
    """Criterion along the constraint set for fixed ``tau``."""

    def __init__(self, bound: BoundSystem, tau):
        self.bound = bound
        self.sys = bound.system
        self.tau = np.atleast_1d(np.asarray(tau, dtype=float))
        self.delta = self.sys.delta
        self.tr = self.sys.transform
        self.lam = None
        self.evals = 0

    def theta(self, eta):
        nu = self.tr.forward(eta) if self.tr is not None else eta
        return self.sys.embed(self.tau, nu)

    def value(self, eta, lam0=None):
        theta = self.theta(eta)
        if not np.all(np.isfinite(theta)):
            return np.inf, None, theta
        if self.tr is not None and not self.tr.admissible(theta):
            return np.inf, None, theta
        U = self.bound.moments(theta)
        ev = maximize_dual(U, self.lam if lam0 is None else lam0)
        self.evals += 1
        return ev.criterion, ev, theta

    def derivatives(self, eta, ev, theta):
        """Gradient and Hessian of the criterion in the free coordinates."""
        B = self.bound.B
        lam = ev.lam
        U = self.bound.moments(theta)
        z = 1.0 + U @ lam
        BL = np.einsum("mdq,d->mq", B, lam)
        BLz = BL / z[:, None]
        g_theta = -2.0 * BLz.sum(0)
        Uz = U / z[:, None]
        S = Uz.T @ Uz
        F_lt = -np.einsum("mdq,m->dq", B, 1.0 / z) + Uz.T @ BLz
        F_tt = -BLz.T @ BLz
        try:
            SinvF = np.linalg.solve(S, F_lt)
        except np.linalg.LinAlgError:
            SinvF = np.linalg.lstsq(S, F_lt, rcond=1e-13)[0]
        H_theta = 2.0 * (F_tt + F_lt.T @ SinvF)
        D = self.delta
        if self.tr is not None:
            D = D @ self.tr.jacobian(eta)
        return D.T @ g_theta, D.T @ H_theta @ D

    def minimize(self, eta0, max_iter=OUTER_MAX_ITER, tol=OUTER_TOL):
        eta = np.array(eta0, dtype=float)
        val, ev, theta = self.value(eta, lam0=np.zeros(self.sys.dim_d))
        if not np.isfinite(val):
            return np.inf, eta, False, 0
        self.lam = ev.lam
        k = eta.size
        converged = False
        it = 0
        for it in range(1, max_iter + 1):
            if val <= 1e-14:
                converged = True
                break
            g, H = self.derivatives(eta, ev, theta)
            H = 0.5 * (H + H.T)
            try:
                np.linalg.cholesky(H)
                Hs = H
            except np.linalg.LinAlgError:
                w = np.linalg.eigvalsh(H)
                shift = -w.min() + 1e-8 * max(1.0, np.abs(w).max())
                Hs = H + shift * np.eye(k)
            step = -np.linalg.solve(Hs, g)
            dec = float(-g @ step)
            if dec <= tol * 1e-2:
                converged = True
                break
            alpha = 1.0
            accepted = False
            while alpha > 1e-12:
                trial = eta + alpha * step
                v, ev_t, th_t = self.value(trial)
                if np.isfinite(v) and v <= val - 1e-4 * alpha * dec:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                # no further decrease available at working precision
                converged = dec < 1e-6 * max(1.0, val)
                break
            change = val - v
            eta, val, ev, theta = trial, v, ev_t, th_t
            self.lam = ev.lam
            if change <= tol * max(1.0, val) * 1e-2 and alpha == 1.0:
                converged = True
                break
        return val, eta, converged, it


def _euclidean_start(bound: BoundSystem, tau, beta):
    """Nuisance minimising the quadratic (Euclidean-likelihood) criterion."""
    sys = bound.system
    U = bound.moments(beta)
    S = U.T @ U
    S = S + 1e-10 * max(np.trace(S), 1e-300) * np.eye(S.shape[0])
    Bs = bound.B.sum(0)
    theta0 = sys.embed(tau, np.zeros(sys.dim_theta - sys.dim_rho))
    r = bound.a.sum(0) - Bs @ theta0
    X = Bs @ sys.delta
    try:
        Sinv_X = np.linalg.solve(S, X)
        nu = np.linalg.solve(X.T @ Sinv_X, Sinv_X.T @ r)
    except np.linalg.LinAlgError:
        nu = np.linalg.lstsq(X, r, rcond=None)[0]
    return nu


def profile_lr(system, tau, weights=None, sample=None, init=None,
               multistart: bool = True) -> ProfileResult:
    """Profile EL ratio ``LR(tau)``.

    Parameters
    ----------
    system : MomentSystem or BoundSystem
    tau : array_like
        Hypothesised value of the parameters of interest.
    weights : WeightVector, optional
        Required when ``system`` is unbound.
    init : array_like, optional
        Starting nuisance vector (tried first).
    multistart : bool, optional
        Also start from the projected weighted-least-squares estimate and
        two shifted copies; the smallest criterion wins.

    Returns
    -------
    ProfileResult
        ``lr`` is ``inf`` when every start is infeasible.
    """
    bound = _as_bound(system, weights)
    sys = bound.system
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if tau.shape != (sys.dim_rho,) or not np.all(np.isfinite(tau)):
        raise InputError(f"tau must be a finite vector of length {sys.dim_rho}")
    k = sys.dim_theta - sys.dim_rho
    prof = _Profile(bound, tau)
    if k == 0:
        val, ev, theta = prof.value(np.zeros(0))
        return ProfileResult(val, theta, np.zeros(0), True, {"starts": 0})

    beta = bound.beta_check()
    proj = beta[sys.dim_rho:]
    starts = []
    if init is not None:
        starts.append(np.asarray(init, dtype=float))
    starts.append(_euclidean_start(bound, tau, beta))
    if multistart:
        starts += [proj, proj + 0.5 * sys.scale, proj - 0.5 * sys.scale]
        if np.any(sys.Psi):
            # nuisance that keeps the constrained coordinates at beta_check
            r = sys.dim_rho
            fit_dagger = np.linalg.lstsq(sys.Psi, beta[:r] - tau, rcond=None)[0]
            starts.append(proj + fit_dagger - np.linalg.pinv(sys.Psi) @ sys.Psi @ proj)
    tr = sys.transform
    if tr is not None:
        starts = [_safe_inverse(tr, s) for s in starts]
        starts = [s for s in starts if s is not None]
    if multistart:
        # signed weights can split the feasible set into disjoint pieces
        scan = _scan_start(prof, proj, sys.scale)
        if scan is not None:
            starts.append(scan)

    best = None
    tried = 0
    runs = []
    for s in starts:
        val, eta, conv, it = prof.minimize(s)
        tried += 1
        runs.append(val)
        if np.isfinite(val) and (best is None or val < best[0]):
            best = (val, eta, conv, it)
        if not multistart and best is not None and best[2]:
            break
    if best is None:
        # sweep along each nuisance coordinate for a feasible start
        base = starts[0] if starts else np.zeros(k)
        for j in range(k):
            for t in (0.25, -0.25, 0.5, -0.5, 1.0, -1.0, 2.0, -2.0):
                s = base.copy()
                s[j] += t * sys.scale
                val, eta, conv, it = prof.minimize(s)
                tried += 1
                if np.isfinite(val):
                    best = (val, eta, conv, it)
                    break
            if best is not None:
                break
    if best is None:
        return ProfileResult(np.inf, np.full(sys.dim_theta, np.nan),
                             np.full(k, np.nan), True,
                             {"starts": tried, "feasible": False,
                              "evaluations": prof.evals})
    val, eta, conv, it = best
    nu = tr.forward(eta) if tr is not None else eta
    theta = sys.embed(tau, nu)
    return ProfileResult(max(float(val), 0.0), theta, np.asarray(eta), conv,
                         {"starts": tried, "feasible": True,
                          "outer_iterations": it, "evaluations": prof.evals,
                          "start_values": runs})


SCAN_POINTS = np.linspace(-2.0, 2.0, 25)


def _scan_start(prof: _Profile, proj, scale):
    """Best criterion value on a coarse grid along each nuisance axis."""
    tr = prof.tr
    zero = np.zeros(prof.sys.dim_d)
    best, best_val = None, np.inf
    for j in range(proj.size):
        for t in SCAN_POINTS:
            nu = proj.copy()
            nu[j] += t * scale
            eta = _safe_inverse(tr, nu) if tr is not None else nu
            if eta is None:
                continue
            val = prof.value(eta, lam0=zero)[0]
            if val < best_val:
                best, best_val = eta, val
    return best


def _safe_inverse(tr, nu):
    try:
        eta = tr.inverse(nu)
    except (ValueError, FloatingPointError):
        return None
    return eta if np.all(np.isfinite(eta)) else None
