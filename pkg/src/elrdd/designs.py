"""Moment systems for the supported regression discontinuity designs.

Each design maps raw columns to the three moment blocks (plus-side,
minus-side and pooled) of the general framework. The parameter of interest
always occupies the leading coordinates of ``theta``; nuisance coordinates
follow in the order (intercepts, covariate coefficients).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .elcore import MomentSystem, NuisanceTransform
from .errors import InputError
from .localfit import Sample

__all__ = ["DESIGN_KINDS", "DesignSpec", "build_moment_system",
           "simplex_transform"]

DESIGN_KINDS = ("sharp", "fuzzy_alt", "sharp_cov", "fuzzy_cov_alt",
                "multi_outcome", "categorical_sharp", "categorical_fuzzy",
                "balance_test")

_FUZZY = ("fuzzy_alt", "fuzzy_cov_alt", "categorical_fuzzy")
_COVARIATE = ("sharp_cov", "fuzzy_cov_alt")
_JOINT = ("multi_outcome", "categorical_sharp", "categorical_fuzzy",
          "balance_test")


@dataclass(frozen=True)
class DesignSpec:
    """Which design to fit and which columns play which role.

    Parameters
    ----------
    kind : str
        One of ``DESIGN_KINDS``.
    outcome_columns : tuple of str
        Outcome column(s); for ``balance_test`` the covariates under test.
    treatment_column : str, optional
        Binary treatment indicator (fuzzy designs).
    covariate_columns : tuple of str
        Covariates entering linearly (covariate designs).
    """

    kind: str
    outcome_columns: tuple = ("y",)
    treatment_column: str | None = None
    covariate_columns: tuple = ()

    def __post_init__(self):
        if self.kind not in DESIGN_KINDS:
            raise InputError(
                f"unknown design {self.kind!r}; choose from {', '.join(DESIGN_KINDS)}"
            )
        object.__setattr__(self, "outcome_columns", tuple(self.outcome_columns))
        object.__setattr__(self, "covariate_columns", tuple(self.covariate_columns))
        if not self.outcome_columns:
            raise InputError("at least one outcome column is required")
        if self.kind in _FUZZY and not self.treatment_column:
            raise InputError(f"design {self.kind!r} requires a treatment column")
        if self.kind in _COVARIATE and not self.covariate_columns:
            raise InputError(f"design {self.kind!r} requires at least one covariate")
        if self.kind in ("sharp", "fuzzy_alt", "sharp_cov", "fuzzy_cov_alt") \
                and len(self.outcome_columns) != 1:
            raise InputError(f"design {self.kind!r} takes exactly one outcome")

    @property
    def d_rho(self) -> int:
        return len(self.outcome_columns) if self.kind in _JOINT else 1

    @property
    def is_fuzzy(self) -> bool:
        return self.kind in _FUZZY

    @property
    def has_covariates(self) -> bool:
        return self.kind in _COVARIATE

    @property
    def is_joint(self) -> bool:
        return self.kind in _JOINT

    @property
    def is_categorical(self) -> bool:
        return self.kind.startswith("categorical")

    def null_value(self) -> np.ndarray:
        return np.zeros(self.d_rho)

    def required_columns(self) -> tuple:
        cols = list(self.outcome_columns)
        if self.treatment_column:
            cols.append(self.treatment_column)
        cols += list(self.covariate_columns)
        return tuple(cols)


def _check_binary(name, v):
    if not np.all((v == 0) | (v == 1)):
        raise InputError(f"column {name!r} must be binary (0/1)")


def simplex_transform(J: int) -> NuisanceTransform:
    """Multinomial-logit map ``g = exp(e) / (1 + sum exp(e))``.

    The admissibility check requires both the plus and minus probability
    vectors of ``theta = (g_plus, g_minus)`` to lie in the open simplex.
    """

    def forward(eta):
        m = max(0.0, float(np.max(eta)))
        ex = np.exp(eta - m)
        return ex / (np.exp(-m) + ex.sum())

    def jacobian(eta):
        g = forward(eta)
        return np.diag(g) - np.outer(g, g)

    def inverse(g):
        g = np.asarray(g, dtype=float)
        rest = 1.0 - g.sum()
        if np.any(g <= 0) or rest <= 0:
            raise ValueError("probabilities outside the open simplex")
        return np.log(g) - np.log(rest)

    def admissible(theta):
        theta = np.asarray(theta)
        for g in (theta[:J], theta[J:2 * J]):
            if np.any(g <= 0) or g.sum() >= 1:
                return False
        return True

    return NuisanceTransform(forward, jacobian, inverse, admissible)


def build_moment_system(spec: DesignSpec, sample: Sample) -> MomentSystem:
    """Moment blocks and affine constraint for ``spec`` on ``sample``.

    Raises
    ------
    InputError
        If a treatment column is not binary or categorical outcomes are not
        mutually exclusive dummies.
    """
    n = sample.n
    plus = (sample.x >= sample.cutoff).astype(float)
    minus = 1.0 - plus
    Ys = [sample[c] for c in spec.outcome_columns]
    D = sample[spec.treatment_column] if spec.treatment_column else None
    if D is not None:
        _check_binary(spec.treatment_column, D)
    if spec.is_categorical:
        for c, y in zip(spec.outcome_columns, Ys):
            _check_binary(c, y)
        if np.any(np.sum(Ys, axis=0) > 1):
            raise InputError("categorical outcome columns must be mutually exclusive")

    kind = spec.kind
    transform = None
    if kind in ("sharp", "fuzzy_alt"):
        Y = Ys[0]
        values = np.column_stack([Y, Y])
        G = np.zeros((n, 2, 2))
        if kind == "sharp":
            G[:, 0, 0] = 1.0
            G[:, 1, 1] = 1.0
            names = ("g_plus", "g_minus")
            Psi = np.ones((1, 1))
        else:
            G[:, 0, 0] = G[:, 1, 0] = D
            G[:, 0, 1] = G[:, 1, 1] = 1.0
            names = ("g_treat", "g_base")
            Psi = np.zeros((1, 1))
        blocks = (1, 1, 0)
        dim_rho = 1
        scale = np.std(Y)
    elif kind in ("sharp_cov", "fuzzy_cov_alt"):
        Y = Ys[0]
        Z = np.column_stack([sample[c] for c in spec.covariate_columns])
        dz = Z.shape[1]
        q = 2 + dz
        values = np.column_stack([Y, Y, Z * Y[:, None]])
        G = np.zeros((n, 2 + dz, q))
        if kind == "sharp_cov":
            G[:, 0, 0] = 1.0
            G[:, 1, 1] = 1.0
            G[:, 2:, 0] = Z * plus[:, None]
            G[:, 2:, 1] = Z * minus[:, None]
            names = ("g_plus", "g_minus")
            Psi = np.zeros((1, q - 1))
            Psi[0, 0] = 1.0
        else:
            G[:, 0, 0] = G[:, 1, 0] = D
            G[:, 0, 1] = G[:, 1, 1] = 1.0
            G[:, 2:, 0] = Z * D[:, None]
            G[:, 2:, 1] = Z
            names = ("g_treat", "g_base")
            Psi = np.zeros((1, q - 1))
        G[:, 0, 2:] = Z
        G[:, 1, 2:] = Z
        G[:, 2:, 2:] = Z[:, :, None] * Z[:, None, :]
        names = names + tuple(f"g_{c}" for c in spec.covariate_columns)
        blocks = (1, 1, dz)
        dim_rho = 1
        scale = np.std(Y)
    else:
        Y = np.column_stack(Ys)
        J = Y.shape[1]
        values = np.column_stack([Y, Y])
        G = np.zeros((n, 2 * J, 2 * J))
        eye = np.eye(J)
        if kind == "categorical_fuzzy":
            G[:, :J, :J] = D[:, None, None] * eye
            G[:, J:, :J] = D[:, None, None] * eye
            G[:, :J, J:] = eye
            G[:, J:, J:] = eye
            Psi = np.zeros((J, J))
            names = tuple(f"g_treat_{c}" for c in spec.outcome_columns) + \
                tuple(f"g_base_{c}" for c in spec.outcome_columns)
        else:
            G[:, :J, :J] = eye
            G[:, J:, J:] = eye
            Psi = np.eye(J)
            names = tuple(f"g_plus_{c}" for c in spec.outcome_columns) + \
                tuple(f"g_minus_{c}" for c in spec.outcome_columns)
            if kind == "categorical_sharp":
                transform = simplex_transform(J)
        blocks = (J, J, 0)
        dim_rho = J
        scale = float(np.max(np.std(Y, axis=0)))

    scale = float(scale) if scale > 0 else 1.0
    return MomentSystem(kind=kind, values=values, design=G, block_sizes=blocks,
                        dim_rho=dim_rho, Psi=Psi, param_names=names,
                        scale=scale, transform=transform,
                        labels=tuple(spec.outcome_columns))
