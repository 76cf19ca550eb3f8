"""Empirical-likelihood inference for regression discontinuity designs.

The main entry points are :func:`analyze` for one data set and
:func:`run_coverage_study` for simulations. Lower-level pieces live in the
submodules: ``kernel`` (kernel constants), ``localfit`` (local polynomial
fits and pilots), ``elcore`` (the EL criterion and its profile),
``designs`` (moment systems), ``bandwidth`` (coverage-optimal bandwidths and
Bartlett factors) and ``inference`` (intervals and tests).
"""

__version__ = "0.1.0"

from .bandwidth import (BandwidthPlan, CurvatureEstimates, bartlett_factor,
                        coverage_optimal_bandwidth, estimate_curvature)
from .designs import DESIGN_KINDS, DesignSpec, build_moment_system
from .elcore import el_criterion, profile_lr
from .errors import (DataSupportError, DegenerateDesignError, ELRDDError,
                     InputError, NumericalError)
from .inference import (InferenceResult, analyze, confidence_interval,
                        joint_test, region_membership)
from .kernel import compute_kernel_constants, get_kernel
from .localfit import Sample, build_weights
from .montecarlo import (CoverageReport, DGPSpec, generate,
                         run_coverage_study)

__all__ = [
    "__version__",
    "BandwidthPlan", "CurvatureEstimates", "bartlett_factor",
    "coverage_optimal_bandwidth", "estimate_curvature",
    "DESIGN_KINDS", "DesignSpec", "build_moment_system",
    "el_criterion", "profile_lr",
    "DataSupportError", "DegenerateDesignError", "ELRDDError", "InputError",
    "NumericalError",
    "InferenceResult", "analyze", "confidence_interval", "joint_test",
    "region_membership",
    "compute_kernel_constants", "get_kernel",
    "Sample", "build_weights",
    "CoverageReport", "DGPSpec", "generate", "run_coverage_study",
]
