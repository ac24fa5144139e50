"""Invertible feature normalizers for multi-teacher distillation.

The headline method, PHI-S, rotates a distribution by ``H U^T`` (Hadamard
times eigenbasis) so every channel carries the same variance, then divides
by one scalar. The package also covers the classical alternatives, the
Hadamard constructions, streaming moments, error analysis, a small
distillation harness, and folding the inverse into a linear layer.
"""

from .analysis import (
    alignment_report,
    effective_rank,
    error_back_map,
    radial_curve,
    radial_error,
    rankme,
    variance_range,
)
from .errors import IsonormError
from .fuse import FusedLinear, LinearLayer, verify_fusion
from .hadamard import HadamardMatrix, construct, plan
from .moments import Eigensystem, MomentAccumulator, Statistics, eigh, estimate, finalize, merge
from .normalize import (
    ALL_METHODS,
    Method,
    Normalizer,
    __version__,
    apply,
    deserialize,
    fit,
    fit_global_standardize,
    fit_phi_s,
    fit_standardize,
    fit_whiten,
    invert,
    serialize,
)

__all__ = [
    "ALL_METHODS",
    "Eigensystem",
    "FusedLinear",
    "HadamardMatrix",
    "IsonormError",
    "LinearLayer",
    "Method",
    "MomentAccumulator",
    "Normalizer",
    "Statistics",
    "__version__",
    "alignment_report",
    "apply",
    "construct",
    "deserialize",
    "effective_rank",
    "eigh",
    "error_back_map",
    "estimate",
    "finalize",
    "fit",
    "fit_global_standardize",
    "fit_phi_s",
    "fit_standardize",
    "fit_whiten",
    "invert",
    "merge",
    "plan",
    "radial_curve",
    "radial_error",
    "rankme",
    "serialize",
    "variance_range",
    "verify_fusion",
]
