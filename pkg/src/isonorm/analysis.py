"""Error-profile geometry and spectrum diagnostics.

A student that is off by ``e`` in normalized space is off by ``B e`` in the
original teacher space, where ``B`` is the normalizer's inverse linear part
(the "back map"). Everything here is some view of ``B``: its radial profile
for 2-D distributions, the per-channel variance it induces, and how the
eigenbasis lines up with the Hadamard basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import hadamard as hd
from .assignment import linear_sum_assignment
from .errors import DegenerateDistribution, ShapeError
from .moments import Eigensystem, Statistics, as_features
from .normalize import (
    Method,
    Normalizer,
    fit_global_standardize,
    fit_phi_s,
    fit_standardize,
    fit_whiten,
)


@dataclass(frozen=True, eq=False)
class ErrorProfile:
    method: Method
    channels: int
    back_map: float | np.ndarray
    eigen_context: Eigensystem | None
    # phi for PHI-S, sigma_g for global standardization: |B e| = scale * |e| for every e
    isotropic_scale: float | None = None

    def matrix(self) -> np.ndarray:
        b = np.asarray(self.back_map, dtype=np.float64)
        if b.ndim == 0:
            return float(b) * np.eye(self.channels)
        return b

    def apply(self, err) -> np.ndarray:
        err = np.asarray(err, dtype=np.float64)
        if np.ndim(self.back_map) == 0:
            return err * float(self.back_map)
        return err @ np.asarray(self.back_map).T


def error_back_map(nrm: Normalizer) -> ErrorProfile:
    m, c = nrm.method, nrm.channels
    if m is Method.GLOBAL_STANDARDIZE:
        scale = float(nrm.inverse)
        return ErrorProfile(m, c, scale, nrm.eigensystem, isotropic_scale=scale)
    if m is Method.STANDARDIZE:
        return ErrorProfile(m, c, np.diag(nrm.inverse), nrm.eigensystem)
    back = np.array(nrm.inverse, dtype=np.float64)
    scale = nrm.phi if m is Method.PHI_S else None
    return ErrorProfile(m, c, back, nrm.eigensystem, isotropic_scale=scale)


# -- radial profile ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RadialCurve:
    thetas: np.ndarray
    radii: np.ndarray

    def argmax_theta(self) -> float:
        return float(self.thetas[int(np.argmax(self.radii))])

    def argmin_theta(self) -> float:
        return float(self.thetas[int(np.argmin(self.radii))])

    def at(self, theta: float) -> float:
        """Radius at the grid point nearest ``theta``."""
        step = self.thetas[1] - self.thetas[0] if self.thetas.size > 1 else 1.0
        idx = int(round((theta % (2 * math.pi)) / step)) % self.thetas.size
        return float(self.radii[idx])

    def mean_square(self) -> float:
        return float(np.mean(self.radii**2))


def radial_curve(back_map, points: int = 720) -> RadialCurve:
    """Radius of the image of the unit circle under a 2 x 2 back map."""
    b = np.asarray(back_map, dtype=np.float64)
    if b.ndim == 0:
        b = float(b) * np.eye(2)
    if b.shape != (2, 2):
        raise ShapeError(f"radial profiles need a 2 x 2 map, got {b.shape}")
    thetas = np.arange(points) * (2 * math.pi / points)
    circle = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)
    return RadialCurve(thetas, np.linalg.norm(circle @ b.T, axis=1))


def normalizer_from_eigensystem(eigs: Eigensystem, method: str | Method, mean=None) -> Normalizer:
    """Fit ``method`` to the distribution with covariance ``U L U^T``.

    Global sigma uses the large-N limit; with a zero mean it equals phi.
    """
    m = Method(method)
    stats = Statistics.from_covariance(eigs.reconstruct(), mean)
    if m is Method.GLOBAL_STANDARDIZE:
        return fit_global_standardize(stats)
    if m is Method.STANDARDIZE:
        return fit_standardize(stats)
    if m is Method.PHI_S:
        return fit_phi_s(stats, eig=eigs)
    return fit_whiten(stats, m, eig=eigs)


def radial_error(eigs: Eigensystem, method: str | Method, points: int = 720) -> RadialCurve:
    if eigs.channels != 2:
        raise ShapeError(f"radial error is defined for 2-D distributions, got C={eigs.channels}")
    profile = error_back_map(normalizer_from_eigensystem(eigs, method))
    return radial_curve(profile.matrix(), points)


# -- variance ranges ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VarianceRangeReport:
    normalized_variances: np.ndarray
    denormalized_variances: np.ndarray

    @property
    def normalized_range(self) -> float:
        return float(np.ptp(self.normalized_variances))

    @property
    def denormalized_range(self) -> float:
        return float(np.ptp(self.denormalized_variances))

    def to_dict(self) -> dict:
        return {
            "normalized_range": self.normalized_range,
            "denormalized_range": self.denormalized_range,
            "normalized_variances": self.normalized_variances.tolist(),
            "denormalized_variances": self.denormalized_variances.tolist(),
        }


def variance_range(nrm: Normalizer, student_err) -> VarianceRangeReport:
    """Per-channel error variances before and after mapping errors back to teacher space.

    ``student_err`` holds errors in the normalized space, one row per sample.
    """
    err = as_features(student_err, nrm.channels)
    if err.shape[0] < 2:
        raise ShapeError("need at least two error rows")
    denorm = error_back_map(nrm).apply(err)
    return VarianceRangeReport(err.var(axis=0, ddof=1), denorm.var(axis=0, ddof=1))


# -- spectra -----------------------------------------------------------------


def effective_rank(spectrum) -> float:
    """``exp`` of the Shannon entropy of the normalized spectrum (RankMe).

    A plain array is taken as singular values. An :class:`Eigensystem` holds
    covariance eigenvalues, so its square roots are used.
    """
    if isinstance(spectrum, Eigensystem):
        s = np.sqrt(np.clip(spectrum.values, 0.0, None))
    else:
        s = np.asarray(spectrum, dtype=np.float64).ravel()
    if s.size == 0 or (s < 0).any() or not np.isfinite(s).all():
        raise ValueError("spectrum must be a non-empty vector of finite non-negative values")
    total = s.sum()
    if total <= 0:
        raise DegenerateDistribution("spectrum is all zeros")
    p = s / total
    p = p[p > 0]  # drops zeros, including values that underflow once normalized
    return float(math.exp(-(p * np.log(p)).sum()))


def rankme(features) -> float:
    """Effective rank of a feature matrix from its singular values."""
    x = as_features(features)
    return effective_rank(np.linalg.svd(x, compute_uv=False))


# -- alignment with the Hadamard basis ---------------------------------------


@dataclass(frozen=True, eq=False)
class AlignmentReport:
    matched: np.ndarray  # |H U_align^T| diagonal after optimal matching
    permutation: np.ndarray  # eigenvector index matched to each Hadamard row
    threshold: float = 0.75

    @property
    def mean(self) -> float:
        return float(self.matched.mean())

    @property
    def min(self) -> float:
        return float(self.matched.min())

    @property
    def max(self) -> float:
        return float(self.matched.max())

    @property
    def count_above(self) -> int:
        return int((self.matched > self.threshold).sum())

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "min": self.min,
            "max": self.max,
            "count_above": self.count_above,
            "threshold": self.threshold,
        }


def alignment_report(eigs: Eigensystem, h, threshold: float = 0.75) -> AlignmentReport:
    """How close ``H U^T`` is to a signed permutation, after optimal basis matching."""
    hmat = np.asarray(h.entries if isinstance(h, hd.HadamardMatrix) else h, dtype=np.float64)
    u = eigs.vectors
    if hmat.shape != u.shape:
        raise ShapeError(f"Hadamard {hmat.shape} and eigenvectors {u.shape} differ in size")
    scores = np.abs(hmat @ u.T)
    rows, cols = linear_sum_assignment(scores, maximize=True)
    return AlignmentReport(scores[rows, cols], cols, threshold)
