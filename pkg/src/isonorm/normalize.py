"""Invertible affine normalizers for teacher feature distributions.

Six methods share one representation: ``y' = F (y - offset)`` and
``y = B y' + offset``, where ``F``/``B`` (forward/inverse) are a scalar, a
per-channel vector, or a full C x C matrix.

=========  ==================  =========================  =========================
method     forward             inverse                    offset
=========  ==================  =========================  =========================
gstd       1/sigma_g           sigma_g                    mu_g (broadcast)
std        1/sigma_c           sigma_c                    mu
pca        L^-1/2 U^T          U L^1/2                    mu
zca        U L^-1/2 U^T        U L^1/2 U^T                mu
hca        H L^-1/2 U^T        U L^1/2 H^T                mu
phis       (1/phi) H U^T       phi U H^T                  mu
=========  ==================  =========================  =========================

with ``phi = sqrt(trace(cov) / C)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import hadamard as hd
from .errors import (
    DegenerateChannel,
    DegenerateDistribution,
    IncompleteNormalizer,
    RankDeficient,
    ShapeError,
)
from .moments import Eigensystem, Statistics, as_features, eigh
from .tensorio import decode_bundle, encode_bundle

__version__ = "0.1.0"

DEFAULT_FLOOR = 1e-6

Linear = Union[float, np.ndarray]


class Method(str, enum.Enum):
    GLOBAL_STANDARDIZE = "gstd"
    STANDARDIZE = "std"
    PCA_WHITEN = "pca"
    ZCA_WHITEN = "zca"
    HCA_WHITEN = "hca"
    PHI_S = "phis"

    @property
    def is_whitening(self) -> bool:
        return self in (Method.PCA_WHITEN, Method.ZCA_WHITEN, Method.HCA_WHITEN)


ALL_METHODS = tuple(Method)


@dataclass(frozen=True, eq=False)
class Normalizer:
    method: Method
    offset: np.ndarray
    forward: Linear
    inverse: Linear
    phi: float | None = None
    eigensystem: Eigensystem | None = None
    hadamard: np.ndarray | None = None  # the (possibly sign-fixed) H actually used
    hadamard_recipe: str | None = None
    global_mean: float | None = None
    global_sigma: float | None = None
    n_samples: int = 0

    @property
    def channels(self) -> int:
        return self.offset.shape[0]

    @property
    def alpha(self) -> float | None:
        """Single scale factor for the isotropic methods, else None."""
        if self.method is Method.GLOBAL_STANDARDIZE:
            return float(self.forward)
        if self.method is Method.PHI_S:
            return 1.0 / self.phi
        return None

    def forward_matrix(self) -> np.ndarray:
        return _as_matrix(self.forward, self.channels)

    def inverse_matrix(self) -> np.ndarray:
        return _as_matrix(self.inverse, self.channels)

    def apply(self, y, dtype=None) -> np.ndarray:
        return apply(self, y, dtype)

    def invert(self, x, dtype=None) -> np.ndarray:
        return invert(self, x, dtype)


def _as_matrix(op: Linear, c: int) -> np.ndarray:
    op = np.asarray(op, dtype=np.float64)
    if op.ndim == 0:
        return float(op) * np.eye(c)
    if op.ndim == 1:
        return np.diag(op)
    return op.copy()


def _linear(op: Linear, z: np.ndarray) -> np.ndarray:
    if np.ndim(op) == 2:
        return z @ np.asarray(op).T
    return z * op


def apply(nrm: Normalizer, y, dtype=None) -> np.ndarray:
    """Map teacher features into the normalized space.

    ``dtype=np.float32`` runs the transform in single precision (about 1e-3
    relative accuracy); the default is float64.
    """
    y = as_features(y, nrm.channels)
    if dtype is not None and np.dtype(dtype) == np.float32:
        fwd = np.asarray(nrm.forward, dtype=np.float32)
        return _linear(fwd, y.astype(np.float32) - nrm.offset.astype(np.float32))
    return _linear(nrm.forward, y - nrm.offset)


def invert(nrm: Normalizer, x, dtype=None) -> np.ndarray:
    x = as_features(x, nrm.channels)
    if dtype is not None and np.dtype(dtype) == np.float32:
        inv = np.asarray(nrm.inverse, dtype=np.float32)
        return _linear(inv, x.astype(np.float32)) + nrm.offset.astype(np.float32)
    return _linear(nrm.inverse, x) + nrm.offset


# -- fitting -----------------------------------------------------------------


def fit_global_standardize(stats: Statistics) -> Normalizer:
    sigma = stats.global_sigma
    if not sigma > 0:
        raise DegenerateDistribution("global standard deviation is zero")
    return Normalizer(
        method=Method.GLOBAL_STANDARDIZE,
        offset=np.full(stats.channels, stats.global_mean),
        forward=1.0 / sigma,
        inverse=float(sigma),
        global_mean=float(stats.global_mean),
        global_sigma=float(sigma),
        n_samples=stats.n_samples,
    )


def fit_standardize(stats: Statistics, floor: float = DEFAULT_FLOOR, clamp: bool = False) -> Normalizer:
    """Per-channel standardization.

    A channel whose sigma is not above ``floor * max(sigma)`` raises
    DegenerateChannel, unless ``clamp`` is set, in which case its sigma is
    raised to that floor.
    """
    sigma = np.array(stats.per_channel_sigma, dtype=np.float64)
    smax = float(sigma.max())
    if smax <= 0:
        raise DegenerateDistribution("every channel has zero variance")
    limit = floor * smax
    low = np.flatnonzero(sigma <= limit)
    if low.size:
        if not clamp:
            i = int(low[0])
            raise DegenerateChannel(i, float(sigma[i]), limit)
        sigma = np.maximum(sigma, limit)
    return Normalizer(
        method=Method.STANDARDIZE,
        offset=np.array(stats.mean, dtype=np.float64),
        forward=1.0 / sigma,
        inverse=sigma,
        n_samples=stats.n_samples,
    )


def _eigensystem(stats: Statistics, eig: Eigensystem | None, solver: str) -> Eigensystem:
    if eig is not None:
        if eig.channels != stats.channels:
            raise ShapeError("eigensystem size does not match statistics")
        return eig
    return eigh(stats.cov, solver=solver)


def fit_whiten(
    stats: Statistics,
    q_choice: str | Method = "zca",
    floor: float = DEFAULT_FLOOR,
    clamp: bool = False,
    eig: Eigensystem | None = None,
    solver: str = "auto",
) -> Normalizer:
    """Whitening ``W = Q L^-1/2 U^T`` with ``Q`` in {I, U, H} (pca / zca / hca).

    Refuses (RankDeficient) when ``lambda_min <= floor * lambda_max``;
    ``clamp=True`` lifts small eigenvalues to that floor instead.
    """
    method = _whiten_method(q_choice)
    eig = _eigensystem(stats, eig, solver)
    lam = eig.values.copy()
    lmax = float(lam[0])
    if lmax <= 0:
        raise DegenerateDistribution("covariance is zero")
    ratio = float(lam[-1]) / lmax
    if ratio <= floor:
        if not clamp:
            from .analysis import effective_rank

            raise RankDeficient(effective_rank(eig), ratio, floor)
        lam = np.maximum(lam, floor * lmax)
    u = eig.vectors
    root = np.sqrt(lam)
    scaled_ut = u.T / root[:, None]  # L^-1/2 U^T
    u_root = u * root  # U L^1/2
    h_used = None
    recipe = None
    if method is Method.PCA_WHITEN:
        fwd, inv = scaled_ut, u_root
    elif method is Method.ZCA_WHITEN:
        fwd, inv = u @ scaled_ut, u_root @ u.T
    else:
        h = hd.construct(stats.channels)
        h_used, recipe = np.array(h.entries), h.recipe.sexpr()
        fwd, inv = h_used @ scaled_ut, u_root @ h_used.T
    return Normalizer(
        method=method,
        offset=np.array(stats.mean, dtype=np.float64),
        forward=fwd,
        inverse=inv,
        eigensystem=Eigensystem(u, lam),
        hadamard=h_used,
        hadamard_recipe=recipe,
        n_samples=stats.n_samples,
    )


def _whiten_method(q_choice) -> Method:
    if isinstance(q_choice, Method):
        m = q_choice
    else:
        key = str(q_choice).lower().replace("-w", "").replace("_", "")
        aliases = {"pca": "pca", "zca": "zca", "hca": "hca", "hadamard": "hca"}
        if key not in aliases:
            raise ValueError(f"unknown whitening choice {q_choice!r}")
        m = Method(aliases[key])
    if not m.is_whitening:
        raise ValueError(f"{m.value} is not a whitening method")
    return m


def sign_fix(u: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Negate eigenvectors (columns of U) and rows of H whose diagonal entry is negative.

    Both operations keep ``U`` an eigenbasis and ``H`` a Hadamard matrix, and
    make the resulting rotation ``H U^T`` sign-canonical.
    """
    u = u * np.where(np.diag(u) < 0, -1.0, 1.0)[None, :]
    h = h * np.where(np.diag(h) < 0, -1.0, 1.0)[:, None]
    return u, h


def fit_phi_s(
    stats: Statistics,
    sign_fix_rows: bool = True,
    eig: Eigensystem | None = None,
    solver: str = "auto",
) -> Normalizer:
    """PHI-S: rotate by ``H U^T`` so every channel carries the mean eigenvalue, then scale by ``1/phi``."""
    eig = _eigensystem(stats, eig, solver)
    total = float(eig.values.sum())
    if not total > 0:
        raise DegenerateDistribution("covariance has zero trace")
    c = stats.channels
    h = hd.construct(c)
    u, hmat = eig.vectors, np.array(h.entries)
    if sign_fix_rows:
        u, hmat = sign_fix(u, hmat)
    phi = math.sqrt(total / c)
    rot = hmat @ u.T
    return Normalizer(
        method=Method.PHI_S,
        offset=np.array(stats.mean, dtype=np.float64),
        forward=rot / phi,
        inverse=phi * rot.T,
        phi=phi,
        eigensystem=Eigensystem(u, eig.values.copy()),
        hadamard=hmat,
        hadamard_recipe=h.recipe.sexpr(),
        n_samples=stats.n_samples,
    )


def fit(stats: Statistics, method: str | Method, **kwargs) -> Normalizer:
    """Dispatch on a method tag (``gstd``, ``std``, ``pca``, ``zca``, ``hca``, ``phis``)."""
    m = Method(method)
    if m is Method.GLOBAL_STANDARDIZE:
        return fit_global_standardize(stats)
    if m is Method.STANDARDIZE:
        return fit_standardize(stats, **kwargs)
    if m.is_whitening:
        return fit_whiten(stats, m, **kwargs)
    return fit_phi_s(stats, **kwargs)


def identity(channels: int) -> Normalizer:
    """The no-op normalizer (useful for unnormalized baselines)."""
    return Normalizer(
        method=Method.GLOBAL_STANDARDIZE,
        offset=np.zeros(channels),
        forward=1.0,
        inverse=1.0,
        global_mean=0.0,
        global_sigma=1.0,
    )


# -- serialization -----------------------------------------------------------


def serialize(nrm: Normalizer) -> bytes:
    manifest = {
        "kind": "normalizer",
        "library_version": __version__,
        "method": nrm.method.value,
        "channels": nrm.channels,
        "n_samples": int(nrm.n_samples),
        "alpha": nrm.alpha,
        "phi": nrm.phi,
        "global_mean": nrm.global_mean,
        "global_sigma": nrm.global_sigma,
        "hadamard_recipe": nrm.hadamard_recipe,
        "forward_kind": _kind(nrm.forward),
        "inverse_kind": _kind(nrm.inverse),
    }
    tensors = {
        "offset": nrm.offset,
        "forward": np.asarray(nrm.forward, dtype=np.float64),
        "inverse": np.asarray(nrm.inverse, dtype=np.float64),
    }
    if nrm.eigensystem is not None:
        tensors["eigenvectors"] = nrm.eigensystem.vectors
        tensors["eigenvalues"] = nrm.eigensystem.values
    if nrm.hadamard is not None:
        tensors["hadamard"] = nrm.hadamard
    return encode_bundle(manifest, tensors)


def _kind(op: Linear) -> str:
    return ("scalar", "vector", "matrix")[np.ndim(op)]


def deserialize(data: bytes) -> Normalizer:
    manifest, t = decode_bundle(data)
    if manifest.get("kind") != "normalizer":
        raise IncompleteNormalizer(f"bundle holds a {manifest.get('kind')!r}, not a normalizer")
    for name in ("offset", "forward", "inverse"):
        if name not in t:
            raise IncompleteNormalizer(f"normalizer bundle lacks {name!r}")

    def op(name):
        arr = t[name]
        return float(arr) if manifest[f"{name}_kind"] == "scalar" else arr

    eig = None
    if "eigenvectors" in t:
        eig = Eigensystem(t["eigenvectors"], t["eigenvalues"])
    return Normalizer(
        method=Method(manifest["method"]),
        offset=t["offset"],
        forward=op("forward"),
        inverse=op("inverse"),
        phi=manifest.get("phi"),
        eigensystem=eig,
        hadamard=t.get("hadamard"),
        hadamard_recipe=manifest.get("hadamard_recipe"),
        global_mean=manifest.get("global_mean"),
        global_sigma=manifest.get("global_sigma"),
        n_samples=manifest.get("n_samples", 0),
    )


def manifest_of(data: bytes) -> dict:
    """The JSON manifest of a serialized normalizer."""
    return decode_bundle(data)[0]
