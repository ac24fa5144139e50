"""Streaming first/second moments and the symmetric eigendecomposition.

The accumulator tracks per-channel means, the centered co-moment matrix and
the scalar (all-entries) mean and squared deviation. Batches are folded in
with the pairwise (Chan et al.) combination rule, so streaming, merging and
one-shot estimation agree to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EigenFailure, InsufficientData, NonFiniteInput, ShapeError


def as_features(batch, channels: int | None = None) -> np.ndarray:
    """Validate an N x C feature matrix and return it as float64."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"expected a non-empty N x C matrix, got shape {np.shape(batch)}")
    if channels is not None and x.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got {x.shape[1]}")
    if not np.isfinite(x).all():
        raise NonFiniteInput("feature matrix contains NaN or infinite entries")
    return x


@dataclass
class MomentAccumulator:
    channels: int
    count: int = 0
    channel_mean: np.ndarray = field(default=None, repr=False)
    comoment: np.ndarray = field(default=None, repr=False)
    global_mean: float = 0.0
    global_m2: float = 0.0

    def __post_init__(self):
        if self.channels < 1:
            raise ShapeError("channels must be positive")
        if self.channel_mean is None:
            self.channel_mean = np.zeros(self.channels)
        if self.comoment is None:
            self.comoment = np.zeros((self.channels, self.channels))

    @classmethod
    def from_batch(cls, batch) -> "MomentAccumulator":
        x = as_features(batch)
        n, c = x.shape
        # shifting by the first row keeps large offsets out of the sums (and
        # makes constant columns come out with exactly zero variance)
        shift = x[0]
        d = x - shift
        mean = shift + d.mean(axis=0)
        xc = d - d.mean(axis=0)
        gshift = x[0, 0]
        gmean = float(gshift + (x - gshift).mean())
        return cls(
            channels=c,
            count=n,
            channel_mean=mean,
            comoment=xc.T @ xc,
            global_mean=gmean,
            global_m2=float(np.square(x - gmean).sum()),
        )

    def copy(self) -> "MomentAccumulator":
        return MomentAccumulator(
            self.channels, self.count, self.channel_mean.copy(), self.comoment.copy(),
            self.global_mean, self.global_m2,
        )

    def update(self, batch) -> "MomentAccumulator":
        """Fold a batch in place; returns ``self`` for chaining."""
        x = as_features(batch, self.channels)
        merged = merge(self, MomentAccumulator.from_batch(x))
        self.count = merged.count
        self.channel_mean = merged.channel_mean
        self.comoment = merged.comoment
        self.global_mean = merged.global_mean
        self.global_m2 = merged.global_m2
        return self

    def finalize(self) -> "Statistics":
        return finalize(self)


def update(acc: MomentAccumulator, batch) -> MomentAccumulator:
    """Functional form of :meth:`MomentAccumulator.update` (``acc`` is untouched)."""
    return acc.copy().update(batch)


def merge(a: MomentAccumulator, b: MomentAccumulator) -> MomentAccumulator:
    if a.channels != b.channels:
        raise ShapeError(f"cannot merge accumulators with {a.channels} and {b.channels} channels")
    if b.count == 0:
        return a.copy()
    if a.count == 0:
        return b.copy()
    n = a.count + b.count
    wa, wb = a.count / n, b.count / n
    delta = b.channel_mean - a.channel_mean
    mean = wa * a.channel_mean + wb * b.channel_mean
    comoment = a.comoment + b.comoment + np.outer(delta, delta) * (a.count * b.count / n)
    comoment = 0.5 * (comoment + comoment.T)
    gdelta = b.global_mean - a.global_mean
    gmean = wa * a.global_mean + wb * b.global_mean
    # each sample contributes `channels` scalar entries to the global moments
    gm2 = a.global_m2 + b.global_m2 + gdelta * gdelta * a.channels * a.count * b.count / n
    return MomentAccumulator(a.channels, n, mean, comoment, float(gmean), float(gm2))


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    mean: np.ndarray
    cov: np.ndarray
    n_samples: int

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True, eq=False)
class Statistics:
    """Finalized moments: everything a normalizer needs to be fitted."""

    covariance: CovarianceEstimate
    per_channel_sigma: np.ndarray
    global_mean: float
    global_sigma: float

    @property
    def mean(self) -> np.ndarray:
        return self.covariance.mean

    @property
    def cov(self) -> np.ndarray:
        return self.covariance.cov

    @property
    def n_samples(self) -> int:
        return self.covariance.n_samples

    @property
    def channels(self) -> int:
        return self.covariance.channels

    @classmethod
    def from_covariance(cls, cov, mean=None, n_samples: int | None = None) -> "Statistics":
        """Build statistics from a known covariance (and optional mean).

        The global sigma is derived from the covariance trace and the spread
        of channel means. With ``n_samples`` it uses the same ``N-1`` /
        ``NC-1`` denominators as :func:`finalize`; without it, the large-N
        limit.
        """
        cov = np.array(cov, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ShapeError(f"covariance must be square, got {cov.shape}")
        c = cov.shape[0]
        mean = np.zeros(c) if mean is None else np.array(mean, dtype=np.float64).reshape(c)
        gmean = float(mean.mean())
        spread = float(np.square(mean - gmean).sum())
        tr = float(np.trace(cov))
        if n_samples is None:
            gvar = (tr + spread) / c
            n = 0
        else:
            n = int(n_samples)
            gvar = ((n - 1) * tr + n * spread) / (n * c - 1)
        sigma = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        return cls(CovarianceEstimate(mean, cov, n), sigma, gmean, float(np.sqrt(max(gvar, 0.0))))


def finalize(acc: MomentAccumulator) -> Statistics:
    """Covariance with ``1/(N-1)``; global sigma with ``1/(NC-1)``."""
    if acc.count < 2:
        raise InsufficientData(f"need at least 2 samples, have {acc.count}")
    n, c = acc.count, acc.channels
    cov = acc.comoment / (n - 1)
    cov = 0.5 * (cov + cov.T)
    sigma = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    gsigma = float(np.sqrt(max(acc.global_m2, 0.0) / (n * c - 1)))
    return Statistics(
        CovarianceEstimate(acc.channel_mean.copy(), cov, n), sigma, float(acc.global_mean), gsigma
    )


def estimate(data, batch_size: int = 8192) -> Statistics:
    """One call: accumulate ``data`` in row batches and finalize."""
    x = as_features(data)
    acc = MomentAccumulator(x.shape[1])
    for start in range(0, x.shape[0], batch_size):
        acc.update(x[start:start + batch_size])
    return finalize(acc)


# -- eigendecomposition ------------------------------------------------------

JACOBI_MAX_CHANNELS = 128


@dataclass(frozen=True, eq=False)
class Eigensystem:
    vectors: np.ndarray  # columns are eigenvectors
    values: np.ndarray  # descending, clamped at zero

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T

    @classmethod
    def from_values(cls, values) -> "Eigensystem":
        """Axis-aligned system, i.e. the eigensystem of ``diag(values)``."""
        v = np.array(values, dtype=np.float64)
        order = np.argsort(-v, kind="stable")
        return cls(np.eye(v.shape[0])[:, order], v[order])


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings covering every (p, q) exactly once per sweep, disjoint per round."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a, tol: float = 1e-12, max_sweeps: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigensolver for a symmetric matrix.

    Each sweep visits every off-diagonal pair once. Pairs are grouped into
    rounds of disjoint index pairs (round-robin ordering), so the rotations
    in one round commute and are applied together. Iteration stops when the
    off-diagonal Frobenius norm drops below ``tol * max(|trace|, ||A||_F)``.

    Returns unsorted ``(values, vectors)``.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(abs(np.trace(a)), np.linalg.norm(a))
    if n == 1 or scale == 0.0:
        return np.diag(a).copy(), v
    threshold = tol * scale
    rounds = _round_robin(n)
    offdiag = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        if np.linalg.norm(a[offdiag]) <= threshold:
            return np.diag(a).copy(), v
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            theta = np.where(active, (a[q, q] - a[p, p]) / (2.0 * np.where(active, apq, 1.0)), 0.0)
            big = np.abs(theta) > 1e150
            safe = np.where(big, 1.0, theta)
            t = np.sign(safe) / (np.abs(safe) + np.sqrt(safe * safe + 1.0))
            t = np.where(big, 0.5 / np.where(big, theta, 1.0), t)
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            ap, aq = a[:, p], a[:, q]
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            ap, aq = a[p, :], a[q, :]
            a[p, :], a[q, :] = c[:, None] * ap - s[:, None] * aq, s[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    raise EigenFailure(f"Jacobi did not converge in {max_sweeps} sweeps")


def eigh(cov, solver: str = "auto", clamp: bool = True) -> Eigensystem:
    """Symmetric eigendecomposition with a deterministic output convention.

    Eigenvalues are clamped at zero (``clamp=True``) and sorted descending;
    each eigenvector is signed so its largest-magnitude entry is positive.

    ``solver`` is ``"jacobi"``, ``"lapack"`` or ``"auto"`` (Jacobi up to
    ``JACOBI_MAX_CHANNELS`` channels, LAPACK above).
    """
    if isinstance(cov, Statistics):
        cov = cov.cov
    elif isinstance(cov, CovarianceEstimate):
        cov = cov.cov
    a = np.asarray(cov, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    if not np.isfinite(a).all():
        raise NonFiniteInput("matrix contains NaN or infinite entries")
    if np.abs(a - a.T).max(initial=0.0) > 1e-8 * max(1.0, np.abs(a).max(initial=0.0)):
        raise ShapeError("matrix is not symmetric within 1e-8")
    a = 0.5 * (a + a.T)
    if solver == "auto":
        solver = "jacobi" if a.shape[0] <= JACOBI_MAX_CHANNELS else "lapack"
    if solver == "jacobi":
        values, vectors = jacobi_eigh(a)
    elif solver == "lapack":
        try:
            values, vectors = np.linalg.eigh(a)
        except np.linalg.LinAlgError as exc:
            raise EigenFailure(str(exc)) from exc
    else:
        raise ValueError(f"unknown solver {solver!r}")
    if clamp:
        values = np.maximum(values, 0.0)
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = vectors[:, order]
    pivot = np.abs(vectors).argmax(axis=0)
    signs = np.where(vectors[pivot, np.arange(vectors.shape[1])] < 0, -1.0, 1.0)
    return Eigensystem(vectors * signs, values)
