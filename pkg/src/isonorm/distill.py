"""Desk-scale multi-teacher distillation harness.

Synthetic teachers stand in for real vision backbones: each is a linear
function of its own block of a shared Gaussian input plus private noise,
with a global scale chosen to match a target standard deviation. A small
student (shared trunk, one linear head per teacher) is trained with plain
gradient descent against each teacher's *normalized* targets, and every
metric is also reported back in the original teacher space.
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._random import generator
from .analysis import variance_range
from .errors import ShapeError, TrainingDiverged
from .moments import MomentAccumulator, eigh, finalize
from .normalize import Method, Normalizer, apply, fit, identity, invert

# -- losses ------------------------------------------------------------------


class LossKind(str, enum.Enum):
    MSE = "mse"
    COSINE = "cosine"
    HYBRID_MSE = "hybrid_mse"
    HYBRID_SMOOTH_L1 = "hybrid_smooth_l1"


@dataclass(frozen=True)
class LossConfig:
    kind: LossKind = LossKind.MSE
    beta: float = 0.9
    smooth_l1_delta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.smooth_l1_delta <= 0:
            raise ValueError("smooth_l1_delta must be positive")


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x), np.asarray(y)
    # float32 pairs stay in float32 (training); anything else is promoted
    dt = np.float32 if x.dtype == y.dtype == np.float32 else np.float64
    x, y = x.astype(dt, copy=False), y.astype(dt, copy=False)
    if x.shape != y.shape:
        raise ShapeError(f"prediction {x.shape} and target {y.shape} differ")
    if x.ndim == 1:
        x, y = x[None, :], y[None, :]
    return x, y


def mse_and_grad(x, y) -> tuple[float, np.ndarray]:
    x, y = _pair(x, y)
    d = x - y
    return float(np.mean(d * d)), 2.0 * d / d.size


def cosine_and_grad(x, y) -> tuple[float, np.ndarray]:
    """Mean over rows of ``1 - cos(x_i, y_i)``; a zero row scores 1 with zero gradient."""
    x, y = _pair(x, y)
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    ok = (nx > 0) & (ny > 0)
    nx_s = np.where(ok, nx, 1.0)
    ny_s = np.where(ok, ny, 1.0)
    dot = np.einsum("ij,ij->i", x, y)
    cos = np.where(ok, dot / (nx_s * ny_s), 0.0)
    n = x.shape[0]
    grad = -(y / (nx_s * ny_s)[:, None] - (cos / (nx_s * nx_s))[:, None] * x) / n
    grad[~ok] = 0.0
    return float(np.mean(1.0 - cos)), grad


def smooth_l1_and_grad(x, y, delta: float = 1.0) -> tuple[float, np.ndarray]:
    x, y = _pair(x, y)
    d = x - y
    a = np.abs(d)
    quad = a < delta
    val = np.where(quad, 0.5 * d * d / delta, a - 0.5 * delta)
    grad = np.where(quad, d / delta, np.sign(d)) / d.size
    return float(val.mean()), grad


def loss_and_grad(x, y, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to the prediction ``x``."""
    if cfg.kind is LossKind.MSE:
        return mse_and_grad(x, y)
    if cfg.kind is LossKind.COSINE:
        return cosine_and_grad(x, y)
    cv, cg = cosine_and_grad(x, y)
    if cfg.kind is LossKind.HYBRID_MSE:
        ov, og = mse_and_grad(x, y)
    else:
        ov, og = smooth_l1_and_grad(x, y, cfg.smooth_l1_delta)
    b = cfg.beta
    return b * cv + (1.0 - b) * ov, b * cg + (1.0 - b) * og


def loss_mse(x, y) -> float:
    return mse_and_grad(x, y)[0]


def loss_cosine(x, y) -> float:
    return cosine_and_grad(x, y)[0]


def loss_smooth_l1(x, y, delta: float = 1.0) -> float:
    return smooth_l1_and_grad(x, y, delta)[0]


def loss_hybrid(x, y, cfg: LossConfig) -> float:
    """``beta * cosine + (1 - beta) * (MSE or SmoothL1)`` depending on ``cfg.kind``."""
    if cfg.kind is LossKind.HYBRID_MSE or cfg.kind is LossKind.MSE:
        kind = LossKind.HYBRID_MSE
    else:
        kind = LossKind.HYBRID_SMOOTH_L1
    return loss_and_grad(x, y, LossConfig(kind, cfg.beta, cfg.smooth_l1_delta))[0]


# -- AdaLoss -----------------------------------------------------------------


@dataclass(frozen=True)
class AdaLossState:
    ema: tuple[float, ...] | None = None
    decay: float = 0.99
    epsilon: float = 1e-8


def adaloss_update(state: AdaLossState, per_term_losses) -> tuple[AdaLossState, np.ndarray]:
    """Track each term's EMA and weight it by ``1 / max(EMA, epsilon)``.

    The EMA starts at the first observed value, so a constant stream ``v``
    yields weight ``1/v`` from the first step.
    """
    losses = np.asarray(per_term_losses, dtype=np.float64)
    if state.ema is None:
        ema = losses.copy()
    else:
        prev = np.asarray(state.ema)
        if prev.shape != losses.shape:
            raise ShapeError("number of loss terms changed")
        ema = state.decay * prev + (1.0 - state.decay) * losses
    weights = 1.0 / np.maximum(ema, state.epsilon)
    return AdaLossState(tuple(float(v) for v in ema), state.decay, state.epsilon), weights


# -- synthetic teachers ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TeacherSpec:
    """``y = channel_mean + global_scale * channel_scale * (mixing @ latent)``.

    ``latent`` is standard normal. Its first ``shared_dim`` coordinates can be
    supplied by the caller (the student's input); the rest are private noise.
    """

    mixing: np.ndarray  # C x latent_dim
    channel_mean: np.ndarray
    channel_scale: np.ndarray
    global_scale: float = 1.0
    shared_dim: int = 0
    name: str = "teacher"

    @property
    def channels(self) -> int:
        return self.mixing.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.mixing.shape[1]

    @property
    def channel_sigma(self) -> np.ndarray:
        return self.global_scale * self.channel_scale * np.linalg.norm(self.mixing, axis=1)

    @property
    def covariance(self) -> np.ndarray:
        a = (self.global_scale * self.channel_scale)[:, None] * self.mixing
        return a @ a.T

    @property
    def global_sigma(self) -> float:
        """Large-sample global standard deviation of the generated data."""
        c = self.channels
        spread = np.square(self.channel_mean - self.channel_mean.mean()).sum()
        return math.sqrt((np.trace(self.covariance) + spread) / c)


def make_teacher(spec: TeacherSpec, n: int, seed: int, shared=None) -> np.ndarray:
    rng = generator(seed)
    if shared is None:
        latent = rng.standard_normal((n, spec.latent_dim))
    else:
        shared = np.asarray(shared, dtype=np.float64)
        if shared.shape != (n, spec.shared_dim):
            raise ShapeError(f"shared input must be {(n, spec.shared_dim)}, got {shared.shape}")
        private = rng.standard_normal((n, spec.latent_dim - spec.shared_dim))
        latent = np.concatenate([shared, private], axis=1)
    scale = spec.global_scale * spec.channel_scale
    return spec.channel_mean + (latent @ spec.mixing.T) * scale


def synthetic_teacher(
    channels: int,
    global_sigma: float,
    global_mean: float = 0.0,
    seed: int = 0,
    decay: float = 1.0,
    scale_spread: float = 4.0,
    mean_fraction: float = 0.1,
    noise: tuple[float, float] = (0.02, 0.4),
    name: str = "teacher",
) -> TeacherSpec:
    """A teacher whose data has (in the large-N limit) the requested global mean and sigma.

    The covariance has a power-law spectrum (exponent ``decay``), a random
    eigenbasis and per-channel scales spread over ``scale_spread``x. The
    latent has ``2 * channels`` coordinates: the first ``channels`` are the
    learnable signal (``shared_dim``), the rest private noise. Both act
    along the same eigenvectors; the noise share grows linearly from
    ``noise[0]`` on the top eigenvector to ``noise[1]`` on the last.
    ``mean_fraction`` of the global variance comes from the spread of
    channel means.
    """
    rng = generator(seed)
    c = channels
    lam = (1.0 + np.arange(c)) ** (-decay)
    q, r = np.linalg.qr(rng.standard_normal((c, c)))
    q = q * np.sign(np.diag(r))
    s = np.exp(rng.uniform(-0.5, 0.5, c) * math.log(scale_spread))
    base = (s[:, None] * q) * lam @ (s[:, None] * q).T
    eig = eigh(base, solver="lapack")
    lam, v = eig.values, eig.vectors
    rho = np.linspace(noise[0], noise[1], c)
    mixing = np.concatenate([v * np.sqrt(lam * (1.0 - rho)), v * np.sqrt(lam * rho)], axis=1)
    means = rng.standard_normal(c)
    means -= means.mean()
    target_var = global_sigma**2
    if c > 1 and mean_fraction > 0:
        means *= math.sqrt(mean_fraction * target_var * c / np.square(means).sum())
    else:
        means[:] = 0.0
        mean_fraction = 0.0
    scale = math.sqrt((1.0 - mean_fraction) * target_var * c / lam.sum())
    return TeacherSpec(
        mixing=mixing,
        channel_mean=means + global_mean,
        channel_scale=np.ones(c),
        global_scale=scale,
        shared_dim=c,
        name=name,
    )


# -- harness -----------------------------------------------------------------

# global (mean, sigma) of the four reference teachers
REFERENCE_TEACHERS = (
    ("dfn_clip", 0.0049, 0.0286),
    ("siglip", 0.0211, 1.8389),
    ("dinov2", 0.0055, 1.3496),
    ("sam", 1.1475, 5.4688),
)

BASELINE = "baseline"


@dataclass(frozen=True)
class TeacherConfig:
    name: str
    global_mean: float
    global_sigma: float
    weight: float = 1.0


def _default_teachers() -> tuple[TeacherConfig, ...]:
    return tuple(TeacherConfig(n, m, s) for n, m, s in REFERENCE_TEACHERS)


@dataclass(frozen=True)
class DistillConfig:
    method: str = "phis"  # "baseline" or a normalizer tag
    loss: LossConfig = field(default_factory=LossConfig)
    teachers: tuple[TeacherConfig, ...] = field(default_factory=_default_teachers)
    channels: int = 64
    # private-noise share per eigen-direction, from the top eigenvector to the last
    teacher_noise: tuple[float, float] = (0.01, 0.2)
    width: int = 64
    hidden_activation: str = "linear"  # "linear" trunk, or "relu" for a one-hidden-layer MLP
    steps: int = 2000
    optimizer: str = "sgd"  # or "adam"
    lr: float = 2.0
    # divide the step by the largest mean-square training target, so raw
    # (baseline) targets run at the same stability margin as normalized ones
    scale_lr_by_targets: bool = True
    batch_size: int = 1024
    n_samples: int = 20000
    n_eval: int = 20000
    init_scale: float = 1e-2
    adaloss: bool = False
    adaloss_decay: float = 0.99
    log_every: int = 100
    histogram_bins: int = 40
    clamp: bool = False  # lift degenerate sigma / eigenvalues instead of failing
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        teachers = tuple(t if isinstance(t, TeacherConfig) else TeacherConfig(**t) for t in self.teachers)
        object.__setattr__(self, "teachers", teachers)
        lo, hi = (float(v) for v in self.teacher_noise)
        if not 0.0 <= lo <= hi < 1.0:
            raise ValueError(f"teacher_noise must satisfy 0 <= lo <= hi < 1, got {self.teacher_noise}")
        object.__setattr__(self, "teacher_noise", (lo, hi))
        if self.method != BASELINE:
            Method(self.method)
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.hidden_activation not in ("linear", "relu"):
            raise ValueError(f"unknown activation {self.hidden_activation!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "DistillConfig":
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["kind"] = self.loss.kind.value
        d["teacher_noise"] = list(self.teacher_noise)
        return d


@dataclass
class _Student:
    trunk: np.ndarray  # D x width
    heads: list  # width x C each
    biases: list
    relu: bool

    def parameters(self) -> list:
        params = []
        for w, b in zip(self.heads, self.biases):
            params += [w, b]
        return params + [self.trunk]

    def hidden(self, z):
        h = z @ self.trunk
        return np.maximum(h, 0.0) if self.relu else h

    def outputs(self, z):
        h = self.hidden(z)
        return h, [h @ w + b for w, b in zip(self.heads, self.biases)]


class _Optimizer:
    """In-place SGD or Adam (beta1=0.9, beta2=0.999) over a fixed parameter list."""

    def __init__(self, params, kind, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params, self.kind, self.lr = params, kind, lr
        self.b1, self.b2, self.eps = betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        if self.kind == "sgd":
            for p, g in zip(self.params, grads):
                p -= np.float32(self.lr) * g
            return
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        lr = np.float32(self.lr * math.sqrt(c2) / c1)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * m / (np.sqrt(v) + np.float32(self.eps))


def _fit_teacher_normalizer(cfg: DistillConfig, y: np.ndarray) -> Normalizer:
    if cfg.method == BASELINE:
        return identity(y.shape[1])
    acc = MomentAccumulator(y.shape[1])
    for lo in range(0, y.shape[0], 4096):
        acc.update(y[lo:lo + 4096])
    stats = finalize(acc)
    m = Method(cfg.method)
    kwargs = {}
    if cfg.clamp and m in (Method.STANDARDIZE, Method.PCA_WHITEN, Method.ZCA_WHITEN, Method.HCA_WHITEN):
        kwargs["clamp"] = True
    return fit(stats, m, **kwargs)


def _evaluate(student, z, targets, raw, nrms, cfg):
    _, outs = student.outputs(z)
    rows = []
    for out, tgt, y, nrm in zip(outs, targets, raw, nrms):
        norm_loss = loss_and_grad(out, tgt, cfg.loss)[0]
        norm_mse = float(np.mean((out - tgt) ** 2))
        denorm = invert(nrm, out)
        mse = float(np.mean((denorm - y) ** 2))
        rows.append((norm_loss, norm_mse, mse))
    return outs, rows


def run_distillation(cfg: DistillConfig) -> dict:
    """Train the student and return a JSON-ready report.

    Report layout::

        config, method, teachers: [{name, final: {...}, variance_range: {...},
        histograms: {...}}], trajectory_csv, step0_loss_share, spread
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(4 + 2 * len(cfg.teachers))
    data_rng = generator(seeds[0])
    init_rng = generator(seeds[1])
    batch_rng = generator(seeds[2])
    eval_rng = generator(seeds[3])
    k = cfg.channels
    n_t = len(cfg.teachers)
    d_in = k * n_t
    z = data_rng.standard_normal((cfg.n_samples, d_in))
    z_eval = eval_rng.standard_normal((cfg.n_eval, d_in))

    specs, raw, raw_eval, nrms, targets, targets_eval = [], [], [], [], [], []
    for t, tc in enumerate(cfg.teachers):
        spec_seed = int(seeds[4 + 2 * t].generate_state(1)[0])
        noise_seed = seeds[5 + 2 * t].generate_state(2)
        spec = synthetic_teacher(
            k, tc.global_sigma, tc.global_mean, seed=spec_seed, noise=cfg.teacher_noise, name=tc.name
        )
        block = slice(t * k, (t + 1) * k)
        y = make_teacher(spec, cfg.n_samples, int(noise_seed[0]), shared=z[:, block])
        y_eval = make_teacher(spec, cfg.n_eval, int(noise_seed[1]), shared=z_eval[:, block])
        nrm = _fit_teacher_normalizer(cfg, y)
        specs.append(spec)
        raw.append(y)
        raw_eval.append(y_eval)
        nrms.append(nrm)
        targets.append(apply(nrm, y))
        targets_eval.append(apply(nrm, y_eval))

    # training runs in float32; evaluation and reporting in float64
    f32 = np.float32
    z_train = z.astype(f32)
    targets_train = [t.astype(f32) for t in targets]
    student = _Student(
        trunk=(init_rng.standard_normal((d_in, cfg.width)) * (cfg.init_scale / math.sqrt(d_in))).astype(f32),
        heads=[np.zeros((cfg.width, k), dtype=f32) for _ in cfg.teachers],
        biases=[np.zeros(k, dtype=f32) for _ in cfg.teachers],
        relu=cfg.hidden_activation == "relu",
    )
    lr = cfg.lr
    if cfg.scale_lr_by_targets:
        lr /= max(1.0, max(float(np.mean(t * t)) for t in targets))
    opt = _Optimizer(student.parameters(), cfg.optimizer, lr)
    alphas = np.array([tc.weight for tc in cfg.teachers], dtype=np.float64)
    ada = AdaLossState(decay=cfg.adaloss_decay)
    variances = [float(np.mean(np.var(y, axis=0, ddof=1))) for y in raw_eval]

    trajectory = []

    def log(step):
        _, rows = _evaluate(student, z_eval, targets_eval, raw_eval, nrms, cfg)
        for t, (nl, nm, mse) in enumerate(rows):
            trajectory.append((step, cfg.teachers[t].name, nl, nm, mse, mse / variances[t]))
        return rows

    step0 = log(0)
    order = batch_rng.permutation(cfg.n_samples)
    cursor = 0
    # overflow is caught below and reported as TrainingDiverged
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, cfg.steps + 1):
            if cursor + cfg.batch_size > cfg.n_samples:
                order = batch_rng.permutation(cfg.n_samples)
                cursor = 0
            idx = order[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            zb = z_train[idx]
            h, outs = student.outputs(zb)
            losses = np.empty(n_t)
            grads = []
            for t in range(n_t):
                losses[t], g = loss_and_grad(outs[t], targets_train[t][idx], cfg.loss)
                grads.append(g.astype(f32))
            if not np.isfinite(losses).all():
                raise TrainingDiverged(step, f"per-teacher losses {losses.tolist()}")
            weights = alphas
            if cfg.adaloss:
                ada, ada_w = adaloss_update(ada, losses)
                weights = alphas * ada_w
            dh = np.zeros_like(h)
            pgrads = []
            for t in range(n_t):
                g = f32(weights[t]) * grads[t]
                dh += g @ student.heads[t].T
                pgrads += [h.T @ g, g.sum(axis=0)]
            if student.relu:
                dh *= h > 0
            pgrads.append(zb.T @ dh)
            opt.step(pgrads)
            if not np.isfinite(student.trunk).all():
                raise TrainingDiverged(step, "trunk weights became non-finite")
            if step % cfg.log_every == 0 or step == cfg.steps:
                log(step)

    outs, final_rows = _evaluate(student, z_eval, targets_eval, raw_eval, nrms, cfg)
    teachers = []
    for t, tc in enumerate(cfg.teachers):
        err = outs[t] - targets_eval[t]
        vr = variance_range(nrms[t], err)
        nl, nm, mse = final_rows[t]
        teachers.append({
            "name": tc.name,
            "global_sigma": tc.global_sigma,
            "normalizer": nrms[t].method.value if cfg.method != BASELINE else BASELINE,
            "final": {
                "normalized_loss": nl,
                "normalized_mse": nm,
                "denormalized_mse": mse,
                "relative_mse": mse / variances[t],
            },
            "variance_range": {
                "normalized": vr.normalized_range,
                "denormalized": vr.denormalized_range,
            },
            "histograms": _loss_histograms(err, cfg.histogram_bins),
        })

    step0_mass = np.array([r[2] for r in step0])
    rel = np.array([t["final"]["relative_mse"] for t in teachers])
    buf = io.StringIO()
    buf.write("step,teacher,normalized_loss,normalized_mse,denormalized_mse,relative_mse\n")
    for row in trajectory:
        buf.write(f"{row[0]},{row[1]},{row[2]!r},{row[3]!r},{row[4]!r},{row[5]!r}\n")
    return {
        "config": cfg.to_dict(),
        "method": cfg.method,
        "teachers": teachers,
        "step0_loss_share": (step0_mass / step0_mass.sum()).tolist(),
        "spread": float(rel.max() / rel.min()),
        "trajectory_csv": buf.getvalue(),
    }


def _loss_histograms(err: np.ndarray, bins: int) -> dict:
    """Per-sample squared-error distributions: all channels pooled, and the worst channel."""
    sq = err * err
    per_sample = sq.mean(axis=1)
    worst = int(np.argmax(sq.max(axis=0)))
    out = {}
    for key, values in (("global", per_sample), ("largest_max_loss_channel", sq[:, worst])):
        counts, edges = np.histogram(values, bins=bins)
        out[key] = {"counts": counts.tolist(), "edges": edges.tolist()}
    out["largest_max_loss_channel_index"] = worst
    return out


def trajectory_rows(report: dict) -> list[dict]:
    """Parse a report's trajectory CSV back into dicts."""
    lines = report["trajectory_csv"].strip().splitlines()
    head = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        row = dict(zip(head, vals))
        row["step"] = int(row["step"])
        for key in head[2:]:
            row[key] = float(row[key])
        rows.append(row)
    return rows
