"""DDPM forward/reverse processes and noise predictors.

The forward chain applies x_t = sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) xi, so
x_t | x_0 ~ N(sqrt(abar_t) x_0, (1-abar_t) I) with abar_t the running product
of alpha_t = 1-beta_t (abar_0 = 1). Reverse steps use the eps-parameterized
posterior mean

    mu_t(x_t) = (x_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)

with fixed variance beta_tilde_t = (1-abar_{t-1})/(1-abar_t) * beta_t by
default (beta_t and zero are selectable); the t=1 step returns the mean and
consumes no noise.

Two predictors are provided. AnalyticDenoiser computes the exact score of a
Gaussian-mixture data model diffused to time t, so sampler behavior can be
separated from model error. MlpDenoiser is a deliberately small fully
connected net (one hidden layer, tanh, learned time-embedding table) with
hand-written gradients that are finite-difference checkable.

Checkpoint format (".dnsr"):

    bytes 0-3   magic b"DNSR"
    byte  4     format version (1)
    bytes 5-24  height, width, hidden, embed, timesteps as uint32 LE
    bytes 25-   parameters as float32 LE in order W1, b1, W2, b2, emb,
                each row-major

Loss traces are CSV with header "step,lr,loss", one row per optimizer step.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .grid import Image

__all__ = [
    "NoiseSchedule",
    "make_linear_schedule",
    "SIGMA_MODES",
    "forward_sample",
    "forward_step",
    "posterior_mean",
    "sigma_sq",
    "reverse_step",
    "Denoiser",
    "GmmDataModel",
    "sample_gmm",
    "AnalyticDenoiser",
    "analytic_eps",
    "MlpDenoiser",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "cosine_lr",
    "simple_loss",
    "train",
    "save_loss_trace",
    "GradCheckReport",
    "grad_check",
]

SIGMA_MODES = ("beta_tilde", "beta", "zero")

CHECKPOINT_MAGIC = b"DNSR"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sB5I")

MAX_MLP_PIXELS = 32 * 32


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays indexed by timestep t in 0..T; index 0 holds the identities
    beta_0 = 0, alpha_0 = 1, alpha_bar_0 = 1 so closed forms hold at t=0."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ValueError("schedule needs at least one timestep")
        if beta[0] != 0.0:
            raise ValueError("beta[0] must be the 0.0 sentinel")
        if not ((beta[1:] > 0.0) & (beta[1:] < 1.0)).all():
            raise ValueError("every beta_t must lie in (0, 1)")
        for name, arr in (("beta", beta), ("alpha", self.alpha), ("alpha_bar", self.alpha_bar)):
            a = np.asarray(arr, dtype=np.float64)
            if a.shape != beta.shape:
                raise ValueError(f"{name} has shape {a.shape}, expected {beta.shape}")
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        # Accumulate the product in the widest float available, then round
        # once; the float64 recurrence then holds to a few ulps per step.
        bar = np.cumprod(alpha[1:].astype(np.longdouble))
        alpha_bar = np.concatenate([[1.0], bar.astype(np.float64)])
        return cls(beta=beta, alpha=alpha, alpha_bar=alpha_bar)

    @property
    def timesteps(self) -> int:
        return self.beta.size - 1


def make_linear_schedule(
    beta_start: float = 1e-4, beta_end: float = 0.02, timesteps: int = 100
) -> NoiseSchedule:
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, timesteps))


def _check_t(sched: NoiseSchedule, t: int, lowest: int) -> int:
    t = int(t)
    if not lowest <= t <= sched.timesteps:
        raise ValueError(f"timestep {t} outside [{lowest}, {sched.timesteps}]")
    return t


def _check_same_shape(a, b, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def forward_sample(x0: Image, t: int, eps: Image, sched: NoiseSchedule) -> Image:
    """Closed-form draw x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps (exact
    identity at t=0)."""
    t = _check_t(sched, t, lowest=0)
    _check_same_shape(x0, eps, "forward_sample")
    ab = sched.alpha_bar[t]
    return Image(math.sqrt(ab) * x0.data + math.sqrt(1.0 - ab) * eps.data)


def forward_step(x_prev: Image, t: int, sched: NoiseSchedule, rng: np.random.Generator) -> Image:
    """One forward transition q(x_t | x_{t-1})."""
    t = _check_t(sched, t, lowest=1)
    beta = sched.beta[t]
    noise = rng.standard_normal(x_prev.shape)
    return Image(math.sqrt(1.0 - beta) * x_prev.data + math.sqrt(beta) * noise)


def posterior_mean(x_t: Image, t: int, eps_hat: Image, sched: NoiseSchedule) -> Image:
    t = _check_t(sched, t, lowest=1)
    _check_same_shape(x_t, eps_hat, "posterior_mean")
    beta = sched.beta[t]
    coeff = beta / math.sqrt(1.0 - sched.alpha_bar[t])
    return Image((x_t.data - coeff * eps_hat.data) / math.sqrt(sched.alpha[t]))


def sigma_sq(sched: NoiseSchedule, t: int, mode: str = "beta_tilde") -> float:
    t = _check_t(sched, t, lowest=1)
    if mode == "beta_tilde":
        return float(
            (1.0 - sched.alpha_bar[t - 1]) / (1.0 - sched.alpha_bar[t]) * sched.beta[t]
        )
    if mode == "beta":
        return float(sched.beta[t])
    if mode == "zero":
        return 0.0
    raise ValueError(f"unknown sigma mode {mode!r}; expected one of {SIGMA_MODES}")


class Denoiser(Protocol):
    """Noise predictor eps_hat(x_t, t)."""

    def predict(self, x_t: Image, t: int) -> Image: ...


def reverse_step(
    x_t: Image,
    t: int,
    model: Denoiser,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    sigma_mode: str = "beta_tilde",
) -> Image:
    """One reverse transition; the t=1 step returns the mean and draws no
    noise (neither does sigma_mode="zero"), keeping streams reproducible."""
    t = _check_t(sched, t, lowest=1)
    mu = posterior_mean(x_t, t, model.predict(x_t, t), sched)
    if t == 1 or sigma_mode == "zero":
        return mu
    var = sigma_sq(sched, t, sigma_mode)
    return Image(mu.data + math.sqrt(var) * rng.standard_normal(mu.shape))


@dataclass(frozen=True)
class GmmDataModel:
    """Isotropic Gaussian mixture over images: component k has mean image
    means[k], scalar variance variances[k], weight weights[k]."""

    means: tuple[Image, ...]
    weights: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        if len(self.means) < 1:
            raise ValueError("mixture needs at least one component")
        shape = self.means[0].shape
        for m in self.means:
            if m.shape != shape:
                raise ValueError("mixture component means must share one shape")
        w = np.asarray(self.weights, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        if w.shape != (len(self.means),) or v.shape != (len(self.means),):
            raise ValueError("weights/variances must have one entry per component")
        if not (w > 0.0).all():
            raise ValueError("component weights must be positive")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        if not ((v >= 0.0) & np.isfinite(v)).all():
            raise ValueError("component variances must be finite and >= 0")
        w = w / w.sum()
        w.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "variances", v)
        object.__setattr__(self, "means", tuple(self.means))

    @property
    def n_components(self) -> int:
        return len(self.means)

    @property
    def shape(self) -> tuple[int, int]:
        return self.means[0].shape


def sample_gmm(gmm: GmmDataModel, rng: np.random.Generator) -> Image:
    k = int(rng.choice(gmm.n_components, p=gmm.weights))
    mean = gmm.means[k].data
    std = math.sqrt(float(gmm.variances[k]))
    if std == 0.0:
        return Image(mean.copy())
    return Image(mean + std * rng.standard_normal(mean.shape))


class AnalyticDenoiser:
    """Exact eps prediction for a GmmDataModel diffused to time t.

    The diffused marginal is p_t(x) = sum_k w_k N(sqrt(abar_t) mu_k,
    (abar_t var_k + 1 - abar_t) I) and eps_hat = -sqrt(1-abar_t) grad log p_t.

    When every component shares one variance the responsibilities depend only
    on the pixels where component means differ; those columns are cached so a
    mixture of phantom renders (identical backgrounds) costs O(K * |diff|)
    per step instead of O(K * P).
    """

    def __init__(self, gmm: GmmDataModel, sched: NoiseSchedule):
        self.gmm = gmm
        self.sched = sched
        self._shape = gmm.shape
        self._means = np.stack([m.data.ravel() for m in gmm.means])
        self._logw = np.log(gmm.weights)
        self._vars = gmm.variances
        self._equal_var = bool(np.ptp(self._vars) == 0.0) if gmm.n_components > 1 else True
        self._base = self._means[0]
        if self._equal_var:
            differs = (self._means != self._base[None, :]).any(axis=0)
            self._cols = np.flatnonzero(differs)
            self._delta = self._means[:, self._cols] - self._base[self._cols]
            self._delta_sq = np.einsum("kc,kc->k", self._delta, self._delta)

    def predict(self, x_t: Image, t: int) -> Image:
        t = _check_t(self.sched, t, lowest=1)
        if x_t.shape != self._shape:
            raise ValueError(f"image shape {x_t.shape} does not match model {self._shape}")
        x = x_t.data.ravel()
        ab = float(self.sched.alpha_bar[t])
        s = math.sqrt(ab)
        one_minus = 1.0 - ab
        if self._equal_var:
            v_t = ab * float(self._vars[0]) + one_minus
            if self._cols.size == 0:
                resp_mean = self._base
            else:
                xc = x[self._cols] - s * self._base[self._cols]
                # ||x - s mu_k||^2 differs from the k=0 distance only through
                # the cached delta columns; common terms cancel in softmax.
                corr = -2.0 * s * (self._delta @ xc) + ab * self._delta_sq
                logits = self._logw - corr / (2.0 * v_t)
                logits -= logits.max()
                r = np.exp(logits)
                r /= r.sum()
                resp_mean = self._base.copy()
                resp_mean[self._cols] += r @ self._delta
            eps = math.sqrt(one_minus) * (x - s * resp_mean) / v_t
        else:
            v_t = ab * self._vars + one_minus
            diff = x[None, :] - s * self._means
            d2 = np.einsum("kp,kp->k", diff, diff)
            p = x.size
            logits = self._logw - 0.5 * p * np.log(2.0 * math.pi * v_t) - d2 / (2.0 * v_t)
            logits -= logits.max()
            r = np.exp(logits)
            r /= r.sum()
            eps = math.sqrt(one_minus) * ((r / v_t) @ diff)
        return Image(eps.reshape(self._shape))


def analytic_eps(gmm: GmmDataModel, x_t: Image, t: int, sched: NoiseSchedule) -> Image:
    """Exact eps_hat for a mixture data model; see AnalyticDenoiser."""
    return AnalyticDenoiser(gmm, sched).predict(x_t, t)


def _sinusoidal_embedding(timesteps: int, dim: int) -> np.ndarray:
    emb = np.zeros((timesteps + 1, dim))
    t = np.arange(timesteps + 1, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t * freqs[None, :]
    emb[:, 0::2] = np.sin(args)[:, : emb[:, 0::2].shape[1]]
    emb[:, 1::2] = np.cos(args)[:, : emb[:, 1::2].shape[1]]
    return emb


_PARAM_ORDER = ("W1", "b1", "W2", "b2", "emb")


class MlpDenoiser:
    """One-hidden-layer fully connected noise predictor.

    The flattened image (at most 32x32 pixels) is concatenated with a learned
    per-timestep embedding row; the hidden layer uses tanh so gradients stay
    smooth enough for central-difference checks. Gradients are written by
    hand; see loss_and_grads.
    """

    def __init__(
        self,
        height: int,
        width: int,
        hidden: int,
        embed: int,
        timesteps: int,
        rng: np.random.Generator | None = None,
    ):
        if height < 1 or width < 1 or height * width > MAX_MLP_PIXELS:
            raise ValueError(f"image size {height}x{width} outside 1..{MAX_MLP_PIXELS} pixels")
        if hidden < 1 or embed < 1 or timesteps < 1:
            raise ValueError("hidden, embed and timesteps must be positive")
        self.height = height
        self.width = width
        self.hidden = hidden
        self.embed = embed
        self.timesteps = timesteps
        p = height * width
        d_in = p + embed
        if rng is None:
            rng = np.random.default_rng(0)
        self.params = {
            "W1": rng.standard_normal((d_in, hidden)) / math.sqrt(d_in),
            "b1": np.zeros(hidden),
            "W2": rng.standard_normal((hidden, p)) / math.sqrt(hidden),
            "b2": np.zeros(p),
            "emb": _sinusoidal_embedding(timesteps, embed),
        }

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def _forward(self, xb: np.ndarray, tb: np.ndarray):
        z = np.concatenate([xb, self.params["emb"][tb]], axis=1)
        h = np.tanh(z @ self.params["W1"] + self.params["b1"])
        out = h @ self.params["W2"] + self.params["b2"]
        return out, z, h

    def predict_batch(self, xb: np.ndarray, tb: np.ndarray) -> np.ndarray:
        out, _, _ = self._forward(xb, tb)
        return out

    def predict(self, x_t: Image, t: int) -> Image:
        if x_t.shape != (self.height, self.width):
            raise ValueError(
                f"image shape {x_t.shape} does not match model "
                f"({self.height}, {self.width})"
            )
        t = int(t)
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"timestep {t} outside [1, {self.timesteps}]")
        out = self.predict_batch(x_t.data.reshape(1, -1), np.array([t]))
        return Image(out.reshape(self.height, self.width))

    def loss_and_grads(self, x_tb: np.ndarray, tb: np.ndarray, epsb: np.ndarray):
        """Mean squared eps error over the batch and its parameter gradients.

        Overflow is left to produce inf/nan rather than warn; train() turns a
        non-finite loss into TrainingDivergedError.
        """
        with np.errstate(over="ignore", invalid="ignore"):
            out, z, h = self._forward(x_tb, tb)
            diff = out - epsb
            loss = float((diff ** 2).mean())
            dout = 2.0 * diff / diff.size
            grads = {
                "W2": h.T @ dout,
                "b2": dout.sum(axis=0),
            }
            dh = dout @ self.params["W2"].T
            da = dh * (1.0 - h ** 2)
            grads["W1"] = z.T @ da
            grads["b1"] = da.sum(axis=0)
            dz = da @ self.params["W1"].T
            demb = np.zeros_like(self.params["emb"])
            np.add.at(demb, tb, dz[:, self.n_pixels :])
            grads["emb"] = demb
        return loss, grads

    def pack_params(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in _PARAM_ORDER])

    def unpack_params(self, vec: np.ndarray) -> None:
        offset = 0
        for k in _PARAM_ORDER:
            p = self.params[k]
            p[...] = vec[offset : offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != vec.size:
            raise ValueError(f"parameter vector has {vec.size} entries, expected {offset}")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(
                _CKPT_HEADER.pack(
                    CHECKPOINT_MAGIC,
                    CHECKPOINT_VERSION,
                    self.height,
                    self.width,
                    self.hidden,
                    self.embed,
                    self.timesteps,
                )
            )
            for k in _PARAM_ORDER:
                fh.write(np.ascontiguousarray(self.params[k], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "MlpDenoiser":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < _CKPT_HEADER.size:
            raise ValueError(f"{path}: file shorter than the checkpoint header")
        magic, version, height, width, hidden, embed, timesteps = _CKPT_HEADER.unpack_from(blob)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        model = cls(height, width, hidden, embed, timesteps)
        expected = sum(model.params[k].size for k in _PARAM_ORDER) * 4
        if len(blob) - _CKPT_HEADER.size != expected:
            raise ValueError(
                f"{path}: payload is {len(blob) - _CKPT_HEADER.size} bytes, expected {expected}"
            )
        vec = np.frombuffer(blob, dtype="<f4", offset=_CKPT_HEADER.size).astype(np.float64)
        model.unpack_params(vec)
        return model


def simple_loss(model: Denoiser, x0: Image, t: int, eps: Image, sched: NoiseSchedule) -> float:
    """Mean over pixels of (eps - eps_hat)^2 at x_t = forward_sample(x0, t, eps)."""
    x_t = forward_sample(x0, t, eps, sched)
    pred = model.predict(x_t, t)
    return float(((eps.data - pred.data) ** 2).mean())


def cosine_lr(step: int, base_lr: float, lr_min: float, horizon: int) -> float:
    """Cosine annealing from base_lr at step 0 to lr_min at step >= horizon;
    endpoints are returned exactly, not via the cosine formula."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if step <= 0:
        return float(base_lr)
    if step >= horizon:
        return float(lr_min)
    return float(lr_min + 0.5 * (base_lr - lr_min) * (1.0 + math.cos(math.pi * step / horizon)))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    base_lr: float = 1e-3
    lr_min: float = 0.0
    horizon: int | None = None  # optimizer steps; None means epochs * steps/epoch
    batch_size: int = 2
    accumulation: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.accumulation < 1:
            raise ValueError("epochs, batch_size and accumulation must be >= 1")
        if self.base_lr <= 0.0 or self.lr_min < 0.0:
            raise ValueError("need base_lr > 0 and lr_min >= 0")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be >= 1 when given")


@dataclass(frozen=True)
class TrainResult:
    trace: tuple  # rows (step, lr, loss), one per optimizer step
    steps_per_epoch: int
    horizon: int


def train(
    model: MlpDenoiser, data: Sequence[Image], cfg: TrainConfig, sched: NoiseSchedule
) -> TrainResult:
    """SGD on the simplified eps objective with gradient accumulation.

    Each optimizer step averages gradients over cfg.accumulation micro-batches
    of cfg.batch_size images; per-sample timesteps are uniform on [1, T] and
    noise is fresh. Epochs shuffle the dataset; the trailing samples that do
    not fill a full accumulation chunk are skipped that epoch.
    """
    if sched.timesteps != model.timesteps:
        raise ValueError(
            f"schedule has {sched.timesteps} steps but the model expects {model.timesteps}"
        )
    n = len(data)
    chunk = cfg.batch_size * cfg.accumulation
    if n < chunk:
        raise ValueError(f"dataset of {n} images cannot fill one chunk of {chunk}")
    for img in data:
        if img.shape != (model.height, model.width):
            raise ValueError("training image shape does not match the model")

    x0 = np.stack([img.data.ravel() for img in data])
    steps_per_epoch = n // chunk
    horizon = cfg.horizon if cfg.horizon is not None else cfg.epochs * steps_per_epoch
    rng = np.random.default_rng(cfg.seed)
    sqrt_ab = np.sqrt(sched.alpha_bar)
    sqrt_1mab = np.sqrt(1.0 - sched.alpha_bar)

    trace = []
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(steps_per_epoch):
            lr = cosine_lr(step, cfg.base_lr, cfg.lr_min, horizon)
            grads = None
            loss_sum = 0.0
            for m in range(cfg.accumulation):
                lo = s * chunk + m * cfg.batch_size
                idx = perm[lo : lo + cfg.batch_size]
                xb = x0[idx]
                tb = rng.integers(1, sched.timesteps + 1, size=idx.size)
                epsb = rng.standard_normal(xb.shape)
                x_tb = sqrt_ab[tb, None] * xb + sqrt_1mab[tb, None] * epsb
                loss, g = model.loss_and_grads(x_tb, tb, epsb)
                loss_sum += loss
                if grads is None:
                    grads = g
                else:
                    for k in grads:
                        grads[k] += g[k]
            loss_mean = loss_sum / cfg.accumulation
            if not math.isfinite(loss_mean):
                raise TrainingDivergedError(f"non-finite loss {loss_mean} at step {step} (lr={lr})")
            for k in _PARAM_ORDER:
                model.params[k] -= lr * (grads[k] / cfg.accumulation)
            trace.append((step, lr, loss_mean))
            step += 1
    return TrainResult(trace=tuple(trace), steps_per_epoch=steps_per_epoch, horizon=horizon)


def save_loss_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("step,lr,loss\n")
        for step, lr, loss in trace:
            fh.write(f"{int(step)},{float(lr)!r},{float(loss)!r}\n")


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    checked: int
    skipped: int


def grad_check(
    model: MlpDenoiser,
    x0: Image,
    t: int,
    eps: Image,
    sched: NoiseSchedule,
    h: float = 1e-4,
) -> GradCheckReport:
    """Compare hand-written gradients against central differences of
    simple_loss. Relative error per parameter is |a-n|/(|a|+|n|+1e-12);
    parameters where both magnitudes are below 1e-12 are skipped (their
    gradient is genuinely zero, e.g. embedding rows of unused timesteps).
    """
    x_t = forward_sample(x0, t, eps, sched)
    xb = x_t.data.reshape(1, -1)
    tb = np.array([int(t)])
    epsb = eps.data.reshape(1, -1)
    _, grads = model.loss_and_grads(xb, tb, epsb)
    analytic = np.concatenate([grads[k].ravel() for k in _PARAM_ORDER])

    base = model.pack_params()
    numeric = np.empty_like(analytic)
    vec = base.copy()
    for i in range(base.size):
        vec[i] = base[i] + h
        model.unpack_params(vec)
        up = simple_loss(model, x0, t, eps, sched)
        vec[i] = base[i] - h
        model.unpack_params(vec)
        down = simple_loss(model, x0, t, eps, sched)
        vec[i] = base[i]
        numeric[i] = (up - down) / (2.0 * h)
    model.unpack_params(base)

    skip = (np.abs(analytic) < 1e-12) & (np.abs(numeric) < 1e-12)
    rel = np.zeros_like(analytic)
    active = ~skip
    rel[active] = np.abs(analytic[active] - numeric[active]) / (
        np.abs(analytic[active]) + np.abs(numeric[active]) + 1e-12
    )
    worst = int(np.argmax(rel))
    offset = 0
    worst_param = _PARAM_ORDER[-1]
    for k in _PARAM_ORDER:
        size = model.params[k].size
        if worst < offset + size:
            worst_param = k
            break
        offset += size
    return GradCheckReport(
        max_rel_err=float(rel.max()),
        worst_param=worst_param,
        checked=int(active.sum()),
        skipped=int(skip.sum()),
    )
