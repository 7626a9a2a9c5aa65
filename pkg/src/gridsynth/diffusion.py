"""Denoising diffusion model over normalized grid states.

The forward process corrupts a clean state x0 with Gaussian noise,

    x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps,      eps ~ N(0, I),

where abar_t is the cumulative product of alpha_t = 1 - beta_t over a linear
beta schedule.  A small fully-connected network is trained to predict eps
from (x_t, t); everything (forward, backward, Adam) is plain numpy, which is
plenty for the state dimensions involved.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, SchemaError, ValidationError

CHECKPOINT_VERSION = 1


@dataclass
class NoiseSchedule:
    """Variance schedule of the forward process.

    betas must lie strictly inside (0, 1) and be non-decreasing.  A schedule
    whose terminal signal level sqrt(abar_T) is not close to zero leaves the
    prior far from N(0, I); that is allowed (short test schedules need it)
    but draws a warning.
    """

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=float)
        if self.betas.ndim != 1 or self.betas.size < 1:
            raise ValidationError("betas must be a non-empty 1-D array")
        if (self.betas <= 0).any() or (self.betas >= 1).any():
            raise ValidationError("betas must lie strictly in (0, 1)")
        if (np.diff(self.betas) < 0).any():
            raise ValidationError("betas must be non-decreasing")
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)
        if np.sqrt(self.alpha_bar[-1]) > 0.05:
            warnings.warn(
                "terminal signal level sqrt(abar_T) > 0.05; the sampling "
                "prior will be biased",
                stacklevel=2,
            )

    @property
    def n_steps(self) -> int:
        return self.betas.size

    @classmethod
    def linear(cls, n_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if n_steps < 1:
            raise ValidationError("n_steps must be >= 1")
        return cls(np.linspace(beta_start, beta_end, n_steps))


def q_sample(x0: np.ndarray, t: np.ndarray, eps: np.ndarray, sched: NoiseSchedule):
    """Draw x_t from the forward process given clean states and noise.

    x0, eps are (m, d); t is an integer array (m,) of 0-based timesteps.
    """
    ab = sched.alpha_bar[np.asarray(t, dtype=int)][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sin/cos features of the timestep, geometric frequencies over 1..1e4."""
    if dim % 2:
        raise ValidationError("embedding dim must be even")
    half = dim // 2
    if half > 1:
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    else:
        freqs = np.ones(1)
    ang = np.asarray(t, dtype=float)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _silu(z):
    # exp overflow only happens where the sigmoid saturates to 0, so the
    # result is still exact
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-z))
    return z * s


def _silu_grad(z):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


class DenoiserModel:
    """Fully-connected eps-predictor with a sinusoidal time embedding.

    Input is the noisy state concatenated with the time embedding; hidden
    layers use SiLU.  The output layer starts at zero so an untrained model
    predicts zero noise (unit mean-squared loss on standard-normal targets),
    a property the tests rely on.
    """

    def __init__(self, weights, biases, time_dim: int, norm_digest: str = ""):
        self.weights = weights
        self.biases = biases
        self.time_dim = time_dim
        self.norm_digest = norm_digest

    @classmethod
    def create(
        cls,
        n_features: int,
        hidden: int = 512,
        depth: int = 3,
        time_dim: int = 64,
        rng: np.random.Generator | None = None,
        norm_digest: str = "",
    ) -> "DenoiserModel":
        if depth < 1:
            raise ValidationError("depth must be >= 1")
        rng = rng or np.random.default_rng()
        dims = [n_features + time_dim] + [hidden] * depth + [n_features]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        weights[-1][:] = 0.0
        return cls(weights, biases, time_dim, norm_digest)

    @property
    def n_features(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self):
        return self.weights + self.biases

    def forward(self, xt: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Predict the noise in xt at timesteps t; xt (m, d), t (m,)."""
        h = np.concatenate([xt, sinusoidal_embedding(t, self.time_dim)], axis=1)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = _silu(h @ w + b)
        return h @ self.weights[-1] + self.biases[-1]

    def loss_and_grads(self, xt, t, eps):
        """Mean-squared eps-prediction loss and its parameter gradients."""
        acts = [np.concatenate([xt, sinusoidal_embedding(t, self.time_dim)], axis=1)]
        pre = []
        h = acts[0]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ w + b
            pre.append(z)
            h = _silu(z)
            acts.append(h)
        out = h @ self.weights[-1] + self.biases[-1]

        diff = out - eps
        loss = float(np.mean(diff * diff))
        delta = 2.0 * diff / diff.size

        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        grads_w[-1] = acts[-1].T @ delta
        grads_b[-1] = delta.sum(axis=0)
        for layer in range(len(self.weights) - 2, -1, -1):
            delta = (delta @ self.weights[layer + 1].T) * _silu_grad(pre[layer])
            grads_w[layer] = acts[layer].T @ delta
            grads_b[layer] = delta.sum(axis=0)
        return loss, grads_w + grads_b


class Adam:
    """Standard Adam with bias correction, operating on a parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 600
    batch_size: int = 128
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    hidden: int = 512
    depth: int = 3
    time_dim: int = 64
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 0.5:
            raise ValidationError("val_fraction must lie in (0, 0.5)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValidationError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    def append(self, epoch, tr, va):
        self.epochs.append(epoch)
        self.train_loss.append(tr)
        self.val_loss.append(va)

    def to_csv(self, path):
        rows = ["epoch,train_loss,val_loss"]
        rows += [
            f"{e},{t!r},{v!r}"
            for e, t, v in zip(self.epochs, self.train_loss, self.val_loss)
        ]
        Path(path).write_text("\n".join(rows) + "\n")


def train(
    states_norm: np.ndarray,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    norm_digest: str = "",
    checkpoint_path: str | Path | None = None,
    progress: bool = False,
):
    """Train an eps-predictor on normalized states (m, d).

    The validation split, its timesteps, and its noise draws are fixed up
    front, so the reported validation loss is comparable across epochs.
    Returns (model, TrainLog).  Raises DivergenceError on a non-finite loss
    or parameter.
    """
    states_norm = np.asarray(states_norm, dtype=float)
    m, d = states_norm.shape
    root = np.random.SeedSequence(cfg.seed)
    init_ss, split_ss, noise_ss, val_ss = root.spawn(4)

    model = DenoiserModel.create(
        d,
        hidden=cfg.hidden,
        depth=cfg.depth,
        time_dim=cfg.time_dim,
        rng=np.random.default_rng(init_ss),
        norm_digest=norm_digest,
    )
    opt = Adam(model.parameters(), lr=cfg.lr)

    n_val = max(1, int(round(cfg.val_fraction * m)))
    perm = np.random.default_rng(split_ss).permutation(m)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        raise ValidationError("no training rows left after the validation split")

    val_rng = np.random.default_rng(val_ss)
    x_val = states_norm[val_idx]
    t_val = val_rng.integers(0, sched.n_steps, size=val_idx.size)
    e_val = val_rng.standard_normal(x_val.shape)
    xt_val = q_sample(x_val, t_val, e_val, sched)

    rng = np.random.default_rng(noise_ss)
    log = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        if cfg.lr_schedule == "cosine":
            # anneal to 5% of the peak rate, which settles the late epochs
            frac = (epoch - 1) / max(cfg.epochs - 1, 1)
            opt.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * frac)))
        order = rng.permutation(train_idx.size)
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            idx = train_idx[order[start : start + cfg.batch_size]]
            x0 = states_norm[idx]
            t = rng.integers(0, sched.n_steps, size=idx.size)
            eps = rng.standard_normal(x0.shape)
            xt = q_sample(x0, t, eps, sched)
            loss, grads = model.loss_and_grads(xt, t, eps)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            opt.step(model.parameters(), grads)
            losses.append(loss)
        if not all(np.isfinite(w).all() for w in model.weights):
            raise DivergenceError(f"non-finite parameters at epoch {epoch}")

        pred = model.forward(xt_val, t_val)
        va = float(np.mean((pred - e_val) ** 2))
        tr = float(np.mean(losses))
        log.append(epoch, tr, va)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, sched, extra={"epoch": epoch})
        if progress and (epoch % 25 == 0 or epoch == 1):
            print(f"  epoch {epoch:4d}  train {tr:.4f}  val {va:.4f}")
    return model, log


def save_checkpoint(path, model: DenoiserModel, sched: NoiseSchedule, extra: dict | None = None):
    """Persist model weights plus the schedule and binding metadata (npz)."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "time_dim": model.time_dim,
        "n_layers": len(model.weights),
        "norm_digest": model.norm_digest,
        **(extra or {}),
    }
    arrays = {"betas": sched.betas, "meta": np.array(json.dumps(meta))}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[DenoiserModel, NoiseSchedule, dict]:
    """Inverse of save_checkpoint."""
    with np.load(path, allow_pickle=False) as data:
        if "meta" not in data or "betas" not in data:
            raise SchemaError(f"{path}: not a model checkpoint")
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise SchemaError(f"unsupported checkpoint version {meta.get('version')!r}")
        n_layers = meta["n_layers"]
        weights = [data[f"w{i}"] for i in range(n_layers)]
        biases = [data[f"b{i}"] for i in range(n_layers)]
        sched = NoiseSchedule(data["betas"])
    model = DenoiserModel(weights, biases, meta["time_dim"], meta.get("norm_digest", ""))
    return model, sched, meta
