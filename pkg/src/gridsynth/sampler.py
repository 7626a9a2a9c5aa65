"""Accelerated constrained sampling of new operating states.

The reverse process runs on a decreasing subset of the training timesteps
(DDIM).  At every step the clean-state estimate is corrected down the exact
gradient of the feasibility penalties, structurally-zero features are
clamped, and the update

    x_prev = sqrt(abar_prev) x0_hat
           + sqrt(1 - abar_prev - sigma^2) eps_hat
           + sigma z

interpolates between deterministic (eta = 0) and ancestral (eta = 1 on the
full schedule) sampling.  The terminal step uses abar_prev = 1, so the final
output is exactly the corrected clean-state estimate.

Every sample owns an independent noise stream (SeedSequence spawn child i),
so the values a sample sees do not depend on batch size or on the other
samples in the run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .datagen import NormStats
from .diffusion import DenoiserModel, NoiseSchedule
from .errors import (
    DigestMismatch,
    DivergenceError,
    NegativeRadicand,
    ValidationError,
)
from .grid import GridCase
from .powerflow import (
    PFSolution,
    ResidualReport,
    batch_grad_penalties,
    batch_penalties,
    project_to_feasible,
)


@dataclass
class GuidanceSchedule:
    """How strongly, and when, samples are pulled toward feasibility.

    decay "constant" applies lambda_max at every step, so the terminal step
    (whose corrected estimate becomes the output) still gets the full
    correction.  decay "linear_in_alpha_bar" scales it by 1 - abar_t, strong
    in the high-noise phase and fading to almost nothing at the end.
    line_limits controls whether branch overloads join the box constraints
    in the guidance objective.  step_cap bounds each per-sample correction
    in normalized units.
    """

    lambda_max: float = 0.5
    decay: str = "constant"
    line_limits: bool = True
    step_cap: float = 1.0

    def __post_init__(self):
        if self.lambda_max < 0:
            raise ValidationError("lambda_max must be >= 0")
        if self.decay not in ("constant", "linear_in_alpha_bar"):
            raise ValidationError(f"unknown guidance decay {self.decay!r}")
        if not self.step_cap > 0:
            raise ValidationError("step_cap must be > 0")

    def lambda_at(self, abar_t: float) -> float:
        """Step weight lambda_t >= 0 at cumulative signal level abar_t."""
        if self.decay == "linear_in_alpha_bar":
            return self.lambda_max * (1.0 - abar_t)
        return self.lambda_max


@dataclass
class SamplerConfig:
    """Controls one sampling run.

    method "ddim" walks ddim_steps evenly-spaced timesteps with stochasticity
    eta; method "ddpm" is the ancestral special case (full schedule, eta = 1),
    any ddim_steps/eta given are ignored.  guidance = None disables the
    feasibility correction entirely.  batch_size chunks the run to bound
    memory; results are identical for any chunking because each sample owns
    its own noise stream.
    """

    n_samples: int = 1000
    method: str = "ddim"
    ddim_steps: int = 30
    eta: float = 0.2
    guidance: GuidanceSchedule | None = field(default_factory=GuidanceSchedule)
    clamp_zero_injection: bool = True
    project: bool = False
    seed: int = 0
    batch_size: int | None = None

    def __post_init__(self):
        if self.method not in ("ddim", "ddpm"):
            raise ValidationError(f"unknown sampling method {self.method!r}")
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        if self.ddim_steps < 1:
            raise ValidationError("ddim_steps must be >= 1")
        if self.eta < 0:
            raise ValidationError("eta must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1 when given")


@dataclass
class SampleBatch:
    """Sampling output in physical units plus per-sample diagnostics.

    h and g_viol hold the raw balance mismatches and clipped limit
    violations backing the r_h/r_g penalty arrays.  Projection metadata is
    filled only when the run projected its output.
    """

    states: np.ndarray
    r_h: np.ndarray
    r_g: np.ndarray
    h: np.ndarray
    g_viol: np.ndarray
    wall_seconds: float
    config: SamplerConfig
    proj_converged: np.ndarray | None = None
    proj_distance: np.ndarray | None = None

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]

    def report(self, i: int) -> ResidualReport:
        return ResidualReport(
            h=self.h[i],
            g=self.g_viol[i],
            r_h=float(self.r_h[i]),
            r_g=float(self.r_g[i]),
        )


def timestep_subset(n_train_steps: int, n_steps: int) -> np.ndarray:
    """Decreasing, duplicate-free subset of 0..n_train_steps-1 that always
    contains both endpoints."""
    if not 1 <= n_steps <= n_train_steps:
        raise ValidationError("need 1 <= n_steps <= n_train_steps")
    if n_steps == 1:
        return np.array([n_train_steps - 1], dtype=int)
    ts = np.round(np.linspace(0, n_train_steps - 1, n_steps)).astype(int)
    return ts[::-1].copy()


def reconstruct_x0(xt: np.ndarray, eps_hat: np.ndarray, abar_t: float) -> np.ndarray:
    """Invert the forward process: the clean state implied by a noise estimate."""
    return (xt - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)


def ddim_sigma(abar_t: float, abar_prev: float, eta: float) -> float:
    """Per-step noise scale; eta = 1 on consecutive steps reproduces the
    ancestral posterior std, eta = 0 is deterministic."""
    if abar_prev < abar_t:
        raise NegativeRadicand("abar_prev must be >= abar_t (decreasing schedule)")
    ratio = (1.0 - abar_prev) / (1.0 - abar_t) if abar_t < 1.0 else 0.0
    return eta * np.sqrt(ratio) * np.sqrt(1.0 - abar_t / abar_prev)


def ddim_step(
    xt: np.ndarray,
    eps_hat: np.ndarray,
    x0_hat: np.ndarray,
    abar_t: float,
    abar_prev: float,
    eta: float,
    z: np.ndarray | None,
) -> np.ndarray:
    """One reverse update from timestep t to the previous one.

    x0_hat is the (possibly guidance-corrected) clean-state estimate; the
    stochastic term z is required exactly when sigma > 0.
    """
    sigma = ddim_sigma(abar_t, abar_prev, eta)
    radicand = 1.0 - abar_prev - sigma * sigma
    if radicand < -1e-12:
        raise NegativeRadicand(f"direction coefficient radicand {radicand:.3e} < 0")
    coef = np.sqrt(max(radicand, 0.0))
    out = np.sqrt(abar_prev) * x0_hat + coef * eps_hat
    if sigma > 0.0:
        if z is None:
            raise ValidationError("stochastic step needs noise z")
        out = out + sigma * z
    return out


def guide(
    x0_norm: np.ndarray,
    grid: GridCase,
    norm: NormStats,
    lam: float,
    line_limits: bool = True,
    step_cap: float = 1.0,
) -> np.ndarray:
    """Move a normalized clean-state estimate down the penalty gradient.

    The penalties live in physical units; the chain rule through min-max
    denormalization multiplies each feature's gradient by its half-span
    (constant features therefore never move).  Two safeguards keep the
    correction well behaved when the estimate is still rough: the gradient
    is evaluated at the estimate's clamp onto the data box [-1, 1], where
    the quadratic penalties are meaningful rather than astronomically large,
    and each sample's correction is capped at step_cap in normalized norm.
    lam = 0 is an exact identity.
    """
    if lam == 0.0:
        return x0_norm
    x_eval = np.clip(x0_norm, -1.0, 1.0)
    g_phys = batch_grad_penalties(
        norm.denormalize(x_eval), grid, line_limits=line_limits
    )
    delta = lam * (g_phys * norm.half_span)
    nrm = np.linalg.norm(delta, axis=-1, keepdims=True)
    delta = delta * np.minimum(1.0, step_cap / np.maximum(nrm, 1e-300))
    return x0_norm - delta


def _zero_injection_features(grid: GridCase) -> np.ndarray:
    """Indices of P and Q features at structurally-zero-injection buses."""
    buses = np.flatnonzero(grid.zero_injection_mask)
    return np.concatenate([buses, buses + grid.n])


def _reverse_chunk(
    model: DenoiserModel,
    abar: np.ndarray,
    ts: np.ndarray,
    eta: float,
    grid: GridCase,
    norm: NormStats,
    guidance: GuidanceSchedule | None,
    zi: np.ndarray | None,
    streams: list[np.random.Generator],
    progress: bool,
) -> np.ndarray:
    """Run the reverse process for the samples owning the given streams."""
    d = model.n_features
    m = len(streams)
    x = np.stack([s.standard_normal(d) for s in streams])
    if zi is not None:
        x[:, zi] = 0.0

    for k, t in enumerate(ts):
        abar_t = abar[t]
        abar_prev = abar[ts[k + 1]] if k + 1 < len(ts) else 1.0
        eps_hat = model.forward(x, np.full(m, t))
        x0_hat = reconstruct_x0(x, eps_hat, abar_t)
        if guidance is not None:
            x0_hat = guide(
                x0_hat,
                grid,
                norm,
                guidance.lambda_at(abar_t),
                line_limits=guidance.line_limits,
                step_cap=guidance.step_cap,
            )
        z = None
        if eta > 0.0 and ddim_sigma(abar_t, abar_prev, eta) > 0.0:
            z = np.stack([s.standard_normal(d) for s in streams])
        x = ddim_step(x, eps_hat, x0_hat, abar_t, abar_prev, eta, z)
        if zi is not None:
            x[:, zi] = 0.0
        if progress and (k + 1) % 100 == 0:
            print(f"  step {k + 1}/{len(ts)}")
    return x


def sample(
    model: DenoiserModel,
    sched: NoiseSchedule,
    grid: GridCase,
    norm: NormStats,
    cfg: SamplerConfig,
    progress: bool = False,
) -> SampleBatch:
    """Draw cfg.n_samples new operating states from the reverse process.

    The model, norm stats, and grid must belong together (checked via
    digests).  Returns physical-unit states with residual diagnostics; wall
    time covers the reverse-process loop and terminal projection only.
    """
    if model.norm_digest and model.norm_digest != norm.digest():
        raise DigestMismatch("model was trained against different norm stats")
    if norm.grid_digest != grid.digest():
        raise DigestMismatch("norm stats belong to a different grid")
    d = model.n_features
    if d != 4 * grid.n:
        raise DigestMismatch("model feature width does not match the grid")

    if cfg.method == "ddpm":
        ts = timestep_subset(sched.n_steps, sched.n_steps)
        eta = 1.0
    else:
        ts = timestep_subset(sched.n_steps, cfg.ddim_steps)
        eta = cfg.eta

    zi = _zero_injection_features(grid) if cfg.clamp_zero_injection else None
    m = cfg.n_samples
    streams = [
        np.random.default_rng(child)
        for child in np.random.SeedSequence(cfg.seed).spawn(m)
    ]
    chunk = cfg.batch_size if cfg.batch_size is not None else m

    t0 = time.perf_counter()
    parts = []
    for lo in range(0, m, chunk):
        parts.append(
            _reverse_chunk(
                model,
                sched.alpha_bar,
                ts,
                eta,
                grid,
                norm,
                cfg.guidance,
                zi,
                streams[lo : lo + chunk],
                progress and lo == 0,
            )
        )
    x = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)

    if not np.isfinite(x).all():
        raise DivergenceError("sampler produced non-finite states")

    states = norm.denormalize(x)
    if zi is not None:
        states[:, zi] = 0.0
    proj_converged = proj_distance = None
    if cfg.project:
        proj_converged = np.zeros(m, dtype=bool)
        proj_distance = np.full(m, np.nan)
        for i in range(m):
            sol: PFSolution = project_to_feasible(states[i], grid)
            proj_converged[i] = sol.converged
            proj_distance[i] = sol.distance if sol.distance is not None else np.nan
            if sol.converged:
                states[i] = sol.state.flatten()
    wall = time.perf_counter() - t0

    r_h, r_g, h, g_viol = batch_penalties(states, grid)
    return SampleBatch(
        states=states,
        r_h=r_h,
        r_g=r_g,
        h=h,
        g_viol=g_viol,
        wall_seconds=wall,
        config=cfg,
        proj_converged=proj_converged,
        proj_distance=proj_distance,
    )
