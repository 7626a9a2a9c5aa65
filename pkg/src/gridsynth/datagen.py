"""Dataset generation, normalization, and persistence.

Feasible operating states are produced by sampling load scenarios, solving
the power flow, and rejecting any solution that violates an operating limit.
Every accepted state satisfies the balance equations to solver tolerance and
all limits, so the dataset is a draw from the feasible-state distribution.

Scenario draws are seeded per attempt: attempt k uses SeedSequence((seed, k)),
so a rejected draw never shifts the scenarios that follow it, and a given
(case, config) pair always yields bit-identical datasets.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DigestMismatch,
    GenerationExhausted,
    NormNotFrozen,
    SchemaError,
    SingularJacobian,
    ValidationError,
)
from .grid import GridCase, feature_labels
from .powerflow import batch_penalties, newton_raphson

SCHEMA_VERSION = 1
BALANCE_TOL = 1e-6  # max |h| accepted when ingesting external rows


@dataclass
class ScenarioConfig:
    """Controls the load-scenario distribution and the rejection loop.

    Loads are scaled by a global factor drawn uniformly from
    load_scale_range, then jittered per bus by a lognormal multiplier
    exp(N(0, jitter_sigma)); reactive demand keeps each bus's power factor.
    Generators are dispatched proportionally to their Pmax, the slack
    absorbing the residual plus losses.
    """

    n_samples: int = 2000
    seed: int = 0
    load_scale_range: tuple[float, float] = (0.8, 1.2)
    jitter_sigma: float = 0.05
    attempt_factor: int = 10
    min_acceptance: float = 0.1

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        lo, hi = self.load_scale_range
        if not (0 < lo <= hi):
            raise ValidationError("load_scale_range must satisfy 0 < lo <= hi")
        if self.jitter_sigma < 0:
            raise ValidationError("jitter_sigma must be >= 0")


class NormStats:
    """Per-feature min-max statistics mapping physical values to [-1, 1].

    Constant features (lo == hi) map to 0 and denormalize back to the stored
    constant, which keeps structurally-fixed features (slack angle,
    zero-injection P/Q) exact through a normalize/denormalize round trip.
    Stats must be frozen (fit once) before use and are bound to the grid
    they were computed on via grid_digest.
    """

    def __init__(self, lo=None, hi=None, grid_digest=""):
        self.lo = None if lo is None else np.asarray(lo, dtype=float)
        self.hi = None if hi is None else np.asarray(hi, dtype=float)
        self.grid_digest = grid_digest
        self.frozen = self.lo is not None

    def fit(self, states: np.ndarray, grid_digest: str) -> "NormStats":
        if self.frozen:
            raise ValidationError("norm stats are already frozen")
        states = np.asarray(states, dtype=float)
        self.lo = states.min(axis=0)
        self.hi = states.max(axis=0)
        self.grid_digest = grid_digest
        self.frozen = True
        return self

    def _check(self):
        if not self.frozen:
            raise NormNotFrozen("fit() must run before normalize/denormalize")

    @property
    def span(self) -> np.ndarray:
        self._check()
        return self.hi - self.lo

    @property
    def half_span(self) -> np.ndarray:
        """Jacobian of denormalize: d(physical)/d(normalized) per feature."""
        return 0.5 * self.span

    def normalize(self, x: np.ndarray) -> np.ndarray:
        self._check()
        span = self.span
        safe = np.where(span > 0, span, 1.0)
        out = 2.0 * (np.asarray(x, dtype=float) - self.lo) / safe - 1.0
        return np.where(span > 0, out, 0.0)

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        self._check()
        span = self.span
        out = self.lo + 0.5 * (np.asarray(y, dtype=float) + 1.0) * span
        return np.where(span > 0, out, self.lo)

    def digest(self) -> str:
        self._check()
        payload = (
            np.ascontiguousarray(self.lo).tobytes()
            + np.ascontiguousarray(self.hi).tobytes()
            + self.grid_digest.encode()
        )
        return hashlib.sha256(payload).hexdigest()

    def to_dict(self) -> dict:
        self._check()
        return {
            "version": SCHEMA_VERSION,
            "grid_digest": self.grid_digest,
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        if d.get("version") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported norm stats version {d.get('version')!r}")
        return cls(lo=d["lo"], hi=d["hi"], grid_digest=d["grid_digest"])


@dataclass
class Dataset:
    """A set of feasible operating states in physical units.

    states has shape (m, 4n) with the [P | Q | V | theta] layout; norm holds
    the frozen min-max stats fit on these states (or on the training set they
    were ingested against).
    """

    states: np.ndarray
    norm: NormStats
    grid_digest: str
    provenance: str = "generated"
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]


def _dispatch_shares(grid: GridCase) -> np.ndarray:
    total = grid.gen_pmax.sum()
    if total <= 0:
        raise ValidationError("case has no dispatchable capacity")
    return grid.gen_pmax / total


def generate(grid: GridCase, cfg: ScenarioConfig, progress: bool = False) -> Dataset:
    """Generate cfg.n_samples feasible states by scenario sampling.

    Raises GenerationExhausted when the attempt budget
    (attempt_factor * n_samples) runs out, or earlier when the running
    acceptance rate over at least one budget-of-samples worth of attempts
    drops below min_acceptance.
    """
    shares = _dispatch_shares(grid)
    budget = cfg.attempt_factor * cfg.n_samples
    lo, hi = cfg.load_scale_range

    accepted = []
    attempt = 0
    t0 = time.perf_counter()
    while len(accepted) < cfg.n_samples:
        if attempt >= budget:
            raise GenerationExhausted(
                f"{len(accepted)}/{cfg.n_samples} accepted after {attempt} attempts"
            )
        if attempt >= cfg.n_samples and len(accepted) < cfg.min_acceptance * attempt:
            raise GenerationExhausted(
                f"acceptance rate {len(accepted) / attempt:.1%} below "
                f"{cfg.min_acceptance:.0%} after {attempt} attempts"
            )
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, attempt)))
        attempt += 1

        scale = rng.uniform(lo, hi)
        jitter = np.exp(rng.normal(0.0, cfg.jitter_sigma, size=grid.n))
        pd = grid.pd * scale * jitter
        qd = grid.qd * scale * jitter
        pg = pd.sum() * shares
        try:
            sol = newton_raphson(grid, pd, qd, pg)
        except SingularJacobian:
            continue
        if not sol.converged:
            continue
        x = sol.state.flatten()
        _, r_g, _, _ = batch_penalties(x, grid)
        if r_g[0] > 0.0:
            continue
        accepted.append(x)
        if progress and len(accepted) % 500 == 0:
            rate = len(accepted) / attempt
            print(
                f"  {len(accepted)}/{cfg.n_samples} accepted "
                f"({rate:.0%} of {attempt} attempts, {time.perf_counter() - t0:.1f}s)"
            )

    states = np.array(accepted)
    digest = grid.digest()
    norm = NormStats().fit(states, digest)
    meta = {
        "config": {
            "n_samples": cfg.n_samples,
            "seed": cfg.seed,
            "load_scale_range": list(cfg.load_scale_range),
            "jitter_sigma": cfg.jitter_sigma,
        },
        "attempts": attempt,
        "acceptance_rate": len(accepted) / attempt,
    }
    return Dataset(states, norm, digest, provenance="generated", meta=meta)


# -- persistence ----------------------------------------------------------------


def save_dataset(ds: Dataset, out_dir: str | Path, labels: list[str]) -> None:
    """Write dataset.csv, norm.json, and meta.json into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ",".join(labels)
    np.savetxt(out / "dataset.csv", ds.states, delimiter=",", header=header, comments="")
    (out / "norm.json").write_text(json.dumps(ds.norm.to_dict(), indent=1))
    meta = {
        "version": SCHEMA_VERSION,
        "provenance": ds.provenance,
        "grid_digest": ds.grid_digest,
        "n_samples": ds.n_samples,
        **ds.meta,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1))


def load_dataset(data_dir: str | Path, grid: GridCase) -> Dataset:
    """Load a saved dataset and verify it matches the given grid."""
    data_dir = Path(data_dir)
    for name in ("dataset.csv", "norm.json", "meta.json"):
        if not (data_dir / name).exists():
            raise SchemaError(f"missing {name} in {data_dir}")
    meta = json.loads((data_dir / "meta.json").read_text())
    if meta.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported dataset version {meta.get('version')!r}")
    norm = NormStats.from_dict(json.loads((data_dir / "norm.json").read_text()))

    digest = grid.digest()
    if meta["grid_digest"] != digest or norm.grid_digest != digest:
        raise DigestMismatch("dataset was built for a different grid")

    labels = feature_labels(grid)
    with open(data_dir / "dataset.csv") as fh:
        header = fh.readline().strip().split(",")
    if header != labels:
        raise SchemaError("dataset.csv columns do not match the grid's feature layout")
    states = np.loadtxt(data_dir / "dataset.csv", delimiter=",", skiprows=1, ndmin=2)
    if states.shape[1] != 4 * grid.n:
        raise SchemaError(f"dataset has {states.shape[1]} columns, expected {4 * grid.n}")
    return Dataset(
        states=states,
        norm=norm,
        grid_digest=meta["grid_digest"],
        provenance=meta.get("provenance", "generated"),
        meta={k: v for k, v in meta.items() if k not in ("version",)},
    )


def ingest_csv(path: str | Path, grid: GridCase, tol: float = BALANCE_TOL) -> Dataset:
    """Build a Dataset from an external CSV of operating states.

    The header must match the grid's feature layout exactly.  Rows whose
    power-balance mismatch exceeds tol (max-abs) are dropped; the count of
    dropped rows lands in meta["rejected_rows"].  Norm stats are fit on the
    surviving rows.
    """
    path = Path(path)
    labels = feature_labels(grid)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header != labels:
        raise SchemaError(
            f"{path.name}: header does not match the expected "
            f"[P | Q | V | theta] layout for this grid"
        )
    try:
        states = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise SchemaError(f"{path.name}: {exc}") from exc
    if states.size == 0:
        raise SchemaError(f"{path.name}: no data rows")
    if states.shape[1] != 4 * grid.n:
        raise SchemaError(f"{path.name}: wrong column count")

    _, _, h, _ = batch_penalties(states, grid)
    ok = np.abs(h).max(axis=1) <= tol
    if not ok.any():
        raise ValidationError(f"{path.name}: every row violates power balance beyond {tol}")
    kept = states[ok]
    digest = grid.digest()
    norm = NormStats().fit(kept, digest)
    return Dataset(
        states=kept,
        norm=norm,
        grid_digest=digest,
        provenance="ingested",
        meta={"rejected_rows": int((~ok).sum()), "source": str(path)},
    )
