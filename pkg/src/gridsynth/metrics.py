"""Distribution-fidelity metrics between real and synthetic state sets.

Marginals are compared feature by feature in normalized space (the real
set's min-max stats), which puts every feature on the same [-1, 1] scale:

* empirical 1-Wasserstein distance, computed from the quantile form
  W1 = integral |F_a^-1 - F_b^-1|;
* KL divergence KL(real || syn) between 50-bin histograms on the real
  feature's range, synthetic mass outside the range clipped into the edge
  bins, both histograms smoothed with eps = 1e-10, reported in nats.

Features whose real marginal is a point mass (structurally constant
quantities) get a degenerate flag: their KL is 0 when the synthetic side
reproduces the constant and is computed on the union range otherwise, and
flagged features are excluded from the mean KL.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset
from .errors import ValidationError
from .grid import GridCase, feature_labels

KL_EPS = 1e-10
DEFAULT_BINS = 50


def wasserstein1(a: np.ndarray, b: np.ndarray) -> float:
    """Empirical 1-Wasserstein distance between two 1-D samples.

    Equal-size samples reduce to the mean absolute difference of the sorted
    values; otherwise the piecewise-constant CDF difference is integrated
    over the merged support.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValidationError("wasserstein1 needs non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    grid = np.sort(np.concatenate([a, b]))
    deltas = np.diff(grid)
    cdf_a = np.searchsorted(np.sort(a), grid[:-1], side="right") / a.size
    cdf_b = np.searchsorted(np.sort(b), grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * deltas))


def _histogram(values: np.ndarray, lo: float, hi: float, n_bins: int) -> np.ndarray:
    clipped = np.clip(values, lo, hi)
    counts, _ = np.histogram(clipped, bins=n_bins, range=(lo, hi))
    p = counts.astype(float) / counts.sum()
    p += KL_EPS
    return p / p.sum()


def kl_divergence(real: np.ndarray, syn: np.ndarray, n_bins: int = DEFAULT_BINS) -> float:
    """Histogram KL(real || syn) in nats; see the module docstring for the
    binning and degenerate-support conventions."""
    real = np.asarray(real, dtype=float).ravel()
    syn = np.asarray(syn, dtype=float).ravel()
    if real.size == 0 or syn.size == 0:
        raise ValidationError("kl_divergence needs non-empty samples")
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    lo, hi = float(real.min()), float(real.max())
    if lo == hi:
        if np.all(syn == lo):
            return 0.0
        # point-mass real marginal: fall back to the union range so a
        # synthetic spread registers as a large divergence
        lo = min(lo, float(syn.min()))
        hi = max(hi, float(syn.max()))
        lo, hi = lo - 1e-12, hi + 1e-12
    p = _histogram(real, lo, hi, n_bins)
    q = _histogram(syn, lo, hi, n_bins)
    return float(np.sum(p * np.log(p / q)))


@dataclass
class FidelityReport:
    """Per-feature and aggregate fidelity between a real and synthetic set."""

    labels: list[str]
    w1: np.ndarray
    kl: np.ndarray
    degenerate: np.ndarray
    n_bins: int
    n_real: int
    n_syn: int
    meta: dict = field(default_factory=dict)

    @property
    def w1_mean(self) -> float:
        return float(self.w1.mean())

    @property
    def kl_mean(self) -> float:
        """Mean KL over non-degenerate features (all-degenerate gives 0)."""
        keep = ~self.degenerate
        return float(self.kl[keep].mean()) if keep.any() else 0.0

    def to_dict(self) -> dict:
        return {
            "space": "normalized",
            "kl_direction": "real||synthetic",
            "kl_units": "nats",
            "n_bins": self.n_bins,
            "n_real": self.n_real,
            "n_syn": self.n_syn,
            "w1_mean": self.w1_mean,
            "kl_mean_nondegenerate": self.kl_mean,
            "w1_max": float(self.w1.max()),
            "kl_max": float(self.kl.max()),
            "features": [
                {
                    "label": lab,
                    "w1": float(w),
                    "kl": float(k),
                    "degenerate": bool(d),
                }
                for lab, w, k, d in zip(self.labels, self.w1, self.kl, self.degenerate)
            ],
            **self.meta,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def fidelity_report(
    real: Dataset,
    syn,
    grid: GridCase,
    n_bins: int = DEFAULT_BINS,
) -> FidelityReport:
    """Compare synthetic states against a real dataset, feature by feature.

    syn is a sampler output batch or a plain (m, 4n) array.  Both sets are
    mapped through the real set's norm stats; feature order follows the
    [P | Q | V | theta] layout.  Metrics are permutation invariant in the
    sample order of either set.
    """
    syn_states = np.asarray(getattr(syn, "states", syn), dtype=float)
    if syn_states.ndim != 2 or syn_states.shape[1] != real.states.shape[1]:
        raise ValidationError("synthetic states have the wrong feature count")
    real_n = real.norm.normalize(real.states)
    syn_n = real.norm.normalize(syn_states)

    n_feat = real_n.shape[1]
    w1 = np.empty(n_feat)
    kl = np.empty(n_feat)
    degenerate = np.zeros(n_feat, dtype=bool)
    for j in range(n_feat):
        rj, sj = real_n[:, j], syn_n[:, j]
        w1[j] = wasserstein1(rj, sj)
        kl[j] = kl_divergence(rj, sj, n_bins)
        degenerate[j] = rj.min() == rj.max()
    return FidelityReport(
        labels=feature_labels(grid),
        w1=w1,
        kl=kl,
        degenerate=degenerate,
        n_bins=n_bins,
        n_real=real.n_samples,
        n_syn=syn_states.shape[0],
    )


def write_plot_data(
    real: Dataset,
    syn,
    grid: GridCase,
    out_dir,
    n_bins: int = DEFAULT_BINS,
    buses: list[int] | None = None,
) -> list[str]:
    """Write per-feature histogram CSVs and P-Q / V-theta scatter CSVs.

    syn is a sampler output batch or a plain (m, 4n) array.  Histograms are
    over physical units on the union range of both sets.  Scatter files pair
    the two state dimensions most useful for eyeballing the joint structure,
    one file per selected bus id (default: every load bus).  Returns the
    file names.
    """
    syn_states = np.asarray(getattr(syn, "states", syn), dtype=float)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = feature_labels(grid)
    written = []
    for j, lab in enumerate(labels):
        rj = real.states[:, j]
        sj = np.asarray(syn_states)[:, j]
        lo = min(rj.min(), sj.min())
        hi = max(rj.max(), sj.max())
        if lo == hi:
            lo, hi = lo - 1e-9, hi + 1e-9
        edges = np.linspace(lo, hi, n_bins + 1)
        rh, _ = np.histogram(rj, bins=edges, density=True)
        sh, _ = np.histogram(sj, bins=edges, density=True)
        rows = ["bin_left,bin_right,real_density,synthetic_density"]
        rows += [
            f"{edges[i]!r},{edges[i + 1]!r},{rh[i]!r},{sh[i]!r}" for i in range(n_bins)
        ]
        name = f"hist_{lab}.csv"
        (out / name).write_text("\n".join(rows) + "\n")
        written.append(name)

    n = grid.n
    if buses is None:
        sel = [i for i in range(n) if grid.pd[i] != 0.0 or grid.qd[i] != 0.0]
    else:
        index_of = {b: i for i, b in enumerate(grid.bus_ids)}
        try:
            sel = [index_of[b] for b in buses]
        except KeyError as exc:
            raise ValidationError(f"unknown bus id {exc.args[0]!r}") from None
    for i in sel:
        bid = grid.bus_ids[i]
        for name, (j1, j2) in (
            (f"scatter_PQ_{bid}.csv", (i, n + i)),
            (f"scatter_Vtheta_{bid}.csv", (2 * n + i, 3 * n + i)),
        ):
            rows = ["set,x,y"]
            rows += [f"real,{a!r},{b!r}" for a, b in zip(real.states[:, j1], real.states[:, j2])]
            rows += [
                f"synthetic,{a!r},{b!r}"
                for a, b in zip(np.asarray(syn_states)[:, j1], np.asarray(syn_states)[:, j2])
            ]
            (out / name).write_text("\n".join(rows) + "\n")
            written.append(name)
    return written
