"""Convergence diagnostics and posterior summaries for multi-chain output."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .trends import TrendTable, from_flat

RHAT_THRESHOLD = 1.01


def _stack(chains) -> np.ndarray:
    arr = np.asarray(chains, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("chains must have shape (n_chains, n_draws[, n_params])")
    return arr


@dataclass
class RhatReport:
    names: list[str]
    values: np.ndarray  # NaN for constant parameters
    constant: list[str] = field(default_factory=list)
    threshold: float = RHAT_THRESHOLD

    @property
    def flagged(self) -> list[str]:
        return [n for n, v in zip(self.names, self.values) if not np.isnan(v) and v >= self.threshold]

    @property
    def passed(self) -> bool:
        return not self.flagged

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def max(self, names: Sequence[str] | None = None) -> float:
        sel = self.values if names is None else np.array([self[n] for n in names])
        sel = sel[~np.isnan(sel)]
        return float(sel.max()) if sel.size else math.nan

    def subset(self, keep) -> "RhatReport":
        idx = [i for i, n in enumerate(self.names) if keep(n)]
        return RhatReport(
            [self.names[i] for i in idx],
            self.values[idx],
            [n for n in self.constant if keep(n)],
            self.threshold,
        )

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["parameter", "rhat", "status"])
            for name, v in zip(self.names, self.values):
                if name in self.constant:
                    writer.writerow([name, "", "constant"])
                else:
                    writer.writerow([name, repr(float(v)), "fail" if v >= self.threshold else "ok"])

    def summary(self) -> str:
        finite = self.values[~np.isnan(self.values)]
        worst = float(finite.max()) if finite.size else math.nan
        lines = [
            f"parameters: {len(self.names)} ({len(self.constant)} constant)",
            f"max R-hat: {worst:.4f} (threshold {self.threshold})",
        ]
        if self.flagged:
            lines.append(f"not converged ({len(self.flagged)}): " + ", ".join(self.flagged[:20]))
        else:
            lines.append("all parameters below threshold")
        return "\n".join(lines)


def rhat(chains, names: Sequence[str] | None = None, threshold: float = RHAT_THRESHOLD) -> RhatReport:
    """Split-chain potential scale reduction factor per parameter.

    ``chains`` has shape (n_chains, n_draws) or (n_chains, n_draws, n_params).
    Each chain is cut into halves, then
    ``R = sqrt(((n - 1) / n * W + B / n) / W)`` with ``W`` the mean
    within-half variance and ``B / n`` the variance of the half means.
    """
    arr = _stack(chains)
    m, n, p = arr.shape
    if m < 2:
        raise ValueError("need at least two chains")
    if n < 10:
        raise ValueError("need at least 10 draws per chain")
    half = n // 2
    split = np.concatenate([arr[:, :half], arr[:, n - half :]], axis=0)
    means = split.mean(axis=1)
    W = split.var(axis=1, ddof=1).mean(axis=0)
    B = half * means.var(axis=0, ddof=1)
    names = list(names) if names is not None else [f"p{i}" for i in range(p)]
    values = np.empty(p)
    constant = []
    for j in range(p):
        if W[j] > 0:
            values[j] = math.sqrt(((half - 1) / half * W[j] + B[j] / half) / W[j])
        elif B[j] > 0:
            values[j] = math.inf
        else:
            values[j] = math.nan
            constant.append(names[j])
    return RhatReport(names, values, constant, threshold)


@dataclass
class CorrelationReport:
    names: list[str]
    matrix: np.ndarray
    excluded: list[str]
    extreme: list[tuple[str, str, float]]
    alpha0_eta: dict[str, float]
    hazard_consecutive: dict[str, float]


def posterior_correlations(draws, names: Sequence[str], limit: float = 0.9) -> CorrelationReport:
    """Pearson correlations of pooled draws; constant columns are dropped."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 3:
        draws = draws.reshape(-1, draws.shape[-1])
    names = list(names)
    sd = draws.std(axis=0)
    keep = np.flatnonzero(sd > 0)
    excluded = [names[j] for j in np.flatnonzero(sd == 0)]
    kept = [names[j] for j in keep]
    corr = np.atleast_2d(np.corrcoef(draws[:, keep], rowvar=False)) if keep.size else np.zeros((0, 0))
    iu, ju = np.triu_indices(len(kept), k=1)
    hit = np.abs(corr[iu, ju]) >= limit
    extreme = [(kept[i], kept[j], float(corr[i, j])) for i, j in zip(iu[hit], ju[hit])]
    pos = {n: k for k, n in enumerate(kept)}

    def pair(a, b):
        return float(corr[pos[a], pos[b]]) if a in pos and b in pos else math.nan

    alpha0_eta = {}
    hazard_pairs = {}
    for name in kept:
        if name.startswith("alpha0["):
            alpha0_eta[name[len("alpha0") :]] = pair(name, "eta" + name[len("alpha0") :])
        if name.startswith("h0["):
            g, t = name[3:-1].split(",")
            nxt = f"h0[{g},{int(t) + 1}]"
            if nxt in pos:
                hazard_pairs[f"{name}~{nxt}"] = pair(name, nxt)
    return CorrelationReport(kept, corr, excluded, extreme, alpha0_eta, hazard_pairs)


def empirical_quantile(x, q) -> np.ndarray:
    """Type-1 (inverted CDF) quantiles: always an order statistic."""
    return np.quantile(np.asarray(x), q, axis=0, method="inverted_cdf")


def summarize_posterior(smoker_counts, cell_sizes, level: float = 0.95, method: str = "Bayes") -> TrendTable:
    """Posterior mean and central interval of prevalence (%) per cell.

    ``smoker_counts`` holds per-draw smoker totals per cell, either pooled
    (n_draws, 32) or per chain (n_chains, n_draws, 32).
    """
    counts = np.asarray(smoker_counts, dtype=float)
    if counts.ndim == 3:
        counts = counts.reshape(-1, counts.shape[-1])
    sizes = np.asarray(cell_sizes, dtype=float)
    if counts.ndim != 2 or counts.shape[1] != 32 or sizes.shape != (32,):
        raise ValueError("need smoker counts and sizes for all 32 cells")
    if np.any(sizes <= 0):
        raise ValueError("empty cell in posterior summary")
    prev = 100.0 * counts / sizes
    tail = (1 - level) / 2
    lo, hi = empirical_quantile(prev, [tail, 1 - tail])
    return TrendTable(method, from_flat(prev.mean(axis=0)), from_flat(lo), from_flat(hi))


def chains_array(outputs, names: Sequence[str] | None = None) -> np.ndarray:
    """Stack ChainOutput draws to (n_chains, n_draws, n_params)."""
    arr = np.stack([o.draws for o in outputs])
    if names is not None:
        idx = [outputs[0].param_names.index(n) for n in names]
        arr = arr[:, :, idx]
    return arr
