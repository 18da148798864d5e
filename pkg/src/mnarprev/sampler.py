"""Metropolis-within-Gibbs sampler with data augmentation.

One sweep:

1. draw smoking for every non-participant from its full conditional;
2. re-tally the count tables (participants' share is fixed, only the
   non-participants' share is recomputed);
3. adaptive random-walk Metropolis on the coefficient blocks
   ``(alpha0, eta)[g, s]``, ``(alpha1, alpha2)``, ``(beta0, beta1)[g, r, s]``
   and ``gamma[g]``; blocks of one kind are conditionally independent
   given the tables, so they are proposed and accepted in one vectorised step;
4. exact Gibbs draws of the baseline hazard, even bins then odd bins.

Only thinned parameter vectors and per-cell smoker counts are stored.
"""

from __future__ import annotations

import csv
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, gammainc, gammaincc, gammainccinv, gammaincinv

from .data import (
    N_BINS,
    T_MIN,
    YEAR_INDEX,
    MIN_AGE,
    DataError,
    PersonRecord,
    RiskGroupTable,
    aggregate_arrays,
    cell_labels,
)
from .model import (
    N_AGES,
    ModelParams,
    ParticipationCounts,
    PriorSpec,
    SmokingCounts,
    hazard_logprior,
    logistic_logpdf,
    loglik_participation_groups,
    loglik_smoking_groups,
    loglik_survival_by_gender,
    normal_logpdf,
    parameter_names,
    smoking_conditional_logodds,
    smoking_logit,
)


WORKERS_ENV = "MNARPREV_WORKERS"


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 7
    burn_in: int = 9000
    iterations: int = 45900
    thin: int = 75
    adapt_window: int = 100
    target_accept: float = 0.35
    seed: int = 0
    mode: str = "MNAR"

    def __post_init__(self):
        mode = self.mode.upper()
        object.__setattr__(self, "mode", mode)
        if mode not in ("MNAR", "MAR"):
            raise ValueError(f"mode must be MNAR or MAR, got {self.mode!r}")
        for name in ("n_chains", "iterations", "thin", "adapt_window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.burn_in < 0:
            raise ValueError("burn_in must be nonnegative")
        if self.iterations % self.thin:
            raise ValueError("thin must divide iterations")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")

    @property
    def n_recorded(self) -> int:
        return self.iterations // self.thin


# --- data in array form --------------------------------------------------------


@dataclass
class SurveyArrays:
    """Column view of the records used inside the sampler."""

    ids: np.ndarray
    g: np.ndarray
    r: np.ndarray
    s: np.ndarray  # study-year index
    age: np.ndarray
    participated: np.ndarray
    y_obs: np.ndarray  # -1 where missing
    exit: np.ndarray
    event_bin: np.ndarray  # -1 where no counted event
    cell: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[PersonRecord]) -> "SurveyArrays":
        if any(rec.region is None for rec in records):
            raise DataError("missing region: run impute_region_fixed before fitting")

        def col(fn, dtype=np.int64):
            return np.fromiter((fn(rec) for rec in records), dtype=dtype, count=len(records))

        s = col(lambda rec: YEAR_INDEX[rec.study_year])
        r = col(lambda rec: rec.region)
        g = col(lambda rec: rec.gender)
        return cls(
            ids=col(lambda rec: rec.id),
            g=g,
            r=r,
            s=s,
            age=col(lambda rec: rec.age),
            participated=col(lambda rec: rec.participation).astype(bool),
            y_obs=col(lambda rec: -1 if rec.smoking is None else rec.smoking),
            exit=col(lambda rec: rec.exit_age),
            event_bin=col(lambda rec: -1 if rec.event_bin is None else rec.event_bin),
            cell=s * 4 + r * 2 + g,
        )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def missing(self) -> np.ndarray:
        return np.flatnonzero(~self.participated)

    def cell_sizes(self) -> np.ndarray:
        return np.bincount(self.cell, minlength=32)

    def observed_smokers(self) -> np.ndarray:
        return np.bincount(self.cell, weights=(self.y_obs == 1), minlength=32).astype(np.int64)


@dataclass
class SuffStats:
    participation: ParticipationCounts
    smoking: SmokingCounts
    table: RiskGroupTable


class _Tally:
    """Count tables split into a fixed participant part and a varying part."""

    def __init__(self, data: SurveyArrays):
        self.data = data
        a = data.age - MIN_AGE
        # flat index into (g, s, y, r, age) with y = 0
        self.p_idx = (((data.g * 8 + data.s) * 2) * 2 + data.r) * N_AGES + a
        self.p_ystride = 2 * N_AGES
        self.s_idx = ((data.g * 2 + data.r) * 8 + data.s) * N_AGES + a
        self.miss = data.missing
        obs = np.flatnonzero(data.participated)
        y_obs = data.y_obs[obs]

        pshape = (2, 8, 2, 2, N_AGES)
        psize = int(np.prod(pshape))
        obs_pidx = self.p_idx[obs] + y_obs * self.p_ystride
        m = np.bincount(obs_pidx, minlength=psize).astype(float)
        self.part_fixed_n = m.copy()
        self.part_m = m.reshape(pshape)
        self.psize, self.pshape = psize, pshape

        sshape = (2, 2, 8, N_AGES)
        ssize = int(np.prod(sshape))
        self.smoke_n = np.bincount(self.s_idx, minlength=ssize).astype(float).reshape(sshape)
        self.smoke_k_fixed = np.bincount(self.s_idx[obs], weights=y_obs, minlength=ssize)
        self.ssize, self.sshape = ssize, sshape

        self.table_fixed = aggregate_arrays(
            data.g[obs], y_obs, data.age[obs], data.exit[obs], data.event_bin[obs]
        )

    def build(self, y_miss: np.ndarray, with_table: bool = True) -> SuffStats:
        miss = self.miss
        n = self.part_fixed_n + np.bincount(
            self.p_idx[miss] + y_miss * self.p_ystride, minlength=self.psize
        )
        k = self.smoke_k_fixed + np.bincount(self.s_idx[miss], weights=y_miss, minlength=self.ssize)
        part = ParticipationCounts(n=n.reshape(self.pshape), m=self.part_m)
        smoke = SmokingCounts(n=self.smoke_n, k=k.reshape(self.sshape))
        if with_table:
            d = self.data
            table = self.table_fixed + aggregate_arrays(
                d.g[miss], y_miss, d.age[miss], d.exit[miss], d.event_bin[miss]
            )
        else:
            table = self.table_fixed
        return SuffStats(part, smoke, table)


def build_suffstats(data: SurveyArrays, y: np.ndarray) -> SuffStats:
    """Count tables for a complete assignment ``y`` over all persons."""
    return _Tally(data).build(np.asarray(y)[data.missing])


# --- truncated Gamma and the baseline hazard -------------------------------------


def sample_truncated_gamma(shape, rate, lower, upper, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws from Gamma(shape, rate) restricted to [lower, upper].

    Vectorised over all arguments.  ``rate == 0`` with ``shape == 1`` gives the
    uniform distribution on the interval.  Upper-tail intervals are inverted
    through the regularised upper incomplete gamma to keep precision.
    """
    shape, rate, lower, upper = np.broadcast_arrays(
        np.asarray(shape, dtype=float),
        np.asarray(rate, dtype=float),
        np.asarray(lower, dtype=float),
        np.asarray(upper, dtype=float),
    )
    if np.any(upper < lower):
        raise ValueError("empty truncation interval")
    u = rng.random(shape.shape)
    out = lower + u * (upper - lower)
    pos = rate > 0
    if np.any(pos):
        k, b = shape[pos], rate[pos]
        xl, xu, up = lower[pos] * b, upper[pos] * b, u[pos]
        tail = xl > k
        x = np.empty_like(xl)
        with np.errstate(invalid="ignore", over="ignore"):
            pl, pu = gammainc(k, xl), gammainc(k, xu)
            ql, qu = gammaincc(k, xl), gammaincc(k, xu)
            x_low = gammaincinv(k, pl + up * (pu - pl))
            x_tail = gammainccinv(k, ql - up * (ql - qu))
        x = np.where(tail, x_tail, x_low)
        mass = np.where(tail, ql - qu, pu - pl)
        degenerate = ~(mass > 0) | ~np.isfinite(x)
        if np.any(degenerate):
            # interval far in the upper tail: locally exponential with the
            # log-density slope at the lower end
            slope = np.maximum(1.0 - (k - 1.0) / np.maximum(xl, 1e-300), 1e-12)
            width = xu - xl
            e = -np.log1p(up * np.expm1(-slope * width)) / slope
            x = np.where(degenerate, xl + e, x)
        out[pos] = x / b
    return np.clip(out, lower, upper)


def _hazard_sweep(h0, gamma, table: RiskGroupTable, upper: float, rng, bins=None, gender=(0, 1)):
    """Gibbs-update baseline hazard bins in place.

    Every bin's conditional is Gamma(D + 1, E_eff) on [h(t-1), h(t+1)] times
    1 / (upper - h(t)), the density of h(t+1) ~ U(h(t), upper).  The Gamma
    part is drawn exactly; the remaining factor enters through one
    independence Metropolis step, accepted with probability
    (upper - h_old) / (upper - h_new) capped at one.
    """
    D = table.events.sum(axis=1)
    Eeff = table.exposure[:, 0, :] + np.exp(gamma)[:, None] * table.exposure[:, 1, :]
    groups = [np.arange(0, N_BINS, 2), np.arange(1, N_BINS, 2)] if bins is None else [np.asarray(bins)]
    for g in gender:
        h = h0[g]
        for idx in groups:
            lo = np.where(idx > 0, h[np.maximum(idx - 1, 0)], 0.0)
            hi = np.where(idx < N_BINS - 1, np.minimum(h[np.minimum(idx + 1, N_BINS - 1)], upper), upper)
            prop = sample_truncated_gamma(D[g, idx] + 1.0, Eeff[g, idx], lo, hi, rng)
            cur = h[idx]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(idx < N_BINS - 1, (upper - cur) / (upper - prop), 1.0)
            accept = rng.random(idx.shape) < ratio
            # a current value outside the new interval cannot be kept
            accept |= (cur < lo) | (cur > hi)
            h[idx] = np.where(accept, prop, cur)
    return h0


def update_hazard_bin(
    g: int,
    t: int,
    params: ModelParams,
    table: RiskGroupTable,
    rng: np.random.Generator,
    prior: PriorSpec = PriorSpec(),
) -> ModelParams:
    """Draw the baseline hazard of one (gender, age bin) from its conditional."""
    out = params.copy()
    _hazard_sweep(out.h0, out.gamma, table, prior.hazard_upper, rng, bins=[t - T_MIN], gender=(g,))
    return out


def initial_hazard(table: RiskGroupTable, upper: float = 20.0, floor: float = 1e-8) -> np.ndarray:
    """Nondecreasing ramp through the crude pooled event rates."""
    D = table.events.sum(axis=1)
    E = table.exposure.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        crude = np.where(E > 0, D / E, 0.0)
    return np.clip(np.maximum.accumulate(np.maximum(crude, floor), axis=1), floor, upper)


# --- imputation --------------------------------------------------------------------


def imputation_probs(params: ModelParams, data: SurveyArrays, use_survival: bool = True) -> np.ndarray:
    m = data.missing
    has_event = (data.event_bin[m] >= 0).astype(float)
    lo = smoking_conditional_logodds(
        params,
        data.g[m],
        data.r[m],
        data.s[m],
        data.age[m],
        data.age[m],
        data.exit[m],
        has_event,
        use_survival=use_survival,
    )
    return expit(lo)


def gibbs_impute_missing(
    params: ModelParams,
    data: SurveyArrays,
    rng: np.random.Generator,
    use_survival: bool = True,
) -> np.ndarray:
    """Complete smoking assignment: observed values plus one draw per non-participant."""
    y = data.y_obs.copy()
    p = imputation_probs(params, data, use_survival)
    y[data.missing] = (rng.random(p.shape) < p).astype(np.int64)
    return y


# --- coefficient blocks --------------------------------------------------------------


def _logpost_alpha0_eta(alpha0, eta, params, ss, prior, eta_free=True):
    ll = loglik_participation_groups(alpha0, eta, params.alpha1, params.alpha2, ss.participation)
    lp = normal_logpdf(alpha0, prior.coef_variance)
    if eta_free:
        lp = lp + logistic_logpdf(eta, prior.eta_scale)
    return ll + lp


def _logpost_alpha12(alpha1, alpha2, params, ss, prior):
    ll = loglik_participation_groups(params.alpha0, params.eta, alpha1, alpha2, ss.participation).sum()
    lp = normal_logpdf(alpha1, prior.coef_variance).sum() + normal_logpdf(alpha2, prior.coef_variance)
    return ll + lp


def _logpost_beta(beta0, beta1, ss, prior):
    ll = loglik_smoking_groups(beta0, beta1, ss.smoking)
    return ll + normal_logpdf(beta0, prior.coef_variance) + normal_logpdf(beta1, prior.coef_variance)


def _logpost_gamma(gamma, params, ss, prior):
    trial = params.copy()
    trial.gamma = np.asarray(gamma, dtype=float)
    return loglik_survival_by_gender(trial, ss.table) + normal_logpdf(trial.gamma, prior.coef_variance)


def _hazard_logprior_rows(h0: np.ndarray, upper: float) -> np.ndarray:
    return np.array([hazard_logprior(h0[g], upper) for g in range(h0.shape[0])])


def _gamma_level_move(params, gamma_new, log_scale, ss, prior, rng) -> np.ndarray:
    """Joint Metropolis move of gamma[g] and h0[g] -> h0[g] * exp(log_scale[g]).

    Rescaling all bins of a curve has Jacobian exp(N_BINS * log_scale); it lets
    the sampler move along the ridge where a higher smoking effect is traded
    against a lower baseline.  Updates ``params`` in place and returns the
    per-gender acceptance flags.
    """
    H = prior.hazard_upper
    trial = params.copy()
    trial.gamma = np.asarray(gamma_new, dtype=float).copy()
    trial.h0 = params.h0 * np.exp(log_scale)[:, None]
    lp_cur = (
        loglik_survival_by_gender(params, ss.table)
        + normal_logpdf(params.gamma, prior.coef_variance)
        + _hazard_logprior_rows(params.h0, H)
    )
    with np.errstate(invalid="ignore"):
        lp_new = (
            loglik_survival_by_gender(trial, ss.table)
            + normal_logpdf(trial.gamma, prior.coef_variance)
            + _hazard_logprior_rows(trial.h0, H)
            + N_BINS * log_scale
        )
    acc = _accept(lp_new - lp_cur, rng)
    params.gamma = np.where(acc, trial.gamma, params.gamma)
    params.h0 = np.where(acc[:, None], trial.h0, params.h0)
    return acc


def block_logpost(block_id: tuple, params: ModelParams, ss: SuffStats, prior: PriorSpec) -> float:
    """Log posterior terms that involve the given block (up to a constant)."""
    kind = block_id[0]
    if kind == "alpha0_eta":
        _, g, s = block_id
        return float(_logpost_alpha0_eta(params.alpha0, params.eta, params, ss, prior)[g, s])
    if kind == "alpha":
        return float(_logpost_alpha12(params.alpha1, params.alpha2, params, ss, prior))
    if kind == "beta":
        _, g, r, s = block_id
        return float(_logpost_beta(params.beta0, params.beta1, ss, prior)[g, r, s])
    if kind == "gamma":
        return float(_logpost_gamma(params.gamma, params, ss, prior).sum())
    raise ValueError(f"unknown block {block_id!r}")


def _get_block(params: ModelParams, block_id: tuple) -> np.ndarray:
    kind = block_id[0]
    if kind == "alpha0_eta":
        _, g, s = block_id
        return np.array([params.alpha0[g, s], params.eta[g, s]])
    if kind == "alpha":
        return np.concatenate([params.alpha1.ravel(), [params.alpha2]])
    if kind == "beta":
        _, g, r, s = block_id
        return np.array([params.beta0[g, r, s], params.beta1[g, r, s]])
    if kind == "gamma":
        return params.gamma.copy()
    raise ValueError(f"unknown block {block_id!r}")


def _set_block(params: ModelParams, block_id: tuple, value) -> None:
    kind = block_id[0]
    if kind == "alpha0_eta":
        _, g, s = block_id
        params.alpha0[g, s], params.eta[g, s] = value
    elif kind == "alpha":
        params.alpha1 = np.asarray(value[:4], dtype=float).reshape(2, 2)
        params.alpha2 = float(value[4])
    elif kind == "beta":
        _, g, r, s = block_id
        params.beta0[g, r, s], params.beta1[g, r, s] = value
    elif kind == "gamma":
        params.gamma = np.asarray(value, dtype=float).copy()


def metropolis_update_block(
    block_id: tuple,
    params: ModelParams,
    ss: SuffStats,
    prior: PriorSpec,
    rng: np.random.Generator,
    step: float | np.ndarray = 0.05,
    proposal: np.ndarray | None = None,
) -> tuple[ModelParams, bool]:
    """Random-walk Metropolis update of a single block.

    ``block_id`` is one of ``("alpha0_eta", g, s)``, ``("alpha",)``,
    ``("beta", g, r, s)`` or ``("gamma",)``.  A proposal may be passed
    explicitly; otherwise a Gaussian step of scale ``step`` is drawn.
    """
    current = _get_block(params, block_id)
    if proposal is None:
        proposal = current + np.asarray(step) * rng.standard_normal(current.shape)
    trial = params.copy()
    _set_block(trial, block_id, proposal)
    delta = block_logpost(block_id, trial, ss, prior) - block_logpost(block_id, params, ss, prior)
    if not np.isfinite(delta):
        return params, False
    if delta >= 0 or np.log(rng.random()) < delta:
        return trial, True
    return params, False


class AdaptiveRW:
    """Vectorised random-walk proposals for ``n_groups`` independent blocks.

    During burn-in the log scale follows a Robbins-Monro recursion toward
    the target acceptance rate and the proposal shape tracks the empirical
    covariance of the block.  Both are frozen afterwards.
    """

    def __init__(self, n_groups: int, init_sd, target: float, window: int, cov_start: int):
        init_sd = np.asarray(init_sd, dtype=float)
        self.dim = init_sd.size
        self.chol = np.broadcast_to(np.diag(init_sd), (n_groups, self.dim, self.dim)).copy()
        self.log_scale = np.zeros(n_groups)
        self.target = target
        self.window = window
        self.cov_start = cov_start
        self._n = 0
        self._mean = np.zeros((n_groups, self.dim))
        self._m2 = np.zeros((n_groups, self.dim, self.dim))
        self.accepted = np.zeros(n_groups)
        self.tried = 0

    def propose(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(x.shape)
        return x + np.exp(self.log_scale)[:, None] * np.einsum("gij,gj->gi", self.chol, z)

    def adapt(self, accepted: np.ndarray, x: np.ndarray, k: int) -> None:
        self.log_scale += (accepted - self.target) / (k + 1) ** 0.6
        if k < self.cov_start:
            return
        self._n += 1
        d = x - self._mean
        self._mean += d / self._n
        self._m2 += np.einsum("gi,gj->gij", d, x - self._mean)
        if self._n >= max(2 * self.dim + 2, 20) and self._n % self.window == 0:
            cov = self._m2 / (self._n - 1)
            ridge = 1e-10 + 1e-6 * np.trace(cov, axis1=1, axis2=2)[:, None, None] / self.dim
            cov = cov + ridge * np.eye(self.dim)
            try:
                chol = np.linalg.cholesky(cov * (2.38**2 / self.dim))
            except np.linalg.LinAlgError:
                return
            self.chol = chol

    def record(self, accepted: np.ndarray) -> None:
        self.accepted += accepted
        self.tried += 1

    @property
    def acceptance(self) -> np.ndarray:
        return self.accepted / max(self.tried, 1)


# --- chains -------------------------------------------------------------------------


@dataclass
class ChainOutput:
    chain_index: int
    param_names: list[str]
    draws: np.ndarray  # (n_recorded, n_params)
    smoker_counts: np.ndarray  # (n_recorded, 32)
    cell_sizes: np.ndarray  # (32,)
    acceptance: dict = field(default_factory=dict)
    seconds_per_iteration: float = float("nan")
    mode: str = "MNAR"

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.param_names.index(name)]

    def prevalence(self) -> np.ndarray:
        """Prevalence (%) per recorded draw and cell."""
        return 100.0 * self.smoker_counts / self.cell_sizes


def suffstat_names() -> list[str]:
    return [f"smokers[{year},{r},{g}]" for year, r, g in cell_labels()]


def _jitter(params: ModelParams, rng: np.random.Generator, eta_free: bool) -> None:
    params.alpha0 += rng.uniform(-0.5, 0.5, params.alpha0.shape)
    if eta_free:
        params.eta += rng.uniform(-0.5, 0.5, params.eta.shape)
    params.alpha1 += rng.uniform(-0.01, 0.01, params.alpha1.shape)
    params.alpha2 += float(rng.uniform(-0.5, 0.5))
    params.beta0 += rng.uniform(-0.5, 0.5, params.beta0.shape)
    params.beta1 += rng.uniform(-0.02, 0.02, params.beta1.shape)
    if eta_free:
        params.gamma += rng.uniform(-0.5, 0.5, 2)


def chain_seed(master_seed: int, chain_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(chain_index,))


def run_chain(
    config: SamplerConfig,
    data: SurveyArrays | Sequence[PersonRecord],
    prior: PriorSpec = PriorSpec(),
    chain_index: int = 0,
) -> ChainOutput:
    """Run one chain; its random stream depends only on (seed, chain_index)."""
    if not isinstance(data, SurveyArrays):
        data = SurveyArrays.from_records(data)
    rng = np.random.default_rng(chain_seed(config.seed, chain_index))
    mnar = config.mode == "MNAR"
    tally = _Tally(data)
    miss = data.missing
    H = prior.hazard_upper

    params = ModelParams.zeros()
    _jitter(params, rng, eta_free=mnar)
    p0 = expit(smoking_logit(params, data.g[miss], data.r[miss], data.s[miss], data.age[miss]))
    y_miss = (rng.random(p0.shape) < p0).astype(np.int64)
    params.h0 = initial_hazard(tally.build(y_miss).table, H)

    burn = config.burn_in
    cov_start = burn // 4
    kw = dict(target=config.target_accept, window=config.adapt_window, cov_start=cov_start)
    rw_ae = AdaptiveRW(16, [0.1, 0.1], **kw)
    rw_al = AdaptiveRW(1, [0.005, 0.005, 0.005, 0.005, 0.05], **kw)
    rw_b = AdaptiveRW(32, [0.1, 0.005], **kw)
    rw_g = AdaptiveRW(2, [0.1, 0.05], **kw)
    # weights defining the overall hazard level: total person-years per bin
    level_w = tally.build(y_miss).table.exposure.sum(axis=1) + 1e-12

    n_rec = config.n_recorded
    names = parameter_names()
    draws = np.empty((n_rec, len(names)))
    counts = np.empty((n_rec, 32), dtype=np.int64)
    y = data.y_obs.copy()
    rec = 0
    total = burn + config.iterations
    t0 = time.perf_counter()

    for it in range(total):
        adapting = it < burn
        if it == burn:
            for rw in (rw_ae, rw_al, rw_b, rw_g):
                rw.accepted[:] = 0
                rw.tried = 0

        # 1. data augmentation
        p = imputation_probs(params, data, use_survival=mnar)
        y_miss = (rng.random(p.shape) < p).astype(np.int64)
        ss = tally.build(y_miss, with_table=mnar)

        # 2. (alpha0, eta) per (gender, year)
        cur = np.stack([params.alpha0.ravel(), params.eta.ravel()], axis=1)
        prop = rw_ae.propose(cur, rng)
        if not mnar:
            prop[:, 1] = 0.0
        lp_cur = _logpost_alpha0_eta(params.alpha0, params.eta, params, ss, prior, mnar).ravel()
        lp_new = _logpost_alpha0_eta(
            prop[:, 0].reshape(2, 8), prop[:, 1].reshape(2, 8), params, ss, prior, mnar
        ).ravel()
        acc = _accept(lp_new - lp_cur, rng)
        cur[acc] = prop[acc]
        params.alpha0 = cur[:, 0].reshape(2, 8).copy()
        params.eta = cur[:, 1].reshape(2, 8).copy()
        _step(rw_ae, acc, cur, it, adapting)

        # 3. (alpha1, alpha2)
        cur = np.concatenate([params.alpha1.ravel(), [params.alpha2]])[None, :]
        prop = rw_al.propose(cur, rng)
        lp_cur = _logpost_alpha12(params.alpha1, params.alpha2, params, ss, prior)
        lp_new = _logpost_alpha12(prop[0, :4].reshape(2, 2), prop[0, 4], params, ss, prior)
        acc = _accept(np.atleast_1d(lp_new - lp_cur), rng)
        if acc[0]:
            cur = prop
            params.alpha1 = prop[0, :4].reshape(2, 2).copy()
            params.alpha2 = float(prop[0, 4])
        _step(rw_al, acc, cur, it, adapting)

        # 4. (beta0, beta1) per (gender, region, year)
        cur = np.stack([params.beta0.ravel(), params.beta1.ravel()], axis=1)
        prop = rw_b.propose(cur, rng)
        lp_cur = _logpost_beta(params.beta0, params.beta1, ss, prior).ravel()
        lp_new = _logpost_beta(prop[:, 0].reshape(2, 2, 8), prop[:, 1].reshape(2, 2, 8), ss, prior).ravel()
        acc = _accept(lp_new - lp_cur, rng)
        cur[acc] = prop[acc]
        params.beta0 = cur[:, 0].reshape(2, 2, 8).copy()
        params.beta1 = cur[:, 1].reshape(2, 2, 8).copy()
        _step(rw_b, acc, cur, it, adapting)

        if mnar:
            # 5. gamma jointly with the level of the baseline hazard, per gender
            cur = np.stack([params.gamma, np.log(np.einsum("gt,gt->g", params.h0, level_w))], axis=1)
            prop = rw_g.propose(cur, rng)
            acc = _gamma_level_move(params, prop[:, 0], prop[:, 1] - cur[:, 1], ss, prior, rng)
            cur[acc] = prop[acc]
            _step(rw_g, acc, cur, it, adapting)

            # 6. baseline hazard
            _hazard_sweep(params.h0, params.gamma, ss.table, H, rng)

        if not adapting and (it - burn + 1) % config.thin == 0:
            draws[rec] = params.to_vector()
            counts[rec] = np.bincount(data.cell[miss], weights=y_miss, minlength=32).astype(np.int64)
            rec += 1

    elapsed = time.perf_counter() - t0
    counts += data.observed_smokers()[None, :]
    acceptance = {
        "alpha0_eta": rw_ae.acceptance.tolist(),
        "alpha": rw_al.acceptance.tolist(),
        "beta": rw_b.acceptance.tolist(),
    }
    if mnar:
        acceptance["gamma"] = rw_g.acceptance.tolist()
    _warn_acceptance(acceptance, chain_index)
    return ChainOutput(
        chain_index=chain_index,
        param_names=names,
        draws=draws,
        smoker_counts=counts,
        cell_sizes=data.cell_sizes(),
        acceptance=acceptance,
        seconds_per_iteration=elapsed / max(total, 1),
        mode=config.mode,
    )


def _accept(delta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(delta.shape)
    with np.errstate(invalid="ignore"):
        return np.isfinite(delta) & (np.log(u) < delta)


def _step(rw: AdaptiveRW, acc: np.ndarray, x: np.ndarray, it: int, adapting: bool) -> None:
    if adapting:
        rw.adapt(acc.astype(float), x, it)
    else:
        rw.record(acc.astype(float))


def _warn_acceptance(acceptance: dict, chain_index: int) -> None:
    for block, rates in acceptance.items():
        rates = np.asarray(rates)
        if rates.size and (rates.min() < 0.1 or rates.max() > 0.6):
            msg = (
                f"chain {chain_index}: block {block} acceptance outside [0.1, 0.6] "
                f"(min {rates.min():.3f}, max {rates.max():.3f})"
            )
            warnings.warn(msg, RuntimeWarning, stacklevel=3)


class ChainFailure(RuntimeError):
    def __init__(self, chain_index: int, cause: BaseException | str, data_error: bool | None = None):
        super().__init__(f"chain {chain_index} failed: {cause!r}" if isinstance(cause, BaseException) else cause)
        self.chain_index = chain_index
        self.data_error = isinstance(cause, DataError) if data_error is None else data_error

    def __reduce__(self):
        # keeps the exception picklable across worker processes
        return (ChainFailure, (self.chain_index, str(self), self.data_error))


def _run_chain_job(args):
    config, data, prior, index = args
    try:
        return run_chain(config, data, prior, index)
    except Exception as exc:  # noqa: BLE001 - re-raised with the chain index
        raise ChainFailure(index, exc) from exc


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return 1


def run_parallel(
    config: SamplerConfig,
    data: SurveyArrays | Sequence[PersonRecord],
    prior: PriorSpec = PriorSpec(),
    workers: int | None = None,
) -> list[ChainOutput]:
    """Run ``config.n_chains`` chains; outputs are ordered by chain index.

    Each chain's stream is derived from the master seed and its index only,
    so results do not depend on the number of worker processes.
    """
    if not isinstance(data, SurveyArrays):
        data = SurveyArrays.from_records(data)
    workers = default_workers() if workers is None else max(1, workers)
    jobs = [(config, data, prior, i) for i in range(config.n_chains)]
    if workers == 1 or config.n_chains == 1:
        return [_run_chain_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, config.n_chains)) as pool:
        return list(pool.map(_run_chain_job, jobs))


# --- persistence ----------------------------------------------------------------------


def write_chain_csv(out: ChainOutput, path: str | Path) -> None:
    header = ["draw", *out.param_names, *suffstat_names()]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(out.draws.shape[0]):
            writer.writerow([i, *map(repr, out.draws[i].tolist()), *out.smoker_counts[i].tolist()])


def read_chain_csv(path: str | Path, cell_sizes: np.ndarray, chain_index: int = 0, mode: str = "MNAR") -> ChainOutput:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    n_stat = 32
    names = header[1:-n_stat]
    if header[-n_stat:] != suffstat_names():
        raise ValueError(f"{path}: unexpected sufficient-statistic columns")
    arr = np.array([[float(v) for v in row[1:]] for row in rows]).reshape(len(rows), -1)
    return ChainOutput(
        chain_index=chain_index,
        param_names=names,
        draws=arr[:, : len(names)],
        smoker_counts=arr[:, len(names) :].astype(np.int64),
        cell_sizes=np.asarray(cell_sizes),
        mode=mode,
    )


def config_dict(config: SamplerConfig) -> dict:
    return asdict(config)
