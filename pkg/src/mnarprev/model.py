"""Likelihood terms and priors of the selection model.

Three logistic/Poisson submodels share the smoking indicator ``y``:

* participation: ``logit P(M=1) = alpha0[g,s] + eta[g,s] y + alpha1[g,y] (a - 45) + alpha2 r``
* smoking:       ``logit P(Y=1) = beta0[g,r,s] + beta1[g,r,s] (s - a - 1938)``
* follow-up:     ``dN(t) ~ Poisson(exp(gamma_g y) h0[g,t])`` on one-year age bins

Year arguments named ``s`` are calendar years (1972, ...); arrays are indexed
by position in :data:`~mnarprev.data.STUDY_YEARS`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, logit

from .data import (
    MAX_AGE,
    MIN_AGE,
    N_BINS,
    STUDY_YEARS,
    T_MAX,
    T_MIN,
    YEAR_INDEX,
    PersonRecord,
    RiskGroupTable,
)

AGE_CENTRE = 45
BIRTH_YEAR_CENTRE = 1938
N_AGES = MAX_AGE - MIN_AGE + 1

YEARS = np.array(STUDY_YEARS)


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class ModelParams:
    alpha0: np.ndarray  # (gender, year)
    eta: np.ndarray  # (gender, year)
    alpha1: np.ndarray  # (gender, smoking)
    alpha2: float
    beta0: np.ndarray  # (gender, region, year)
    beta1: np.ndarray  # (gender, region, year)
    gamma: np.ndarray  # (men, women)
    h0: np.ndarray  # (gender, age bin 25..100)

    @classmethod
    def zeros(cls) -> "ModelParams":
        return cls(
            alpha0=np.zeros((2, 8)),
            eta=np.zeros((2, 8)),
            alpha1=np.zeros((2, 2)),
            alpha2=0.0,
            beta0=np.zeros((2, 2, 8)),
            beta1=np.zeros((2, 2, 8)),
            gamma=np.zeros(2),
            h0=np.zeros((2, N_BINS)),
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.alpha0.copy(),
            self.eta.copy(),
            self.alpha1.copy(),
            float(self.alpha2),
            self.beta0.copy(),
            self.beta1.copy(),
            self.gamma.copy(),
            self.h0.copy(),
        )

    @property
    def gamma1(self) -> float:
        return float(self.gamma[0])

    @property
    def gamma2(self) -> float:
        return float(self.gamma[1])

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.alpha0.ravel(),
                self.eta.ravel(),
                self.alpha1.ravel(),
                [self.alpha2],
                self.beta0.ravel(),
                self.beta1.ravel(),
                self.gamma,
                self.h0.ravel(),
            ]
        )

    @classmethod
    def from_vector(cls, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} values, got {vec.shape}")
        out, pos = [], 0
        for shape in _SHAPES:
            size = int(np.prod(shape))
            out.append(vec[pos : pos + size].reshape(shape).copy())
            pos += size
        alpha0, eta, alpha1, alpha2, beta0, beta1, gamma, h0 = out
        return cls(alpha0, eta, alpha1, float(alpha2[0]), beta0, beta1, gamma, h0)

    def to_dict(self) -> dict:
        return {
            "alpha0": self.alpha0.tolist(),
            "eta": self.eta.tolist(),
            "alpha1": self.alpha1.tolist(),
            "alpha2": self.alpha2,
            "beta0": self.beta0.tolist(),
            "beta1": self.beta1.tolist(),
            "gamma": self.gamma.tolist(),
            "h0": self.h0.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        params = cls(
            alpha0=np.array(d["alpha0"], dtype=float),
            eta=np.array(d["eta"], dtype=float),
            alpha1=np.array(d["alpha1"], dtype=float),
            alpha2=float(d["alpha2"]),
            beta0=np.array(d["beta0"], dtype=float),
            beta1=np.array(d["beta1"], dtype=float),
            gamma=np.array(d["gamma"], dtype=float),
            h0=np.array(d["h0"], dtype=float),
        )
        for name, shape in zip(PARAM_BLOCKS, _SHAPES):
            got = np.shape(getattr(params, name))
            if name != "alpha2" and got != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {got}")
        return params

    def validate(self, hazard_upper: float = 20.0) -> None:
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("non-finite model parameter")
        if not hazard_is_admissible(self.h0, hazard_upper):
            raise ValueError("baseline hazard must be nondecreasing within [0, upper]")


PARAM_BLOCKS = ("alpha0", "eta", "alpha1", "alpha2", "beta0", "beta1", "gamma", "h0")
_SHAPES = ((2, 8), (2, 8), (2, 2), (1,), (2, 2, 8), (2, 2, 8), (2,), (2, N_BINS))
N_PARAMS = sum(int(np.prod(s)) for s in _SHAPES)


def parameter_names() -> list[str]:
    names = []
    names += [f"alpha0[{g},{y}]" for g in (0, 1) for y in STUDY_YEARS]
    names += [f"eta[{g},{y}]" for g in (0, 1) for y in STUDY_YEARS]
    names += [f"alpha1[{g},{y}]" for g in (0, 1) for y in (0, 1)]
    names += ["alpha2"]
    names += [f"beta0[{g},{r},{y}]" for g in (0, 1) for r in (0, 1) for y in STUDY_YEARS]
    names += [f"beta1[{g},{r},{y}]" for g in (0, 1) for r in (0, 1) for y in STUDY_YEARS]
    names += ["gamma1", "gamma2"]
    names += [f"h0[{g},{t}]" for g in (0, 1) for t in range(T_MIN, T_MAX + 1)]
    return names


def is_coefficient(name: str) -> bool:
    """Everything except the baseline hazard curve."""
    return not name.startswith("h0[")


@dataclass(frozen=True)
class PriorSpec:
    eta_scale: float = 1 / 2.05
    coef_variance: float = 1000.0
    hazard_upper: float = 20.0

    def __post_init__(self):
        for name in ("eta_scale", "coef_variance", "hazard_upper"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def _year_idx(s: int) -> int:
    try:
        return YEAR_INDEX[s]
    except KeyError:
        raise ValueError(f"unknown study year {s}") from None


def _binary(value, name):
    if value not in (0, 1):
        raise ValueError(f"{name} must be 0 or 1, got {value!r}")


def participation_logit(params, g, s_idx, a, r, y):
    """Vectorised linear predictor of participation (index-based)."""
    return (
        params.alpha0[g, s_idx]
        + params.eta[g, s_idx] * y
        + params.alpha1[g, y] * (a - AGE_CENTRE)
        + params.alpha2 * r
    )


def participation_prob(params: ModelParams, g: int, s: int, a: int, r: int, y: int) -> float:
    for value, name in ((g, "gender"), (r, "region"), (y, "smoking")):
        _binary(value, name)
    return float(expit(participation_logit(params, g, _year_idx(s), a, r, y)))


def birth_cohort(s, a):
    """Birth year centred at 1938."""
    return s - a - BIRTH_YEAR_CENTRE


def smoking_logit(params, g, r, s_idx, a):
    """Vectorised linear predictor of smoking (index-based)."""
    return params.beta0[g, r, s_idx] + birth_cohort(YEARS[s_idx], a) * params.beta1[g, r, s_idx]


def smoking_prob(params: ModelParams, g: int, r: int, s: int, a: int) -> float:
    _binary(g, "gender")
    _binary(r, "region")
    return float(expit(smoking_logit(params, g, r, _year_idx(s), a)))


def hazard_curve(params: ModelParams, g: int, y) -> np.ndarray:
    """Hazard over all bins 25..100 for gender ``g`` and smoking ``y``."""
    return np.exp(params.gamma[g] * y) * params.h0[g]


def hazard(params: ModelParams, g: int, y: int, t: int) -> float:
    if not T_MIN <= t <= T_MAX:
        raise ValueError(f"age {t} outside hazard grid {T_MIN}-{T_MAX}")
    return float(hazard_curve(params, g, y)[t - T_MIN])


def loglik_survival(params: ModelParams, table: RiskGroupTable) -> float:
    """Poisson log-likelihood of aggregated events given person-years."""
    return float(loglik_survival_by_gender(params, table).sum())


def loglik_survival_by_gender(params: ModelParams, table: RiskGroupTable) -> np.ndarray:
    D, E = table.events, table.exposure
    if np.any((D > 0) & (E <= 0)):
        raise ValueError("events recorded in a cell without exposure")
    lam = np.exp(params.gamma[:, None, None] * np.array([0, 1])[None, :, None]) * params.h0[:, None, :]
    mu = lam * E
    with np.errstate(divide="ignore", invalid="ignore"):
        log_term = np.where(D > 0, D * np.log(mu), 0.0)
    terms = log_term - mu - gammaln(D + 1)
    return terms.sum(axis=(1, 2))


def logistic_logpdf(x, scale: float, loc: float = 0.0):
    z = np.abs((np.asarray(x) - loc) / scale)
    return -math.log(scale) - z - 2.0 * np.log1p(np.exp(-z))


def normal_logpdf(x, variance: float):
    x = np.asarray(x)
    return -0.5 * math.log(2 * math.pi * variance) - x * x / (2 * variance)


def hazard_is_admissible(h0: np.ndarray, upper: float = 20.0) -> bool:
    h0 = np.asarray(h0)
    return bool(np.all(h0[..., 0] >= 0) and np.all(np.diff(h0, axis=-1) >= 0) and np.all(h0 <= upper))


def hazard_logprior(h0: np.ndarray, upper: float = 20.0) -> float:
    """Sequential-uniform prior: h(25) ~ U(0, upper), h(t) ~ U(h(t-1), upper)."""
    if not hazard_is_admissible(h0, upper):
        return -math.inf
    width = upper - np.asarray(h0)[..., :-1]
    if np.any(width <= 0):
        return -math.inf
    n_curves = int(np.prod(np.shape(h0)[:-1]))
    return float(-n_curves * math.log(upper) - np.log(width).sum())


def eta_prior_pushforward(
    n: int,
    base_prob: float = 0.7,
    prior: PriorSpec = PriorSpec(),
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Participation probability implied by the eta prior around a base rate.

    Draws ``eta`` from its logistic prior and returns
    ``invlogit(logit(base_prob) + eta)``: what the prior says about the
    participation probability of smokers when non-smokers participate with
    probability ``base_prob``.
    """
    rng = np.random.default_rng() if rng is None else rng
    eta = rng.logistic(0.0, prior.eta_scale, size=n)
    return expit(logit(base_prob) + eta)


def logprior(params: ModelParams, prior: PriorSpec = PriorSpec()) -> float:
    """Joint log prior density; ``-inf`` marks an inadmissible hazard curve."""
    hz = hazard_logprior(params.h0, prior.hazard_upper)
    if hz == -math.inf:
        return hz
    v = prior.coef_variance
    coef = np.concatenate(
        [
            params.alpha0.ravel(),
            params.alpha1.ravel(),
            [params.alpha2],
            params.beta0.ravel(),
            params.beta1.ravel(),
            params.gamma,
        ]
    )
    return float(
        logistic_logpdf(params.eta, prior.eta_scale).sum() + normal_logpdf(coef, v).sum() + hz
    )


# --- aggregated likelihoods used by the sampler -------------------------------

# broadcast helpers over participation-count axes (gender, year, smoking, region, age)
_Y5 = np.array([0, 1]).reshape(1, 1, 2, 1, 1)
_R5 = np.array([0, 1]).reshape(1, 1, 1, 2, 1)
_A5 = (np.arange(MIN_AGE, MAX_AGE + 1) - AGE_CENTRE).reshape(1, 1, 1, 1, N_AGES)
# smoking-count axes (gender, region, year, age)
_COHORT4 = birth_cohort(YEARS.reshape(1, 1, 8, 1), np.arange(MIN_AGE, MAX_AGE + 1).reshape(1, 1, 1, N_AGES))


@dataclass
class ParticipationCounts:
    """Invited (``n``) and participating (``m``) persons by (g, s, y, r, age)."""

    n: np.ndarray = field(default_factory=lambda: np.zeros((2, 8, 2, 2, N_AGES)))
    m: np.ndarray = field(default_factory=lambda: np.zeros((2, 8, 2, 2, N_AGES)))


@dataclass
class SmokingCounts:
    """Persons (``n``) and smokers (``k``) by (g, r, s, age)."""

    n: np.ndarray = field(default_factory=lambda: np.zeros((2, 2, 8, N_AGES)))
    k: np.ndarray = field(default_factory=lambda: np.zeros((2, 2, 8, N_AGES)))


def participation_logit_grid(alpha0, eta, alpha1, alpha2):
    return (
        alpha0[:, :, None, None, None]
        + eta[:, :, None, None, None] * _Y5
        + alpha1[:, None, :, None, None] * _A5
        + alpha2 * _R5
    )


def loglik_participation_groups(alpha0, eta, alpha1, alpha2, counts: ParticipationCounts) -> np.ndarray:
    """Bernoulli log-likelihood of participation summed within each (g, s)."""
    lp = participation_logit_grid(alpha0, eta, alpha1, alpha2)
    return (counts.m * lp - counts.n * softplus(lp)).sum(axis=(2, 3, 4))


def loglik_smoking_groups(beta0, beta1, counts: SmokingCounts) -> np.ndarray:
    """Bernoulli log-likelihood of smoking summed within each (g, r, s)."""
    lp = beta0[..., None] + beta1[..., None] * _COHORT4
    return (counts.k * lp - counts.n * softplus(lp)).sum(axis=-1)


def loglik_participation(params: ModelParams, counts: ParticipationCounts) -> float:
    return float(loglik_participation_groups(params.alpha0, params.eta, params.alpha1, params.alpha2, counts).sum())


def loglik_smoking(params: ModelParams, counts: SmokingCounts) -> float:
    return float(loglik_smoking_groups(params.beta0, params.beta1, counts).sum())


# --- imputation of smoking for non-participants --------------------------------


def person_survival_loglik(params: ModelParams, g: int, y: int, entry: int, exit: int, event_bin: int | None) -> float:
    """One person's Poisson interval log-likelihood over bins [entry, exit)."""
    lam = hazard_curve(params, g, y)
    bins = np.arange(entry, exit) - T_MIN
    ll = -lam[bins].sum()
    if event_bin is not None:
        ll += math.log(lam[event_bin - T_MIN])
    return float(ll)


def full_conditional_smoking(params: ModelParams, person: PersonRecord, use_survival: bool = True) -> float:
    """P(Y = 1 | M = 0, X, follow-up) for one non-participant."""
    if person.participation != 0:
        raise ValueError(f"record {person.id} participated; its smoking is observed")
    if person.region is None:
        raise ValueError(f"record {person.id}: region missing")
    g, r, s, a = person.gender, person.region, person.study_year, person.age
    logw = []
    for y in (0, 1):
        py = smoking_prob(params, g, r, s, a)
        pm0 = 1.0 - participation_prob(params, g, s, a, r, y)
        lw = math.log(py if y else 1.0 - py) + math.log(pm0)
        if use_survival:
            lw += person_survival_loglik(params, g, y, person.age, person.exit_age, person.event_bin)
        logw.append(lw)
    return float(expit(logw[1] - logw[0]))


def cumulative_baseline(h0: np.ndarray) -> np.ndarray:
    """Per gender, ``C[g, k] = sum(h0[g, :k])`` so bins [i, j) sum to C[j] - C[i]."""
    return np.concatenate([np.zeros((2, 1)), np.cumsum(h0, axis=1)], axis=1)


def smoking_conditional_logodds(
    params: ModelParams,
    g: np.ndarray,
    r: np.ndarray,
    s_idx: np.ndarray,
    a: np.ndarray,
    entry: np.ndarray,
    exit: np.ndarray,
    has_event: np.ndarray,
    use_survival: bool = True,
) -> np.ndarray:
    """Vectorised log-odds of Y = 1 for non-participants.

    Same quantity as :func:`full_conditional_smoking`; the baseline hazard of
    the event bin cancels between y = 0 and y = 1.
    """
    lo = smoking_logit(params, g, r, s_idx, a)
    lp1 = participation_logit(params, g, s_idx, a, r, 1)
    lp0 = participation_logit(params, g, s_idx, a, r, 0)
    # log(1 - expit(x)) = -softplus(x)
    lo = lo - softplus(lp1) + softplus(lp0)
    if use_survival:
        C = cumulative_baseline(params.h0)
        H = C[g, exit - T_MIN] - C[g, entry - T_MIN]
        gam = params.gamma[g]
        lo = lo - np.expm1(gam) * H + has_event * gam
    return lo
