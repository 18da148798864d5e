"""Synthetic survey + follow-up data drawn from the full selection model."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import AGE_RANGES, N_BINS, STUDY_YEARS, T_MAX, T_MIN, PersonRecord, cell_index
from .model import ModelParams, participation_logit, smoking_logit

DEFAULT_SCENARIO = "paper_shape_v1.json"
TRUTH_COLUMNS = ("study_year", "region", "gender", "true_prevalence_percent")


@dataclass
class ScenarioConfig:
    cell_sizes: np.ndarray  # (year, region, gender)
    params: ModelParams
    follow_up_end: int = 2012
    age_ranges: dict = field(default_factory=lambda: dict(AGE_RANGES))
    seed: int = 0
    mask_early_region: bool = False

    def __post_init__(self):
        self.cell_sizes = np.asarray(self.cell_sizes, dtype=np.int64)
        if self.cell_sizes.shape != (8, 2, 2):
            raise ValueError("cell_sizes must have shape (8 years, 2 regions, 2 genders)")
        if np.any(self.cell_sizes <= 0):
            raise ValueError("every cell size must be positive")
        self.params.validate()

    @property
    def total(self) -> int:
        return int(self.cell_sizes.sum())


def gompertz_hazard(at25, growth, upper: float = 20.0) -> np.ndarray:
    t = np.arange(N_BINS)
    h = np.asarray(at25, dtype=float)[:, None] * np.exp(np.asarray(growth, dtype=float)[:, None] * t)
    return np.minimum(h, upper)


def _params_from_scenario(spec: dict) -> ModelParams:
    spec = dict(spec)
    h0 = spec["h0"]
    if isinstance(h0, dict):
        if h0.get("kind") != "gompertz":
            raise ValueError(f"unsupported hazard kind {h0.get('kind')!r}")
        spec["h0"] = gompertz_hazard(h0["at25"], h0["growth"]).tolist()
    return ModelParams.from_dict(spec)


def read_scenario(path: str | Path | None = None) -> dict:
    if path is None:
        text = resources.files("mnarprev.scenarios").joinpath(DEFAULT_SCENARIO).read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def scenario_config(spec: dict, scale: float = 1.0, seed: int = 0, **overrides) -> ScenarioConfig:
    if not scale > 0:
        raise ValueError("scale must be positive")
    table = spec["cell_sizes"]
    sizes = np.zeros((8, 2, 2), dtype=np.int64)
    for i, year in enumerate(STUDY_YEARS):
        nk_m, nk_w, ns_m, ns_w = table[str(year)]
        for (r, g), n in zip(((0, 0), (0, 1), (1, 0), (1, 1)), (nk_m, nk_w, ns_m, ns_w)):
            sizes[i, r, g] = _round_half_up(scale * n)
    if np.any(sizes == 0):
        raise ValueError(f"scale {scale} rounds at least one cell to zero persons")
    return ScenarioConfig(
        cell_sizes=sizes,
        params=_params_from_scenario(spec["params"]),
        follow_up_end=int(spec.get("follow_up_end", 2012)),
        seed=seed,
        **overrides,
    )


def scenario_from_paper_shape(scale: float = 1.0, seed: int = 0, **overrides) -> ScenarioConfig:
    """Table-1 cell sizes times ``scale`` with the bundled default truth."""
    return scenario_config(read_scenario(), scale=scale, seed=seed, **overrides)


def _simulate_cell(config: ScenarioConfig, year: int, r: int, g: int, first_id: int):
    params = config.params
    s_idx = STUDY_YEARS.index(year)
    n = int(config.cell_sizes[s_idx, r, g])
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(cell_index(year, r, g),)))
    lo, hi = config.age_ranges[year]

    age = rng.integers(lo, hi + 1, size=n)
    y = (rng.random(n) < expit(smoking_logit(params, g, r, s_idx, age))).astype(np.int64)
    m = (rng.random(n) < expit(participation_logit(params, g, s_idx, age, r, y))).astype(np.int64)

    t_cens = age + (config.follow_up_end - year)
    window_end = np.minimum(t_cens, T_MAX)
    # event in bin t with probability 1 - exp(-lambda(t)) given survival to t,
    # i.e. the first bin where cumulative hazard passes an Exp(1) threshold
    threshold = rng.exponential(size=n)
    t_obs = t_cens.copy()
    event = np.zeros(n, dtype=np.int64)
    for yv in (0, 1):
        sel = np.flatnonzero(y == yv)
        lam = np.exp(params.gamma[g] * yv) * params.h0[g]
        cum = np.concatenate([[0.0], np.cumsum(lam)])
        target = cum[age[sel] - T_MIN] + threshold[sel]
        ev_bin = np.searchsorted(cum, target, side="left") - 1 + T_MIN
        hit = ev_bin < window_end[sel]
        t_obs[sel[hit]] = ev_bin[hit] + 1
        event[sel[hit]] = 1

    records = []
    for i in range(n):
        region = r
        if config.mask_early_region and m[i] == 0 and year in (1972, 1977):
            region = None
        records.append(
            PersonRecord(
                id=first_id + i,
                gender=g,
                region=region,
                study_year=year,
                age=int(age[i]),
                participation=int(m[i]),
                smoking=int(y[i]) if m[i] else None,
                event_flag=int(event[i]),
                t_obs=int(t_obs[i]),
                t_cens=int(t_cens[i]),
            )
        )
    return records, 100.0 * y.mean()


def simulate_dataset(config: ScenarioConfig) -> tuple[list[PersonRecord], np.ndarray]:
    """Draw one dataset.

    Returns the records and the realised prevalence (%) of every
    (year, region, gender) cell as an array of shape (8, 2, 2).  Each cell
    has its own random stream keyed on (seed, cell), so the output does not
    depend on the order or grouping in which cells are generated.
    """
    records: list[PersonRecord] = []
    truth = np.zeros((8, 2, 2))
    next_id = 1
    for s_idx, year in enumerate(STUDY_YEARS):
        for r in (0, 1):
            for g in (0, 1):
                cell_records, prev = _simulate_cell(config, year, r, g, next_id)
                records.extend(cell_records)
                truth[s_idx, r, g] = prev
                next_id += len(cell_records)
    return records, truth


def write_truth(truth: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRUTH_COLUMNS)
        for s_idx, year in enumerate(STUDY_YEARS):
            for r in (0, 1):
                for g in (0, 1):
                    writer.writerow([year, r, g, repr(float(truth[s_idx, r, g]))])


def read_truth(path: str | Path) -> np.ndarray:
    truth = np.full((8, 2, 2), np.nan)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRUTH_COLUMNS:
            raise ValueError(f"{path}: header must be {','.join(TRUTH_COLUMNS)}")
        for row in reader:
            s_idx = STUDY_YEARS.index(int(row["study_year"]))
            truth[s_idx, int(row["region"]), int(row["gender"])] = float(row["true_prevalence_percent"])
    if np.isnan(truth).any():
        raise ValueError(f"{path}: truth table is missing cells")
    return truth
