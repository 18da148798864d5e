"""Prevalence trend tables: one row per (year, method), four region x gender cells."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import STUDY_YEARS

TREND_COLUMNS = ("year", "method", "NK-men", "NK-women", "NS-men", "NS-women")
# (region, gender) in column order
CELL_ORDER = ((0, 0), (0, 1), (1, 0), (1, 1))

METHODS = ("Bayes+MAR", "Bayes+MNAR", "Complete case", "MI", "True")


@dataclass
class TrendTable:
    """Prevalence (%) per (year, region, gender); bounds may be NaN."""

    method: str
    estimate: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.estimate = np.asarray(self.estimate, dtype=float)
        if self.estimate.shape != (8, 2, 2):
            raise ValueError(f"trend table must have shape (8, 2, 2), got {self.estimate.shape}")
        if self.lower is None:
            self.lower = np.full((8, 2, 2), np.nan)
        if self.upper is None:
            self.upper = np.full((8, 2, 2), np.nan)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)

    def covers(self, truth: np.ndarray) -> np.ndarray:
        return (self.lower <= truth) & (truth <= self.upper)

    def cell(self, year: int, region: int, gender: int) -> tuple[float, float, float]:
        i = STUDY_YEARS.index(year)
        return self.estimate[i, region, gender], self.lower[i, region, gender], self.upper[i, region, gender]


def format_cell(est: float, lo: float = math.nan, hi: float = math.nan) -> str:
    if math.isnan(est):
        return "NA"
    if math.isnan(lo) or math.isnan(hi):
        return f"{est:.1f}"
    return f"{est:.1f} ({lo:.1f}, {hi:.1f})"


def trend_rows(tables: Iterable[TrendTable]) -> list[list[str]]:
    """Rows grouped by year, methods in the order given."""
    tables = list(tables)
    rows = []
    for i, year in enumerate(STUDY_YEARS):
        for t in tables:
            cells = [format_cell(t.estimate[i, r, g], t.lower[i, r, g], t.upper[i, r, g]) for r, g in CELL_ORDER]
            rows.append([str(year), t.method, *cells])
    return rows


def write_trend_csv(tables: Iterable[TrendTable], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TREND_COLUMNS)
        writer.writerows(trend_rows(tables))


def trend_markdown(tables: Iterable[TrendTable]) -> str:
    lines = ["| " + " | ".join(TREND_COLUMNS) + " |", "|" + "---|" * len(TREND_COLUMNS)]
    lines += ["| " + " | ".join(row) + " |" for row in trend_rows(tables)]
    return "\n".join(lines) + "\n"


def from_flat(values: np.ndarray) -> np.ndarray:
    """Reshape 32 cells in (year, region, gender) order to (8, 2, 2)."""
    return np.asarray(values, dtype=float).reshape(8, 2, 2)
