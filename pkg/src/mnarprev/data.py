"""Survey + follow-up records, CSV ingestion and person-year aggregation.

Each row is one invited person.  Smoking is observed only for participants;
follow-up (event indicator, exit age) is known for everybody.  Ages are whole
years; exposure accumulates in one-year bins ``[t, t + 1)`` for
``t = 25, ..., 100``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

STUDY_YEARS: tuple[int, ...] = (1972, 1977, 1982, 1987, 1992, 1997, 2002, 2007)
YEAR_INDEX = {year: i for i, year in enumerate(STUDY_YEARS)}

AGE_RANGES: dict[int, tuple[int, int]] = {year: (25, 64) for year in STUDY_YEARS}
AGE_RANGES[1972] = (25, 59)
AGE_RANGES[1977] = (30, 64)
MIN_AGE, MAX_AGE = 25, 64

T_MIN, T_MAX = 25, 100
N_BINS = T_MAX - T_MIN + 1

# study years whose non-participants lack region in the sampling frame
REGION_GAP_YEARS = (1972, 1977)

CSV_COLUMNS = (
    "id",
    "gender",
    "region",
    "study_year",
    "age",
    "participation",
    "smoking",
    "event_flag",
    "t_obs",
    "t_cens",
)

GENDER_LABELS = ("men", "women")
REGION_LABELS = ("NK", "NS")


class DataError(ValueError):
    """Raised for malformed rows or records that break the data invariants."""


@dataclass(frozen=True)
class PersonRecord:
    id: int
    gender: int
    region: int | None
    study_year: int
    age: int
    participation: int
    smoking: int | None
    event_flag: int
    t_obs: int
    t_cens: int

    @property
    def exit_age(self) -> int:
        """Right end of the exposure window after truncation at age 100."""
        return min(self.t_obs, T_MAX)

    @property
    def event_bin(self) -> int | None:
        """Age bin holding the event, or None if censored or beyond age 100."""
        if self.event_flag and self.t_obs <= T_MAX:
            return self.t_obs - 1
        return None


def validate_record(rec: PersonRecord) -> None:
    """Raise :class:`DataError` naming the first violated rule."""

    def fail(rule: str) -> None:
        raise DataError(f"record {rec.id}: {rule}")

    if rec.study_year not in YEAR_INDEX:
        fail(f"unknown study year {rec.study_year}")
    for name in ("gender", "participation", "event_flag"):
        if getattr(rec, name) not in (0, 1):
            fail(f"{name} must be 0 or 1")
    if rec.region is None:
        if rec.study_year not in REGION_GAP_YEARS or rec.participation == 1:
            fail("region missing outside non-participants of 1972/1977")
    elif rec.region not in (0, 1):
        fail("region must be 0 or 1")
    lo, hi = AGE_RANGES[rec.study_year]
    if not lo <= rec.age <= hi:
        fail(f"age {rec.age} outside admissible range {lo}-{hi} for {rec.study_year}")
    if rec.participation == 0 and rec.smoking is not None:
        fail("smoking present for non-participant")
    if rec.participation == 1 and rec.smoking not in (0, 1):
        fail("smoking missing for participant")
    if rec.t_obs < rec.age:
        fail("follow-up precedes entry")
    if rec.t_cens < rec.t_obs:
        fail("t_obs exceeds t_cens")
    if rec.event_flag == 0 and rec.t_obs != rec.t_cens:
        fail("censored record must have t_obs == t_cens")
    if rec.event_flag == 1 and rec.t_obs == rec.age:
        fail("event at entry age has no exposure")


def _parse_int(field: str, name: str, optional: bool = False) -> int | None:
    field = field.strip()
    if field == "":
        if optional:
            return None
        raise DataError(f"missing value for {name}")
    try:
        value = float(field)
    except ValueError:
        raise DataError(f"non-numeric value {field!r} for {name}") from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value for {name}")
    # fractional ages are floored to whole years
    return int(math.floor(value))


def parse_row(row: Sequence[str]) -> PersonRecord:
    if len(row) != len(CSV_COLUMNS):
        raise DataError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}")
    optional = {"region", "smoking"}
    values = {
        name: _parse_int(field, name, optional=name in optional)
        for name, field in zip(CSV_COLUMNS, row)
    }
    return PersonRecord(**values)


def load_dataset(path: str | Path) -> list[PersonRecord]:
    """Read and validate a dataset CSV.

    Raises
    ------
    DataError
        With the offending line number (header is line 1) for malformed rows,
        and the record id for invariant violations.
    """
    records = []
    seen: set[int] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise DataError(f"{path}: header must be {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rec = parse_row(row)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            validate_record(rec)
            if rec.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {rec.id}")
            seen.add(rec.id)
            records.append(rec)
    return records


def _fmt(value: int | None) -> str:
    return "" if value is None else str(value)


def dumps_dataset(records: Iterable[PersonRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        writer.writerow([_fmt(getattr(rec, name)) for name in CSV_COLUMNS])
    return buf.getvalue()


def write_dataset(records: Iterable[PersonRecord], path: str | Path) -> None:
    Path(path).write_text(dumps_dataset(records))


def impute_region_fixed(
    records: Sequence[PersonRecord],
    p1972: float = 0.495,
    p1977: float = 0.493,
    seed: int | None = 0,
) -> list[PersonRecord]:
    """Single imputation of missing region with fixed P(region = 1) per year.

    Only non-participants of 1972 and 1977 may lack region; they receive
    Northern Savonia (1) with the given probability and North Karelia
    otherwise.  Everything else is returned unchanged.
    """
    probs = {1972: p1972, 1977: p1977}
    for p in probs.values():
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability {p} outside [0, 1]")
    rng = np.random.default_rng(seed)
    out = []
    for rec in records:
        if rec.region is None:
            if rec.study_year not in probs or rec.participation == 1:
                raise DataError(f"record {rec.id}: missing region cannot be imputed")
            rec = replace(rec, region=int(rng.random() < probs[rec.study_year]))
        out.append(rec)
    return out


@dataclass
class RiskGroupTable:
    """Events and person-years by (gender, smoking, age bin 25..100)."""

    events: np.ndarray
    exposure: np.ndarray

    @classmethod
    def zeros(cls) -> "RiskGroupTable":
        return cls(
            np.zeros((2, 2, N_BINS), dtype=np.int64),
            np.zeros((2, 2, N_BINS), dtype=float),
        )

    def __add__(self, other: "RiskGroupTable") -> "RiskGroupTable":
        return RiskGroupTable(self.events + other.events, self.exposure + other.exposure)

    def __sub__(self, other: "RiskGroupTable") -> "RiskGroupTable":
        return RiskGroupTable(self.events - other.events, self.exposure - other.exposure)

    def equals(self, other: "RiskGroupTable", atol: float = 1e-9) -> bool:
        return bool(
            np.array_equal(self.events, other.events)
            and np.allclose(self.exposure, other.exposure, rtol=0, atol=atol)
        )


def aggregate_arrays(
    gender: np.ndarray,
    smoking: np.ndarray,
    entry: np.ndarray,
    exit: np.ndarray,
    event_bin: np.ndarray,
) -> RiskGroupTable:
    """Vectorised person-year tally.

    ``entry``/``exit`` are ages with ``exit`` already truncated at 100;
    ``event_bin`` is the event's age bin or -1 for no counted event.
    """
    gender = np.asarray(gender, dtype=np.int64)
    smoking = np.asarray(smoking, dtype=np.int64)
    group = 2 * gender + smoking
    stride = N_BINS + 1
    start = group * stride + (np.asarray(entry) - T_MIN)
    stop = group * stride + (np.asarray(exit) - T_MIN)
    size = 4 * stride
    # +1 at entry bin, -1 at exit bin; cumulative sum gives per-bin exposure
    delta = np.bincount(start, minlength=size) - np.bincount(stop, minlength=size)
    exposure = np.cumsum(delta.reshape(4, stride), axis=1)[:, :N_BINS]

    event_bin = np.asarray(event_bin)
    has_event = event_bin >= 0
    ev_idx = group[has_event] * N_BINS + (event_bin[has_event] - T_MIN)
    events = np.bincount(ev_idx, minlength=4 * N_BINS).reshape(4, N_BINS)
    return RiskGroupTable(
        events.reshape(2, 2, N_BINS).astype(np.int64),
        exposure.reshape(2, 2, N_BINS).astype(float),
    )


def aggregate_risk_groups(
    records: Sequence[PersonRecord], smoking: Mapping[int, int]
) -> RiskGroupTable:
    """Aggregate events and person-years under a complete smoking assignment.

    ``smoking`` maps record id to 0/1; it must cover non-participants too.
    """
    if not records:
        return RiskGroupTable.zeros()
    missing = [rec.id for rec in records if rec.id not in smoking]
    if missing:
        raise DataError(f"smoking assignment missing for ids {missing[:10]}")
    gender = np.array([rec.gender for rec in records])
    y = np.array([smoking[rec.id] for rec in records])
    entry = np.array([rec.age for rec in records])
    exit = np.array([rec.exit_age for rec in records])
    ev = np.array([-1 if rec.event_bin is None else rec.event_bin for rec in records])
    return aggregate_arrays(gender, y, entry, exit, ev)


def observed_assignment(records: Iterable[PersonRecord]) -> dict[int, int]:
    return {rec.id: rec.smoking for rec in records if rec.smoking is not None}


def cell_index(study_year: int, region: int, gender: int) -> int:
    """Flat index of a (year, region, gender) reporting cell, year-major."""
    return YEAR_INDEX[study_year] * 4 + region * 2 + gender


def cell_labels() -> list[tuple[int, int, int]]:
    return [(year, r, g) for year in STUDY_YEARS for r in (0, 1) for g in (0, 1)]


def cell_sizes(records: Iterable[PersonRecord]) -> np.ndarray:
    sizes = np.zeros(32, dtype=np.int64)
    for rec in records:
        if rec.region is None:
            raise DataError(f"record {rec.id}: region missing; impute before fitting")
        sizes[cell_index(rec.study_year, rec.region, rec.gender)] += 1
    return sizes
