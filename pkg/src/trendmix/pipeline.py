"""Ingestion and preprocessing of regional case/death series.

Raw cumulative counts are converted to rates per ``per`` inhabitants, each
region is aligned at its onset (first day the case rate reaches
``threshold``), and the aligned sequence becomes a :class:`Block`, the unit
of cluster assignment.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class RegionSeries:
    region_id: str
    dates: tuple
    cases: np.ndarray
    deaths: np.ndarray
    population: int

    def __post_init__(self):
        n = len(self.dates)
        if n < 1:
            raise DataError(f"region {self.region_id!r}: empty series")
        if len(self.cases) != n or len(self.deaths) != n:
            raise DataError(f"region {self.region_id!r}: dates, cases and deaths differ in length")
        for prev, cur in zip(self.dates, self.dates[1:]):
            if (cur - prev).days != 1:
                raise DataError(
                    f"region {self.region_id!r}: dates must be consecutive days, got {prev} -> {cur}"
                )
        if np.any(np.asarray(self.cases) < 0) or np.any(np.asarray(self.deaths) < 0):
            raise DataError(f"region {self.region_id!r}: negative counts")


@dataclass(frozen=True, eq=False)
class Block:
    """One region's aligned bivariate rate sequence.

    ``obs[:, 0]`` holds case rates and ``obs[:, 1]`` death rates.
    """

    region_id: str
    times: np.ndarray
    obs: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        obs = np.asarray(self.obs, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "obs", obs)
        if times.ndim != 1 or len(times) < 1:
            raise ValueError(f"block {self.region_id!r}: need at least one time point")
        if len(obs) != len(times):
            raise ValueError(f"block {self.region_id!r}: times and obs differ in length")
        if np.any(np.diff(times) <= 0):
            raise ValueError(f"block {self.region_id!r}: times must be strictly increasing")

    @property
    def n(self) -> int:
        return len(self.times)

    def __eq__(self, other):
        if not isinstance(other, Block):
            return NotImplemented
        return (
            self.region_id == other.region_id
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.obs, other.obs)
        )


@dataclass(frozen=True)
class PipelineConfig:
    threshold: float = 1.0
    per: float = 100_000.0
    time_scale: float | str = "auto"
    truncate_pre_onset: bool = True
    monotone_policy: str = "clamp"

    def __post_init__(self):
        if self.threshold <= 0 or self.per <= 0:
            raise ValueError("threshold and per must be positive")
        if self.time_scale != "auto" and not float(self.time_scale) > 0:
            raise ValueError("time_scale must be 'auto' or a positive number")
        if self.monotone_policy not in ("clamp", "strict"):
            raise ValueError("monotone_policy must be 'clamp' or 'strict'")


@dataclass
class Dataset:
    """Blocks ready for fitting plus the time scale that produced them."""

    blocks: list
    time_scale: float
    excluded: list = field(default_factory=list)

    @property
    def n_points(self) -> int:
        return sum(b.n for b in self.blocks)


def adjust_population(series: RegionSeries, per: float = 100_000.0) -> np.ndarray:
    """Counts as rates per ``per`` inhabitants, shape ``(n, 2)``."""
    if not series.population > 0:
        raise DataError(f"region {series.region_id!r}: population must be positive, got {series.population}")
    if not per > 0:
        raise ValueError("per must be positive")
    counts = np.column_stack([series.cases, series.deaths]).astype(float)
    return counts / series.population * per


def compute_onset(rates_cases, threshold: float = 1.0) -> int | None:
    """Index of the first rate reaching ``threshold``, or None."""
    rates = np.asarray(rates_cases, dtype=float)
    if rates.size == 0:
        raise ValueError("empty rate sequence")
    hits = np.flatnonzero(rates >= threshold)
    return int(hits[0]) if hits.size else None


def enforce_cumulative(series: RegionSeries, policy: str = "clamp") -> RegionSeries:
    """Repair (``clamp``: running maximum) or reject (``strict``) decreasing counts."""
    cases = np.asarray(series.cases)
    deaths = np.asarray(series.deaths)
    bad = np.any(np.diff(cases) < 0) or np.any(np.diff(deaths) < 0)
    if not bad:
        return series
    if policy == "strict":
        raise DataError(f"region {series.region_id!r}: cumulative counts decrease")
    logger.warning("region %s: decreasing cumulative counts clamped to running maximum", series.region_id)
    return RegionSeries(
        series.region_id,
        series.dates,
        np.maximum.accumulate(cases),
        np.maximum.accumulate(deaths),
        series.population,
    )


def onset_offsets(series: RegionSeries, threshold: float = 1.0, per: float = 100_000.0):
    """Rates, onset index and day offsets relative to onset (None if no onset)."""
    rates = adjust_population(series, per)
    onset = compute_onset(rates[:, 0], threshold)
    if onset is None:
        return rates, None, None
    days = np.array([(d - series.dates[onset]).days for d in series.dates], dtype=float)
    return rates, onset, days


def align_and_build(
    series: RegionSeries,
    threshold: float = 1.0,
    per: float = 100_000.0,
    time_scale: float = 1.0,
    truncate_pre_onset: bool = True,
) -> Block | None:
    """Align a region at its onset and rescale time; None if onset is never reached."""
    if not time_scale > 0:
        raise ValueError("time_scale must be positive")
    rates, onset, days = onset_offsets(series, threshold, per)
    if onset is None:
        logger.info("region %s never reaches %g per %g; excluded", series.region_id, threshold, per)
        return None
    if truncate_pre_onset:
        rates, days = rates[onset:], days[onset:]
    return Block(series.region_id, days / time_scale, rates)


# --- file ingestion ---------------------------------------------------------

SERIES_HEADER = ["region", "date", "cases", "deaths"]
POPULATION_HEADER = ["region", "population"]


def _parse_date(text: str, path, lineno: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: invalid ISO-8601 date {text!r}") from None


def _parse_count(text: str, what: str, path, lineno: int) -> int:
    try:
        value = int(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: {what} must be an integer, got {text!r}") from None
    if value < 0:
        raise DataError(f"{path}:{lineno}: {what} must be nonnegative, got {value}")
    return value


def _read_rows(path, header):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [h.strip() for h in first] != header:
            raise DataError(f"{path}:1: expected header {','.join(header)}, got {','.join(first)}")
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, [cell.strip() for cell in row]


def read_population(path) -> dict:
    population = {}
    seen = {}
    for lineno, (region, pop) in _read_rows(path, POPULATION_HEADER):
        if region in seen:
            raise DataError(f"{path}: duplicate population for {region!r} on lines {seen[region]} and {lineno}")
        value = _parse_count(pop, "population", path, lineno)
        if value <= 0:
            raise DataError(f"{path}:{lineno}: population of {region!r} must be positive")
        seen[region] = lineno
        population[region] = value
    return population


def read_series(path, population: dict) -> list[RegionSeries]:
    """Parse the series CSV and join with population; regions sorted by id."""
    rows = {}
    seen = {}
    for lineno, (region, date_text, cases, deaths) in _read_rows(path, SERIES_HEADER):
        date = _parse_date(date_text, path, lineno)
        key = (region, date)
        if key in seen:
            raise DataError(f"{path}: duplicate row for region {region!r} date {date} on lines {seen[key]} and {lineno}")
        seen[key] = lineno
        rows.setdefault(region, []).append(
            (date, _parse_count(cases, "cases", path, lineno), _parse_count(deaths, "deaths", path, lineno))
        )
    if not rows:
        raise DataError(f"{path}: no data rows")
    missing = sorted(r for r in rows if r not in population)
    if missing:
        raise DataError(f"no population record for region(s): {', '.join(missing)}")
    out = []
    for region in sorted(rows):
        recs = sorted(rows[region])
        out.append(
            RegionSeries(
                region,
                tuple(r[0] for r in recs),
                np.array([r[1] for r in recs], dtype=np.int64),
                np.array([r[2] for r in recs], dtype=np.int64),
                population[region],
            )
        )
    return out


def build_dataset(series_list, config: PipelineConfig = PipelineConfig()) -> Dataset:
    """Align every region and apply the (possibly automatic) time scale."""
    aligned = []
    excluded = []
    for series in series_list:
        series = enforce_cumulative(series, config.monotone_policy)
        block = align_and_build(series, config.threshold, config.per, 1.0, config.truncate_pre_onset)
        if block is None:
            excluded.append(series.region_id)
        else:
            aligned.append(block)
    if config.time_scale == "auto":
        max_offset = max((b.times[-1] for b in aligned), default=0.0)
        scale = float(max_offset) if max_offset > 0 else 1.0
    else:
        scale = float(config.time_scale)
    blocks = [Block(b.region_id, b.times / scale, b.obs) for b in aligned]
    return Dataset(blocks, scale, excluded)


def load_dataset(series_path, population_path, config: PipelineConfig = PipelineConfig()) -> Dataset:
    population = read_population(population_path)
    return build_dataset(read_series(series_path, population), config)


# --- block export -----------------------------------------------------------


def blocks_to_json(blocks, time_scale: float) -> str:
    payload = {
        "time_scale": float(time_scale),
        "blocks": [
            {
                "region": b.region_id,
                "times": b.times.tolist(),
                "cases": b.obs[:, 0].tolist(),
                "deaths": b.obs[:, 1].tolist(),
            }
            for b in blocks
        ],
    }
    return json.dumps(payload, indent=1)


def blocks_from_json(text: str) -> Dataset:
    payload = json.loads(text)
    blocks = [
        Block(entry["region"], np.array(entry["times"], dtype=float), np.column_stack([entry["cases"], entry["deaths"]]))
        for entry in payload["blocks"]
    ]
    return Dataset(blocks, float(payload["time_scale"]))
