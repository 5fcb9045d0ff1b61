"""Regenerate the bundled 6-region smoke-test fixture (two trend groups)."""

import csv
import datetime as dt
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "trendmix" / "data"

# per-100k trends in day units: (a, b, c, gamma) for cases and deaths
GROUPS = {
    "low": ((300.0, 60.0, 0.12, 1.0), (15.0, 300.0, 0.13, 1.0)),
    "high": ((1500.0, 400.0, 0.15, 1.0), (120.0, 2500.0, 0.16, 1.0)),
}
REGIONS = [
    ("alpha", "low", 2_100_000, dt.date(2020, 3, 1), 58),
    ("bravo", "low", 5_400_000, dt.date(2020, 3, 4), 52),
    ("charlie", "low", 870_000, dt.date(2020, 3, 2), 55),
    ("delta", "high", 9_700_000, dt.date(2020, 2, 26), 60),
    ("echo", "high", 3_300_000, dt.date(2020, 3, 3), 54),
    ("foxtrot", "high", 12_800_000, dt.date(2020, 2, 28), 57),
]


def logistic(t, a, b, c, g):
    return a * (1.0 + b * np.exp(-c * t)) ** (-g)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    with open(OUT / "fixture_series.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "date", "cases", "deaths"])
        for name, group, pop, start, ndays in REGIONS:
            cases_p, deaths_p = GROUPS[group]
            t = np.arange(ndays, dtype=float) - 20.0
            rates = np.column_stack([logistic(t, *cases_p), logistic(t, *deaths_p)])
            # count rounding is the only noise, so onset days agree within a group
            counts = np.round(rates * pop / 1e5).astype(int)
            for i in range(ndays):
                day = start + dt.timedelta(days=i)
                w.writerow([name, day.isoformat(), counts[i, 0], counts[i, 1]])
    with open(OUT / "fixture_population.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "population"])
        for name, _, pop, _, _ in REGIONS:
            w.writerow([name, pop])


if __name__ == "__main__":
    main()
