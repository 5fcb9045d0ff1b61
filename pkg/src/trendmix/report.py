"""Tables and curve exports for fitted models."""

from __future__ import annotations

import csv
import io

import numpy as np

from .growth import eval_logistic, inflection_point
from .mixture import MixtureModel, Posteriors

PARAM_COLUMNS = ["k", "pi", "a1", "a2", "b1", "b2", "c1", "c2", "gamma1", "gamma2", "sigma1", "sigma2", "rho"]
CURVE_COLUMNS = ["k", "variable", "t_days", "value"]
KEYPOINT_COLUMNS = ["k", "variable", "t0_days", "y0", "asymptote"]
VARIABLES = ("cases", "deaths")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def param_rows(model: MixtureModel) -> list[list]:
    """One row per component, ordered by ascending case capacity; k is 1-based."""
    rows = []
    for k, idx in enumerate(model.capacity_order(), start=1):
        comp = model.components[idx]
        p1, p2 = comp.curve.cases, comp.curve.deaths
        s1, s2, rho = comp.sigma.sd
        rows.append([k, model.weights[idx], p1.a, p2.a, p1.b, p2.b, p1.c, p2.c, p1.gamma, p2.gamma, s1, s2, rho])
    return rows


def param_table_csv(model: MixtureModel, decimals: int = 3) -> str:
    rows = [[r[0]] + [f"{v:.{decimals}f}" for v in r[1:]] for r in param_rows(model)]
    return _csv_text(PARAM_COLUMNS, rows)


def curve_rows(model: MixtureModel, t_min: float = 0.0, t_max: float = 1.0, n_grid: int = 200) -> list[list]:
    """Mean curves on an even grid of scaled time, reported in days."""
    grid = np.linspace(t_min, t_max, n_grid)
    rows = []
    for k, idx in enumerate(model.capacity_order(), start=1):
        curve = model.components[idx].curve
        for name, params in zip(VARIABLES, (curve.cases, curve.deaths)):
            values = eval_logistic(grid, params)
            for t, v in zip(grid, values):
                rows.append([k, name, repr(float(t * model.time_scale)), repr(float(v))])
    return rows


def curve_csv(model: MixtureModel, t_min: float = 0.0, t_max: float = 1.0, n_grid: int = 200) -> str:
    return _csv_text(CURVE_COLUMNS, curve_rows(model, t_min, t_max, n_grid))


def keypoint_rows(model: MixtureModel) -> list[list]:
    rows = []
    for k, idx in enumerate(model.capacity_order(), start=1):
        curve = model.components[idx].curve
        for name, params in zip(VARIABLES, (curve.cases, curve.deaths)):
            t0, y0 = inflection_point(params)
            rows.append([k, name, repr(t0 * model.time_scale), repr(y0), repr(params.a)])
    return rows


def keypoint_csv(model: MixtureModel) -> str:
    return _csv_text(KEYPOINT_COLUMNS, keypoint_rows(model))


def assignments_csv(posteriors: Posteriors, unassignable=()) -> str:
    """``region,label,posterior_1..K`` with 1-based labels; ties go to the lower label."""
    m = posteriors.matrix
    K = m.shape[1]
    header = ["region", "label"] + [f"posterior_{k}" for k in range(1, K + 1)]
    rows = []
    for rid, row in zip(posteriors.region_ids, m):
        rows.append([rid, int(np.argmax(row)) + 1] + [repr(float(p)) for p in row])
    for rid in unassignable:
        rows.append([rid, "NA"] + [""] * K)
    return _csv_text(header, rows)
