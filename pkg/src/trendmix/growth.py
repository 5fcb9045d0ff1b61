"""Generalized logistic growth curves.

The curve is ``h(t) = a * (1 + b * exp(-c t)) ** (-gamma)``.  Everything here
is evaluated through ``u = log(b) - c t`` and ``softplus(u) = log1p(exp(u))``
so that raw day offsets never overflow ``exp``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


@dataclass(frozen=True)
class LogisticParams:
    """Parameters ``(a, b, c, gamma)`` of one generalized logistic curve."""

    a: float
    b: float
    c: float
    gamma: float

    def __post_init__(self):
        for name in ("a", "b", "c", "gamma"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"logistic parameter {name} must be positive and finite, got {value!r}")

    def to_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.gamma], dtype=float)

    @classmethod
    def from_array(cls, values) -> "LogisticParams":
        a, b, c, gamma = (float(v) for v in values)
        return cls(a, b, c, gamma)

    def to_log(self) -> np.ndarray:
        return np.log(self.to_array())

    @classmethod
    def from_log(cls, log_values) -> "LogisticParams":
        return cls.from_array(np.exp(np.asarray(log_values, dtype=float)))


@dataclass(frozen=True)
class BivariateCurve:
    """Mean trend for (cases, deaths), one logistic curve per coordinate."""

    cases: LogisticParams
    deaths: LogisticParams

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.cases.to_array(), self.deaths.to_array()])

    @classmethod
    def from_array(cls, values) -> "BivariateCurve":
        values = np.asarray(values, dtype=float)
        return cls(LogisticParams.from_array(values[:4]), LogisticParams.from_array(values[4:]))

    def to_log(self) -> np.ndarray:
        return np.log(self.to_array())

    @classmethod
    def from_log(cls, log_values) -> "BivariateCurve":
        return cls.from_array(np.exp(np.asarray(log_values, dtype=float)))


def _softplus(u):
    return np.logaddexp(0.0, u)


def logistic_values(t, a, b, c, gamma):
    """Vectorized curve evaluation on raw parameter values."""
    u = np.log(b) - c * np.asarray(t, dtype=float)
    return a * np.exp(-gamma * _softplus(u))


def logistic_values_and_log_jacobian(t, log_params):
    """Curve values and partials with respect to ``(log a, log b, log c, log gamma)``.

    Returns ``(h, jac)`` with ``jac`` of shape ``(len(t), 4)``.  Used by the
    M-step optimizer, which works in log-parameter space.
    """
    a, b, c, gamma = np.exp(log_params)
    t = np.asarray(t, dtype=float)
    u = np.log(b) - c * t
    s = _softplus(u)
    h = a * np.exp(-gamma * s)
    sig = expit(u)
    jac = np.empty(t.shape + (4,))
    jac[..., 0] = h
    jac[..., 1] = -gamma * h * sig
    jac[..., 2] = gamma * h * sig * c * t
    jac[..., 3] = -gamma * s * h
    return h, jac


def eval_logistic(t, params: LogisticParams):
    """Evaluate the curve at ``t`` (scalar or array)."""
    out = logistic_values(t, params.a, params.b, params.c, params.gamma)
    return float(out) if np.ndim(out) == 0 else out


def inflection_point(params: LogisticParams) -> tuple[float, float]:
    """Closed-form inflection point ``(t0, y0)``.

    ``t0 = log(b * gamma) / c`` and ``y0 = a * (1 + 1/gamma) ** (-gamma)``.
    """
    t0 = np.log(params.b * params.gamma) / params.c
    y0 = params.a * np.exp(-params.gamma * np.log1p(1.0 / params.gamma))
    return float(t0), float(y0)


def eval_curve(t, curve: BivariateCurve):
    """Evaluate both coordinates; returns ``(cases, deaths)``."""
    return eval_logistic(t, curve.cases), eval_logistic(t, curve.deaths)


def curve_means(t, curve: BivariateCurve) -> np.ndarray:
    """Mean matrix of shape ``(len(t), 2)``."""
    t = np.asarray(t, dtype=float)
    p1, p2 = curve.cases, curve.deaths
    return np.stack(
        [logistic_values(t, p1.a, p1.b, p1.c, p1.gamma), logistic_values(t, p2.a, p2.b, p2.c, p2.gamma)],
        axis=-1,
    )


def logistic_gradient(t, params: LogisticParams) -> np.ndarray:
    """Partials ``(dh/da, dh/db, dh/dc, dh/dgamma)`` at a scalar or array ``t``.

    The last axis has length 4.
    """
    _, log_jac = logistic_values_and_log_jacobian(t, params.to_log())
    return log_jac / params.to_array()
