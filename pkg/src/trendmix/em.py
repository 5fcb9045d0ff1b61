"""Block-constrained EM for mixtures of bivariate logistic regressions.

One iteration is: E-step over blocks, then the conditional M-steps in the
order weights -> curves (holding the previous covariances) -> covariances
(at the new curves).  Each sub-step cannot decrease the Q-function, so the
observed-data log-likelihood is nondecreasing (generalized EM).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize

from .growth import BivariateCurve, curve_means, logistic_values_and_log_jacobian
from .mixture import (
    Component,
    Covariance2,
    MixtureModel,
    Posteriors,
    as_stacked,
    classify,
    n_free_params,
    normalize_scores,
    score_matrix,
)

logger = logging.getLogger(__name__)

# observations whose block weight falls below this are left out of the curve fit
_MIN_OBS_WEIGHT = 1e-12
_LOG_PARAM_LIMIT = 60.0
_BAD_RESIDUAL = 1e100

# reasons recorded on spurious runs
COLLAPSED = "collapsed covariance"
NEAR_EMPTY = "near-empty component"
NON_FINITE = "non-finite log-likelihood"


class SpuriousSolution(Exception):
    """A degenerate EM state: collapsed covariance, empty component or NaN."""


@dataclass(frozen=True)
class EmConfig:
    tol: float = 1e-6
    max_iter: int = 1000
    optimizer_max_evals: int = 2000
    spurious_min_eigen_ratio: float = 1e-8
    spurious_min_weight_blocks: float = 1.0

    def __post_init__(self):
        for name in ("tol", "max_iter", "optimizer_max_evals", "spurious_min_eigen_ratio", "spurious_min_weight_blocks"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class EmTrace:
    loglik_per_iter: list = field(default_factory=list)
    iterations: int = 0
    termination: str = "max_iter"  # converged | max_iter | spurious
    reason: str = ""  # why a spurious run stopped


@dataclass
class FitResult:
    model: MixtureModel
    posteriors: Posteriors
    assignments: list
    loglik: float
    trace: EmTrace
    n_points: int
    n_blocks: int

    @property
    def spurious(self) -> bool:
        return self.trace.termination == "spurious"

    def bic(self, n_mode: str = "points") -> float:
        n = self.n_points if n_mode == "points" else self.n_blocks
        return -2.0 * self.loglik + n_free_params(self.model.K) * np.log(n)


# --- E-step --------------------------------------------------------------------


def e_step(blocks, model: MixtureModel) -> tuple[Posteriors, float]:
    """Block posteriors and the current observed-data log-likelihood."""
    data = as_stacked(blocks)
    post, lognorm = normalize_scores(score_matrix(data, model))
    return Posteriors(post, data.region_ids), float(lognorm.sum())


# --- M-step --------------------------------------------------------------------


def m_step_weights(posteriors: Posteriors, blocks) -> np.ndarray:
    """``pi_k = sum_b n_b tau_bk / sum_b n_b``."""
    data = as_stacked(blocks)
    mass = data.sizes @ posteriors.matrix
    return mass / data.sizes.sum()


def _residuals(data, curve: BivariateCurve) -> np.ndarray:
    return data.y - curve_means(data.t, curve)


def m_step_sigma(posteriors: Posteriors, blocks, curves) -> list[Covariance2]:
    """Weighted residual outer-product average per component.

    Raises :class:`SpuriousSolution` when a component has no weight or the
    result is not positive definite.
    """
    data = as_stacked(blocks)
    out = []
    for k, curve in enumerate(curves):
        w = posteriors.matrix[data.block_of, k]
        denom = w.sum()
        if not denom > 0:
            raise SpuriousSolution(NEAR_EMPTY)
        r = _residuals(data, curve)
        wr = w[:, None] * r
        s11 = float(np.dot(wr[:, 0], r[:, 0]) / denom)
        s22 = float(np.dot(wr[:, 1], r[:, 1]) / denom)
        s12 = float(np.dot(wr[:, 0], r[:, 1]) / denom)
        try:
            out.append(Covariance2(s11, s22, s12))
        except ValueError as exc:
            raise SpuriousSolution(COLLAPSED) from None
    return out


def q_tilde(posteriors: Posteriors, blocks, k: int, curve: BivariateCurve, sigma: Covariance2) -> float:
    """Weighted sum of squared Mahalanobis residuals for component ``k``."""
    data = as_stacked(blocks)
    w = posteriors.matrix[data.block_of, k]
    return _q_tilde_obs(data.t, data.y, w, curve.to_log(), sigma)


def _q_tilde_obs(t, y, w, log_theta, sigma: Covariance2) -> float:
    with np.errstate(all="ignore"):
        h1, _ = logistic_values_and_log_jacobian(t, log_theta[:4])
        h2, _ = logistic_values_and_log_jacobian(t, log_theta[4:])
        d1 = y[:, 0] - h1
        d2 = y[:, 1] - h2
        v1, v2, c = sigma.var_cases, sigma.var_deaths, sigma.cov
        maha = (v2 * d1 * d1 - 2.0 * c * d1 * d2 + v1 * d2 * d2) / sigma.det
        return float(np.dot(w, maha))


class _WeightedResiduals:
    """Whitened residuals ``sqrt(w_i) L^T (y_i - h(t_i))`` with ``L L^T = Sigma^-1``."""

    def __init__(self, t, y, w, sigma: Covariance2):
        self.t = t
        self.y = y
        self.sw = np.sqrt(w)
        lower = np.linalg.cholesky(np.linalg.inv(sigma.matrix))
        self.l00, self.l10, self.l11 = lower[0, 0], lower[1, 0], lower[1, 1]
        self._x = None

    def _eval(self, x):
        if self._x is None or not np.array_equal(x, self._x):
            with np.errstate(all="ignore"):
                h1, j1 = logistic_values_and_log_jacobian(self.t, x[:4])
                h2, j2 = logistic_values_and_log_jacobian(self.t, x[4:])
            self._x = np.array(x, copy=True)
            self._cache = (h1, j1, h2, j2)
        return self._cache

    def fun(self, x):
        h1, _, h2, _ = self._eval(x)
        with np.errstate(all="ignore"):
            r1 = self.y[:, 0] - h1
            r2 = self.y[:, 1] - h2
            z = np.concatenate([self.sw * (self.l00 * r1 + self.l10 * r2), self.sw * (self.l11 * r2)])
        # an overflowing trial step must look bad, not NaN, so the optimizer rejects it
        z[~np.isfinite(z)] = _BAD_RESIDUAL
        return z

    def jac(self, x):
        _, j1, _, j2 = self._eval(x)
        m = len(self.t)
        sw = self.sw[:, None]
        out = np.zeros((2 * m, 8))
        with np.errstate(all="ignore"):
            out[:m, :4] = -sw * self.l00 * j1
            out[:m, 4:] = -sw * self.l10 * j2
            out[m:, 4:] = -sw * self.l11 * j2
        out[~np.isfinite(out)] = 0.0
        return out

    def objective(self, x):
        if np.any(np.abs(x) > _LOG_PARAM_LIMIT):
            return np.inf
        z = self.fun(x)
        return float(np.dot(z, z))


def _optimize_curve(t, y, w, sigma: Covariance2, init: BivariateCurve, max_evals: int) -> BivariateCurve:
    x0 = init.to_log()
    full_before = _q_tilde_obs(t, y, w, x0, sigma)
    if not np.isfinite(full_before):
        raise SpuriousSolution(NON_FINITE)
    keep = w > _MIN_OBS_WEIGHT
    if keep.sum() == 0:
        return init
    problem = _WeightedResiduals(t[keep], y[keep], w[keep], sigma)

    x_new = None
    try:
        # MINPACK's "lm" can return different last bits depending on heap layout,
        # which breaks cross-process reproducibility; "trf" does not
        with np.errstate(all="ignore"):
            res = least_squares(problem.fun, x0, jac=problem.jac, method="trf", x_scale="jac", max_nfev=max_evals)
        if np.all(np.isfinite(res.x)) and np.isfinite(res.cost):
            x_new = res.x
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.debug("least squares failed (%s); falling back to Nelder-Mead", exc)
    if x_new is None:
        res = minimize(
            problem.objective,
            x0,
            method="Nelder-Mead",
            options={"maxfev": max_evals, "xatol": 1e-10, "fatol": 1e-12},
        )
        if np.all(np.isfinite(res.x)) and np.isfinite(res.fun):
            x_new = res.x
    if x_new is None:
        return init
    full_after = _q_tilde_obs(t, y, w, x_new, sigma)
    if not (np.isfinite(full_after) and full_after <= full_before):
        return init
    try:
        with np.errstate(over="ignore"):
            return BivariateCurve.from_log(x_new)
    except ValueError:
        return init


def m_step_theta(posteriors: Posteriors, blocks, sigmas, init_curves, max_evals: int = 2000) -> list[BivariateCurve]:
    """Minimize the weighted Mahalanobis residual sum per component.

    Warm-started at ``init_curves``; a component whose optimizer fails to
    improve keeps its initial curve.
    """
    data = as_stacked(blocks)
    out = []
    for k, (sigma, curve) in enumerate(zip(sigmas, init_curves)):
        w = posteriors.matrix[data.block_of, k]
        out.append(_optimize_curve(data.t, data.y, w, sigma, curve, max_evals))
    return out


def spurious_reason(model: MixtureModel, posteriors: Posteriors, config: EmConfig = EmConfig()) -> str | None:
    """Name of the first degeneracy rule that fires, or None."""
    eig = np.array([comp.sigma.eigenvalues() for comp in model.components])
    if np.any(eig[:, 0] / eig[:, 1].max() < config.spurious_min_eigen_ratio):
        return COLLAPSED
    mass = posteriors.matrix.sum(axis=0)
    if np.any(mass < config.spurious_min_weight_blocks):
        return NEAR_EMPTY
    return None


def detect_spurious(model: MixtureModel, posteriors: Posteriors, blocks, config: EmConfig = EmConfig()) -> bool:
    """Collapsed covariance (relative eigenvalue) or near-empty component."""
    return spurious_reason(model, posteriors, config) is not None


def _converged(prev: float, cur: float, tol: float) -> bool:
    if abs(prev) > 0:
        return abs(cur - prev) / abs(prev) < tol
    return abs(cur - prev) < 1e-12


def em_fit(blocks, K: int, init: MixtureModel, config: EmConfig = EmConfig()) -> FitResult:
    """Run EM from ``init`` until the relative log-likelihood change drops below ``tol``.

    A spurious state at any iteration stops the run; the result then carries
    ``termination == "spurious"`` and the last non-degenerate model.
    """
    if init.K != K:
        raise ValueError(f"init has {init.K} components, expected {K}")
    data = as_stacked(blocks)
    model = init
    trace = EmTrace()
    posteriors, ll = e_step(data, model)
    trace.loglik_per_iter.append(ll)
    if not np.isfinite(ll):
        trace.termination = "spurious"
        trace.reason = NON_FINITE
    else:
        for it in range(1, config.max_iter + 1):
            try:
                # the mass rule only depends on these posteriors; check it before the costly curve fits
                if np.any(posteriors.matrix.sum(axis=0) < config.spurious_min_weight_blocks):
                    raise SpuriousSolution(NEAR_EMPTY)
                weights = m_step_weights(posteriors, data)
                curves = m_step_theta(
                    posteriors,
                    data,
                    [c.sigma for c in model.components],
                    [c.curve for c in model.components],
                    config.optimizer_max_evals,
                )
                sigmas = m_step_sigma(posteriors, data, curves)
                weights = weights / weights.sum()
                if np.any(weights <= 0):
                    raise SpuriousSolution(NEAR_EMPTY)
                new_model = MixtureModel(
                    tuple(weights), tuple(Component(c, s) for c, s in zip(curves, sigmas)), model.time_scale
                )
                reason = spurious_reason(new_model, posteriors, config)
                if reason is not None:
                    raise SpuriousSolution(reason)
                new_post, new_ll = e_step(data, new_model)
                if not np.isfinite(new_ll):
                    raise SpuriousSolution(NON_FINITE)
            except SpuriousSolution as exc:
                logger.debug("iteration %d: spurious (%s)", it, exc)
                trace.termination = "spurious"
                trace.reason = str(exc)
                trace.iterations = it
                break
            model, posteriors = new_model, new_post
            trace.loglik_per_iter.append(new_ll)
            trace.iterations = it
            done = _converged(ll, new_ll, config.tol)
            ll = new_ll
            if done:
                trace.termination = "converged"
                break
    return FitResult(
        model=model,
        posteriors=posteriors,
        assignments=classify(posteriors),
        loglik=ll,
        trace=trace,
        n_points=data.N,
        n_blocks=data.B,
    )
