"""Mixture types, block likelihoods and Bayes-rule classification.

All likelihood arithmetic is done in log space.  A block contributes
``n_b * log(pi_k) + sum_i log phi2(y_bi; h(t_bi; theta_k), Sigma_k)`` for
component ``k``; the product form underflows long before ``n_b = 40``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .growth import BivariateCurve, LogisticParams, curve_means
from .pipeline import Block

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Covariance2:
    """2x2 covariance stored by its entries."""

    var_cases: float
    var_deaths: float
    cov: float = 0.0

    def __post_init__(self):
        v1, v2, c = self.var_cases, self.var_deaths, self.cov
        if not (np.isfinite(v1) and np.isfinite(v2) and np.isfinite(c)):
            raise ValueError("covariance entries must be finite")
        if not (v1 > 0 and v2 > 0 and c * c < v1 * v2):
            raise ValueError(f"covariance is not positive definite: ({v1!r}, {v2!r}, {c!r})")

    @classmethod
    def from_sd(cls, s1: float, s2: float, rho: float) -> "Covariance2":
        return cls(s1 * s1, s2 * s2, rho * s1 * s2)

    @classmethod
    def from_matrix(cls, m) -> "Covariance2":
        m = np.asarray(m, dtype=float)
        return cls(float(m[0, 0]), float(m[1, 1]), float(0.5 * (m[0, 1] + m[1, 0])))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.var_cases, self.cov], [self.cov, self.var_deaths]])

    @property
    def det(self) -> float:
        return self.var_cases * self.var_deaths - self.cov * self.cov

    @property
    def sd(self) -> tuple[float, float, float]:
        """Reporting form ``(sigma1, sigma2, rho)``."""
        s1 = float(np.sqrt(self.var_cases))
        s2 = float(np.sqrt(self.var_deaths))
        return s1, s2, self.cov / (s1 * s2)

    def eigenvalues(self) -> tuple[float, float]:
        half_tr = 0.5 * (self.var_cases + self.var_deaths)
        half_gap = np.hypot(0.5 * (self.var_cases - self.var_deaths), self.cov)
        hi = half_tr + half_gap
        # small eigenvalue via det/hi avoids cancellation
        return float(self.det / hi), float(hi)


@dataclass(frozen=True)
class Component:
    curve: BivariateCurve
    sigma: Covariance2


@dataclass(frozen=True)
class MixtureModel:
    weights: tuple
    components: tuple
    time_scale: float = 1.0

    def __post_init__(self):
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "components", tuple(self.components))
        if len(weights) < 1 or len(weights) != len(self.components):
            raise ValueError("need K >= 1 weights and as many components")
        if any(not (0.0 < w <= 1.0) for w in weights):
            raise ValueError(f"weights must lie in (0, 1]: {weights}")
        if abs(sum(weights) - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {sum(weights)!r}")
        if not self.time_scale > 0:
            raise ValueError("time_scale must be positive")

    @property
    def K(self) -> int:
        return len(self.weights)

    def permuted(self, order) -> "MixtureModel":
        order = list(order)
        return MixtureModel(
            tuple(self.weights[i] for i in order), tuple(self.components[i] for i in order), self.time_scale
        )

    def capacity_order(self) -> list[int]:
        """Component indices sorted by ascending case asymptote (stable)."""
        return sorted(range(self.K), key=lambda k: (self.components[k].curve.cases.a, k))


@dataclass(frozen=True)
class Posteriors:
    """Block-by-component membership probabilities."""

    matrix: np.ndarray
    region_ids: tuple

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "region_ids", tuple(self.region_ids))
        if m.ndim != 2 or m.shape[0] != len(self.region_ids):
            raise ValueError("posterior matrix rows must align with region ids")


def n_free_params(K: int) -> int:
    """Free parameters of a K-component model: 8 curve + 3 covariance each, K - 1 weights."""
    return 12 * K - 1


# --- densities ---------------------------------------------------------------


def _logdens_rows(resid: np.ndarray, sigma: Covariance2) -> np.ndarray:
    v1, v2, c = sigma.var_cases, sigma.var_deaths, sigma.cov
    det = v1 * v2 - c * c
    d1 = resid[..., 0]
    d2 = resid[..., 1]
    maha = (v2 * d1 * d1 - 2.0 * c * d1 * d2 + v1 * d2 * d2) / det
    return -LOG_2PI - 0.5 * np.log(det) - 0.5 * maha


def log_density_bivariate(y, mu, sigma: Covariance2) -> float:
    """Log of the bivariate normal density at ``y``."""
    if not isinstance(sigma, Covariance2):
        sigma = Covariance2.from_matrix(sigma)
    resid = np.asarray(y, dtype=float) - np.asarray(mu, dtype=float)
    out = _logdens_rows(resid, sigma)
    return float(out) if np.ndim(out) == 0 else out


def block_log_score(block: Block, weight: float, comp: Component) -> float:
    """``n_b * log(weight) + sum_i log phi2(y_i; h(t_i), Sigma)``."""
    if not 0.0 < weight <= 1.0:
        raise ValueError("weight must lie in (0, 1]")
    resid = block.obs - curve_means(block.times, comp.curve)
    return float(block.n * np.log(weight) + _logdens_rows(resid, comp.sigma).sum())


class StackedBlocks:
    """All blocks concatenated for vectorized scoring."""

    def __init__(self, blocks):
        blocks = list(blocks)
        if not blocks:
            raise ValueError("need at least one block")
        self.blocks = blocks
        self.region_ids = tuple(b.region_id for b in blocks)
        self.sizes = np.array([b.n for b in blocks], dtype=np.int64)
        self.starts = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        self.t = np.concatenate([b.times for b in blocks])
        self.y = np.concatenate([b.obs for b in blocks])
        self.block_of = np.repeat(np.arange(len(blocks)), self.sizes)

    @property
    def B(self) -> int:
        return len(self.blocks)

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    def block_sums(self, values: np.ndarray) -> np.ndarray:
        return np.add.reduceat(values, self.starts, axis=0)


def as_stacked(blocks) -> StackedBlocks:
    return blocks if isinstance(blocks, StackedBlocks) else StackedBlocks(blocks)


def score_matrix(blocks, model: MixtureModel) -> np.ndarray:
    """``B x K`` matrix of block log scores."""
    data = as_stacked(blocks)
    scores = np.empty((data.B, model.K))
    for k, (w, comp) in enumerate(zip(model.weights, model.components)):
        resid = data.y - curve_means(data.t, comp.curve)
        scores[:, k] = data.sizes * np.log(w) + data.block_sums(_logdens_rows(resid, comp.sigma))
    return scores


def normalize_scores(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row softmax and row log-normalizers."""
    lognorm = logsumexp(scores, axis=1)
    return np.exp(scores - lognorm[:, None]), lognorm


def posterior_row(block: Block, model: MixtureModel) -> tuple[np.ndarray, float]:
    """Membership probabilities of one block and its log-likelihood contribution."""
    scores = np.array([[block_log_score(block, w, c) for w, c in zip(model.weights, model.components)]])
    post, lognorm = normalize_scores(scores)
    return post[0], float(lognorm[0])


def loglik(blocks, model: MixtureModel) -> float:
    """Observed-data log-likelihood, summed over blocks."""
    _, lognorm = normalize_scores(score_matrix(blocks, model))
    return float(lognorm.sum())


def classify(post: Posteriors) -> list[tuple[str, int, float]]:
    """Bayes-rule labels (0-based); ties go to the smallest index."""
    m = post.matrix
    labels = np.argmax(m, axis=1)
    return [(rid, int(k), float(m[i, k])) for i, (rid, k) in enumerate(zip(post.region_ids, labels))]


# --- simulation --------------------------------------------------------------


def sample_block(model: MixtureModel, n: int, times=None, seed=None, region_id: str = "synthetic", label=None):
    """Draw one block from the mixture.

    The label is drawn from the mixing weights unless given.  Observations
    are the component mean plus correlated Gaussian noise.  Returns
    ``(block, label)``.
    """
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, 1.0, n) if times is None else np.asarray(times, dtype=float)
    if len(times) != n:
        raise ValueError("len(times) must equal n")
    if label is None:
        label = int(rng.choice(model.K, p=np.asarray(model.weights)))
    comp = model.components[label]
    chol = np.linalg.cholesky(comp.sigma.matrix)
    noise = rng.standard_normal((n, 2)) @ chol.T
    obs = curve_means(times, comp.curve) + noise
    return Block(region_id, times, obs), label


# --- serialization ------------------------------------------------------------


def _params_dict(p: LogisticParams) -> dict:
    return {"a": p.a, "b": p.b, "c": p.c, "gamma": p.gamma}


def model_to_dict(model: MixtureModel) -> dict:
    comps = []
    for comp in model.components:
        s1, s2, rho = comp.sigma.sd
        comps.append(
            {
                "cases": _params_dict(comp.curve.cases),
                "deaths": _params_dict(comp.curve.deaths),
                "sigma": {
                    "s1": s1,
                    "s2": s2,
                    "rho": rho,
                    # exact storage; (s1, s2, rho) alone does not round-trip bit-for-bit
                    "var_cases": comp.sigma.var_cases,
                    "var_deaths": comp.sigma.var_deaths,
                    "cov": comp.sigma.cov,
                },
            }
        )
    return {"K": model.K, "time_scale": model.time_scale, "weights": list(model.weights), "components": comps}


def model_from_dict(d: dict) -> MixtureModel:
    comps = []
    for c in d["components"]:
        sig = c["sigma"]
        if "var_cases" in sig:
            sigma = Covariance2(sig["var_cases"], sig["var_deaths"], sig["cov"])
        else:
            sigma = Covariance2.from_sd(sig["s1"], sig["s2"], sig["rho"])
        curve = BivariateCurve(
            LogisticParams(**{k: c["cases"][k] for k in ("a", "b", "c", "gamma")}),
            LogisticParams(**{k: c["deaths"][k] for k in ("a", "b", "c", "gamma")}),
        )
        comps.append(Component(curve, sigma))
    model = MixtureModel(tuple(d["weights"]), tuple(comps), float(d.get("time_scale", 1.0)))
    if "K" in d and int(d["K"]) != model.K:
        raise ValueError(f"K={d['K']} does not match {model.K} components")
    return model


def model_to_json(model: MixtureModel) -> str:
    return json.dumps(model_to_dict(model), indent=2)


def model_from_json(text: str) -> MixtureModel:
    return model_from_dict(json.loads(text))
