"""Random restarts over the mixture order, BIC choice and warm refits."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .em import EmConfig, FitResult, em_fit, e_step
from .growth import BivariateCurve, LogisticParams, curve_means
from .mixture import Component, Covariance2, MixtureModel, StackedBlocks, as_stacked, n_free_params

logger = logging.getLogger(__name__)


class NoRetainedFit(RuntimeError):
    """Every start at every K ended spurious."""


def starts_for(K: int) -> int:
    """Number of random starts: ``min(20 K, 100)`` for K > 1, 10 for K = 1."""
    return 10 if K == 1 else min(20 * K, 100)


@dataclass(frozen=True)
class SweepConfig:
    k_min: int = 1
    k_max: int = 7
    seed: int = 0
    bic_n_mode: str = "points"  # points | blocks
    em: EmConfig = field(default_factory=EmConfig)

    def __post_init__(self):
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError("need 1 <= k_min <= k_max")
        if self.bic_n_mode not in ("points", "blocks"):
            raise ValueError("bic_n_mode must be 'points' or 'blocks'")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    def starts_for(self, K: int) -> int:
        return starts_for(K)


@dataclass(frozen=True)
class RestartRecord:
    K: int
    start: int
    seed: int
    loglik: float
    iterations: int
    termination: str
    reason: str = ""


@dataclass
class SweepResult:
    config: SweepConfig
    fits: dict  # K -> FitResult, or None when every start was spurious
    bic: dict  # K -> float, or None
    chosen_K: int
    restarts: list
    retained_start: dict = field(default_factory=dict)

    @property
    def best(self) -> FitResult:
        return self.fits[self.chosen_K]


def derive_seed(master: int, K: int, start: int) -> int:
    """64-bit seed for one restart, a pure function of ``(master, K, start)``."""
    seq = np.random.SeedSequence(entropy=int(master), spawn_key=(int(K), int(start)))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def bic(loglik: float, K: int, blocks, n_mode: str = "points") -> float:
    """``-2 loglik + (12K - 1) log n``.

    ``blocks`` may also be the sample size itself, in which case ``n_mode``
    is ignored.
    """
    if isinstance(blocks, (int, float, np.integer, np.floating)):
        n = float(blocks)
    else:
        data = as_stacked(blocks)
        n = data.N if n_mode == "points" else data.B
    return -2.0 * loglik + n_free_params(K) * np.log(n)


def _initial_logistic(t, v, c, rng_value_floor=1e-8) -> LogisticParams:
    vmax = float(v.max())
    a = 1.1 * vmax if vmax > 0 else 1.0
    reached = t[v >= 0.5 * vmax] if vmax > 0 else t
    t_half = float(reached.min())
    b = float(np.exp(np.clip(c * t_half, -700.0, 700.0)))
    return LogisticParams(a, max(b, rng_value_floor), c, 1.0)


def _block_distance(a, b, scale) -> float:
    """Mean standardized squared gap over the time points two blocks share."""
    _, ia, ib = np.intersect1d(a.times, b.times, return_indices=True)
    if ia.size == 0:
        return np.inf
    diff = (a.obs[ia] - b.obs[ib]) / scale
    return float(np.mean(diff * diff))


def random_init(blocks, K: int, seed) -> MixtureModel:
    """Random starting model.

    K distinct seed blocks are drawn uniformly at random and every other
    block joins the group of its nearest seed (mean standardized squared
    gap on shared time points).  Each group gives a moment-style guess per
    coordinate: capacity 1.1 x the group maximum, gamma = 1, growth rate
    log-uniform on [1, 30] and shift placing the midpoint where the group
    first reaches half its maximum.  All components share the pooled
    diagonal residual covariance inflated by 2.  Weights are uniform.
    """
    data = as_stacked(blocks)
    B = data.B
    if not 1 <= K <= B:
        raise ValueError(f"K={K} must be between 1 and the number of blocks ({B})")
    rng = np.random.default_rng(seed)
    seeds = rng.choice(B, size=K, replace=False)
    scale = data.y.std(axis=0)
    scale[scale == 0] = 1.0
    groups = np.empty(B, dtype=np.int64)
    for b, block in enumerate(data.blocks):
        dist = [_block_distance(block, data.blocks[s], scale) for s in seeds]
        groups[b] = int(np.argmin(dist))
    groups[seeds] = np.arange(K)

    curves = []
    sq = np.zeros(2)
    for k in range(K):
        mask = groups[data.block_of] == k
        t, y = data.t[mask], data.y[mask]
        rates = np.exp(rng.uniform(np.log(1.0), np.log(30.0), size=2))
        curve = BivariateCurve(_initial_logistic(t, y[:, 0], rates[0]), _initial_logistic(t, y[:, 1], rates[1]))
        curves.append(curve)
        sq += ((y - curve_means(t, curve)) ** 2).sum(axis=0)
    var = 2.0 * sq / data.N
    # all-zero residuals would give a singular start
    floor = 1e-6 * np.maximum(1.0, np.abs(data.y).max(axis=0)) ** 2
    var = np.maximum(var, floor)
    sigma = Covariance2(float(var[0]), float(var[1]), 0.0)
    return MixtureModel(tuple([1.0 / K] * K), tuple(Component(c, sigma) for c in curves))


def _run_start(data, K: int, start: int, seed: int, em_config: EmConfig, time_scale: float):
    init = random_init(data, K, seed)
    if time_scale != 1.0:
        init = MixtureModel(init.weights, init.components, time_scale)
    fit = em_fit(data, K, init, em_config)
    rec = RestartRecord(K, start, seed, fit.loglik, fit.trace.iterations, fit.trace.termination, fit.trace.reason)
    return rec, fit


def _run_job(args):
    blocks, K, start, seed, em_config, time_scale = args
    return _run_start(StackedBlocks(blocks), K, start, seed, em_config, time_scale)


def resolve_workers(threads) -> int:
    if threads in (None, "auto"):
        return os.cpu_count() or 1
    n = int(threads)
    if n < 1:
        raise ValueError("threads must be >= 1")
    return n


def sweep(blocks, config: SweepConfig = SweepConfig(), threads=1, time_scale: float = 1.0) -> SweepResult:
    """Fit every K in ``[k_min, k_max]`` from seeded random starts and pick K by BIC.

    Results do not depend on ``threads``: each restart is a pure function of
    its derived seed, and aggregation walks restarts in (K, start) order.
    """
    data = as_stacked(blocks)
    if config.k_max > data.B:
        raise ValueError(f"k_max={config.k_max} exceeds the number of blocks ({data.B})")
    jobs = [
        (K, s, derive_seed(config.seed, K, s))
        for K in range(config.k_min, config.k_max + 1)
        for s in range(starts_for(K))
    ]
    workers = resolve_workers(threads)
    if workers == 1:
        outcomes = [_run_start(data, K, s, seed, config.em, time_scale) for K, s, seed in jobs]
    else:
        payload = [(data.blocks, K, s, seed, config.em, time_scale) for K, s, seed in jobs]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_job, payload, chunksize=max(1, len(payload) // (4 * workers))))

    restarts = []
    fits, bics, retained = {}, {}, {}
    for rec, fit in outcomes:
        restarts.append(rec)
        if fit.spurious:
            continue
        best = fits.get(rec.K)
        # strict '>' keeps the lowest start index on ties
        if best is None or fit.loglik > best.loglik:
            fits[rec.K] = fit
            retained[rec.K] = rec.start
    for K in range(config.k_min, config.k_max + 1):
        if K in fits:
            bics[K] = bic(fits[K].loglik, K, data, config.bic_n_mode)
        else:
            logger.warning("K=%d: every start was spurious", K)
            fits[K] = None
            bics[K] = None
    candidates = [K for K, v in bics.items() if v is not None]
    if not candidates:
        raise NoRetainedFit("all starts were spurious for every K")
    chosen = min(candidates, key=lambda K: (bics[K], K))
    return SweepResult(config, fits, bics, chosen, restarts, retained)


def warm_refit(previous: MixtureModel, new_blocks, config: EmConfig = EmConfig()) -> FitResult:
    """Refit on updated data starting from a previous solution."""
    return em_fit(new_blocks, previous.K, previous, config)


# --- reports -------------------------------------------------------------------


def sweep_report(result: SweepResult, extra_config: dict | None = None) -> dict:
    cfg = asdict(result.config)
    if extra_config:
        cfg.update(extra_config)
    per_k = []
    for K in sorted(result.fits):
        n_spur = sum(1 for r in result.restarts if r.K == K and r.termination == "spurious")
        fit = result.fits[K]
        per_k.append(
            {
                "K": K,
                "bic": result.bic[K],
                "loglik": None if fit is None else fit.loglik,
                "retained_start": result.retained_start.get(K),
                "n_spurious": n_spur,
                "n_starts": starts_for(K),
            }
        )
    return {"config": cfg, "per_K": per_k, "chosen_K": result.chosen_K}


def sweep_report_json(result: SweepResult, extra_config: dict | None = None) -> str:
    return json.dumps(sweep_report(result, extra_config), indent=2)


def restart_log_csv(restarts) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["K", "start", "seed", "loglik", "iterations", "termination"])
    for r in restarts:
        writer.writerow([r.K, r.start, r.seed, repr(float(r.loglik)), r.iterations, r.termination])
    return buf.getvalue()


def evaluate_loglik(blocks, model: MixtureModel) -> float:
    return e_step(blocks, model)[1]
