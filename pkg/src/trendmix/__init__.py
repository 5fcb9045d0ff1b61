"""Semi-supervised clustering of regional epidemic trends.

Each region's bivariate (cases, deaths) rate sequence is a block whose
observations must share one cluster.  Clusters are mixtures of bivariate
Gaussian regressions with generalized logistic mean curves, fitted by a
block-constrained EM and chosen by BIC.
"""

from importlib import resources

__version__ = "0.1.0"

from .em import EmConfig, FitResult, e_step, em_fit
from .growth import BivariateCurve, LogisticParams, eval_curve, eval_logistic, inflection_point, logistic_gradient
from .mixture import Component, Covariance2, MixtureModel, Posteriors, classify, loglik, sample_block
from .pipeline import Block, Dataset, PipelineConfig, RegionSeries, load_dataset
from .selection import SweepConfig, bic, random_init, sweep, warm_refit


def fixture_paths():
    """Paths of the bundled 6-region (series, population) CSV fixture."""
    base = resources.files(__name__) / "data"
    return base / "fixture_series.csv", base / "fixture_population.csv"


__all__ = [
    "Block",
    "BivariateCurve",
    "Component",
    "Covariance2",
    "Dataset",
    "EmConfig",
    "FitResult",
    "LogisticParams",
    "MixtureModel",
    "PipelineConfig",
    "Posteriors",
    "RegionSeries",
    "SweepConfig",
    "bic",
    "classify",
    "e_step",
    "em_fit",
    "eval_curve",
    "eval_logistic",
    "fixture_paths",
    "inflection_point",
    "load_dataset",
    "logistic_gradient",
    "loglik",
    "random_init",
    "sample_block",
    "sweep",
    "warm_refit",
]
