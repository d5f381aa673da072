"""Quantile-specific explanations of probabilistic forecasters.

A probabilistic model is turned into a deterministic one by reading a
quantile of its predictive distribution. Gaussian heads have the closed form
``mu + z(level) * sigma``, which is differentiable. Any other head is handled
empirically: draw samples with a fixed noise stream (common random numbers)
and take the linearly interpolated sample quantile, so the map from context
to quantile is a stable deterministic function that perturbation methods can
probe.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .attribution import GRADIENT_METHODS, AttributionConfig
from .forecaster import Forecaster, NotProbabilisticError, OutputTarget
from .hier_explain import HierConfig, HierImportanceMap, explain

DEFAULT_LEVELS = (0.75, 0.90, 0.95)
# figure-caption variant; accepted as an extra level
EXTRA_LEVELS = (0.70,)
MIN_EMPIRICAL_SAMPLES = 100


class GradientUnavailableError(ValueError):
    pass


@dataclass(frozen=True)
class QuantileTarget:
    node: int
    horizon_step: int = 0
    level: float = 0.95
    n_samples: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")
        if self.n_samples < 0:
            raise ValueError("n_samples must be non-negative")

    @property
    def output_target(self) -> OutputTarget:
        return OutputTarget(self.node, self.horizon_step, "quantile", self.level)


def gaussian_quantile(mu, sigma, level: float):
    """``mu + z(level) * sigma``; a zero sigma gives the point mass ``mu`` at every level."""
    z = NormalDist().inv_cdf(level)
    return np.asarray(mu, dtype=float) + z * np.asarray(sigma, dtype=float)


class EmpiricalQuantileModel:
    """Deterministic surrogate: context -> sample quantile under common random numbers."""

    def __init__(self, model: Forecaster, n_samples: int, seed: int):
        if not model.is_probabilistic:
            raise NotProbabilisticError(model.spec.head)
        if n_samples < MIN_EMPIRICAL_SAMPLES:
            raise ValueError(f"empirical quantiles need at least {MIN_EMPIRICAL_SAMPLES} samples")
        self.model = model
        self.n_samples = n_samples
        self.seed = seed
        self.tree = model.tree
        self.context_shape = model.context_shape

    @property
    def train_mean_context(self):
        return self.model.train_mean_context

    def predict(self, contexts, target: OutputTarget) -> np.ndarray:
        draws = self.model.sample_node(contexts, target.node, target.step, self.n_samples, self.seed)
        return np.quantile(draws, target.level, axis=-1, method="linear")


def _uses_analytic(model: Forecaster, analytic: bool) -> bool:
    if not model.is_probabilistic:
        raise NotProbabilisticError(model.spec.head)
    return analytic and model.spec.head == "gaussian"


def quantile_output(model: Forecaster, context, qt: QuantileTarget, analytic: bool = True) -> float:
    """The ``qt.level`` quantile of the forecast at ``(qt.node, qt.horizon_step)``."""
    if _uses_analytic(model, analytic):
        return float(model.predict(context, qt.output_target))
    surrogate = EmpiricalQuantileModel(model, qt.n_samples, qt.seed)
    return float(surrogate.predict(np.asarray(context)[None], qt.output_target)[0])


def explain_quantile(model: Forecaster, context, qt: QuantileTarget, method: str,
                     config: AttributionConfig = AttributionConfig(), mode: str = "subtree",
                     hcfg: HierConfig = HierConfig(), allow_fallback: bool = True,
                     analytic: bool = True) -> HierImportanceMap:
    """Explain the quantile output as if it were a deterministic model.

    Gradient methods need the analytic Gaussian path; on empirical quantiles they
    fall back to feature occlusion (with a warning) or raise when fallback is off.
    """
    if _uses_analytic(model, analytic):
        qmodel = model
    else:
        qmodel = EmpiricalQuantileModel(model, qt.n_samples, qt.seed)
        if method in GRADIENT_METHODS:
            if not allow_fallback:
                raise GradientUnavailableError(
                    f"{method} needs gradients, unavailable for empirical quantiles; "
                    "enable fallback or use fo/lime"
                )
            warnings.warn(f"{method} unavailable for empirical quantiles; using fo", stacklevel=2)
            method = "fo"
    result = explain(qmodel, context, qt.node, method, mode, config, qt.output_target, hcfg)
    result.metadata.update({"level": qt.level, "quantile_path": "analytic" if qmodel is model else "empirical"})
    if qmodel is not model:
        result.metadata.update({"n_samples": qt.n_samples, "sample_seed": qt.seed})
    return result
