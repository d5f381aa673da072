"""Feature occlusion, integrated gradients, SmoothGrad and a LIME-style surrogate.

Every method explains one scalar output of a model. A model is anything with

* ``predict(batch, target) -> (B,)`` for a ``(B, N, V, L)`` batch of contexts, and
* ``grad(batch, target) -> (B, N, V, L)`` (gradient methods only).

``nodes`` restricts a method to the input cells of those nodes; every other
cell stays at its observed value and receives a zero score.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np

from .forecaster import OutputTarget
from .seeding import derive_rng

log = logging.getLogger(__name__)

METHODS = ("fo", "ig", "sg", "lime")
GRADIENT_METHODS = ("ig", "sg")


class AttributionError(ValueError):
    pass


class LimeSingularError(AttributionError, np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class AttributionConfig:
    baseline: str = "train_mean"
    ig_steps: int = 50
    # ``trapezoid`` (endpoints half-weighted) or ``right`` (mean over s=1..m)
    ig_rule: str = "trapezoid"
    sg_samples: int = 25
    sg_noise_scale: float = 0.1
    lime_samples: int = 500
    lime_kernel_width: float = 0.25
    lime_ridge: float = 1e-3
    seed: int = 0
    occlusion_window: int = 1
    batch_size: int = 2048

    def __post_init__(self):
        if self.baseline not in ("zeros", "train_mean"):
            raise AttributionError("baseline must be 'zeros' or 'train_mean'")
        if self.ig_steps < 2:
            raise AttributionError("ig_steps must be >= 2")
        if self.ig_rule not in ("trapezoid", "right"):
            raise AttributionError("ig_rule must be 'trapezoid' or 'right'")
        if self.sg_samples < 1 or self.lime_samples < 1:
            raise AttributionError("sample counts must be >= 1")
        if self.sg_noise_scale < 0:
            raise AttributionError("sg_noise_scale must be >= 0")
        if self.lime_kernel_width <= 0 or self.lime_ridge < 0:
            raise AttributionError("lime_kernel_width must be > 0 and lime_ridge >= 0")
        if self.occlusion_window < 1:
            raise AttributionError("occlusion_window must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttributionConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise AttributionError(f"unknown attribution fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ImportanceTensor:
    """Signed scores with the same ``(node, variable, time)`` shape as the context."""

    scores: np.ndarray
    target: OutputTarget
    method: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if self.scores.ndim != 3:
            raise AttributionError("scores must be (node, variable, time)")
        if not np.all(np.isfinite(self.scores)):
            raise AttributionError(f"{self.method}: non-finite attribution scores")

    @property
    def t0(self) -> int:
        """Absolute time index of context position 0 (0 when unknown)."""
        return int(self.metadata.get("t0", 0))


def resolve_baseline(model, context: np.ndarray, config: AttributionConfig) -> np.ndarray:
    if config.baseline == "zeros":
        return np.zeros_like(context)
    base = getattr(model, "train_mean_context", None)
    if base is None:
        raise AttributionError("model exposes no train_mean_context; use baseline='zeros'")
    base = np.asarray(base, dtype=float)
    if base.shape != context.shape:
        raise AttributionError("baseline shape does not match the context")
    return base


def cell_mask(shape, nodes: Optional[Iterable[int]]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    if nodes is None:
        mask[...] = True
    else:
        mask[list(nodes)] = True
    return mask


def _job_rng(config: AttributionConfig, method: str, target: OutputTarget, nodes, n_nodes: int):
    key = None if nodes is None else sorted({int(n) for n in nodes})
    if key is not None and len(key) == n_nodes:
        key = None  # restricting to every node is no restriction
    # head component and level are left out so that quantile and mean explanations
    # of the same output share their perturbations
    return derive_rng(config.seed, method, target.node, target.step, key)


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _predict(model, batch, target, size):
    return np.concatenate([model.predict(batch[s], target) for s in _chunks(len(batch), size)])


def _grad_mean(model, points: np.ndarray, target, size) -> np.ndarray:
    total = np.zeros(points.shape[1:])
    for s in _chunks(len(points), size):
        total += model.grad(points[s], target).sum(axis=0)
    return total / len(points)


def _meta(config, nodes, **extra):
    meta = {"baseline": config.baseline, "seed": config.seed, "input_space": "standardized"}
    if nodes is not None:
        meta["nodes"] = sorted(int(n) for n in nodes)
    meta.update(extra)
    return meta


def feature_occlusion(model, context, target: OutputTarget, config: AttributionConfig = AttributionConfig(),
                      nodes=None) -> ImportanceTensor:
    """``score(cell) = f(x) - f(x with the cell set to the baseline)``."""
    x = np.asarray(context, dtype=float)
    x0 = resolve_baseline(model, x, config)
    cells = np.flatnonzero(cell_mask(x.shape, nodes))
    w = config.occlusion_window
    L = x.shape[-1]
    ref = float(model.predict(x[None], target)[0])
    scores = np.zeros(x.size)
    for sl in _chunks(len(cells), max(1, config.batch_size)):
        chunk = cells[sl]
        batch = np.repeat(x.reshape(1, -1), len(chunk), axis=0)
        rows = np.arange(len(chunk))
        for k in range(w):
            t = chunk % L + k
            ok = t < L
            idx = chunk[ok] + k
            batch[rows[ok], idx] = x0.reshape(-1)[idx]
        out = model.predict(batch.reshape((len(chunk),) + x.shape), target)
        scores[chunk] = ref - out
    return ImportanceTensor(scores.reshape(x.shape), target, "fo",
                            _meta(config, nodes, model_calls=len(cells) + 1, window=w))


def integrated_gradients(model, context, target: OutputTarget, config: AttributionConfig = AttributionConfig(),
                         nodes=None) -> ImportanceTensor:
    """Path integral of the gradient from the baseline to ``x`` over ``ig_steps`` intervals.

    The trapezoid rule's error falls as ``1/m**2``; the right Riemann sum's only as ``1/m``.
    """
    x = np.asarray(context, dtype=float)
    mask = cell_mask(x.shape, nodes)
    start = np.where(mask, resolve_baseline(model, x, config), x)
    diff = x - start
    m = config.ig_steps
    if config.ig_rule == "right":
        alphas = np.arange(1, m + 1) / m
        weights = np.full(m, 1.0 / m)
    else:
        alphas = np.arange(m + 1) / m
        weights = np.full(m + 1, 1.0 / m)
        weights[[0, -1]] *= 0.5
    points = start[None] + alphas[:, None, None, None] * diff[None]
    avg = np.zeros(x.shape)
    for sl in _chunks(len(points), config.batch_size):
        avg += np.tensordot(weights[sl], model.grad(points[sl], target), axes=1)
    return ImportanceTensor(diff * avg, target, "ig", _meta(config, nodes, steps=m, rule=config.ig_rule))


def smoothgrad(model, context, target: OutputTarget, config: AttributionConfig = AttributionConfig(),
               nodes=None) -> ImportanceTensor:
    """Signed mean gradient over Gaussian-perturbed copies of the context."""
    x = np.asarray(context, dtype=float)
    mask = cell_mask(x.shape, nodes)
    sigma = config.sg_noise_scale * float(x.max() - x.min())
    if sigma == 0.0:
        g = model.grad(x[None], target)[0]
        n = 1
    else:
        rng = _job_rng(config, "sg", target, nodes, x.shape[0])
        n = config.sg_samples
        noise = rng.normal(0.0, sigma, (n,) + x.shape) * mask
        g = _grad_mean(model, x[None] + noise, target, config.batch_size)
    return ImportanceTensor(g * mask, target, "sg", _meta(config, nodes, samples=n, noise_sigma=sigma))


def weighted_ridge(Z: np.ndarray, y: np.ndarray, weights: np.ndarray, ridge: float):
    """Weighted ridge regression with an unpenalized intercept; returns ``(coef, intercept)``.

    Uses the dual (kernel) form when there are more features than samples.
    """
    wsum = weights.sum()
    zbar = weights @ Z / wsum
    ybar = weights @ y / wsum
    sw = np.sqrt(weights)[:, None]
    A = (Z - zbar) * sw
    b = (y - ybar) * sw[:, 0]
    n, p = A.shape
    try:
        if p <= n:
            G = A.T @ A + ridge * np.eye(p)
            _check_conditioning(G, ridge)
            coef = np.linalg.solve(G, A.T @ b)
        else:
            K = A @ A.T + ridge * np.eye(n)
            _check_conditioning(K, ridge)
            coef = A.T @ np.linalg.solve(K, b)
    except np.linalg.LinAlgError as exc:
        raise LimeSingularError(
            f"surrogate regression is singular ({exc}); increase lime_ridge"
        ) from None
    return coef, ybar - zbar @ coef


def _check_conditioning(G, ridge):
    if np.linalg.cond(G) > 1e13:
        raise LimeSingularError(
            f"surrogate regression is singular (ridge={ridge}); increase lime_ridge"
        )


def lime_surrogate(model, context, target: OutputTarget, config: AttributionConfig = AttributionConfig(),
                   nodes=None) -> ImportanceTensor:
    """Weighted ridge fit of model outputs on random keep/drop masks over the cells.

    Dropped cells take the baseline value. Sample weights follow an exponential
    kernel on the fraction of dropped cells.
    """
    x = np.asarray(context, dtype=float)
    x0 = resolve_baseline(model, x, config)
    cells = np.flatnonzero(cell_mask(x.shape, nodes))
    C, S = len(cells), config.lime_samples
    if S < C / 10:
        warnings.warn(
            f"lime_samples={S} is below cells/10 ({C} cells); coefficients will be noisy",
            stacklevel=2,
        )
    rng = _job_rng(config, "lime", target, nodes, x.shape[0])
    Z = rng.random((S, C)) < 0.5
    Z[0] = True  # the unperturbed instance
    batch = np.repeat(x.reshape(1, -1), S, axis=0)
    drop = ~Z
    rows, cols = np.nonzero(drop)
    batch[rows, cells[cols]] = x0.reshape(-1)[cells[cols]]
    y = _predict(model, batch.reshape((S,) + x.shape), target, config.batch_size)
    d = drop.mean(axis=1)
    weights = np.exp(-(d ** 2) / config.lime_kernel_width ** 2)
    coef, intercept = weighted_ridge(Z.astype(float), y, weights, config.lime_ridge)
    scores = np.zeros(x.size)
    scores[cells] = coef
    return ImportanceTensor(scores.reshape(x.shape), target, "lime",
                            _meta(config, nodes, samples=S, intercept=float(intercept)))


_DISPATCH: Dict[str, Callable] = {
    "fo": feature_occlusion,
    "ig": integrated_gradients,
    "sg": smoothgrad,
    "lime": lime_surrogate,
}


def attribute(method: str, model, context, target: OutputTarget, config: AttributionConfig = AttributionConfig(),
              nodes=None) -> ImportanceTensor:
    try:
        fn = _DISPATCH[method]
    except KeyError:
        raise AttributionError(f"unknown method {method!r}; choose from {METHODS}") from None
    return fn(model, context, target, config, nodes)
