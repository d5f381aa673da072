"""Importance Accuracy Score (IAS), External Variable Detection Accuracy (EVDA)
and the before/after delta protocol for anomalies injected into real panels.

Explanations are passed as a sequence of :class:`ImportanceTensor` (or objects
with ``as_importance()``). Each tensor's ``metadata["t0"]`` gives the absolute
time of context position 0, which maps manifest windows onto the tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .attribution import ImportanceTensor
from .benchgen import GroundTruthManifest


class MetricError(ValueError):
    pass


class MissingExplanationError(MetricError):
    pass


class ConfigMismatchError(MetricError):
    pass


@dataclass
class MetricReport:
    ias: float
    evda: Optional[float] = None
    per_placement: List[dict] = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)
    n_targets: int = 0

    def __post_init__(self):
        if not np.isfinite(self.ias):
            raise MetricError("ias must be finite")
        if self.evda is not None and not 0.0 <= self.evda <= 1.0:
            raise MetricError("evda must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"ias": self.ias, "evda": self.evda, "per_placement": self.per_placement,
                "n_targets": self.n_targets, "config": self.config_echo}


def ias_normalize(raw, literal: bool = False) -> np.ndarray:
    """Mean-center each series over time and divide by its range.

    ``raw`` is an ``ImportanceTensor`` or an array whose last axis is time. With
    ``literal=True`` the denominator is instead the range across series (axis 0)
    at each time step. Zero ranges give zeros.
    """
    x = np.asarray(raw.scores if isinstance(raw, ImportanceTensor) else raw, dtype=float)
    if x.shape[-1] == 0:
        raise MetricError("time axis is empty")
    centered = x - x.mean(axis=-1, keepdims=True)
    if literal:
        span = np.ptp(x, axis=0, keepdims=True)
    else:
        span = np.ptp(x, axis=-1, keepdims=True)
    span = np.broadcast_to(span, x.shape)
    out = np.zeros_like(x)
    np.divide(centered, span, out=out, where=span > 0)
    return out


def _tensors(explanations) -> List[ImportanceTensor]:
    if isinstance(explanations, dict):
        explanations = list(explanations.values())
    return [e.as_importance() if hasattr(e, "as_importance") else e for e in explanations]


def _by_node(tensors) -> Dict[int, List[ImportanceTensor]]:
    out: Dict[int, List[ImportanceTensor]] = {}
    for t in tensors:
        out.setdefault(int(t.target.node), []).append(t)
    return out


def _cell_values(norm: np.ndarray, t0: int, cells: Sequence[dict]) -> List[float]:
    L = norm.shape[-1]
    vals = []
    for c in cells:
        lo, hi = max(c["t_start"], t0), min(c["t_end"], t0 + L)
        vals.extend(norm[c["node"], c["variable"], lo - t0:hi - t0])
    return vals


def ias_score(explanations, manifest: GroundTruthManifest, literal: bool = False,
              magnitude: bool = False) -> float:
    """Mean normalized importance over every (ground-truth cell, forecast target) pair.

    Targets are the manifest's forecast nodes; every one needs at least one
    explanation. ``magnitude`` scores ``|I|`` instead of the signed importance.
    """
    return _ias(_tensors(explanations), manifest, manifest.expected_important_cells, literal, magnitude)


def _ias(tensors, manifest, cells, literal, magnitude) -> float:
    if not cells:
        raise MetricError("manifest has no ground-truth cells")
    by_node = _by_node(tensors)
    targets = [t["node"] for t in manifest.targets] or sorted(by_node)
    vals: List[float] = []
    for node in targets:
        if node not in by_node:
            raise MissingExplanationError(f"no explanation for forecast node {node}")
        for t in by_node[node]:
            scores = np.abs(t.scores) if magnitude else t.scores
            vals.extend(_cell_values(ias_normalize(scores, literal), t.t0, cells))
    if not vals:
        raise MetricError("no ground-truth cell falls inside any explained context")
    return float(np.mean(vals))


def evda(explanations, manifest: GroundTruthManifest, magnitude: bool = False) -> float:
    """Fraction of explained forecasts whose top external variable is the planted one.

    A variable's score is its maximum over all nodes and context steps.
    """
    tensors = _tensors(explanations)
    if not tensors or tensors[0].scores.shape[1] < 2:
        raise MetricError("evda needs at least one external variable")
    if not manifest.expected_external_variable:
        raise MetricError("manifest declares no expected external variable")
    by_node = _by_node(tensors)
    hits = total = 0
    for node, expected in manifest.expected_external_variable.items():
        if node not in by_node:
            raise MissingExplanationError(f"no explanation for forecast node {node}")
        for t in by_node[node]:
            s = np.abs(t.scores) if magnitude else t.scores
            per_var = s[:, 1:, :].max(axis=(0, 2))
            hits += int(np.argmax(per_var)) + 1 == expected
            total += 1
    return hits / total


def _key(t: ImportanceTensor):
    tg = t.target
    return (int(tg.node), int(tg.step), getattr(tg, "label", repr(tg)), t.t0)


def delta_eval(expl_before, expl_after, manifest: GroundTruthManifest, literal: bool = False,
               magnitude: bool = False) -> MetricReport:
    """Score ``I_after - I_before`` per target with IAS (and EVDA when applicable)."""
    before = {_key(t): t for t in _tensors(expl_before)}
    after = {_key(t): t for t in _tensors(expl_after)}
    if set(before) != set(after):
        raise ConfigMismatchError("before/after explanations cover different targets")
    deltas = []
    for k, a in after.items():
        b = before[k]
        if a.method != b.method or a.metadata.get("config") != b.metadata.get("config"):
            raise ConfigMismatchError(f"explanations for node {k[0]} step {k[1]} were produced with different configs")
        if a.scores.shape != b.scores.shape:
            raise ConfigMismatchError(f"explanations for node {k[0]} step {k[1]} differ in shape")
        deltas.append(ImportanceTensor(a.scores - b.scores, a.target, a.method, dict(a.metadata)))
    return report(deltas, manifest, literal=literal, magnitude=magnitude,
                  config_echo={"protocol": "delta", "literal": literal, "magnitude": magnitude})


def report(explanations, manifest: GroundTruthManifest, literal: bool = False, magnitude: bool = False,
           config_echo: Optional[dict] = None) -> MetricReport:
    tensors = _tensors(explanations)
    per = []
    indices = sorted({c.get("placement", 0) for c in manifest.expected_important_cells})
    for idx in indices:
        cells = [c for c in manifest.expected_important_cells if c.get("placement", 0) == idx]
        pl, an = manifest.placements[idx] if idx < len(manifest.placements) else (None, None)
        per.append({
            "placement": idx,
            "mode": pl.mode if pl else None,
            "anomaly_kind": an.kind if an else None,
            "ias": _ias(tensors, manifest, cells, literal, magnitude),
        })
    ias = _ias(tensors, manifest, manifest.expected_important_cells, literal, magnitude)
    ev = None
    if manifest.expected_external_variable and tensors and tensors[0].scores.shape[1] > 1:
        ev = evda(tensors, manifest, magnitude)
    echo = {"literal": literal, "magnitude": magnitude}
    echo.update(config_echo or {})
    return MetricReport(ias, ev, per, echo, len(tensors))
