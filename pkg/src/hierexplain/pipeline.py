"""Glue between bundles, trained forecasters, explanations and metric reports.

Explanations are computed on the first test window's context (the one ending
at the train/test split), in the model's standardized input space, for every
forecast target named by the manifest.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .attribution import AttributionConfig, ImportanceTensor
from .benchgen import GroundTruthManifest
from .forecaster import Forecaster, OutputTarget, ShapeMismatchError
from .hier_explain import EdgeCache, HierConfig, explain
from .panel import SeriesPanel, WindowTask
from .prob_explain import QuantileTarget, explain_quantile

CSV_HEADER = ("forecast_node", "horizon_step", "head_component", "method", "input_node",
              "variable", "t", "score")
QUANTILE_HEADER = CSV_HEADER + ("level",)


def check_compatible(model: Forecaster, panel: SeriesPanel) -> None:
    if model.tree != panel.tree:
        raise ShapeMismatchError("checkpoint hierarchy differs from the panel's")
    if model.n_variables != panel.n_variables:
        raise ShapeMismatchError(
            f"checkpoint expects {model.n_variables} variables, panel has {panel.n_variables}")


def context_end(panel: SeriesPanel, manifest: GroundTruthManifest, task: WindowTask) -> int:
    if manifest.context_end is not None:
        return int(manifest.context_end)
    return task.split_index(panel.T)


def explained_context(model: Forecaster, panel: SeriesPanel, end: int) -> np.ndarray:
    L = model.spec.context_length
    if end < L or end > panel.T:
        raise ShapeMismatchError(f"context ending at {end} does not fit a length-{L} window")
    return model.standardize(panel.data[:, :, end - L:end])


@dataclass
class ExplainJob:
    method: str
    mode: str = "subtree"
    level: Optional[float] = None
    config: AttributionConfig = field(default_factory=AttributionConfig)
    hcfg: HierConfig = field(default_factory=HierConfig)
    n_samples: int = 2000
    allow_fallback: bool = True
    # False forces sampled quantiles even for heads with a closed form
    analytic: bool = True

    def echo(self) -> dict:
        return {"method": self.method, "mode": self.mode, "level": self.level,
                "attribution": self.config.to_dict(),
                "hier": {"summary": self.hcfg.summary, "signed": self.hcfg.signed,
                         "normalize": self.hcfg.normalize},
                "n_samples": self.n_samples, "allow_fallback": self.allow_fallback,
                "analytic": self.analytic}


def explain_targets(model: Forecaster, panel: SeriesPanel, manifest: GroundTruthManifest,
                    job: ExplainJob, task: Optional[WindowTask] = None,
                    targets: Optional[Sequence[Tuple[int, int]]] = None) -> List[ImportanceTensor]:
    """One importance tensor per forecast target, tagged with ``t0`` and the job config."""
    check_compatible(model, panel)
    task = task or WindowTask(model.spec.context_length, model.spec.horizon)
    end = context_end(panel, manifest, task)
    x = explained_context(model, panel, end)
    t0 = end - model.spec.context_length
    if targets is None:
        targets = [(t["node"], t.get("step", 0)) for t in manifest.targets]
    # edge factors are shared by every target at the same horizon step
    caches: Dict[int, EdgeCache] = {}
    out = []
    for node, step in targets:
        if job.level is None:
            base = OutputTarget(node, step)
            edge_fn = None
            if job.mode == "subtree":
                if step not in caches:
                    caches[step] = EdgeCache(model, x, job.method, job.config, base, job.hcfg)
                edge_fn = caches[step]
            res = explain(model, x, node, job.method, job.mode, job.config, base, job.hcfg, edge_fn)
        else:
            qt = QuantileTarget(node, step, job.level, job.n_samples, job.config.seed)
            res = explain_quantile(model, x, qt, job.method, job.config, job.mode, job.hcfg,
                                   job.allow_fallback, job.analytic)
        imp = res.as_importance()
        imp.metadata.update({"t0": t0, "config": job.echo()})
        out.append(imp)
    return out


def timed_explain(model, panel, manifest, job, task=None) -> Tuple[List[ImportanceTensor], float]:
    start = time.perf_counter()
    res = explain_targets(model, panel, manifest, job, task)
    return res, time.perf_counter() - start


def write_explanations(path, tensors: Iterable[ImportanceTensor], level: Optional[float] = None) -> int:
    """Long-format CSV, one row per (target, input cell). Returns the row count."""
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(QUANTILE_HEADER if level is not None else CSV_HEADER)
        for imp in tensors:
            tgt = imp.target
            t0 = imp.t0
            N, V, L = imp.scores.shape
            for n in range(N):
                for v in range(V):
                    for k in range(L):
                        row = [tgt.node, tgt.step, tgt.label, imp.method, n, v, t0 + k,
                               repr(float(imp.scores[n, v, k]))]
                        if level is not None:
                            row.append(repr(float(level)))
                        w.writerow(row)
                        rows += 1
    return rows


def read_explanations(path, shape: Tuple[int, int, int]) -> List[ImportanceTensor]:
    """Inverse of :func:`write_explanations` for a known ``(N, V, L)`` context shape."""
    N, V, L = shape
    groups: Dict[tuple, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for r in reader:
            key = (int(r["forecast_node"]), int(r["horizon_step"]), r["head_component"], r["method"],
                   r.get("level") or None)
            groups.setdefault(key, {})[(int(r["input_node"]), int(r["variable"]), int(r["t"]))] = float(r["score"])
    out = []
    for (node, step, comp, method, level), cells in groups.items():
        t0 = min(t for _, _, t in cells)
        scores = np.zeros(shape)
        for (n, v, t), s in cells.items():
            if not (0 <= n < N and 0 <= v < V and 0 <= t - t0 < L):
                raise ValueError(f"{path}: cell ({n}, {v}, {t}) outside the context shape {shape}")
            scores[n, v, t - t0] = s
        if len(cells) != N * V * L:
            raise ValueError(f"{path}: target {node}/{step} covers {len(cells)} of {N * V * L} cells")
        if comp.startswith("q"):
            target = OutputTarget(node, step, "quantile", float(level or comp[1:]))
        else:
            target = OutputTarget(node, step, comp)
        out.append(ImportanceTensor(scores, target, method, {"t0": t0}))
    return out
