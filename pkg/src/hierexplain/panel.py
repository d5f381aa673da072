"""Hierarchical multivariate panels: storage, CSV ingestion, splitting, windowing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .hierarchy import HierarchyTree, UnknownNodeError

COHERENCY_TOL = 1e-6


class PanelError(ValueError):
    pass


class DuplicateCellError(PanelError):
    def __init__(self, node, variable, t):
        self.cell = (node, variable, t)
        super().__init__(f"duplicate cell (node={node}, variable={variable!r}, t={t})")


class RaggedTimeAxisError(PanelError):
    pass


class WindowError(PanelError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SeriesPanel:
    """Dense ``(node, variable, time)`` array over a hierarchy.

    Variable 0 is always the forecast target; the rest are external variables.
    Arrays are made read-only on construction.
    """

    tree: HierarchyTree
    variables: Tuple[str, ...]
    data: np.ndarray
    missing_mask: Optional[np.ndarray] = None
    coherency_tol: float = COHERENCY_TOL
    incoherent: bool = field(init=False)
    residual: float = field(init=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3:
            raise PanelError(f"data must be 3-d (node, variable, time), got shape {data.shape}")
        n, v, _ = data.shape
        if n != self.tree.n_nodes:
            raise PanelError(f"data has {n} nodes, tree has {self.tree.n_nodes}")
        if v != len(self.variables):
            raise PanelError(f"data has {v} variables, {len(self.variables)} names given")
        mask = (
            np.zeros(data.shape, dtype=bool)
            if self.missing_mask is None
            else np.asarray(self.missing_mask, dtype=bool)
        )
        if mask.shape != data.shape:
            raise PanelError("missing_mask shape must match data")
        if np.any(~np.isfinite(data[~mask])):
            raise PanelError("non-finite value in an unmasked cell")
        data = np.where(mask, np.nan, data)
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "missing_mask", _frozen(mask))
        resid, bad = self._coherency(data[:, 0, :])
        object.__setattr__(self, "residual", resid)
        object.__setattr__(self, "incoherent", bad)

    def _coherency(self, target: np.ndarray) -> Tuple[float, bool]:
        tree = self.tree
        worst, bad = 0.0, False
        for u in tree.nodes:
            ch = tree.children(u)
            if not ch:
                continue
            resid = np.abs(target[u] - sum(tree.phi(u, c) * target[c] for c in ch))
            if not np.any(np.isfinite(resid)):
                continue
            r = float(np.nanmax(resid))
            worst = max(worst, r)
            scale = np.nanmean(np.abs(target[u]))
            scale = scale if np.isfinite(scale) and scale > 0 else 1.0
            if r > self.coherency_tol * scale:
                bad = True
        return worst, bad

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    @property
    def T(self) -> int:
        return self.data.shape[2]

    @property
    def n_nodes(self) -> int:
        return self.data.shape[0]

    @property
    def n_variables(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray) -> "SeriesPanel":
        return SeriesPanel(self.tree, self.variables, data, self.missing_mask, self.coherency_tol)

    def save(self, hierarchy_path, series_path) -> None:
        self.tree.save(hierarchy_path)
        save_series_csv(self, series_path)


def save_series_csv(panel: SeriesPanel, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "variable", "t", "value"])
        n, v, T = panel.shape
        for i in range(n):
            for j in range(v):
                name = panel.variables[j]
                row = panel.data[i, j]
                mask = panel.missing_mask[i, j]
                for t in range(T):
                    if not mask[t]:
                        # repr round-trips float64 exactly
                        w.writerow([i, name, t, repr(float(row[t]))])


def load_panel(hierarchy_path, series_path, variables: Optional[Sequence[str]] = None) -> SeriesPanel:
    """Read ``hierarchy.json`` and a long-format ``node_id,variable,t,value`` CSV.

    Variable order follows first appearance in the CSV unless ``variables`` is given;
    the first variable is the target. Cells absent from the CSV are masked.
    """
    tree = HierarchyTree.load(hierarchy_path)
    rows = []
    var_order: List[str] = list(variables) if variables is not None else []
    with open(series_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = {"node_id", "variable", "t", "value"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise PanelError(f"series header must be node_id,variable,t,value; got {reader.fieldnames}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                node = int(rec["node_id"])
                t = int(rec["t"])
                value = float(rec["value"])
            except (TypeError, ValueError) as exc:
                raise PanelError(f"line {lineno}: {exc}") from None
            if not 0 <= node < tree.n_nodes:
                raise UnknownNodeError(node)
            if t < 0:
                raise RaggedTimeAxisError(f"line {lineno}: negative time index {t}")
            name = rec["variable"]
            if name not in var_order:
                if variables is not None:
                    raise PanelError(f"line {lineno}: unknown variable {name!r}")
                var_order.append(name)
            rows.append((node, var_order.index(name), t, value))
    if not rows:
        raise PanelError("series file has no rows")

    # every (node, variable) series must span the same time range
    spans = {}
    for node, var, t, _ in rows:
        lo, hi = spans.get((node, var), (t, t))
        spans[(node, var)] = (min(lo, t), max(hi, t))
    T = max(hi for _, hi in spans.values()) + 1
    starts = {lo for lo, _ in spans.values()}
    ends = {hi for _, hi in spans.values()}
    if starts != {0} or len(ends) != 1:
        raise RaggedTimeAxisError("series do not share a common 0..T-1 time axis")

    shape = (tree.n_nodes, len(var_order), T)
    data = np.full(shape, np.nan)
    seen = np.zeros(shape, dtype=bool)
    for node, var, t, value in rows:
        if seen[node, var, t]:
            raise DuplicateCellError(node, var_order[var], t)
        seen[node, var, t] = True
        data[node, var, t] = value
    return SeriesPanel(tree, tuple(var_order), data, ~seen)


@dataclass(frozen=True)
class WindowTask:
    context_length: int
    horizon: int
    split_fraction: float = 0.6

    def __post_init__(self):
        if self.context_length < 1 or self.horizon < 1:
            raise WindowError("context_length and horizon must be positive")
        if not 0 < self.split_fraction < 1:
            raise WindowError("split_fraction must lie in (0, 1)")

    def split_index(self, T: int) -> int:
        return int(math.floor(self.split_fraction * T))


@dataclass(frozen=True, eq=False)
class TrainView:
    panel: SeriesPanel
    task: WindowTask
    end: int

    @property
    def data(self) -> np.ndarray:
        return self.panel.data[:, :, : self.end]

    @property
    def missing_mask(self) -> np.ndarray:
        return self.panel.missing_mask[:, :, : self.end]

    def window_starts(self) -> range:
        """Start times of every full (context, horizon) window inside the training range."""
        span = self.task.context_length + self.task.horizon
        return range(0, self.end - span + 1)


@dataclass(frozen=True, eq=False)
class TestView:
    panel: SeriesPanel
    task: WindowTask
    start: int

    def window_ends(self) -> range:
        """Context end indices (exclusive) of the rolling test windows."""
        return range(self.start, self.panel.T - self.task.horizon + 1)

    def __len__(self):
        return len(self.window_ends())

    def window(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """Return ``(context, horizon_values)`` for the ``k``-th rolling window."""
        end = self.window_ends()[k]
        L, H = self.task.context_length, self.task.horizon
        data = self.panel.data
        return data[:, :, end - L : end], data[:, :, end : end + H]


def split(panel: SeriesPanel, task: WindowTask) -> Tuple[TrainView, TestView]:
    s = task.split_index(panel.T)
    if task.context_length + task.horizon > panel.T:
        raise WindowError(
            f"context {task.context_length} + horizon {task.horizon} exceeds T={panel.T}"
        )
    if s < task.context_length:
        raise WindowError(
            f"split index {s} leaves no room for a context of {task.context_length} steps"
        )
    if s + task.horizon > panel.T:
        raise WindowError("no test window fits after the split")
    return TrainView(panel, task, s), TestView(panel, task, s)
