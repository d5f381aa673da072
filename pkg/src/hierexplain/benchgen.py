"""Semi-synthetic hierarchical benchmarks with planted ground truth.

Anomalies of three families are injected into chosen cells of a base panel:

* ``freq_shapes``: ``amplitude * sin(2 pi f k / n)`` over the window.
* ``seq_comb``: a high-frequency oscillation of half the amplitude on top of a
  linear ramp that reaches ``+-amplitude`` at the end of the window.
* ``low_var``: the window is replaced by its mean plus Gaussian draws whose
  standard deviation is ``var_ratio`` times that of the surrounding series.

Target-variable anomalies are always injected at leaves (split evenly over the
leaves beneath the chosen node) and the change is aggregated upward, so the
panel stays coherent. External-variable anomalies are written directly.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .hierarchy import HierarchyTree
from .panel import SeriesPanel, WindowTask, load_panel
from .seeding import derive_seed

ANOMALY_KINDS = ("freq_shapes", "seq_comb", "low_var")
PLACEMENT_MODES = ("same_series", "cross_series", "cross_level", "external_variable")
TARGET_POLICIES = ("lca_parent", "lca", "root")
DEFAULT_FREQUENCY = {"freq_shapes": 1.0, "seq_comb": 4.0, "low_var": 0.0}


class BenchConfigError(ValueError):
    """Invalid benchmark configuration; ``field`` names the offending entry."""

    def __init__(self, message, field_path: str = ""):
        self.field = field_path
        super().__init__(f"{field_path}: {message}" if field_path else message)


class OverlapError(BenchConfigError):
    pass


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    length: int = 8
    amplitude: float = 3.0
    frequency: Optional[float] = None
    slope_sign: str = "up"
    var_ratio: float = 0.1

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise BenchConfigError(f"unknown anomaly kind {self.kind!r}", "anomaly.kind")
        if self.length < 4:
            raise BenchConfigError("length must be >= 4", "anomaly.length")
        if not self.amplitude > 0:
            raise BenchConfigError("amplitude must be > 0", "anomaly.amplitude")
        if self.slope_sign not in ("up", "down"):
            raise BenchConfigError("slope_sign must be 'up' or 'down'", "anomaly.slope_sign")
        if not 0 < self.var_ratio < 1:
            raise BenchConfigError("var_ratio must lie in (0, 1)", "anomaly.var_ratio")
        if self.frequency is None:
            object.__setattr__(self, "frequency", DEFAULT_FREQUENCY[self.kind])

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PlacementSpec:
    mode: str
    nodes: Tuple[int, ...]
    variable: int = 0
    t_start: Optional[int] = None
    seed: int = 0
    # repeat the anomaly every ``period`` steps over the whole series so it is forecastable
    period: Optional[int] = None

    def __post_init__(self):
        if self.period is not None and self.period < 1:
            raise BenchConfigError("period must be positive", "placement.period")
        object.__setattr__(self, "nodes", tuple(int(n) for n in self.nodes))
        if self.mode not in PLACEMENT_MODES:
            raise BenchConfigError(f"unknown placement mode {self.mode!r}", "placement.mode")
        if not self.nodes:
            raise BenchConfigError("placement needs at least one node", "placement.nodes")
        if self.mode == "cross_level" and len(set(self.nodes)) < 2:
            raise BenchConfigError("cross_level needs at least two nodes", "placement.nodes")
        if self.mode == "external_variable" and self.variable < 1:
            raise BenchConfigError("external_variable placements need variable > 0", "placement.variable")

    def starts(self, length: int, T: int) -> List[int]:
        """Window starts: ``t_start`` alone, or every ``period`` steps around it that fits in ``[0, T)``."""
        if self.period is None:
            return [self.t_start]
        if self.period < length:
            raise BenchConfigError(f"period {self.period} is shorter than the anomaly length {length}",
                                   "placement.period")
        first = self.t_start - (self.t_start // self.period) * self.period
        return [t for t in range(first, T - length + 1, self.period)]

    def validate(self, tree: HierarchyTree) -> None:
        for n in self.nodes:
            tree._check(n)
        if self.mode == "cross_series":
            parents = {tree.parent(n) for n in self.nodes}
            if len(parents) != 1 or None in parents:
                raise BenchConfigError("cross_series nodes must share one parent", "placement.nodes")

    def to_dict(self):
        d = asdict(self)
        d["nodes"] = list(self.nodes)
        return d


@dataclass
class GroundTruthManifest:
    placements: List[Tuple[PlacementSpec, AnomalySpec]] = field(default_factory=list)
    # dicts with node, variable, t_start, t_end (end exclusive, absolute time)
    expected_important_cells: List[dict] = field(default_factory=list)
    # forecast node -> external variable index that drives it
    expected_external_variable: Dict[int, int] = field(default_factory=dict)
    # placement index -> lca node (cross_level placements)
    expected_lca: Dict[int, int] = field(default_factory=dict)
    # forecast targets to explain: dicts with node, step
    targets: List[dict] = field(default_factory=list)
    context_end: Optional[int] = None
    context_length: Optional[int] = None
    horizon: Optional[int] = None
    injection: str = "target anomalies injected at leaves and aggregated upward"

    def cells(self) -> List[Tuple[int, int, int]]:
        out = []
        for c in self.expected_important_cells:
            out.extend((c["node"], c["variable"], t) for t in range(c["t_start"], c["t_end"]))
        return out

    def to_dict(self) -> dict:
        return {
            "placements": [{"placement": p.to_dict(), "anomaly": a.to_dict()} for p, a in self.placements],
            "expected_important_cells": [dict(c) for c in self.expected_important_cells],
            "expected_external_variable": {str(k): v for k, v in self.expected_external_variable.items()},
            "expected_lca": {str(k): v for k, v in self.expected_lca.items()},
            "targets": [dict(t) for t in self.targets],
            "context_end": self.context_end,
            "context_length": self.context_length,
            "horizon": self.horizon,
            "injection": self.injection,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthManifest":
        return cls(
            placements=[
                (PlacementSpec(**{**p["placement"], "nodes": tuple(p["placement"]["nodes"])}),
                 AnomalySpec(**p["anomaly"]))
                for p in d.get("placements", [])
            ],
            expected_important_cells=[dict(c) for c in d.get("expected_important_cells", [])],
            expected_external_variable={int(k): int(v) for k, v in d.get("expected_external_variable", {}).items()},
            expected_lca={int(k): int(v) for k, v in d.get("expected_lca", {}).items()},
            targets=[dict(t) for t in d.get("targets", [])],
            context_end=d.get("context_end"),
            context_length=d.get("context_length"),
            horizon=d.get("horizon"),
            injection=d.get("injection", cls.injection),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "GroundTruthManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other):
        return isinstance(other, GroundTruthManifest) and self.to_dict() == other.to_dict()


def gen_anomaly(spec: AnomalySpec, seed: int = 0, base_sigma: float = 1.0,
                amplitude: Optional[float] = None) -> np.ndarray:
    """One anomaly window of ``spec.length`` values (additive except for ``low_var``)."""
    n = spec.length
    a = spec.amplitude if amplitude is None else amplitude
    k = np.arange(n)
    if spec.kind == "freq_shapes":
        return a * np.sin(2 * np.pi * spec.frequency * k / n)
    if spec.kind == "seq_comb":
        sign = 1.0 if spec.slope_sign == "up" else -1.0
        # cosine keeps integer-cycle oscillations visible at the Nyquist rate
        wave = 0.5 * a * np.cos(2 * np.pi * spec.frequency * k / n)
        return wave + sign * a * k / (n - 1)
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, spec.var_ratio * base_sigma, n)


def _target_node_for(tree: HierarchyTree, placement: PlacementSpec, policy: str) -> int:
    if policy == "root":
        return tree.root
    anchor = tree.lca(placement.nodes)
    if policy == "lca" or len(set(placement.nodes)) > 1:
        return anchor
    parent = tree.parent(anchor)
    return anchor if parent is None else parent


def _target_step(pl: PlacementSpec, an: AnomalySpec, context_end: Optional[int],
                 horizon: Optional[int], T: int) -> int:
    """Horizon step to explain: where the next recurrence peaks, else 0."""
    if pl.period is None or context_end is None or horizon is None:
        return 0
    peak = an.length // 2 if an.kind == "low_var" else int(np.argmax(np.abs(gen_anomaly(an))))
    for t0 in pl.starts(an.length, T):
        if t0 + peak >= context_end:
            step = t0 + peak - context_end
            return step if step < horizon else 0
    return 0


def _inject(panel: SeriesPanel, placements: Sequence[Tuple[PlacementSpec, AnomalySpec]],
            scale: Optional[float], context_end: Optional[int], context_length: Optional[int],
            policy: str = "lca_parent", horizon: Optional[int] = None) -> Tuple[SeriesPanel, GroundTruthManifest]:
    tree = panel.tree
    N, V, T = panel.shape
    base = panel.data
    delta = np.zeros(panel.shape)
    occupied = np.full(panel.shape, -1, dtype=int)
    manifest = GroundTruthManifest(context_end=context_end, context_length=context_length)
    S = tree.summing_matrix()
    leaf_col = {leaf: k for k, leaf in enumerate(tree.leaves)}

    for idx, (pl, an) in enumerate(placements):
        pl.validate(tree)
        if not 0 <= pl.variable < V:
            raise BenchConfigError(f"variable {pl.variable} outside 0..{V - 1}", f"placements[{idx}].variable")
        if pl.t_start is None:
            raise BenchConfigError("t_start must be resolved before injection", f"placements[{idx}].t_start")
        if pl.t_start < 0 or pl.t_start + an.length > T:
            raise BenchConfigError(f"window [{pl.t_start}, {pl.t_start + an.length}) outside 0..{T}",
                                   f"placements[{idx}].t_start")
        for occ, t0 in enumerate(pl.starts(an.length, T)):
            t1 = t0 + an.length
            for j, node in enumerate(pl.nodes):
                sub_seed = derive_seed(pl.seed, idx, j, occ)
                if pl.variable == 0:
                    leaves = [l for l in tree.leaves_under(node) if S[node, leaf_col[l]] != 0]
                    if not leaves:
                        raise BenchConfigError(f"node {node} has no leaf with a nonzero weight path",
                                               f"placements[{idx}].nodes")
                    receivers = [(l, S[node, leaf_col[l]] * len(leaves)) for l in leaves]
                    recv_series = base[node, 0]
                else:
                    receivers = [(node, 1.0)]
                    recv_series = base[node, pl.variable]
                sigma = _local_sigma(recv_series, t0, t1, an.length)
                for k, (cell_node, weight) in enumerate(receivers):
                    cells = (cell_node, pl.variable, slice(t0, t1))
                    clash = occupied[cells]
                    if np.any(clash >= 0):
                        other = int(clash[clash >= 0][0])
                        raise OverlapError(
                            f"placements {other} and {idx} both write node {cell_node}, "
                            f"variable {pl.variable}, t in [{t0}, {t1})", f"placements[{idx}]")
                    occupied[cells] = idx
                    mask = panel.missing_mask[cells]
                    if an.kind == "low_var":
                        own = base[cell_node, pl.variable, t0:t1]
                        own_sigma = _local_sigma(base[cell_node, pl.variable], t0, t1, an.length)
                        draws = gen_anomaly(an, derive_seed(sub_seed, k), base_sigma=own_sigma)
                        level = np.nanmean(own) if np.any(np.isfinite(own)) else 0.0
                        delta[cells] = np.where(mask, 0.0, level + draws - own)
                    else:
                        amp = an.amplitude if scale is None else scale * sigma
                        wave = gen_anomaly(an, sub_seed, amplitude=amp) / weight
                        delta[cells] = np.where(mask, 0.0, wave)
                    manifest.expected_important_cells.append(
                        {"node": int(cell_node), "variable": int(pl.variable), "t_start": int(t0),
                         "t_end": int(t1), "placement": idx})
        target = _target_node_for(tree, pl, policy)
        if pl.mode == "cross_level":
            manifest.expected_lca[idx] = tree.lca(pl.nodes)
        if pl.variable > 0:
            manifest.expected_external_variable[target] = int(pl.variable)
        step = _target_step(pl, an, context_end, horizon, T)
        if not any(t["node"] == target and t["step"] == step for t in manifest.targets):
            manifest.targets.append({"node": int(target), "step": step})
        manifest.placements.append((pl, an))

    if not placements:
        return panel, manifest
    # target deltas live on leaves; push them up the tree
    target_delta = tree.aggregate_array(np.where(np.isin(np.arange(N), tree.leaves)[:, None], delta[:, 0, :], 0.0))
    delta[:, 0, :] = target_delta
    data = np.where(panel.missing_mask, np.nan, base + delta)
    return panel.with_data(data), manifest


def _local_sigma(series: np.ndarray, t0: int, t1: int, length: int) -> float:
    lo, hi = max(0, t0 - length), min(len(series), t1 + length)
    window = series[lo:hi]
    window = window[np.isfinite(window)]
    s = float(np.std(window)) if window.size > 1 else 0.0
    return s if s > 0 else 1.0


def inject_into_real(panel: SeriesPanel, placements: Sequence[Tuple[PlacementSpec, AnomalySpec]],
                     seed: int = 0, scale: float = 2.0, task: Optional[WindowTask] = None,
                     policy: str = "lca_parent") -> Tuple[SeriesPanel, GroundTruthManifest]:
    """Inject anomalies into a copy of ``panel`` with amplitudes scaled to local variability.

    Freq/seq amplitudes become ``scale`` times the local standard deviation of the
    receiving series; ``low_var`` windows shrink to ``var_ratio`` of it. The input panel
    is not modified, so before/after explanations can be compared.
    """
    context_end = context_length = horizon = None
    if task is not None:
        context_end = task.split_index(panel.T)
        context_length = task.context_length
        horizon = task.horizon
    rng = np.random.default_rng(seed)
    resolved = []
    for i, (pl, an) in enumerate(placements):
        if pl.t_start is None:
            if task is None:
                raise BenchConfigError("t_start missing and no task given to place the window",
                                       f"placements[{i}].t_start")
            pl = PlacementSpec(pl.mode, pl.nodes, pl.variable,
                               _draw_start(rng, context_end, task.context_length, an.length), pl.seed, pl.period)
        resolved.append((pl, an))
    return _inject(panel, resolved, scale, context_end, context_length, policy, horizon)


def _draw_start(rng, context_end: int, context_length: int, length: int) -> int:
    lo, hi = context_end - context_length, context_end - length
    if hi < lo:
        raise BenchConfigError(f"anomaly length {length} exceeds context length {context_length}",
                               "anomaly.length")
    return int(rng.integers(lo, hi + 1))


# benchmark configuration


@dataclass
class PlacementTemplate:
    mode: str
    anomaly: AnomalySpec
    nodes: Optional[Tuple[int, ...]] = None
    variable: Optional[int] = None
    t_start: Optional[int] = None
    n_nodes: int = 2
    period: Optional[int] = None

    @classmethod
    def from_dict(cls, d: dict, where: str) -> "PlacementTemplate":
        try:
            anomaly = AnomalySpec(**d["anomaly"])
        except KeyError:
            raise BenchConfigError("missing 'anomaly'", where) from None
        except TypeError as exc:
            raise BenchConfigError(str(exc), f"{where}.anomaly") from None
        except BenchConfigError as exc:
            raise BenchConfigError(str(exc), where) from None
        unknown = set(d) - {"mode", "anomaly", "nodes", "variable", "t_start", "n_nodes", "period"}
        if unknown:
            raise BenchConfigError(f"unknown fields {sorted(unknown)}", where)
        if d.get("mode") not in PLACEMENT_MODES:
            raise BenchConfigError(f"mode must be one of {PLACEMENT_MODES}", f"{where}.mode")
        nodes = d.get("nodes")
        return cls(d["mode"], anomaly, tuple(nodes) if nodes is not None else None,
                   d.get("variable"), d.get("t_start"), int(d.get("n_nodes", 2)), d.get("period"))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "anomaly": self.anomaly.to_dict(),
                "nodes": None if self.nodes is None else list(self.nodes),
                "variable": self.variable, "t_start": self.t_start, "n_nodes": self.n_nodes,
                "period": self.period}


@dataclass
class BenchmarkConfig:
    n_datasets: int = 1
    branching: int = 4
    levels: int = 3
    hierarchy_path: Optional[str] = None
    T: int = 120
    noise_sigma: float = 1.0
    n_external: int = 3
    context_length: int = 12
    horizon: int = 12
    split_fraction: float = 0.6
    placements: List[PlacementTemplate] = field(default_factory=list)
    target_policy: str = "lca_parent"
    # real-panel base: {"hierarchy": path, "series": path, "scale": 2.0}
    real_panel: Optional[dict] = None
    seed: int = 0

    def __post_init__(self):
        if self.n_datasets < 1:
            raise BenchConfigError("n_datasets must be >= 1", "n_datasets")
        if self.target_policy not in TARGET_POLICIES:
            raise BenchConfigError(f"target_policy must be one of {TARGET_POLICIES}", "target_policy")
        if self.n_external < 0:
            raise BenchConfigError("n_external must be >= 0", "n_external")
        if self.noise_sigma <= 0:
            raise BenchConfigError("noise_sigma must be > 0", "noise_sigma")
        try:
            self.task
        except ValueError as exc:
            raise BenchConfigError(str(exc), "context_length") from None

    @property
    def task(self) -> WindowTask:
        return WindowTask(self.context_length, self.horizon, self.split_fraction)

    def tree(self) -> HierarchyTree:
        if self.hierarchy_path:
            return HierarchyTree.load(self.hierarchy_path)
        return HierarchyTree.balanced(self.branching, self.levels)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "placements"}
        d["placements"] = [p.to_dict() for p in self.placements]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        if not isinstance(d, dict):
            raise BenchConfigError("config must be a JSON object")
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise BenchConfigError(f"unknown fields {sorted(unknown)}", "config")
        raw = d.pop("placements", [])
        if not isinstance(raw, list):
            raise BenchConfigError("must be a list", "placements")
        templates = [PlacementTemplate.from_dict(p, f"placements[{i}]") for i, p in enumerate(raw)]
        try:
            return cls(placements=templates, **d)
        except TypeError as exc:
            raise BenchConfigError(str(exc), "config") from None


def _resolve(template: PlacementTemplate, tree: HierarchyTree, cfg: BenchmarkConfig,
             rng: np.random.Generator, seed: int, where: str) -> PlacementSpec:
    mode = template.mode
    leaves = list(tree.leaves)
    if template.nodes is not None:
        nodes = tuple(template.nodes)
    elif mode in ("same_series", "external_variable"):
        nodes = (int(rng.choice(leaves)),)
    elif mode == "cross_series":
        parents = [u for u in tree.nodes if len(tree.children(u)) >= 2]
        if not parents:
            raise BenchConfigError("tree has no node with two children", where)
        p = int(rng.choice(parents))
        k = min(template.n_nodes, len(tree.children(p)))
        nodes = tuple(sorted(int(c) for c in rng.choice(tree.children(p), size=k, replace=False)))
    else:
        if len(leaves) < 2:
            raise BenchConfigError("cross_level needs at least two leaves", where)
        k = min(max(template.n_nodes, 2), len(leaves))
        nodes = tuple(sorted(int(c) for c in rng.choice(leaves, size=k, replace=False)))
    if template.variable is not None:
        variable = int(template.variable)
    elif mode == "external_variable":
        if cfg.n_external < 1:
            raise BenchConfigError("external_variable placement without external variables", where)
        variable = int(rng.integers(1, cfg.n_external + 1))
    else:
        variable = 0
    t_start = template.t_start
    if t_start is None:
        try:
            t_start = _draw_start(rng, cfg.task.split_index(cfg.T), cfg.context_length, template.anomaly.length)
        except BenchConfigError as exc:
            raise BenchConfigError(str(exc), where) from None
    try:
        spec = PlacementSpec(mode, nodes, variable, int(t_start), seed, template.period)
        spec.validate(tree)
    except (BenchConfigError, KeyError) as exc:
        raise BenchConfigError(str(exc), where) from None
    return spec


def build_synthetic_panel(config: BenchmarkConfig, index: int = 0) -> Tuple[SeriesPanel, GroundTruthManifest]:
    """Dataset ``index`` of a benchmark: Gaussian background plus planted anomalies."""
    ds_seed = derive_seed(config.seed, "dataset", index)
    rng = np.random.default_rng(ds_seed)
    if config.real_panel:
        real = config.real_panel
        base = load_panel(real["hierarchy"], real["series"])
        tree = base.tree
    else:
        tree = config.tree()
        V = 1 + config.n_external
        N = tree.n_nodes
        data = rng.normal(0.0, config.noise_sigma, (N, V, config.T))
        data[:, 0, :] = tree.aggregate_array(data[:, 0, :])
        variables = ("target",) + tuple(f"ext{i}" for i in range(1, V))
        base = SeriesPanel(tree, variables, data)
    placements = []
    for i, tmpl in enumerate(config.placements):
        spec = _resolve(tmpl, tree, config, rng, derive_seed(ds_seed, "placement", i), f"placements[{i}]")
        placements.append((spec, tmpl.anomaly))
    scale = float(config.real_panel.get("scale", 2.0)) if config.real_panel else None
    if scale is None:
        # pure-synthetic amplitudes are absolute, in units of the background noise
        placements = [(p, AnomalySpec(**{**a.to_dict(), "amplitude": a.amplitude * config.noise_sigma}))
                      for p, a in placements]
    split_at = config.task.split_index(base.T)
    panel, manifest = _inject(base, placements, scale, split_at, config.context_length,
                              config.target_policy, config.horizon)
    return panel, manifest


def generate(config: BenchmarkConfig, jobs: int = 1) -> Iterator[Tuple[int, SeriesPanel, GroundTruthManifest]]:
    indices = range(config.n_datasets)
    if jobs <= 1:
        for i in indices:
            yield (i,) + build_synthetic_panel(config, i)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for i, (panel, manifest) in zip(indices, pool.map(build_synthetic_panel, [config] * len(indices), indices)):
            yield i, panel, manifest


# bundles


def write_bundle(directory, panel: SeriesPanel, manifest: GroundTruthManifest, config: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    panel.save(d / "hierarchy.json", d / "series.csv")
    manifest.save(d / "ground_truth.json")
    (d / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    return d


def read_bundle(directory) -> Tuple[SeriesPanel, GroundTruthManifest, dict]:
    d = Path(directory)
    panel = load_panel(d / "hierarchy.json", d / "series.csv")
    manifest = GroundTruthManifest.load(d / "ground_truth.json")
    config = json.loads((d / "config.json").read_text()) if (d / "config.json").exists() else {}
    return panel, manifest, config
