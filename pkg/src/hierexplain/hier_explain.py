"""Hierarchy-aware importance.

Importance between two non-adjacent nodes is approximated by the product of
importances along the tree path between them, each factor measured between
adjacent levels only. ``subtree_scores`` propagates these products outward
from the target node breadth-first; ``flat_scores`` attributes the target
output against every node's inputs at once and serves as the ablation.

An edge factor is always "attribution of the farther node's input cells to
the nearer node's output", in both the downward and upward directions.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .attribution import AttributionConfig, ImportanceTensor, attribute
from .forecaster import OutputTarget
from .hierarchy import HierarchyError, HierarchyTree


@dataclass(frozen=True)
class HierConfig:
    """Edge summary options.

    ``summary``: ``max`` (max-abs over cells) or ``mean`` (mean-abs).
    ``signed``: carry the sign of the largest-magnitude cell into the edge scalar.
    ``normalize``: divide each edge scalar by the largest |scalar| among the edges
    leaving the same nearer node, so chain products stay within [-1, 1].
    """

    summary: str = "max"
    signed: bool = True
    normalize: bool = False

    def __post_init__(self):
        if self.summary not in ("max", "mean"):
            raise ValueError("summary must be 'max' or 'mean'")


@dataclass
class EdgeImportance:
    from_output: int
    to_input: int
    matrix: np.ndarray  # (variable, time) scores of to_input's cells
    scalar: float


@dataclass
class HierImportanceMap:
    target: OutputTarget
    node_scalar: Dict[int, float]
    node_matrix: Dict[int, np.ndarray]
    mode: str
    method: str = ""
    metadata: dict = field(default_factory=dict)

    def tensor(self) -> np.ndarray:
        """Stack ``node_matrix`` into a ``(node, variable, time)`` array."""
        n = len(self.node_matrix)
        return np.stack([self.node_matrix[i] for i in range(n)])

    def as_importance(self) -> ImportanceTensor:
        return ImportanceTensor(self.tensor(), self.target, self.method,
                                {**self.metadata, "mode": self.mode})


def summarize(matrix: np.ndarray, hcfg: HierConfig = HierConfig()) -> float:
    flat = np.asarray(matrix, dtype=float).ravel()
    if flat.size == 0:
        return 0.0
    k = int(np.argmax(np.abs(flat)))
    mag = abs(flat[k]) if hcfg.summary == "max" else float(np.mean(np.abs(flat)))
    if hcfg.signed and flat[k] < 0:
        return -mag
    return float(mag)


def adjacent_importance(model, context, output_node: int, input_node: int, method: str,
                        config: AttributionConfig = AttributionConfig(),
                        target: OutputTarget = OutputTarget(0),
                        hcfg: HierConfig = HierConfig(), tree: Optional[HierarchyTree] = None) -> EdgeImportance:
    """Attribute ``output_node``'s forecast to ``input_node``'s cells, all other inputs held fixed.

    ``target`` supplies the horizon step and head component; its node is replaced.
    """
    tree = tree or model.tree
    if not tree.adjacent(output_node, input_node):
        raise HierarchyError(f"nodes {output_node} and {input_node} are not adjacent")
    res = attribute(method, model, context, target.with_node(output_node), config, nodes=[input_node])
    matrix = res.scores[input_node]
    return EdgeImportance(output_node, input_node, matrix, summarize(matrix, hcfg))


class EdgeCache:
    """Memoizes edge importances; edge factors do not depend on which node is being explained.

    Thread-safe; one cache per (model, context, method, config, step/component).
    """

    def __init__(self, model, context, method: str, config: AttributionConfig = AttributionConfig(),
                 target: OutputTarget = OutputTarget(0), hcfg: HierConfig = HierConfig()):
        self.model, self.context, self.method = model, context, method
        self.config, self.target, self.hcfg = config, target, hcfg
        self._store: Dict[Tuple[int, int], EdgeImportance] = {}
        self._lock = threading.Lock()
        self.evaluations = 0

    def __call__(self, output_node: int, input_node: int) -> EdgeImportance:
        key = (output_node, input_node)
        with self._lock:
            hit = self._store.get(key)
        if hit is not None:
            return hit
        edge = adjacent_importance(self.model, self.context, output_node, input_node, self.method,
                                   self.config, self.target, self.hcfg)
        with self._lock:
            self._store.setdefault(key, edge)
            self.evaluations += 1
        return edge


def subtree_scores(model, context, target_node: int, method: str,
                   config: AttributionConfig = AttributionConfig(),
                   target: OutputTarget = OutputTarget(0), hcfg: HierConfig = HierConfig(),
                   edge_fn: Optional[Callable[[int, int], EdgeImportance]] = None,
                   tree: Optional[HierarchyTree] = None,
                   self_fn: Optional[Callable[[int], np.ndarray]] = None) -> HierImportanceMap:
    """Breadth-first chain-product importance of every node for one target output.

    ``edge_fn(nearer, farther)`` overrides the edge oracle (used with stubs in tests
    and with :class:`EdgeCache` when explaining many targets). The target's own
    cells are attributed directly and scaled by 1.
    """
    tree = tree or model.tree
    target_node = tree._check(target_node)
    tgt = target.with_node(target_node)
    if edge_fn is None:
        edge_fn = lambda u, v: adjacent_importance(model, context, u, v, method, config, tgt, hcfg, tree)

    edges: Dict[int, Tuple[EdgeImportance, float]] = {}
    scores = {target_node: 1.0}
    queue = deque([(target_node, 1.0)])
    visited = set()
    n_evals = 0
    while queue:
        current, score_current = queue.popleft()
        hop = [c for c in tree.children(current) if c not in visited]
        parent = tree.parent(current)
        if parent is not None and parent not in visited:
            hop.append(parent)
        found = {}
        for nxt in hop:
            found[nxt] = edge_fn(current, nxt)
            n_evals += 1
        if hcfg.normalize and found:
            scale = max(abs(e.scalar) for e in found.values())
        else:
            scale = 1.0
        for nxt, edge in found.items():
            factor = edge.scalar / scale if scale > 0 else 0.0
            scores[nxt] = score_current * factor
            edges[nxt] = (edge, scale if scale > 0 else 1.0)
            queue.append((nxt, scores[nxt]))
        visited.add(current)

    if self_fn is not None:
        own = self_fn(target_node)
    else:
        own = attribute(method, model, context, tgt, config, nodes=[target_node]).scores[target_node]
    matrices = {target_node: np.asarray(own, dtype=float)}
    for j, (edge, scale) in edges.items():
        # chain scalar up to the nearer node times the final-hop matrix
        matrices[j] = scores[edge.from_output] * np.asarray(edge.matrix, dtype=float) / scale
    node_scalar = {i: float(scores[i]) for i in tree.nodes}
    node_matrix = {i: matrices[i] for i in tree.nodes}
    return HierImportanceMap(
        tgt, node_scalar, node_matrix, "subtree", method,
        {"edge_evaluations": n_evals, "distant_matrices": "chain-scaled final hop"},
    )


def flat_scores(model, context, target_node: int, method: str,
                config: AttributionConfig = AttributionConfig(),
                target: OutputTarget = OutputTarget(0), hcfg: HierConfig = HierConfig(),
                tree: Optional[HierarchyTree] = None) -> HierImportanceMap:
    """One attribution pass of the target output over every node's cells."""
    tree = tree or model.tree
    target_node = tree._check(target_node)
    tgt = target.with_node(target_node)
    res = attribute(method, model, context, tgt, config)
    node_matrix = {i: res.scores[i] for i in tree.nodes}
    node_scalar = {i: summarize(res.scores[i], hcfg) for i in tree.nodes}
    return HierImportanceMap(tgt, node_scalar, node_matrix, "flat", method, dict(res.metadata))


def explain(model, context, target_node: int, method: str, mode: str = "subtree",
            config: AttributionConfig = AttributionConfig(), target: OutputTarget = OutputTarget(0),
            hcfg: HierConfig = HierConfig(), edge_fn=None) -> HierImportanceMap:
    if mode == "subtree":
        return subtree_scores(model, context, target_node, method, config, target, hcfg, edge_fn)
    if mode == "flat":
        return flat_scores(model, context, target_node, method, config, target, hcfg)
    raise ValueError(f"mode must be 'subtree' or 'flat', got {mode!r}")
