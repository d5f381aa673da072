"""Tree-structured hierarchies with aggregation weights.

A hierarchy is a rooted tree over dense integer node ids ``0..N-1``. Every
edge ``(parent, child)`` carries a finite aggregation weight ``phi``; the
target series of an internal node is coherent when it equals the weighted
sum of its children.
"""

from __future__ import annotations

import json
import math
from collections import deque
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np


class HierarchyError(ValueError):
    """Raised for malformed trees or invalid node references."""


class UnknownNodeError(HierarchyError, KeyError):
    def __init__(self, node):
        self.node = node
        super().__init__(f"unknown node id: {node!r}")

    def __str__(self):
        return self.args[0]


class HierarchyTree:
    """Immutable rooted tree with per-edge aggregation weights.

    Args:
        parent: ``parent[i]`` is the parent id of node ``i`` or ``None`` for the root.
        phi: optional mapping ``(parent, child) -> weight``; missing edges default to 1.0.
        names: optional display names, one per node.
    """

    def __init__(
        self,
        parent: Sequence[Optional[int]],
        phi: Optional[Mapping[Tuple[int, int], float]] = None,
        names: Optional[Sequence[str]] = None,
    ):
        n = len(parent)
        if n == 0:
            raise HierarchyError("a hierarchy needs at least one node")
        parent = tuple(None if p is None else int(p) for p in parent)
        roots = [i for i, p in enumerate(parent) if p is None]
        if len(roots) != 1:
            raise HierarchyError(f"expected exactly one root, found {len(roots)}")
        for i, p in enumerate(parent):
            if p is not None and not 0 <= p < n:
                raise UnknownNodeError(p)
            if p == i:
                raise HierarchyError(f"node {i} is its own parent")

        children: List[List[int]] = [[] for _ in range(n)]
        for i, p in enumerate(parent):
            if p is not None:
                children[p].append(i)

        # BFS from the root doubles as the acyclicity/connectivity check.
        root = roots[0]
        level = [-1] * n
        level[root] = 0
        order = [root]
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for c in children[u]:
                level[c] = level[u] + 1
                order.append(c)
                queue.append(c)
        if len(order) != n:
            raise HierarchyError("parent map contains a cycle or disconnected nodes")

        weights: Dict[Tuple[int, int], float] = {}
        phi = dict(phi or {})
        for (a, b), w in phi.items():
            a, b = int(a), int(b)
            if not (0 <= b < n) or parent[b] != a:
                raise HierarchyError(f"weight given for non-edge ({a}, {b})")
            w = float(w)
            if not math.isfinite(w):
                raise HierarchyError(f"non-finite weight on edge ({a}, {b})")
            weights[(a, b)] = w
        for c, p in enumerate(parent):
            if p is not None:
                weights.setdefault((p, c), 1.0)

        self._parent = parent
        self._children = tuple(tuple(sorted(ch)) for ch in children)
        self._phi = weights
        self._level = tuple(level)
        self._root = root
        self._bfs_order = tuple(order)
        self.names = tuple(names) if names is not None else tuple(str(i) for i in range(n))
        if len(self.names) != n:
            raise HierarchyError("names must have one entry per node")
        self._leaves = tuple(i for i in range(n) if not self._children[i])
        self._summing = None

    # construction helpers

    @classmethod
    def from_edges(cls, n_nodes: int, edges: Iterable[Tuple[int, int, float]], names=None):
        parent: List[Optional[int]] = [None] * n_nodes
        phi = {}
        for p, c, w in edges:
            if not 0 <= c < n_nodes:
                raise UnknownNodeError(c)
            if not 0 <= p < n_nodes:
                raise UnknownNodeError(p)
            if parent[c] is not None:
                raise HierarchyError(f"node {c} has more than one parent")
            parent[c] = p
            phi[(p, c)] = w
        return cls(parent, phi, names)

    @classmethod
    def balanced(cls, branching: int, levels: int) -> "HierarchyTree":
        """Complete tree with ``levels`` levels (root included) and fixed branching."""
        if levels < 1 or branching < 1:
            raise HierarchyError("levels and branching must be positive")
        parent: List[Optional[int]] = [None]
        frontier = [0]
        for _ in range(levels - 1):
            nxt = []
            for u in frontier:
                for _ in range(branching):
                    parent.append(u)
                    nxt.append(len(parent) - 1)
            frontier = nxt
        return cls(parent)

    # basic accessors

    def __len__(self):
        return len(self._parent)

    @property
    def n_nodes(self) -> int:
        return len(self._parent)

    @property
    def nodes(self) -> range:
        return range(len(self._parent))

    @property
    def root(self) -> int:
        return self._root

    @property
    def leaves(self) -> Tuple[int, ...]:
        return self._leaves

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return [(p, c) for c, p in enumerate(self._parent) if p is not None]

    @property
    def depth(self) -> int:
        return max(self._level) + 1

    @property
    def bfs_order(self) -> Tuple[int, ...]:
        return self._bfs_order

    def _check(self, node) -> int:
        if isinstance(node, (bool, np.bool_)) or not isinstance(node, (int, np.integer)):
            raise UnknownNodeError(node)
        if not 0 <= node < len(self._parent):
            raise UnknownNodeError(node)
        return int(node)

    def parent(self, node: int) -> Optional[int]:
        return self._parent[self._check(node)]

    def children(self, node: int) -> Tuple[int, ...]:
        return self._children[self._check(node)]

    def level(self, node: int) -> int:
        return self._level[self._check(node)]

    def phi(self, parent: int, child: int) -> float:
        try:
            return self._phi[(parent, child)]
        except KeyError:
            raise HierarchyError(f"({parent}, {child}) is not an edge") from None

    def neighbors(self, node: int) -> List[int]:
        node = self._check(node)
        out = list(self._children[node])
        if self._parent[node] is not None:
            out.append(self._parent[node])
        return out

    def is_leaf(self, node: int) -> bool:
        return not self._children[self._check(node)]

    def adjacent(self, a: int, b: int) -> bool:
        a, b = self._check(a), self._check(b)
        return self._parent[a] == b or self._parent[b] == a

    def ancestors(self, node: int) -> List[int]:
        """Strict ancestors of ``node``, nearest first."""
        out = []
        p = self._parent[self._check(node)]
        while p is not None:
            out.append(p)
            p = self._parent[p]
        return out

    def subtree(self, node: int) -> List[int]:
        node = self._check(node)
        out, stack = [], [node]
        while stack:
            u = stack.pop()
            out.append(u)
            stack.extend(reversed(self._children[u]))
        return out

    def leaves_under(self, node: int) -> List[int]:
        return [u for u in self.subtree(node) if not self._children[u]]

    # queries

    def path(self, a: int, b: int) -> List[int]:
        """Unique tree path from ``a`` to ``b``, both endpoints included."""
        a, b = self._check(a), self._check(b)
        up_a, up_b = [a], [b]
        x, y = a, b
        while self._level[x] > self._level[y]:
            x = self._parent[x]
            up_a.append(x)
        while self._level[y] > self._level[x]:
            y = self._parent[y]
            up_b.append(y)
        while x != y:
            x = self._parent[x]
            y = self._parent[y]
            up_a.append(x)
            up_b.append(y)
        return up_a + up_b[-2::-1]

    def lca(self, nodes: Iterable[int]) -> int:
        """Deepest common ancestor-or-self of every node in ``nodes``."""
        nodes = [self._check(n) for n in nodes]
        if not nodes:
            raise HierarchyError("lca of an empty node set is undefined")
        acc = nodes[0]
        for n in nodes[1:]:
            x, y = acc, n
            while self._level[x] > self._level[y]:
                x = self._parent[x]
            while self._level[y] > self._level[x]:
                y = self._parent[y]
            while x != y:
                x, y = self._parent[x], self._parent[y]
            acc = x
        return acc

    # aggregation

    def summing_matrix(self) -> np.ndarray:
        """``S[i, k]`` = product of weights on the path from node ``i`` down to leaf ``leaves[k]``.

        For coherent data ``x_nodes = S @ x_leaves``.
        """
        if self._summing is None:
            col = {leaf: k for k, leaf in enumerate(self._leaves)}
            S = np.zeros((len(self._parent), len(self._leaves)))
            for leaf in self._leaves:
                w, u = 1.0, leaf
                S[u, col[leaf]] = 1.0
                while self._parent[u] is not None:
                    p = self._parent[u]
                    w *= self._phi[(p, u)]
                    S[p, col[leaf]] = w
                    u = p
            S.setflags(write=False)
            self._summing = S
        return self._summing

    def aggregate_up(self, leaf_values: Mapping[int, Sequence[float]]) -> Dict[int, np.ndarray]:
        """Fill every internal node with the weighted sum of its children."""
        missing = [leaf for leaf in self._leaves if leaf not in leaf_values]
        if missing:
            raise HierarchyError(f"no series given for leaves {missing}")
        out: Dict[int, np.ndarray] = {}
        length = None
        for leaf in self._leaves:
            arr = np.asarray(leaf_values[leaf], dtype=float)
            if length is None:
                length = arr.shape
            elif arr.shape != length:
                raise HierarchyError(
                    f"series length mismatch at leaf {leaf}: {arr.shape} vs {length}"
                )
            out[leaf] = arr.copy()
        for u in reversed(self._bfs_order):
            if self._children[u]:
                out[u] = sum(self._phi[(u, c)] * out[c] for c in self._children[u])
        return out

    def aggregate_array(self, values: np.ndarray) -> np.ndarray:
        """Array form of :meth:`aggregate_up`: node axis first, leaves' rows are read, internal rows rewritten."""
        values = np.array(values, dtype=float, copy=True)
        if values.shape[0] != len(self._parent):
            raise HierarchyError("first axis must index nodes")
        for u in reversed(self._bfs_order):
            ch = self._children[u]
            if ch:
                acc = np.zeros_like(values[u])
                for c in ch:
                    acc += self._phi[(u, c)] * values[c]
                values[u] = acc
        return values

    def coherency_residual(self, values) -> float:
        """Max over internal nodes and time of ``|x_i - sum_j phi_ij x_j|``.

        ``values`` is either a mapping node -> series or an array with the node axis first.
        NaN cells are ignored.
        """
        if isinstance(values, Mapping):
            missing = [u for u in self.nodes if u not in values]
            if missing:
                raise HierarchyError(f"no values for nodes {missing}")
            get = lambda u: np.asarray(values[u], dtype=float)
        else:
            arr = np.asarray(values, dtype=float)
            if arr.shape[0] != len(self._parent):
                raise HierarchyError(
                    f"values cover {arr.shape[0]} nodes, tree has {len(self._parent)}"
                )
            get = lambda u: arr[u]
        worst = 0.0
        for u in self.nodes:
            ch = self._children[u]
            if not ch:
                continue
            resid = get(u) - sum(self._phi[(u, c)] * get(c) for c in ch)
            resid = np.abs(resid)
            if np.any(np.isfinite(resid)):
                worst = max(worst, float(np.nanmax(resid)))
        return worst

    # serialization

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": i, "name": self.names[i]} for i in self.nodes],
            "edges": [
                {"parent": p, "child": c, "phi": self._phi[(p, c)]} for p, c in self.edges
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "HierarchyTree":
        try:
            nodes = doc["nodes"]
            edges = doc.get("edges", [])
        except (KeyError, AttributeError, TypeError) as exc:
            raise HierarchyError(f"malformed hierarchy document: {exc}") from None
        ids = sorted(int(n["id"]) for n in nodes)
        if ids != list(range(len(ids))):
            raise HierarchyError("node ids must be dense 0..N-1")
        names = [None] * len(ids)
        for n in nodes:
            names[int(n["id"])] = str(n.get("name", n["id"]))
        return cls.from_edges(
            len(ids),
            ((int(e["parent"]), int(e["child"]), float(e.get("phi", 1.0))) for e in edges),
            names,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "HierarchyTree":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other):
        return (
            isinstance(other, HierarchyTree)
            and self._parent == other._parent
            and self._phi == other._phi
        )

    def __hash__(self):
        return hash((self._parent, tuple(sorted(self._phi.items()))))

    def __repr__(self):
        return f"HierarchyTree(n_nodes={len(self)}, depth={self.depth}, leaves={len(self._leaves)})"
