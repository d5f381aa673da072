import numpy as np
import pytest

from hierexplain.forecaster import Forecaster, ForecasterSpec, param_shapes
from hierexplain.hierarchy import HierarchyTree


def make_model(tree, n_vars=1, kind="linear_ar", head="point", L=4, H=2, hidden=6, seed=0,
               params=None, scale=None):
    """Hand-built forecaster with identity scaling; random weights unless ``params`` given."""
    spec = ForecasterSpec(kind, context_length=L, horizon=H, hidden_width=hidden, head=head)
    n_features = tree.depth * n_vars * L
    shapes = param_shapes(spec, n_features)
    if params is None:
        rng = np.random.default_rng(seed)
        params = {k: rng.normal(0.0, scale or 1.0 / np.sqrt(s[0]), s) for k, s in shapes.items()}
    return Forecaster(spec, tree, n_vars, params)


@pytest.fixture
def chain3():
    # root 0 -> 1 -> 2
    return HierarchyTree([None, 0, 1])


@pytest.fixture
def five_node():
    # r=0, p=1, q=2, u=3 under p, v=4 under q
    return HierarchyTree([None, 0, 0, 1, 2])


def random_tree(rng, max_levels=6, max_nodes=200):
    parent = [None]
    level = [0]
    n = int(rng.integers(1, max_nodes + 1))
    for i in range(1, n):
        candidates = [u for u in range(i) if level[u] < max_levels - 1]
        p = int(rng.choice(candidates))
        parent.append(p)
        level.append(level[p] + 1)
    return HierarchyTree(parent)


# acceptance results, printed once at the end of the session
ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
