"""Acceptance criteria 1-11.

Each test prints one ``criterion N: PASS|FAIL (...)`` line and the session ends
with a summary of all of them. Run with ``pytest tests/test_acceptance.py -s``.
Seeds and benchmark designs are fixed here, before any result is looked at.
"""

import time
import warnings

import numpy as np
import pytest

from hierexplain import metrics
from hierexplain.attribution import AttributionConfig, ImportanceTensor, attribute
from hierexplain.benchgen import (AnomalySpec, BenchmarkConfig, GroundTruthManifest, PlacementSpec,
                                  PlacementTemplate, build_synthetic_panel)
from hierexplain.forecaster import Forecaster, ForecasterSpec, OutputTarget, param_shapes, train
from hierexplain.hier_explain import EdgeImportance, explain, subtree_scores
from hierexplain.hierarchy import HierarchyTree
from hierexplain.panel import split
from hierexplain.pipeline import ExplainJob, explain_targets
from hierexplain.prob_explain import QuantileTarget, explain_quantile, quantile_output

from conftest import make_model, random_tree, record_criterion

METHODS = ("fo", "ig", "sg", "lime")
KINDS = ("freq_shapes", "seq_comb", "low_var")


def random_mlp(tree, rng, n_vars=2, L=6, H=2, width=8, head="point"):
    spec = ForecasterSpec("mlp", context_length=L, horizon=H, hidden_width=width, head=head)
    shapes = param_shapes(spec, tree.depth * n_vars * L)
    params = {k: rng.normal(0.0, 1.0 / np.sqrt(s[0]), s) for k, s in shapes.items()}
    return Forecaster(spec, tree, n_vars, params)


def finish(number, ok, detail, start, limit):
    elapsed = time.perf_counter() - start
    ok = bool(ok) and elapsed < limit
    record_criterion(number, ok, f"{detail}; {elapsed:.1f}s of {limit:.0f}s")
    assert ok, detail


def test_criterion_01_gradient_matches_finite_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    tree = HierarchyTree.balanced(3, 3)
    model = random_mlp(tree, rng, L=6, H=3, width=16, head="gaussian")
    h = 1e-4
    worst = 0.0
    components = ("mu", "sigma", "quantile")
    for _ in range(100):
        x = rng.normal(size=model.context_shape)
        comp = components[rng.integers(3)]
        tgt = OutputTarget(int(rng.integers(tree.n_nodes)), int(rng.integers(3)), comp,
                           0.9 if comp == "quantile" else None)
        g = model.gradient(x, tgt)
        eye = np.eye(x.size).reshape((x.size,) + x.shape) * h
        fd = (model.predict(x + eye, tgt) - model.predict(x - eye, tgt)) / (2 * h)
        err = np.max(np.abs(fd - g.ravel())) / np.max(np.abs(g))
        worst = max(worst, err)
    finish(1, worst <= 1e-4, f"worst relative gradient error {worst:.2e} over 100 pairs", start, 30)


def test_criterion_02_ig_completeness():
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    tree = HierarchyTree.balanced(2, 3)
    cfg = AttributionConfig(ig_steps=200)
    worst = 0.0
    for _ in range(50):
        model = random_mlp(tree, rng)
        x = rng.normal(size=model.context_shape)
        tgt = OutputTarget(int(rng.integers(tree.n_nodes)), int(rng.integers(2)))
        res = attribute("ig", model, x, tgt, cfg)
        gap = model.predict(x, tgt) - model.predict(model.train_mean_context, tgt)
        worst = max(worst, abs(res.scores.sum() - gap) / abs(gap))
    finish(2, worst <= 1e-3, f"worst completeness error {worst:.2e} at 200 steps on 50 mlps", start, 60)


def test_criterion_03_linear_exactness():
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    tree = HierarchyTree.balanced(2, 2)
    shell = make_model(tree, n_vars=2, L=3, H=1)
    W = rng.uniform(0.5, 2.0, shell.params["W"].shape) * rng.choice([-1, 1], shell.params["W"].shape)
    model = Forecaster(shell.spec, tree, 2, {"W": W, "b": np.array([0.3])})
    x = rng.uniform(1.0, 3.0, model.context_shape) * rng.choice([-1, 1], model.context_shape)
    tgt = OutputTarget(0, 0)
    # coefficient of each input cell in the root forecast: sum over leaves of their feature weights
    coef = np.zeros(model.context_shape)
    for leaf in tree.leaves:
        chain = [leaf] + tree.ancestors(leaf)
        for pos, node in enumerate(chain):
            coef[node] += W[pos * 6:(pos + 1) * 6, 0].reshape(2, 3)
    errs = {}
    for baseline in ("zeros", "train_mean"):
        cfg = AttributionConfig(baseline=baseline)
        x0 = np.zeros_like(x)
        truth = coef * (x - x0)
        errs[f"fo/{baseline}"] = np.max(np.abs(attribute("fo", model, x, tgt, cfg).scores - truth))
        errs[f"ig/{baseline}"] = np.max(np.abs(attribute("ig", model, x, tgt, cfg).scores - truth))
        sg = attribute("sg", model, x, tgt, AttributionConfig(baseline=baseline, sg_noise_scale=0.0)).scores
        errs[f"sg/{baseline}"] = np.max(np.abs(sg * (x - x0) - truth))
        exact = attribute("lime", model, x, tgt, AttributionConfig(baseline=baseline, lime_ridge=0.0)).scores
        errs[f"lime-oracle/{baseline}"] = np.max(np.abs(exact - truth))
    exact_ok = max(errs.values()) <= 1e-6
    lime = attribute("lime", model, x, tgt, AttributionConfig(lime_samples=500)).scores
    lime_rel = float(np.max(np.abs(lime - truth) / np.abs(truth)))
    finish(3, exact_ok and lime_rel <= 0.1,
           f"max abs error fo/ig/sg/lime-oracle {max(errs.values()):.1e}, lime@500 worst relative {lime_rel:.3f}",
           start, 60)


def test_criterion_04_path_product_identity():
    start = time.perf_counter()
    rng = np.random.default_rng(404)
    worst = 0.0
    sizes = []
    for _ in range(100):
        tree = random_tree(rng, max_levels=6, max_nodes=200)
        sizes.append(tree.n_nodes)
        scalars = {}
        for p, c in tree.edges:
            scalars[(p, c)] = float(rng.uniform(-1, 1))
            scalars[(c, p)] = float(rng.uniform(-1, 1))

        def edge(u, v):
            return EdgeImportance(u, v, np.zeros((1, 1)), scalars[(u, v)])

        target = int(rng.integers(tree.n_nodes))
        res = subtree_scores(None, None, target, "fo", edge_fn=edge, tree=tree,
                             self_fn=lambda n: np.zeros((1, 1)))
        for j in tree.nodes:
            path = tree.path(target, j)
            brute = 1.0
            for a, b in zip(path, path[1:]):
                brute *= scalars[(a, b)]
            worst = max(worst, abs(res.node_scalar[j] - brute))
    finish(4, worst <= 1e-12,
           f"worst deviation {worst:.1e} on 100 trees of {min(sizes)}-{max(sizes)} nodes", start, 60)


def test_criterion_05_coherency_of_generated_panels():
    start = time.perf_counter()
    rng = np.random.default_rng(505)
    modes = ("same_series", "cross_series", "cross_level")
    worst = 0.0
    for s in range(1000):
        kind = KINDS[s % 3]
        placements = [PlacementTemplate(modes[rng.integers(3)], AnomalySpec(kind),
                                        period=16 if rng.random() < 0.5 else None, n_nodes=int(rng.integers(2, 5))),
                      PlacementTemplate("external_variable", AnomalySpec(KINDS[rng.integers(3)]))]
        cfg = BenchmarkConfig(branching=int(rng.integers(2, 5)), levels=int(rng.integers(2, 5)), T=80,
                              n_external=2, noise_sigma=float(rng.uniform(0.5, 5.0)), placements=placements, seed=s)
        panel, _ = build_synthetic_panel(cfg)
        worst = max(worst, panel.tree.coherency_residual(panel.data[:, 0]))
    finish(5, worst <= 1e-9, f"worst coherency residual {worst:.1e} over 1000 panels", start, 120)


def test_criterion_06_quantile_adaptation():
    start = time.perf_counter()
    rng = np.random.default_rng(606)
    tree = HierarchyTree.balanced(3, 3)
    model = random_mlp(tree, rng, L=4, H=2, head="gaussian")
    worst = 0.0
    for _ in range(3):
        x = rng.normal(size=model.context_shape)
        out = model.forecast(x)
        for node in (0, 1, 12):
            for level in (0.75, 0.90, 0.95):
                qt = QuantileTarget(node, 1, level, n_samples=10_000, seed=int(rng.integers(1 << 30)))
                emp = quantile_output(model, x, qt, analytic=False)
                exact = quantile_output(model, x, qt)
                worst = max(worst, abs(emp - exact) / out.sigma[node, 1])

    # input-independent sigma: zero the sigma columns of the output layer
    p = {k: v.copy() for k, v in model.params.items()}
    p["W2"][:, model.spec.horizon:] = 0.0
    flat_sigma = Forecaster(model.spec, tree, model.n_variables, p)
    x = rng.normal(size=model.context_shape)
    exact_equal, close = [], 0.0
    for method in METHODS:
        for mode in ("subtree", "flat"):
            q = explain_quantile(flat_sigma, x, QuantileTarget(0, 1, 0.95), method, mode=mode).tensor()
            m = explain(flat_sigma, x, 0, method, mode, AttributionConfig(), OutputTarget(0, 1, "mu")).tensor()
            if method in ("ig", "sg"):
                exact_equal.append(np.array_equal(q, m))
            else:
                # occlusion and LIME subtract the constant back out; only rounding remains
                close = max(close, float(np.max(np.abs(q - m))))
    ok = worst <= 0.05 and all(exact_equal) and close <= 1e-10
    finish(6, ok, f"worst empirical quantile gap {worst:.3f} sigma; ig/sg identical={all(exact_equal)}, "
                  f"fo/lime max difference {close:.1e}", start, 60)


def test_criterion_07_subtree_beats_flat():
    start = time.perf_counter()
    n_datasets = 20
    res = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for kind in KINDS:
            cfg = BenchmarkConfig(n_datasets=n_datasets, branching=4, levels=4, T=300, seed=0,
                                  placements=[PlacementTemplate("cross_level", AnomalySpec(kind),
                                                                n_nodes=8, period=16)])
            for i in range(n_datasets):
                panel, manifest = build_synthetic_panel(cfg, i)
                train_view, _ = split(panel, cfg.task)
                model = train(ForecasterSpec("mlp", seed=i), train_view)
                for method in METHODS:
                    for mode in ("subtree", "flat"):
                        ex = explain_targets(model, panel, manifest, ExplainJob(method, mode))
                        res.setdefault((kind, method, mode), []).append(
                            metrics.ias_score(ex, manifest, magnitude=True))
    wins, diffs, lines = 0, [], []
    for kind in KINDS:
        for method in METHODS:
            a = float(np.mean(res[(kind, method, "subtree")]))
            b = float(np.mean(res[(kind, method, "flat")]))
            # occlusion gives mathematically equal scores in both modes; allow for rounding
            wins += a >= b - 1e-9 * max(abs(a), abs(b))
            diffs.append(a - b)
            lines.append(f"{kind}/{method} subtree={a:.4f} flat={b:.4f}")
    print("\n".join(lines))
    ok = wins >= 0.6 * 12 and np.mean(diffs) > 0
    finish(7, ok, f"subtree >= flat in {wins}/12 cells, mean IAS difference {np.mean(diffs):+.5f}", start, 900)


def _planted_model(tree, driver, n_vars=4, L=12, H=12):
    """Leaf forecasts: 1.0 x the driver's own cells, 0.1 x other externals, 0.3 x own target lags."""
    spec = ForecasterSpec("linear_ar", context_length=L, horizon=H)
    W = np.zeros((tree.depth * n_vars * L, H))
    for v in range(n_vars):
        w = 0.3 if v == 0 else (1.0 if v == driver else 0.1)
        W[v * L:(v + 1) * L, :] = w / L
    return Forecaster(spec, tree, n_vars, {"W": W, "b": np.zeros(H)})


def test_criterion_08_evda_planted_detection():
    start = time.perf_counter()
    scores = {"fo": [], "ig": []}
    for i in range(20):
        driver = 1 + i % 3
        cfg = BenchmarkConfig(branching=3, levels=3, T=120, n_external=3, seed=800 + i,
                              placements=[PlacementTemplate("external_variable", AnomalySpec("seq_comb"),
                                                            variable=driver)])
        panel, manifest = build_synthetic_panel(cfg)
        model = _planted_model(panel.tree, driver)
        for method in scores:
            ex = explain_targets(model, panel, manifest, ExplainJob(method, "subtree"))
            scores[method].append(metrics.evda(ex, manifest, magnitude=True))
    fo, ig = np.mean(scores["fo"]), np.mean(scores["ig"])

    rng = np.random.default_rng(808)
    hits = []
    for k in range(1000):
        m = GroundTruthManifest(expected_external_variable={0: int(rng.integers(1, 4))})
        t = ImportanceTensor(rng.normal(size=(3, 4, 12)), OutputTarget(0), "random")
        hits.append(metrics.evda([t], m))
    null = float(np.mean(hits))
    ok = fo >= 0.9 and ig >= 0.9 and abs(null - 1 / 3) <= 0.05
    finish(8, ok, f"EVDA fo={fo:.2f} ig={ig:.2f} over 20 datasets, random null {null:.3f}", start, 300)


def test_criterion_09_runtime_scaling():
    start = time.perf_counter()
    rng = np.random.default_rng(909)
    ratios = []
    for levels in (2, 3, 4, 5):
        tree = HierarchyTree.balanced(4, levels)
        spec = ForecasterSpec("mlp", context_length=12, horizon=1)
        shapes = param_shapes(spec, tree.depth * 2 * 12)
        model = Forecaster(spec, tree, 2, {k: rng.normal(0, 0.1, s) for k, s in shapes.items()})
        x = rng.normal(size=model.context_shape)
        best = {}
        for mode in ("subtree", "flat"):
            times = []
            for _ in range(3):
                t = time.perf_counter()
                explain(model, x, tree.root, "fo", mode)
                times.append(time.perf_counter() - t)
            best[mode] = min(times)
        ratios.append(best["subtree"] / best["flat"])
    monotone = all(b < a for a, b in zip(ratios, ratios[1:]))
    ok = monotone and ratios[-1] <= 0.25
    finish(9, ok, "subtree/flat wall-clock at 2..5 levels: " + ", ".join(f"{r:.3f}" for r in ratios), start, 600)


def test_criterion_10_variance_anomaly_sensitivity():
    start = time.perf_counter()
    diffs = []
    cfg = BenchmarkConfig(n_datasets=20, branching=4, levels=3, T=300, seed=0,
                          placements=[PlacementTemplate("cross_level", AnomalySpec("low_var"), n_nodes=4, period=16)])
    for i in range(20):
        panel, manifest = build_synthetic_panel(cfg, i)
        train_view, _ = split(panel, cfg.task)
        model = train(ForecasterSpec("mlp", head="gaussian", seed=i), train_view)
        q = explain_targets(model, panel, manifest, ExplainJob("sg", "subtree", level=0.95))
        p = explain_targets(model, panel, manifest, ExplainJob("sg", "subtree"))
        diffs.append(metrics.ias_score(q, manifest, magnitude=True) - metrics.ias_score(p, manifest, magnitude=True))
    margin = float(np.mean(diffs))
    finish(10, margin > 0, f"mean IAS(q0.95) - IAS(point) = {margin:+.5f} over 20 datasets "
                           f"({np.mean(np.array(diffs) > 0):.0%} positive)", start, 600)


def test_criterion_11_metric_unit_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(1111)
    checks = {}
    checks["hand case"] = metrics.ias_normalize(np.array([0.0, 0, 4, 0]))[2] == 0.75

    rows = rng.normal(size=(200, 3, 2, 10))
    a = rng.uniform(0.1, 10, 200)
    b = rng.uniform(-10, 10, 200)
    affine = max(float(np.max(np.abs(metrics.ias_normalize(ai * r + bi) - metrics.ias_normalize(r))))
                 for r, ai, bi in zip(rows, a, b))
    checks["affine invariance"] = affine <= 1e-12

    m = GroundTruthManifest(expected_important_cells=[{"node": 0, "variable": 0, "t_start": 2, "t_end": 5,
                                                       "placement": 0}], targets=[{"node": 0, "step": 0}])
    anti = True
    for r in rows[:50]:
        before = [ImportanceTensor(r, OutputTarget(0), "fo")]
        after = [ImportanceTensor(r + rng.normal(size=r.shape), OutputTarget(0), "fo")]
        d1 = after[0].scores - before[0].scores
        d2 = before[0].scores - after[0].scores
        anti &= np.array_equal(metrics.ias_normalize(d1), -metrics.ias_normalize(d2))
        anti &= metrics.delta_eval(before, after, m).ias == -metrics.delta_eval(after, before, m).ias
    checks["delta antisymmetry"] = anti

    mono = True
    for _ in range(200):
        expected = int(rng.integers(1, 4))
        s = rng.normal(size=(3, 4, 8))
        man = GroundTruthManifest(expected_external_variable={0: expected})
        base = metrics.evda([ImportanceTensor(s, OutputTarget(0), "fo")], man)
        for f in (np.tanh, lambda z: z ** 3 + z, lambda z: 7.0 * z - 2.0):
            mono &= metrics.evda([ImportanceTensor(f(s), OutputTarget(0), "fo")], man) == base
    checks["evda monotone invariance"] = mono

    failed = [k for k, v in checks.items() if not v]
    finish(11, not failed, "all checks pass" if not failed else f"failed: {failed}", start, 10)
