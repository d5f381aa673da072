import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierexplain.attribution import (AttributionConfig, AttributionError, LimeSingularError, attribute,
                                     feature_occlusion, integrated_gradients, lime_surrogate, smoothgrad,
                                     weighted_ridge)
from hierexplain.forecaster import Forecaster, OutputTarget
from hierexplain.hierarchy import HierarchyTree

from conftest import make_model

ONE = HierarchyTree([None])
ZEROS = AttributionConfig(baseline="zeros")
TGT = OutputTarget(0, 0)


def two_input_linear(w=(2.0, 0.5)):
    """y = w0*a + w1*b on a single node with a two-step context (a, b)."""
    model = make_model(ONE, L=2, H=1)
    return Forecaster(model.spec, ONE, 1, {"W": np.array(w, float).reshape(2, 1), "b": np.zeros(1)})


X34 = np.array([[[3.0, 4.0]]])


@pytest.mark.parametrize("fn", [feature_occlusion, integrated_gradients])
def test_linear_closed_form(fn):
    res = fn(two_input_linear(), X34, TGT, ZEROS)
    np.testing.assert_allclose(res.scores.ravel(), [6.0, 2.0], rtol=1e-12)


def test_occlusion_cell_at_baseline_scores_zero():
    res = feature_occlusion(two_input_linear(), np.array([[[0.0, 4.0]]]), TGT, ZEROS)
    assert res.scores[0, 0, 0] == 0.0


def test_occlusion_matches_loop_oracle():
    tree = HierarchyTree.balanced(2, 3)
    model = make_model(tree, n_vars=2, kind="mlp", L=3, H=2, seed=1)
    x = np.random.default_rng(0).normal(size=model.context_shape)
    tgt = OutputTarget(1, 1)
    res = feature_occlusion(model, x, tgt, AttributionConfig())
    base = model.train_mean_context
    f = model.predict(x, tgt)
    oracle = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xp[idx] = base[idx]
        oracle[idx] = f - model.predict(xp, tgt)
    np.testing.assert_allclose(res.scores, oracle, rtol=0, atol=1e-13)


def test_ig_zero_path():
    model = make_model(HierarchyTree.balanced(2, 2), kind="mlp", L=3, H=1)
    res = integrated_gradients(model, np.zeros(model.context_shape), TGT)
    assert np.all(res.scores == 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_ig_completeness_on_random_mlps(seed):
    tree = HierarchyTree.balanced(2, 3)
    model = make_model(tree, n_vars=2, kind="mlp", L=4, H=2, hidden=8, seed=seed)
    x = np.random.default_rng(seed + 1).normal(size=model.context_shape)
    tgt = OutputTarget(0, 1)
    res = integrated_gradients(model, x, tgt, AttributionConfig(ig_steps=200))
    gap = model.predict(x, tgt) - model.predict(model.train_mean_context, tgt)
    assert abs(res.scores.sum() - gap) <= 1e-3 * abs(gap) + 1e-12


def test_ig_right_rule_is_literal_riemann_sum():
    model = make_model(HierarchyTree.balanced(2, 2), kind="mlp", L=3, H=1, seed=3)
    x = np.random.default_rng(3).normal(size=model.context_shape)
    m = 10
    res = integrated_gradients(model, x, TGT, AttributionConfig(ig_steps=m, ig_rule="right"))
    g = sum(model.gradient(s / m * x, TGT) for s in range(1, m + 1)) / m
    np.testing.assert_allclose(res.scores, x * g, rtol=1e-10, atol=1e-14)


def test_smoothgrad_zero_noise_is_gradient():
    model = make_model(HierarchyTree.balanced(2, 2), kind="mlp", L=3, H=1, seed=3)
    x = np.random.default_rng(2).normal(size=model.context_shape)
    res = smoothgrad(model, x, TGT, AttributionConfig(sg_noise_scale=0.0))
    np.testing.assert_allclose(res.scores, model.gradient(x, TGT), rtol=1e-12)


def test_smoothgrad_linear_equals_weights():
    res = smoothgrad(two_input_linear(), X34, TGT, AttributionConfig(sg_noise_scale=0.5, sg_samples=7))
    np.testing.assert_allclose(res.scores.ravel(), [2.0, 0.5], rtol=1e-12)


@pytest.mark.parametrize("method", ["sg", "lime"])
def test_sampling_methods_deterministic(method):
    model = make_model(HierarchyTree.balanced(2, 2), kind="mlp", L=3, H=1, seed=5)
    x = np.random.default_rng(2).normal(size=model.context_shape)
    a = attribute(method, model, x, TGT)
    b = attribute(method, model, x, TGT)
    assert np.array_equal(a.scores, b.scores)
    c = attribute(method, model, x, TGT, AttributionConfig(seed=1))
    assert not np.array_equal(a.scores, c.scores)


def test_weighted_ridge_matches_lstsq_oracle():
    rng = np.random.default_rng(0)
    Z = (rng.random((200, 6)) < 0.5).astype(float)
    y = rng.normal(size=200)
    w = rng.uniform(0.1, 1.0, size=200)
    coef, intercept = weighted_ridge(Z, y, w, 0.0)
    A = np.column_stack([Z, np.ones(200)]) * np.sqrt(w)[:, None]
    beta = np.linalg.lstsq(A, y * np.sqrt(w), rcond=None)[0]
    np.testing.assert_allclose(coef, beta[:6], atol=1e-9)
    assert intercept == pytest.approx(beta[6], abs=1e-9)


def test_lime_linear_recovers_effects():
    res = lime_surrogate(two_input_linear(), X34, TGT, AttributionConfig(baseline="zeros", lime_samples=500))
    a, b = res.scores.ravel()
    assert a == pytest.approx(6.0, rel=0.1) and b == pytest.approx(2.0, rel=0.1)
    assert a > b


def test_lime_constant_model_zero():
    res = lime_surrogate(two_input_linear((0.0, 0.0)), X34, TGT, ZEROS)
    np.testing.assert_allclose(res.scores, 0.0, atol=1e-8)


def test_lime_singular_system():
    with pytest.raises(LimeSingularError, match="ridge"):
        lime_surrogate(two_input_linear(), X34, TGT,
                       AttributionConfig(baseline="zeros", lime_samples=1, lime_ridge=0.0))


def test_lime_warns_when_undersampled():
    model = make_model(HierarchyTree.balanced(3, 3), n_vars=2, L=6, H=1)
    with pytest.warns(UserWarning, match="lime_samples"):
        lime_surrogate(model, np.ones(model.context_shape), TGT, AttributionConfig(lime_samples=10))


def test_node_restriction_zeroes_other_nodes():
    tree = HierarchyTree.balanced(2, 2)
    model = make_model(tree, kind="mlp", L=3, H=1, seed=2)
    x = np.random.default_rng(4).normal(size=model.context_shape)
    for method in ("fo", "ig", "sg", "lime"):
        res = attribute(method, model, x, TGT, nodes=[1])
        assert np.all(res.scores[[0, 2]] == 0)


def test_unknown_method_and_bad_config():
    with pytest.raises(AttributionError):
        attribute("shap", two_input_linear(), X34, TGT)
    with pytest.raises(AttributionError):
        AttributionConfig(ig_steps=1)
    with pytest.raises(AttributionError):
        AttributionConfig.from_dict({"nope": 1})
