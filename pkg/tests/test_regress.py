import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from terravario.errors import ConfigError, DimensionError
from terravario.regress import (
    DEFAULT_GRIDS,
    ModelSpec,
    build_tree,
    expand_grid,
    fit,
    load_model,
    predict,
    resolve_max_features,
    save_model,
)


def _brute_knn(Xtr, ytr, Xq, k):
    out = []
    for q in Xq:
        d = np.sqrt(((Xtr - q) ** 2).sum(axis=1))
        order = sorted(range(len(d)), key=lambda i: (d[i], i))[:k]
        out.append(ytr[order].mean())
    return np.array(out)


# specs -------------------------------------------------------------------


def test_spec_defaults_and_validation():
    assert ModelSpec("knn").params == {"k": 5, "weighting": "uniform"}
    with pytest.raises(ConfigError):
        ModelSpec("svm")
    with pytest.raises(ConfigError):
        ModelSpec("knn", {"k": 0})
    with pytest.raises(ConfigError):
        ModelSpec("linear", {"ridge_lambda": -1.0})
    with pytest.raises(ConfigError):
        ModelSpec("forest", {"depth": 3})
    assert ModelSpec.from_dict(ModelSpec("forest", {"n_trees": 3}).to_dict()) == ModelSpec("forest", {"n_trees": 3})


def test_max_features_resolution():
    assert resolve_max_features("all", 400) == 400
    assert resolve_max_features("third", 400) == 134
    assert resolve_max_features("sqrt", 400) == 20
    assert resolve_max_features(7, 400) == 7
    with pytest.raises(ConfigError):
        resolve_max_features(401, 400)


def test_default_grid_sizes():
    assert len(expand_grid("knn")) == 12
    assert len(expand_grid("forest")) == 54
    assert len(expand_grid("linear")) == 4
    assert expand_grid("baseline") == [ModelSpec("baseline")]
    assert DEFAULT_GRIDS["knn"]["k"] == [1, 2, 5, 10, 20, 50]


# baseline and linear -----------------------------------------------------


def test_baseline_constant_mean():
    m = fit(ModelSpec("baseline"), np.zeros((3, 2)), [2.0, 4.0, 6.0])
    np.testing.assert_array_equal(m.predict(np.ones((4, 2))), 4.0)


def test_linear_exact_interpolation():
    x = np.linspace(-3, 5, 11)[:, None]
    m = fit(ModelSpec("linear"), x, 2 * x[:, 0] + 1)
    assert m.coef[0] == pytest.approx(2.0, abs=1e-9)
    assert m.intercept == pytest.approx(1.0, abs=1e-9)
    assert not m.diagnostics["rank_deficient"]


def test_linear_rank_deficient_min_norm():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(20)
    X = np.column_stack([a, a])  # collinear
    m = fit(ModelSpec("linear"), X, 3 * a)
    assert m.diagnostics["min_norm_solution"] and m.diagnostics["rank"] == 1
    np.testing.assert_allclose(m.coef, [1.5, 1.5], atol=1e-10)


def test_linear_wide_design_is_flagged():
    rng = np.random.default_rng(1)
    X, y = rng.standard_normal((10, 40)), rng.standard_normal(10)
    m = fit(ModelSpec("linear"), X, y)
    assert m.diagnostics["rank_deficient"]
    np.testing.assert_allclose(m.predict(X), y, atol=1e-9)
    # minimum norm: coefficients lie in the row space of the centered design
    Xc = X - X.mean(axis=0)
    proj = Xc.T @ np.linalg.lstsq(Xc.T, m.coef, rcond=None)[0]
    np.testing.assert_allclose(proj, m.coef, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-1e3, 1e3), st.floats(0, 10))
def test_linear_translation_consistent(seed, c, lam):
    rng = np.random.default_rng(seed)
    X, y = rng.standard_normal((30, 5)), rng.standard_normal(30)
    spec = ModelSpec("linear", {"ridge_lambda": lam})
    p0 = fit(spec, X, y).predict(X)
    p1 = fit(spec, X, y + c).predict(X)
    np.testing.assert_allclose(p1 - p0, c, atol=1e-9 * max(1.0, abs(c)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ridge_shrinkage_is_monotone(seed):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(5, 40), rng.integers(1, 30)
    X, y = rng.standard_normal((n, d)), rng.standard_normal(n)
    norms = [np.linalg.norm(fit(ModelSpec("linear", {"ridge_lambda": lam}), X, y).coef)
             for lam in (0.0, 1e-4, 1e-2, 1.0, 10.0, 1e3)]
    assert all(b <= a * (1 + 1e-12) + 1e-15 for a, b in zip(norms, norms[1:]))


def test_linear_noiseless_correlation():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((200, 10))
    y = X @ rng.standard_normal(10) + 4.0
    p = fit(ModelSpec("linear"), X[:150], y[:150]).predict(X[150:])
    assert np.corrcoef(p, y[150:])[0, 1] >= 1 - 1e-9


# knn ---------------------------------------------------------------------


def test_knn_k1_returns_training_target():
    rng = np.random.default_rng(3)
    X, y = rng.standard_normal((50, 4)), rng.standard_normal(50)
    m = fit(ModelSpec("knn", {"k": 1}), X, y)
    np.testing.assert_array_equal(m.predict(X), y)


def test_knn_k_equals_n_is_mean():
    rng = np.random.default_rng(4)
    X, y = rng.standard_normal((12, 3)), rng.standard_normal(12)
    m = fit(ModelSpec("knn", {"k": 12}), X, y)
    np.testing.assert_allclose(m.predict(rng.standard_normal((5, 3))), y.mean(), rtol=1e-14)


def test_knn_hand_average():
    X = np.array([[1.0], [2.0], [10.0]])
    m = fit(ModelSpec("knn", {"k": 2}), X, [0.0, 10.0, 99.0])
    assert m.predict(np.array([[0.0]]))[0] == 5.0
    w = fit(ModelSpec("knn", {"k": 2, "weighting": "inverse_distance"}), X, [0.0, 10.0, 99.0])
    assert w.predict(np.array([[0.0]]))[0] == pytest.approx((10.0 / 2) / (1 + 1 / 2), rel=1e-12)


def test_knn_ties_break_to_lowest_index():
    X = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    m = fit(ModelSpec("knn", {"k": 1}), X, [10.0, 20.0, 30.0, 40.0])
    assert m.predict(np.array([[0.0]]))[0] == 10.0
    idx, _ = m.neighbors(np.array([[0.0]]))
    assert idx.tolist() == [[0]]


def test_knn_k_larger_than_n():
    with pytest.raises(ConfigError):
        fit(ModelSpec("knn", {"k": 6}), np.zeros((5, 1)), np.zeros(5))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 15), st.booleans())
def test_knn_matches_brute_force_and_stays_in_range(seed, k, inv):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(k, 80))
    X = np.round(rng.standard_normal((n, 3)), 1)  # rounding creates ties
    y = rng.standard_normal(n)
    Q = np.round(rng.standard_normal((20, 3)), 1)
    spec = ModelSpec("knn", {"k": k, "weighting": "inverse_distance" if inv else "uniform"})
    p = fit(spec, X, y).predict(Q)
    assert np.all(p >= y.min() - 1e-12) and np.all(p <= y.max() + 1e-12)
    if not inv:
        np.testing.assert_allclose(p, _brute_knn(X, y, Q, k), rtol=1e-12, atol=1e-12)


# trees and forests -------------------------------------------------------


def test_single_unbagged_tree_interpolates_unique_rows():
    rng = np.random.default_rng(5)
    X, y = rng.standard_normal((300, 6)), rng.standard_normal(300)
    spec = ModelSpec("forest", {"n_trees": 1, "bootstrap": False, "max_features": "all", "min_samples_leaf": 1})
    np.testing.assert_array_equal(fit(spec, X, y).predict(X), y)


def test_tree_interpolates_with_feature_subsampling():
    rng = np.random.default_rng(6)
    X = rng.integers(0, 3, size=(200, 8)).astype(float)
    X = np.unique(X, axis=0)
    y = rng.standard_normal(len(X))
    tree = build_tree(X, y, np.random.default_rng(0), max_features=1)
    np.testing.assert_array_equal(tree.predict(X), y)


def test_depth_zero_forest_predicts_bootstrap_mean():
    rng = np.random.default_rng(7)
    X, y = rng.standard_normal((40, 3)), rng.standard_normal(40)
    m = fit(ModelSpec("forest", {"n_trees": 1, "max_depth": 0}), X, y)
    p = m.predict(rng.standard_normal((6, 3)))
    assert np.all(p == p[0])
    # the constant is the mean of some bootstrap sample: seed-reproduce it
    child = np.random.SeedSequence(0).spawn(1)[0]
    rows = np.random.default_rng(child).integers(0, 40, size=40)
    assert p[0] == pytest.approx(y[rows].mean(), rel=1e-15)


def test_min_samples_leaf_respected():
    rng = np.random.default_rng(8)
    X, y = rng.standard_normal((200, 4)), rng.standard_normal(200)
    tree = build_tree(X, y, np.random.default_rng(0), min_samples_leaf=7, max_features=4)
    leaves = tree.apply(X)
    assert np.bincount(leaves)[np.unique(leaves)].min() >= 7


def test_forest_bit_reproducible_and_thread_independent(monkeypatch):
    rng = np.random.default_rng(9)
    X, y = rng.standard_normal((150, 10)), rng.standard_normal(150)
    spec = ModelSpec("forest", {"n_trees": 8, "seed": 42})
    p1 = fit(spec, X, y).predict(X)
    p2 = fit(spec, X, y).predict(X)
    monkeypatch.setenv("TERRAVARIO_THREADS", "4")
    p3 = fit(spec, X, y).predict(X)
    assert p1.tobytes() == p2.tobytes() == p3.tobytes()
    assert fit(spec.with_params(seed=43), X, y).predict(X).tobytes() != p1.tobytes()


def test_dimension_mismatch_on_predict():
    m = fit(ModelSpec("linear"), np.zeros((3, 2)) + np.arange(3)[:, None], [1.0, 2.0, 3.0])
    with pytest.raises(DimensionError):
        predict(m, np.zeros((2, 3)))


@pytest.mark.parametrize("spec", [
    ModelSpec("baseline"),
    ModelSpec("linear", {"ridge_lambda": 0.5}),
    ModelSpec("knn", {"k": 3, "weighting": "inverse_distance"}),
    ModelSpec("forest", {"n_trees": 3, "max_depth": 4}),
])
def test_model_files_round_trip(tmp_path, spec):
    rng = np.random.default_rng(10)
    X, y = rng.standard_normal((30, 4)), rng.standard_normal(30)
    m = fit(spec, X, y)
    back = load_model(save_model(m, tmp_path / "m.json"))
    assert back.spec == spec
    Q = rng.standard_normal((7, 4))
    assert back.predict(Q).tobytes() == m.predict(Q).tobytes()
