import math

import numpy as np
import pytest

from conftest import make_dataset
from terravario.errors import ConfigError, DegenerateCorrelationError, DegenerateTargetError, PipelineError
from terravario.evaluate import (
    ScenarioReport,
    check_no_leakage,
    derive_seed,
    kfold,
    mae,
    mse,
    nested_grid_scores,
    nested_grid_search,
    pearson_r,
    repeated_cv,
    run_scenario1,
    run_scenario2,
    summarize,
)
from terravario.regress import ModelSpec
from terravario.survey_data import SurveyDataset


def _linear_dataset(n=60, d=5, seed=0, noise=0.3, fairway_id="fw"):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = X @ rng.standard_normal(d) + 10 + noise * rng.standard_normal(n)
    ds = make_dataset(n, d=d, seed=seed, fairway_id=fairway_id, ecar=y)
    return ds.with_columns(features=X)


# folds -------------------------------------------------------------------


def test_kfold_partition():
    f = kfold(10, 5, 0)
    assert f.sizes.tolist() == [2, 2, 2, 2, 2]
    allidx = np.concatenate([f.test_indices(i) for i in range(5)])
    assert sorted(allidx.tolist()) == list(range(10))


def test_kfold_near_equal_sizes():
    assert sorted(kfold(7, 5, 1).sizes.tolist(), reverse=True) == [2, 2, 1, 1, 1]


def test_kfold_determinism_and_errors():
    assert np.array_equal(kfold(50, 5, 3).fold_index, kfold(50, 5, 3).fold_index)
    assert not np.array_equal(kfold(50, 5, 3).fold_index, kfold(50, 5, 4).fold_index)
    with pytest.raises(ConfigError):
        kfold(4, 5, 0)
    with pytest.raises(ConfigError):
        kfold(10, 1, 0)


def test_derive_seed_is_stable_and_key_sensitive():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert len({derive_seed(1, 2, 3), derive_seed(1, 3, 2), derive_seed(2, 2, 3)}) == 3


# metrics -----------------------------------------------------------------


def test_perfect_and_negated_predictions():
    y = np.array([1.0, 2.0, 4.0, 7.0])
    assert (mae(y, y), mse(y, y), pearson_r(y, y)) == (0.0, 0.0, 1.0)
    z = y - y.mean()
    assert pearson_r(z, -z) == -1.0


def test_hand_metrics():
    t, p = [0.0, 1.0, 2.0], [0.0, 0.0, 3.0]
    assert mae(t, p) == pytest.approx(2 / 3, abs=1e-15)
    assert mse(t, p) == pytest.approx(2 / 3, abs=1e-15)  # (0 + 1 + 1) / 3
    # brute force: covariance 3, var_t 2, var_p 6 (sums of squared deviations)
    assert pearson_r(t, p) == pytest.approx(3 / math.sqrt(2 * 6), abs=1e-15)


def test_correlation_degenerate():
    with pytest.raises(DegenerateCorrelationError):
        pearson_r([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])
    # a constant whose mean does not round-trip exactly is still recognised
    with pytest.raises(DegenerateCorrelationError):
        pearson_r([1.0, 2.0, 3.0], [0.1, 0.1, 0.1])


# repeated CV -------------------------------------------------------------


def test_fifty_records_and_summary_mean():
    ds = _linear_dataset()
    recs, summ = repeated_cv(ds, ModelSpec("linear"), repeats=10, k=5, seed=0)
    assert len(recs) == 50 and summ.n_evaluations == 50
    assert {(r.repeat_index, r.fold_index) for r in recs} == {(a, b) for a in range(10) for b in range(5)}
    assert abs(summ.mean["mse"] - np.mean([r.mse for r in recs])) <= 1e-12
    assert summ.std["mse"] == pytest.approx(np.std([r.mse for r in recs], ddof=1), rel=1e-12)
    check_no_leakage(recs, "train")


def test_records_are_in_original_units():
    ds = _linear_dataset(noise=0.0)
    recs, _ = repeated_cv(ds, ModelSpec("linear"), repeats=1, k=5)
    for r in recs:
        np.testing.assert_array_equal(r.y_true, ds.ecar[np.searchsorted(ds.ids, r.ids)])
        np.testing.assert_allclose(r.y_pred, r.y_true, atol=1e-9)


def test_baseline_fold_mse_decomposition():
    ds = _linear_dataset(n=47)
    recs, summ = repeated_cv(ds, ModelSpec("baseline"), repeats=3, k=5, seed=2)
    for r in recs:
        train_mean = ds.ecar[np.isin(ds.ids, r.train_ids)].mean()
        test = r.y_true
        assert abs(r.mse - np.mean((test - train_mean) ** 2)) <= 1e-9
        assert abs(r.mse - (test.var() + (test.mean() - train_mean) ** 2)) <= 1e-9
        assert r.pearson_r is None
    assert summ.mean["pearson_r"] is None and summ.n_defined["pearson_r"] == 0


def test_cv_bit_identical_across_runs():
    ds = _linear_dataset()
    spec = ModelSpec("forest", {"n_trees": 3})
    a, _ = repeated_cv(ds, spec, repeats=1, k=2, seed=5)
    b, _ = repeated_cv(ds, spec, repeats=1, k=2, seed=5)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]


def test_errors_carry_repeat_and_fold():
    ds = make_dataset(10, ecar=np.r_[np.zeros(9), 1.0])
    with pytest.raises(DegenerateTargetError, match=r"repeat \d+, fold \d+"):
        repeated_cv(ds, ModelSpec("baseline"), repeats=3, k=5, seed=0)


def test_leakage_check_catches_overlap_and_scope():
    ds = _linear_dataset()
    recs, _ = repeated_cv(ds, ModelSpec("linear"), repeats=1, k=5)
    bad = recs[0]
    bad.train_ids = np.concatenate([bad.train_ids, bad.ids[:1]])
    with pytest.raises(AssertionError, match="overlap"):
        check_no_leakage(recs)
    recs_all, _ = repeated_cv(ds, ModelSpec("linear"), repeats=1, k=5, normalize_scope="all")
    with pytest.raises(AssertionError, match="normalizer"):
        check_no_leakage(recs_all, "train")
    check_no_leakage(recs_all, "all")
    assert all(len(r.normalizer_ids[0]) == len(ds) for r in recs_all)


def test_normalize_scope_validation():
    with pytest.raises(ConfigError):
        repeated_cv(_linear_dataset(), ModelSpec("linear"), normalize_scope="fold")


# grid search -------------------------------------------------------------


def test_single_spec_grid():
    spec = ModelSpec("knn", {"k": 3})
    assert nested_grid_search(_linear_dataset(), "knn", [spec]) is spec


def test_knn_grid_prefers_k1_on_duplicated_points():
    rng = np.random.default_rng(0)
    base = rng.standard_normal((10, 3))
    X = np.repeat(base, 10, axis=0)
    y = np.repeat(rng.standard_normal(10) * 5, 10)
    ds = make_dataset(100, d=3, ecar=y).with_columns(features=X)
    grid = [ModelSpec("knn", {"k": 40}), ModelSpec("knn", {"k": 1})]
    res = nested_grid_scores(ds, grid, outer_k=5, inner_k=5, seed=1)
    assert res.mean_inner_mse[1] <= 1e-24
    assert res.selected == grid[1]
    assert nested_grid_search(ds, "knn", grid, seed=1) == grid[1]


def test_grid_ties_go_to_first_and_are_deterministic():
    ds = _linear_dataset()
    grid = [ModelSpec("baseline"), ModelSpec("baseline")]
    assert nested_grid_scores(ds, grid, seed=3).selected is grid[0]
    g = [ModelSpec("linear", {"ridge_lambda": v}) for v in (0.0, 1.0, 100.0)]
    assert nested_grid_search(ds, "linear", g, seed=4) == nested_grid_search(ds, "linear", g, seed=4)


def test_grid_kind_mismatch():
    with pytest.raises(ConfigError):
        nested_grid_search(_linear_dataset(), "knn", [ModelSpec("linear")])


# scenarios ---------------------------------------------------------------


def test_scenario1_structure():
    ds = _linear_dataset(n=80)
    rep = run_scenario1(ds, {"linear": ModelSpec("linear"), "knn": [ModelSpec("knn", {"k": 2}),
                                                                       ModelSpec("knn", {"k": 8})]},
                        repeats=10, k=5, seed=0, outer_k=3, inner_k=3)
    assert set(rep.models) == {"linear", "knn", "baseline"}
    for name, res in rep.models.items():
        assert len(res.records) == 50
        check_no_leakage(res.records)
    assert rep.models["knn"].grid_search is not None and rep.models["linear"].grid_search is None
    table = rep.prediction_table("linear")
    assert np.all(table["n"] == 10)  # each sample tested once per repeat


def test_scenario2_structure():
    f14, f16 = _linear_dataset(n=70, seed=1, fairway_id="fwy14"), _linear_dataset(n=50, seed=1, fairway_id="fwy16")
    rep = run_scenario2(f14, f16, {"linear": ModelSpec("linear")}, repeats=10, k=5)
    recs = rep.models["linear"].records
    assert len(recs) == 50
    for r in recs:
        np.testing.assert_array_equal(r.ids, f16.ids)
        assert r.train_ids.size == 56 and r.train_fairway == "fwy14" and r.test_fairway == "fwy16"
    check_no_leakage(recs)
    # scope "all" pools both fairways into the normalizer
    rep_all = run_scenario2(f14, f16, {"linear": ModelSpec("linear")}, repeats=1, k=5, normalize_scope="all")
    assert rep_all.models["linear"].records[0].normalizer_fairways == ("fwy14", "fwy16")


def test_reports_round_trip_and_reproduce():
    ds = _linear_dataset()
    specs = {"forest": ModelSpec("forest", {"n_trees": 2})}
    a = run_scenario1(ds, specs, repeats=1, k=3, seed=9)
    b = run_scenario1(ds, specs, repeats=1, k=3, seed=9)
    assert a.to_dict() == b.to_dict()
    assert ScenarioReport.from_dict(a.to_dict()).to_dict() == a.to_dict()


def test_empty_dataset_is_pipeline_error():
    empty = SurveyDataset(time_s=[], features=np.empty((0, 3)), ecar=[])
    with pytest.raises(PipelineError):
        run_scenario1(empty, {"linear": ModelSpec("linear")})
