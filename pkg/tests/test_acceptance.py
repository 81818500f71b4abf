"""Acceptance criteria 1 to 9.

Each test records one ``criterion N PASS|FAIL`` line, printed in the
terminal summary, then asserts. Every tolerance and seed set is pinned
here; configurations were chosen on seeds disjoint from the ones below.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from make_golden import golden_input
from test_variogram import brute_force_variogram
from terravario.cli import main
from terravario.evaluate import check_no_leakage, pearson_r, repeated_cv, run_scenario1, run_scenario2
from terravario.regress import ModelSpec, fit
from terravario.report import PREDICTION_COLUMNS, VARIOGRAM_COLUMNS, read_csv, render_heatmap
from terravario.survey_data import SurveyDataset
from terravario.synth import FieldSpec, LinkageSpec, fairway_pair, generate_track, simulate_gaussian_field
from terravario.variogram import (
    EmpiricalVariogram,
    VariogramConfig,
    empirical_variogram,
    fit_spherical,
    spherical_gamma,
    variogram_of_predictions,
)

GOLDEN = Path(__file__).parent / "data" / "golden_heatmap.svg"
TRUE = {"nugget": 1.51, "sill": 9.71, "range_m": 15.82}
TRUE_NSR = 0.156

pytestmark = pytest.mark.acceptance


def record(n: int, ok: bool, detail: str):
    ACCEPTANCE_LINES.append(f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


# 1 -----------------------------------------------------------------------

C1_SEEDS = range(20)
C1_REL_TOL = 0.25
C1_MIN_RATE = 0.90
C1_NSR_TOL = 0.08
C1_BUDGET_S = 120.0


def test_criterion_1_variogram_recovery():
    t0 = time.perf_counter()
    track = generate_track()  # 23 lanes x 200 m, about 3500 samples over about 6600 m^2
    pts = track.points
    ok = {k: [] for k in TRUE}
    nsr = []
    for seed in C1_SEEDS:
        values = simulate_gaussian_field(pts, FieldSpec(**TRUE, mean=20.0, seed=seed))
        ev = empirical_variogram(pts, values, 1.0, 20.0)
        f = fit_spherical(ev, weights="cressie", lags="center")
        for k in TRUE:
            ok[k].append(abs(getattr(f, k) / TRUE[k] - 1) <= C1_REL_TOL)
        nsr.append(f.nsr)
    elapsed = time.perf_counter() - t0
    rates = {k: float(np.mean(v)) for k, v in ok.items()}
    joint = float(np.mean(np.all([ok[k] for k in TRUE], axis=0)))
    mean_nsr = float(np.mean(nsr))
    passed = (all(r >= C1_MIN_RATE for r in rates.values()) and abs(mean_nsr - TRUE_NSR) <= C1_NSR_TOL
              and elapsed <= C1_BUDGET_S)
    record(1, passed, f"n={len(pts)}, per-parameter rates {rates} (need >= {C1_MIN_RATE}), joint {joint:.2f}, "
                      f"mean NSR {mean_nsr:.3f} (target {TRUE_NSR} +- {C1_NSR_TOL}), {elapsed:.1f}s")


# 2 -----------------------------------------------------------------------


def test_criterion_2_noiseless_fit():
    t0 = time.perf_counter()
    h = np.arange(1, 41) - 0.5
    ev = EmpiricalVariogram(h, spherical_gamma(h, **TRUE), np.full(h.size, 500), 40.0, 1.0)
    f = fit_spherical(ev)
    elapsed = time.perf_counter() - t0
    errs = {k: abs(getattr(f, k) / v - 1) for k, v in TRUE.items()}
    record(2, max(errs.values()) <= 1e-3 and elapsed <= 1.0,
           f"relative errors {{{', '.join(f'{k}: {v:.1e}' for k, v in errs.items())}}} (tol 1e-3), {elapsed:.3f}s")


# 3 -----------------------------------------------------------------------


def test_criterion_3_estimator_bit_for_bit():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for i in range(100):
        w = float(rng.choice([0.5, 1.0, 1.5, 2.0]))
        # every other instance on an integer grid, so pair distances land exactly on bin edges
        pts = rng.integers(0, 15, (50, 2)).astype(float) if i % 2 else rng.uniform(0, 20, (50, 2))
        vals = rng.normal(0, 3, 50)
        max_lag = float(rng.uniform(5, 25))
        ev = empirical_variogram(pts, vals, w, max_lag)
        centers, gammas, counts = brute_force_variogram(pts.tolist(), vals.tolist(), w, max_lag)
        same = (ev.bin_centers.tolist() == centers and ev.semivariances.tolist() == gammas
                and ev.pair_counts.tolist() == counts)
        mismatches += not same
    record(3, mismatches == 0, f"{100 - mismatches}/100 random 50-point instances identical to the all-pairs oracle")


# 4 -----------------------------------------------------------------------


def test_criterion_4_regressor_oracles():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((120, 6))
    y = rng.standard_normal(120)
    knn = fit(ModelSpec("knn", {"k": 1}), X, y)
    knn_mse = float(np.mean((knn.predict(X) - y) ** 2))
    tree = fit(ModelSpec("forest", {"n_trees": 1, "bootstrap": False, "max_features": "all",
                                    "max_depth": None, "min_samples_leaf": 1}), X, y)
    tree_mse = float(np.mean((tree.predict(X) - y) ** 2))
    beta = rng.standard_normal(6)
    y_lin = X @ beta + 4.0
    r_ols = pearson_r(y_lin, fit(ModelSpec("linear"), X, y_lin).predict(X))

    ds = SurveyDataset(time_s=np.arange(97.0), features=X[:97], ecar=y[:97] * 2 + 5,
                       x_m=np.arange(97.0), y_m=np.zeros(97), fairway_id="fw")
    records, _ = repeated_cv(ds, ModelSpec("baseline"), repeats=10, k=5, seed=4)
    worst = 0.0
    for r in records:
        train_mean = ds.ecar[np.isin(ds.ids, r.train_ids)].mean()
        # test-fold variance about the predicted constant, denominator n_test
        worst = max(worst, abs(r.mse - float(np.mean((r.y_true - train_mean) ** 2))))
    ok = knn_mse == 0.0 and tree_mse == 0.0 and r_ols >= 1 - 1e-9 and worst <= 1e-9
    record(4, ok, f"knn k=1 train MSE {knn_mse}, single full tree train MSE {tree_mse}, OLS r = {r_ols:.12f}, "
                  f"baseline fold MSE max deviation {worst:.1e} (tol 1e-9) over {len(records)} folds")


# 5 -----------------------------------------------------------------------


def test_criterion_5_harness_structure():
    track = generate_track(8, 60.0, 1.5, 1.3, None)
    _, f16 = fairway_pair(5, track, LinkageSpec(noise_std=2.0, seed=5))
    specs = {"linear": ModelSpec("linear", {"ridge_lambda": 100.0}), "knn": ModelSpec("knn", {"k": 5}),
             "forest": ModelSpec("forest", {"n_trees": 10, "min_samples_leaf": 5})}
    a = run_scenario1(f16, specs, repeats=10, k=5, seed=5)
    b = run_scenario1(f16, specs, repeats=10, k=5, seed=5)
    counts = {name: len(res.records) for name, res in a.models.items()}
    leakage_ok = True
    try:
        for res in a.models.values():
            check_no_leakage(res.records, "train")
    except AssertionError:
        leakage_ok = False
    identical = json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
    record(5, all(c == 50 for c in counts.values()) and leakage_ok and identical,
           f"records per model {counts}, leakage check {'passed' if leakage_ok else 'FAILED'}, "
           f"reports bit-identical across runs: {identical}")


# 6 and 7 -----------------------------------------------------------------

C67_SEEDS = range(10)
C67_MIN = 8
C6_BUDGET_S = 600.0
NAMES = ("linear", "knn", "forest")
SPECS = {"linear": [ModelSpec("linear", {"ridge_lambda": 1000.0})],
         "knn": [ModelSpec("knn", {"k": 5})],
         "forest": [ModelSpec("forest", {"n_trees": 30, "min_samples_leaf": 5})]}
VCFG = VariogramConfig(1.0, 20.0, "cressie", "center", "repeat")


def _track67():
    return generate_track(12, 60.0, 1.5, 1.3, None)


def kendall_tau(a, b) -> float:
    """Kendall rank correlation for untied sequences: (concordant - discordant) / pairs."""
    n, s = len(a), 0
    for i in range(n):
        for j in range(i + 1, n):
            s += int(np.sign(a[i] - a[j]) * np.sign(b[i] - b[j]))
    return s / (n * (n - 1) / 2)


def test_criterion_6_nsr_ranking_matches_mse():
    t0 = time.perf_counter()
    track = _track67()
    agree = []
    for seed in C67_SEEDS:
        _, f16 = fairway_pair(seed, track, LinkageSpec(noise_std=3.0, seed=seed))
        rep = run_scenario1(f16, SPECS, repeats=2, k=5, seed=seed)
        vr = variogram_of_predictions(rep, VCFG)
        mse = [rep.models[n].summary.mean["mse"] for n in NAMES]
        nsr = [vr.models[n].mean["nsr"] for n in NAMES]
        agree.append(kendall_tau(mse, nsr) == 1.0)
    elapsed = time.perf_counter() - t0
    record(6, sum(agree) >= C67_MIN and elapsed <= C6_BUDGET_S,
           f"NSR and MSE rankings agree (tau = 1) in {sum(agree)}/10 seeds (need >= {C67_MIN}), {elapsed:.0f}s")


def test_criterion_7_generalization_gap_direction():
    track = _track67()
    ok = []
    gaps = []
    for seed in C67_SEEDS:
        f14, f16 = fairway_pair(seed, track, LinkageSpec(noise_std=3.0, site_gain_std=0.75, seed=seed))
        r1 = run_scenario1(f16, SPECS, repeats=2, k=5, seed=seed)
        r2 = run_scenario2(f14, f16, SPECS, repeats=2, k=5, seed=seed)
        d = [r2.models[n].summary.mean["pearson_r"] - r1.models[n].summary.mean["pearson_r"] for n in NAMES]
        ok.append(all(v <= 0 for v in d))
        gaps.append(np.mean(d))
    record(7, sum(ok) >= C67_MIN,
           f"every model's scenario-2 r <= scenario-1 r in {sum(ok)}/10 seeds (need >= {C67_MIN}), "
           f"mean change in r {np.mean(gaps):+.3f}")


# 8 -----------------------------------------------------------------------


def test_criterion_8_pure_nugget_and_constant_field():
    rng = np.random.default_rng(8)
    pts = rng.uniform(0, 60, (2000, 2))
    nsrs = []
    for seed in range(5):
        vals = simulate_gaussian_field(pts, FieldSpec(2.0, 2.0, 10.0, 0.0, seed))
        nsrs.append(fit_spherical(empirical_variogram(pts, vals)).nsr)
    ev = empirical_variogram(pts, np.full(2000, 7.25), 1.0, 30.0)
    zero = len(ev) == 30 and bool(np.all(ev.semivariances == 0.0))
    record(8, min(nsrs) >= 0.9 and zero,
           f"pure-nugget NSR over 5 fields at n=2000: min {min(nsrs):.3f} (need >= 0.9); "
           f"constant field gamma = 0 in all {len(ev)} bins: {zero}")


# 9 -----------------------------------------------------------------------

C9_BUDGET_S = 300.0
STEPS = (("preprocess",), ("evaluate", "--scenario", "1"), ("evaluate", "--scenario", "2"), ("variogram",),
         ("report",))


def _run_pipeline(out: Path) -> list:
    codes = [main(["synth", "--quick", "--seed", "7", "--output-dir", str(out)])]
    cfg = str(out / "quick_config.json")
    for step in STEPS:
        codes.append(main([*step, "--config", cfg, "--output-dir", str(out)]))
    return codes


def _schema_problems(out: Path) -> list[str]:
    problems = []

    def need(cond, what):
        if not cond:
            problems.append(what)

    for sc in (1, 2):
        ev_dir = out / "evaluate" / f"scenario{sc}"
        rep = json.loads((ev_dir / "report.json").read_text())
        need(rep.get("format") == "terravario-scenario-report" and rep.get("version") == 1, f"report {sc} header")
        need({"scenario", "train_fairway", "test_fairway", "settings", "summaries", "selected_specs", "test",
              "models"} <= set(rep), f"report {sc} keys")
        for name in rep["models"]:
            header, rows = read_csv(ev_dir / f"predictions_{name}.csv")
            need(header == PREDICTION_COLUMNS, f"{name} prediction header")
            need(len(rows) == len(rep["test"]["ids"]) and all(len(r) == 6 for r in rows), f"{name} prediction rows")
            need(all(math.isfinite(float(v)) for r in rows for v in r), f"{name} prediction values")
        v_dir = out / "variogram" / f"scenario{sc}"
        for name in ["ground_truth"] + list(rep["models"]):
            header, rows = read_csv(v_dir / f"{name}_variogram.csv")
            need(header == VARIOGRAM_COLUMNS, f"{name} variogram header")
            need(all(int(r[2]) > 0 for r in rows), f"{name} pair counts")
            fit_ = json.loads((v_dir / f"{name}_fit.json").read_text())
            need(set(fit_) == {"fit", "bin_width_m", "max_lag_m"}, f"{name} fit keys")
            need(set(fit_["fit"]) == {"nugget", "sill", "range_m", "nsr", "rss", "flags"}, f"{name} fit fields")
        for stage in (ev_dir, v_dir):
            man = json.loads((stage / "run_manifest.json").read_text())
            need({"command", "version", "config_sha256", "seeds", "options", "inputs", "outputs"} == set(man),
                 f"{stage.name} manifest keys")
    table = json.loads((out / "report" / "summary_metrics.json").read_text())
    header, rows = read_csv(out / "report" / "summary_metrics.csv")
    need(header == ["scenario", "metric"] + [f"{m}_{k}" for m in table["models"] for k in ("mean", "std")] + ["best"],
         "metrics table header")
    need(len(rows) == 6, "metrics table rows")
    for row, jrow in zip(rows, table["rows"]):
        for m in table["models"]:
            cell = jrow["cells"][m]
            c = row[header.index(f"{m}_mean")]
            need(c == "n.a." if cell == "n.a." else float(f"{float(c):.12g}") == float(f"{cell['mean']:.12g}"),
                 f"metrics cell {m}")
    header, rows = read_csv(out / "report" / "summary_variogram.csv")
    need(header[:3] == ["scenario", "parameter", "ground_truth"] and len(rows) == 8, "variogram table")
    return problems


def test_criterion_9_cli_pipeline(tmp_path):
    t0 = time.perf_counter()
    codes = _run_pipeline(tmp_path / "a")
    elapsed = time.perf_counter() - t0
    problems = _schema_problems(tmp_path / "a") if all(c == 0 for c in codes) else ["pipeline failed"]
    codes_b = _run_pipeline(tmp_path / "b")
    files_a = {p.relative_to(tmp_path / "a"): p.read_bytes() for p in (tmp_path / "a").rglob("*") if p.is_file()}
    files_b = {p.relative_to(tmp_path / "b"): p.read_bytes() for p in (tmp_path / "b").rglob("*") if p.is_file()}
    n_svg = sum(1 for p in files_a if p.suffix == ".svg")
    stable = files_a == files_b and all(c == 0 for c in codes_b)
    x, y, v = golden_input()
    render_heatmap(x, y, v, tmp_path / "golden.svg", title="golden")
    golden = (tmp_path / "golden.svg").read_bytes() == GOLDEN.read_bytes()
    ok = all(c == 0 for c in codes) and elapsed <= C9_BUDGET_S and not problems and stable and golden
    record(9, ok, f"exit codes {codes}, {elapsed:.0f}s (budget {C9_BUDGET_S:.0f}s), schema problems {problems}, "
                  f"second run byte-identical ({len(files_a)} files, {n_svg} SVG): {stable}, golden heatmap: {golden}")
