"""
Ranking regressors without ground truth
=======================================

Train three regressors on a synthetic fairway whose radar features are a
noisy linear function of the target, then compare two rankings: by
cross-validated MSE, and by the nugget-to-sill ratio of each model's
predicted map. A second fairway with a shifted mean and its own sensor
gain shows how the correlation drops when a model is moved across sites.

    python demos/nsr_as_metric.py [output_dir]
"""

import sys
from pathlib import Path

import numpy as np

from terravario.regress import ModelSpec
from terravario.evaluate import run_scenario1, run_scenario2
from terravario.report import render_heatmap, render_scatter, write_summary_tables
from terravario.synth import LinkageSpec, fairway_pair, generate_track
from terravario.variogram import VariogramConfig, variogram_of_predictions

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
seed = 3

track = generate_track(12, 60.0, 1.5, 1.3)
fwy14, fwy16 = fairway_pair(seed, track, LinkageSpec(noise_std=3.0, site_gain_std=0.75, seed=seed))
print(f"fairways: {len(fwy14)} and {len(fwy16)} samples, {fwy16.n_features} frequency steps")

specs = {
    "linear": ModelSpec("linear", {"ridge_lambda": 1000.0}),
    "knn": ModelSpec("knn", {"k": 5}),
    "forest": ModelSpec("forest", {"n_trees": 30, "min_samples_leaf": 5}),
}

# scenario 1: repeated 5-fold CV within one fairway
s1 = run_scenario1(fwy16, specs, repeats=2, k=5, seed=seed)
vr = variogram_of_predictions(s1, VariogramConfig(1.0, 20.0, "cressie", "center", "repeat"))
print(f"\nground-truth NSR {vr.ground_truth.nsr:.3f}")
print(f"{'model':8s} {'MSE':>7s} {'r':>6s} {'NSR':>6s}")
for name in ("linear", "knn", "forest"):
    m = s1.models[name].summary.mean
    print(f"{name:8s} {m['mse']:7.3f} {m['pearson_r']:6.3f} {vr.models[name].mean['nsr']:6.3f}")
by_mse = sorted(("linear", "knn", "forest"), key=lambda n: s1.models[n].summary.mean["mse"])
by_nsr = sorted(("linear", "knn", "forest"), key=lambda n: vr.models[n].mean["nsr"])
print("ranking by MSE:", by_mse, " by NSR:", by_nsr)

# scenario 2: train on the other fairway, test on all of this one
s2 = run_scenario2(fwy14, fwy16, specs, repeats=2, k=5, seed=seed)
print("\nPearson r, within fairway -> across fairways")
for name in ("linear", "knn", "forest"):
    r1 = s1.models[name].summary.mean["pearson_r"]
    r2 = s2.models[name].summary.mean["pearson_r"]
    print(f"{name:8s} {r1:.3f} -> {r2:.3f}")

paths = write_summary_tables([s1.to_dict(), s2.to_dict()], out)
print("\n" + paths["metrics_md"].read_text())

t = s1.prediction_table("forest")
render_heatmap(t["x_m"], t["y_m"], t["y_true"], out / "measured.svg", title="measured")
render_heatmap(t["x_m"], t["y_m"], t["y_pred_mean"], out / "forest_predicted.svg", title="forest, scenario 1")
render_scatter(t["y_true"], t["y_pred_mean"], out / "forest_scatter.svg", title="forest, scenario 1")
print("figures in", out)
