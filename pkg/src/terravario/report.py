"""Figures, summary tables and file output.

Figures are SVG rendered without pyplot, with a fixed hash salt and no
date stamp, so equal inputs give byte-identical files. Every writer goes
through a temporary file followed by a rename.
"""

from __future__ import annotations

import csv
import io
import math
import os
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.colors import Normalize
from matplotlib.figure import Figure

from .config import canonical_json
from .errors import DataError, DegenerateCorrelationError
from .evaluate import METRICS, pearson_r
from .variogram import EmpiricalVariogram, SphericalFit

SVG_RC = {"svg.hashsalt": "terravario", "svg.fonttype": "none", "font.family": "DejaVu Sans",
          "axes.unicode_minus": False, "path.simplify": False}
HIST_BINS = 40
NA = "n.a."


# atomic output ------------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> Path:
    return atomic_write_text(path, canonical_json(_clean(obj)))


def write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def _clean(obj):
    """JSON-safe copy: numpy scalars unwrap, non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, Path):
        return obj.as_posix()
    return obj


# data files ---------------------------------------------------------------

PREDICTION_COLUMNS = ["id", "x_m", "y_m", "y_true", "y_pred_mean", "y_pred_std"]
VARIOGRAM_COLUMNS = ["bin_center_m", "semivariance", "pair_count"]


def write_predictions(path, table: dict) -> Path:
    """Per-sample prediction CSV from :meth:`ScenarioReport.prediction_table`."""
    rows = zip(*(table[c] for c in PREDICTION_COLUMNS))
    return write_csv(path, PREDICTION_COLUMNS,
                     ([int(r[0])] + [float(v) for v in r[1:]] for r in rows))


def write_variogram_csv(path, ev: EmpiricalVariogram) -> Path:
    return write_csv(path, VARIOGRAM_COLUMNS, ev.rows())


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# figures ------------------------------------------------------------------


def _save(fig: Figure, out_path) -> Path:
    buf = io.BytesIO()
    FigureCanvasSVG(fig)
    fig.savefig(buf, format="svg", metadata={"Date": None})
    return atomic_write_bytes(out_path, buf.getvalue())


def _figure(size=(6.0, 4.5)) -> Figure:
    return Figure(figsize=size)


def render_heatmap(x, y, values, out_path, palette: str = "viridis", title: str = "",
                   label: str = "ECaR") -> dict:
    """One marker per sample, colored linearly between the 1st and 99th percentile.

    Returns the color limits used; ``degenerate`` is set when the limits
    coincide, in which case every marker gets the same color.
    """
    x, y, v = (np.asarray(a, dtype=np.float64).ravel() for a in (x, y, values))
    if v.size == 0:
        raise DataError("heatmap needs at least one sample")
    if not (x.size == y.size == v.size):
        raise DataError("heatmap coordinates and values differ in length")
    lo, hi = (float(q) for q in np.quantile(v, [0.01, 0.99]))
    degenerate = not hi > lo
    with matplotlib.rc_context(SVG_RC):
        fig = _figure()
        ax = fig.add_subplot()
        norm = Normalize(lo, lo + 1.0) if degenerate else Normalize(lo, hi)
        sc = ax.scatter(x, y, c=np.full(v.size, lo) if degenerate else v, cmap=palette, norm=norm,
                        s=6, linewidths=0)
        cb = fig.colorbar(sc, ax=ax)
        if degenerate:
            cb.set_ticks([lo])
            cb.set_label(f"{label} (constant {lo:.6g}, degenerate range)")
        else:
            cb.set_label(f"{label} (1st to 99th percentile)")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_aspect("equal", adjustable="datalim")
        if title:
            ax.set_title(title)
        _save(fig, out_path)
    return {"vmin": lo, "vmax": hi, "degenerate": degenerate, "n": int(v.size)}


def scatter_fit(y_true, y_pred) -> dict:
    """Least-squares line ``y_pred = slope * y_true + intercept`` and Pearson r (None if undefined)."""
    t = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    try:
        r = pearson_r(t, p)
    except DegenerateCorrelationError:
        r = None
    if np.all(t == t[0]):
        return {"slope": None, "intercept": None, "r": r}
    dt = t - t.mean()
    slope = float(dt @ (p - p.mean()) / (dt @ dt))
    return {"slope": slope, "intercept": float(p.mean() - slope * t.mean()), "r": r}


def render_scatter(y_true, y_pred, out_path, title: str = "") -> dict:
    """Measured against predicted with least-squares line; r is annotated when defined."""
    t = np.asarray(y_true, dtype=np.float64).ravel()
    p = np.asarray(y_pred, dtype=np.float64).ravel()
    if t.size == 0 or t.size != p.size:
        raise DataError("scatter needs equal-length non-empty inputs")
    stats = scatter_fit(t, p)
    with matplotlib.rc_context(SVG_RC):
        fig = _figure((4.8, 4.5))
        ax = fig.add_subplot()
        ax.scatter(t, p, s=5, alpha=0.5, linewidths=0)
        if stats["slope"] is not None:
            xs = np.array([t.min(), t.max()])
            ax.plot(xs, stats["slope"] * xs + stats["intercept"], color="C3", lw=1.5)
        if stats["r"] is not None:
            ax.text(0.04, 0.95, f"r = {stats['r']:.3f}", transform=ax.transAxes, va="top")
        ax.set_xlabel("measured ECaR")
        ax.set_ylabel("predicted ECaR")
        if title:
            ax.set_title(title)
        _save(fig, out_path)
    return stats


def render_histograms(errors: dict, out_path, bins: int = HIST_BINS, title: str = "") -> dict:
    """Overlaid error histograms on one shared set of bin edges.

    ``errors`` maps a label to prediction-minus-measurement values.
    """
    errs = {k: np.asarray(v, dtype=np.float64).ravel() for k, v in errors.items()}
    if not errs or any(e.size == 0 for e in errs.values()):
        raise DataError("histograms need at least one non-empty error set")
    edges = np.histogram_bin_edges(np.concatenate(list(errs.values())), bins=bins)
    out = {"edges": edges, "counts": {}, "mean": {}, "std": {}}
    with matplotlib.rc_context(SVG_RC):
        fig = _figure()
        ax = fig.add_subplot()
        for i, (name, e) in enumerate(errs.items()):
            counts, _ = np.histogram(e, bins=edges)
            out["counts"][name] = counts
            out["mean"][name] = float(e.mean())
            out["std"][name] = float(e.std())
            ax.hist(e, bins=edges, histtype="stepfilled" if i == 0 else "step", alpha=0.35 if i == 0 else 1.0,
                    lw=1.2, label=name, color=f"C{i}")
        ax.axvline(0.0, color="k", lw=0.6)
        ax.set_xlabel("prediction error (predicted - measured)")
        ax.set_ylabel("count")
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        _save(fig, out_path)
    return out


def render_variogram(ev: EmpiricalVariogram, fit: SphericalFit | None, out_path, title: str = "") -> dict:
    """Binned semivariances sized by pair count, fitted spherical curve and parameter annotation."""
    if len(ev) == 0:
        raise DataError("variogram has no populated bins")
    h = np.asarray(ev.bin_centers, dtype=np.float64)
    counts = np.asarray(ev.pair_counts, dtype=np.float64)
    sizes = 8 + 60 * counts / counts.max()
    out = {"h": h, "gamma": np.asarray(ev.semivariances, dtype=np.float64), "model": None}
    with matplotlib.rc_context(SVG_RC):
        fig = _figure()
        ax = fig.add_subplot()
        ax.scatter(h, out["gamma"], s=sizes, color="C0", alpha=0.7, linewidths=0, label="empirical")
        if fit is not None:
            hh = np.linspace(0.0, max(float(h[-1]), float(ev.max_lag_m)), 200)
            ax.plot(hh, fit.gamma(hh), color="C3", lw=1.5, label="spherical fit")
            out["model"] = fit.gamma(h)
            nsr = f"{fit.nsr:.3f}" if fit.sill > 0 else NA
            ax.text(0.97, 0.05, f"nugget {fit.nugget:.3g}\nsill {fit.sill:.3g}\nrange {fit.range_m:.3g} m\nNSR {nsr}",
                    transform=ax.transAxes, ha="right", va="bottom")
        ax.set_xlabel("lag [m]")
        ax.set_ylabel("semivariance")
        ax.set_xlim(left=0.0)
        ax.set_ylim(bottom=0.0)
        ax.legend(frameon=False, loc="upper left")
        if title:
            ax.set_title(title)
        _save(fig, out_path)
    return out


# summary tables -----------------------------------------------------------

METRIC_BETTER = {"mae": "low", "mse": "low", "pearson_r": "high"}
VARIOGRAM_PARAMS = ("nugget", "sill", "range_m", "nsr")


def _model_order(reports) -> list[str]:
    names = []
    for rep in reports:
        for k in rep["summaries"]:
            if k not in names:
                names.append(k)
    # baseline last, as a reference column
    return [n for n in names if n != "baseline"] + (["baseline"] if "baseline" in names else [])


def metrics_table(reports: list[dict]) -> dict:
    """Rows of (scenario, metric) with mean and one-sigma per model and the best model flagged.

    ``reports`` are ScenarioReport dictionaries. Undefined entries (the
    baseline correlation) are ``"n.a."``.
    """
    if not reports:
        raise DataError("summary tables need at least one report")
    models = _model_order(reports)
    rows = []
    for rep in sorted(reports, key=lambda r: r["scenario"]):
        for metric in METRICS:
            cells, best, best_val = {}, None, None
            for m in models:
                s = rep["summaries"].get(m)
                mean = None if s is None else s["mean"][metric]
                if mean is None:
                    cells[m] = NA
                    continue
                cells[m] = {"mean": mean, "std": s["std"][metric]}
                if best is None or (mean < best_val if METRIC_BETTER[metric] == "low" else mean > best_val):
                    best, best_val = m, mean
            rows.append({"scenario": rep["scenario"], "metric": metric, "cells": cells, "best": best})
    return {"models": models, "rows": rows}


def variogram_table(variogram_reports: dict) -> dict:
    """Rows of (scenario, parameter): ground-truth fit plus per-model mean and one-sigma.

    ``variogram_reports`` maps scenario number to a VariogramReport dictionary.
    """
    if not variogram_reports:
        raise DataError("variogram table needs at least one report")
    models = []
    for rep in variogram_reports.values():
        models += [m for m in rep["models"] if m not in models]
    models = [n for n in models if n != "baseline"] + (["baseline"] if "baseline" in models else [])
    rows = []
    for sc in sorted(variogram_reports, key=int):
        rep = variogram_reports[sc]
        gt = rep["ground_truth"]
        for p in VARIOGRAM_PARAMS:
            g = gt.get(p)
            cells = {}
            for m in models:
                mv = rep["models"].get(m)
                mean = None if mv is None else mv["mean"][p]
                cells[m] = NA if mean is None else {"mean": mean, "std": mv["std"][p]}
            rows.append({"scenario": int(sc), "parameter": p, "ground_truth": NA if g is None else g,
                         "cells": cells})
    return {"models": models, "rows": rows}


def _num_or_na(cell, key):
    return NA if cell == NA else cell[key]


def write_summary_tables(reports: list[dict], out_dir, variogram_reports: dict | None = None) -> dict:
    """Write the metrics table (and the variogram table when given) as CSV, JSON and Markdown.

    CSV cells hold the shortest round-trip representation of each float,
    identical to the JSON value. Returns the written paths.
    """
    out_dir = Path(out_dir)
    paths = {}
    mt = metrics_table(reports)
    header = ["scenario", "metric"] + [f"{m}_{k}" for m in mt["models"] for k in ("mean", "std")] + ["best"]
    rows = []
    for r in mt["rows"]:
        row = [r["scenario"], r["metric"]]
        for m in mt["models"]:
            row += [_num_or_na(r["cells"][m], "mean"), _num_or_na(r["cells"][m], "std")]
        rows.append(row + [r["best"] or ""])
    paths["metrics_csv"] = write_csv(out_dir / "summary_metrics.csv", header, rows)
    paths["metrics_json"] = write_json(out_dir / "summary_metrics.json", mt)
    paths["metrics_md"] = atomic_write_text(out_dir / "summary_metrics.md", _markdown_metrics(mt))
    if variogram_reports:
        vt = variogram_table(variogram_reports)
        header = ["scenario", "parameter", "ground_truth"] + [f"{m}_{k}" for m in vt["models"] for k in ("mean", "std")]
        rows = []
        for r in vt["rows"]:
            row = [r["scenario"], r["parameter"], r["ground_truth"]]
            for m in vt["models"]:
                row += [_num_or_na(r["cells"][m], "mean"), _num_or_na(r["cells"][m], "std")]
            rows.append(row)
        paths["variogram_csv"] = write_csv(out_dir / "summary_variogram.csv", header, rows)
        paths["variogram_json"] = write_json(out_dir / "summary_variogram.json", vt)
        paths["variogram_md"] = atomic_write_text(out_dir / "summary_variogram.md", _markdown_variogram(vt))
    return paths


def _pm(cell, bold=False) -> str:
    if cell == NA:
        return NA
    s = f"{cell['mean']:.3g} ± {cell['std']:.2g}"
    return f"**{s}**" if bold else s


def _markdown_metrics(mt) -> str:
    lines = ["| scenario | metric | " + " | ".join(mt["models"]) + " |",
             "|---|---|" + "---|" * len(mt["models"])]
    for r in mt["rows"]:
        cells = [_pm(r["cells"][m], m == r["best"]) for m in mt["models"]]
        lines.append(f"| {r['scenario']} | {r['metric']} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _markdown_variogram(vt) -> str:
    lines = ["| scenario | parameter | ground truth | " + " | ".join(vt["models"]) + " |",
             "|---|---|---|" + "---|" * len(vt["models"])]
    for r in vt["rows"]:
        gt = r["ground_truth"]
        gt = gt if gt == NA else f"{gt:.3g}"
        cells = [_pm(r["cells"][m]) for m in vt["models"]]
        lines.append(f"| {r['scenario']} | {r['parameter']} | {gt} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
