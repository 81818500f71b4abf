"""Command-line pipeline: synth, ingest, preprocess, train, evaluate, variogram, report.

Each subcommand writes into its own directory below ``--output-dir`` and
leaves a ``run_manifest.json`` there. Exit status is 0 on success, 1 for
usage and configuration errors and 2 for data or pipeline errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, canonical_json, load_config
from .errors import ConfigError, DataError, PipelineError
from .evaluate import ScenarioReport, derive_seed, nested_grid_search, run_scenario1, run_scenario2
from .preprocess import apply_filters, fit_normalizer
from .regress import fit
from .report import (
    read_csv,
    render_heatmap,
    render_histograms,
    render_scatter,
    render_variogram,
    write_json,
    write_predictions,
    write_summary_tables,
    write_variogram_csv,
)
from .survey_data import coregister, load_survey, parse_raw_streams, write_merged_csv
from .synth import GROUND_TRUTH_FIELD, FieldSpec, LinkageSpec, fairway_pair, generate_track
from .variogram import EmpiricalVariogram, SphericalFit, empirical_variogram, fit_spherical, variogram_of_predictions

log = logging.getLogger("terravario")

COMMANDS = ("synth", "ingest", "preprocess", "train", "evaluate", "variogram", "report")


def quick_config(seed: int = 0) -> dict:
    """Small end-to-end configuration: two 8-lane synthetic fairways of about 380 samples."""
    return {
        "inputs": {"fwy14": "{output_dir}/synth/fwy14.csv", "fwy16": "{output_dir}/synth/fwy16.csv"},
        "train_fairway": "fwy14",
        "test_fairway": "fwy16",
        "normalize_scope": "train",
        "synth": {
            "seed": seed,
            "track": {"n_lanes": 8, "lane_length_m": 60.0, "lane_spacing_m": 1.5, "sample_spacing_m": 1.3},
            "linkage": {"noise_std": 3.0},
            "mean_shift": 3.0,
        },
        "models": {
            "linear": {"grid": {"ridge_lambda": [1.0, 100.0, 1000.0]}},
            "knn": {"grid": {"k": [3, 10]}},
            "forest": {"params": {"n_trees": 20, "min_samples_leaf": 5, "max_features": "third"}},
        },
        "cv": {"repeats": 10, "k": 5, "seed": seed, "outer_k": 3, "inner_k": 3},
        "variogram": {"bin_width_m": 1.0, "max_lag_m": 20.0, "weights": "cressie", "unit": "repeat"},
    }


# helpers ------------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _rel(path: Path, root: Path) -> str:
    path, root = Path(path).resolve(), Path(root).resolve()
    try:
        return path.relative_to(root).as_posix()
    except ValueError:
        return path.as_posix()


def write_manifest(stage_dir: Path, root: Path, command: str, cfg_raw: dict, inputs, outputs,
                   options: dict | None = None) -> Path:
    """Record config hash, seeds, options and checksums of every input and output file."""
    seeds = {"cv": cfg_raw.get("cv", {}).get("seed")}
    if cfg_raw.get("synth"):
        seeds["synth"] = cfg_raw["synth"].get("seed")
    manifest = {
        "command": command,
        "version": __version__,
        "config_sha256": hashlib.sha256(canonical_json(cfg_raw).encode()).hexdigest(),
        "seeds": seeds,
        "options": options or {},
        "inputs": {_rel(p, root): sha256_file(p) for p in sorted(set(map(Path, inputs)))},
        "outputs": {_rel(p, root): sha256_file(p) for p in sorted(set(map(Path, outputs)))},
    }
    return write_json(stage_dir / "run_manifest.json", manifest)


def _stage_dataset(out: Path, fairway: str):
    csv_path = out / "preprocess" / f"{fairway}.csv"
    meta_path = out / "preprocess" / f"{fairway}.json"
    if not csv_path.is_file() or not meta_path.is_file():
        raise PipelineError(f"no preprocessed data for {fairway!r} under {out}; run 'preprocess' first")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    origin = tuple(meta["origin"]) if meta.get("origin") else None
    return load_survey(csv_path, origin=origin, n_steps=meta["n_steps"]), [csv_path, meta_path]


def _scenario_reports(out: Path, which=None) -> dict:
    reports = {}
    for sc in (1, 2):
        p = out / "evaluate" / f"scenario{sc}" / "report.json"
        if (which is None or sc == which) and p.is_file():
            reports[sc] = (p, json.loads(p.read_text(encoding="utf-8")))
    if not reports:
        raise PipelineError(f"no scenario reports under {out / 'evaluate'}; run 'evaluate' first")
    return reports


# subcommands --------------------------------------------------------------


def cmd_synth(args, cfg_raw: dict, cfg: PipelineConfig | None, out: Path) -> int:
    s = cfg_raw.get("synth")
    if not s:
        raise ConfigError("config has no 'synth' section")
    try:
        track = generate_track(**s.get("track", {}))
        linkage = LinkageSpec(**s.get("linkage", {}))
        field = FieldSpec(**{**GROUND_TRUTH_FIELD.to_dict(), **s.get("field", {})})
    except TypeError as exc:
        raise ConfigError(f"invalid synth section: {exc}") from None
    n_steps = cfg_raw.get("n_steps", 400)
    ds14, ds16 = fairway_pair(s["seed"], track, linkage, s.get("mean_shift", 3.0), n_steps, field)
    stage = out / "synth"
    stage.mkdir(parents=True, exist_ok=True)
    outputs = [write_merged_csv(ds14, stage / "fwy14.csv"), write_merged_csv(ds16, stage / "fwy16.csv")]
    truth = {
        "fairways": {ds.fairway_id: {"field": ds.provenance[0]["field"], "linkage": ds.provenance[0]["linkage"],
                                     "n_samples": len(ds), "ecar_mean": float(ds.ecar.mean())}
                     for ds in (ds14, ds16)},
        "track": dict(track.params),
        "origin": list(ds16.provenance[0]["origin"]),
        "n_steps": n_steps,
    }
    outputs.append(write_json(stage / "truth.json", truth))
    if args.quick:
        outputs.append(write_json(out / "quick_config.json", cfg_raw))
    write_manifest(stage, out, "synth", cfg_raw, [], outputs, {"quick": bool(args.quick), "seed": s["seed"]})
    log.info("synth: %d + %d samples written to %s", len(ds14), len(ds16), stage)
    return 0


def cmd_ingest(args, cfg_raw, cfg: PipelineConfig, out: Path) -> int:
    cfg.check_inputs(out)
    stage = out / "ingest"
    inputs, outputs = [], []
    for fw in sorted(cfg.inputs):
        src = cfg.input_source(fw, out)
        inputs += cfg.input_files(fw, out)
        if isinstance(src, dict):
            gps, emi, radar = parse_raw_streams(src["gps"], src["emi"], src["radar"], cfg.n_steps)
            ds = coregister(gps, emi, radar, fairway_id=fw, origin=cfg.origin)
        else:
            ds = load_survey(src, origin=cfg.origin, n_steps=cfg.n_steps)
        stage.mkdir(parents=True, exist_ok=True)
        outputs.append(write_merged_csv(ds, stage / f"{fw}.csv"))
        outputs.append(write_json(stage / f"{fw}.json", {"n_samples": len(ds), "n_steps": ds.n_features,
                                                          "provenance": list(ds.provenance)}))
        log.info("ingest %s: %d samples", fw, len(ds))
    write_manifest(stage, out, "ingest", cfg_raw, inputs, outputs)
    return 0


def cmd_preprocess(args, cfg_raw, cfg: PipelineConfig, out: Path) -> int:
    stage = out / "preprocess"
    inputs, outputs = [], []
    for fw in sorted(cfg.inputs):
        ingested = out / "ingest" / f"{fw}.csv"
        if ingested.is_file():
            src = ingested
        elif isinstance(cfg.inputs[fw], dict):
            raise PipelineError(f"fairway {fw!r} has raw-stream inputs; run 'ingest' first")
        else:
            cfg.check_inputs(out)
            src = cfg.input_source(fw, out)
        inputs.append(src)
        raw = load_survey(src, origin=cfg.origin, n_steps=cfg.n_steps)
        origin = next((r["origin"] for r in raw.provenance if r.get("transform") == "project_to_local"), None)
        ds = apply_filters(raw, cfg.filters)
        if len(ds) == 0:
            raise PipelineError(f"all samples of {fw!r} were removed by the filters")
        stage.mkdir(parents=True, exist_ok=True)
        outputs.append(write_merged_csv(ds, stage / f"{fw}.csv"))
        removed = {r["filter"]: r["removed_count"] for r in ds.provenance if "filter" in r}
        outputs.append(write_json(stage / f"{fw}.json", {
            "origin": origin, "n_steps": ds.n_features, "n_in": len(raw), "n_out": len(ds),
            "removed": removed, "filters": cfg.filters.to_dict()}))
        log.info("preprocess %s: kept %d of %d samples %s", fw, len(ds), len(raw), removed)
    write_manifest(stage, out, "preprocess", cfg_raw, inputs, outputs)
    return 0


def cmd_train(args, cfg_raw, cfg: PipelineConfig, out: Path) -> int:
    ds, inputs = _stage_dataset(out, cfg.train_fairway)
    stage = out / "train"
    cv = cfg.cv
    norm = fit_normalizer(ds)
    X, y = norm.transform_features(ds.features), norm.transform_target(ds.ecar)
    outputs, selection = [], {}
    for name, grid in cfg.models.items():
        spec = grid[0] if len(grid) == 1 else nested_grid_search(
            ds, grid[0].kind, grid, cv["outer_k"], cv["inner_k"], cv["inner_repeats"],
            derive_seed(cv["seed"], 104729), cfg.normalize_scope)
        if "seed" in spec.params:
            spec = spec.with_params(seed=derive_seed(spec.params["seed"], cv["seed"]))
        model = fit(spec, X, y)
        pred = norm.inverse_target(model.predict(X))
        selection[name] = {"spec": spec.to_dict(), "training_mse": float(np.mean((pred - ds.ecar) ** 2))}
        outputs.append(write_json(stage / f"{name}.json", {"model": model.to_dict(), "normalizer": norm.to_dict(),
                                                            "train_fairway": cfg.train_fairway}))
    outputs.append(write_json(stage / "selection.json", selection))
    write_manifest(stage, out, "train", cfg_raw, inputs, outputs)
    return 0


def cmd_evaluate(args, cfg_raw, cfg: PipelineConfig, out: Path) -> int:
    test, inputs = _stage_dataset(out, cfg.test_fairway)
    cv = cfg.cv
    kw = dict(repeats=cv["repeats"], k=cv["k"], seed=cv["seed"], outer_k=cv["outer_k"], inner_k=cv["inner_k"],
              inner_repeats=cv["inner_repeats"], normalize_scope=cfg.normalize_scope)
    if args.scenario == 1:
        report = run_scenario1(test, cfg.models, **kw)
    else:
        train, more = _stage_dataset(out, cfg.train_fairway)
        inputs += more
        report = run_scenario2(train, test, cfg.models, **kw)
    stage = out / "evaluate" / f"scenario{args.scenario}"
    outputs = [write_json(stage / "report.json", report.to_dict())]
    for name in report.models:
        outputs.append(write_predictions(stage / f"predictions_{name}.csv", report.prediction_table(name)))
    write_manifest(stage, out, "evaluate", cfg_raw, inputs, outputs, {"scenario": args.scenario})
    for name, res in report.models.items():
        log.info("scenario %d %s: %s", args.scenario, name,
                 {k: None if v is None else round(v, 4) for k, v in res.summary.mean.items()})
    return 0


def cmd_variogram(args, cfg_raw, cfg: PipelineConfig, out: Path) -> int:
    for sc, (path, d) in _scenario_reports(out, args.scenario).items():
        report = ScenarioReport.from_dict(d)
        vr = variogram_of_predictions(report, cfg.variogram)
        stage = out / "variogram" / f"scenario{sc}"
        outputs = [write_json(stage / "report.json", vr.to_dict())]
        outputs.append(write_variogram_csv(stage / "ground_truth_variogram.csv", vr.ground_truth_ev))
        outputs.append(write_json(stage / "ground_truth_fit.json", _fit_record(vr.ground_truth_ev, vr.ground_truth)))
        pts = np.column_stack([report.test_x, report.test_y])
        for name in report.models:
            # variogram of the per-sample mean prediction, used for the figures
            mean_pred = report.prediction_table(name)["y_pred_mean"]
            ev = empirical_variogram(pts, mean_pred, vr.config.bin_width_m, vr.config.max_lag_m)
            fit_ = fit_spherical(ev, weights=vr.config.weights, lags=vr.config.lags)
            outputs.append(write_variogram_csv(stage / f"{name}_variogram.csv", ev))
            outputs.append(write_json(stage / f"{name}_fit.json", _fit_record(ev, fit_)))
        write_manifest(stage, out, "variogram", cfg_raw, [path], outputs, {"scenario": sc})
        log.info("variogram scenario %d: ground-truth NSR %s", sc, vr.ground_truth.to_dict()["nsr"])
    return 0


def _fit_record(ev: EmpiricalVariogram, fit_: SphericalFit) -> dict:
    return {"fit": fit_.to_dict(), "bin_width_m": ev.bin_width_m, "max_lag_m": ev.max_lag_m}


def _read_variogram(stage: Path, name: str):
    header, rows = read_csv(stage / f"{name}_variogram.csv")
    rec = json.loads((stage / f"{name}_fit.json").read_text(encoding="utf-8"))
    a = np.array(rows, dtype=np.float64).reshape(-1, 3)
    ev = EmpiricalVariogram(a[:, 0], a[:, 1], a[:, 2].astype(np.int64), rec["max_lag_m"], rec["bin_width_m"])
    return ev, SphericalFit.from_dict(rec["fit"])


def cmd_report(args, cfg_raw, cfg: PipelineConfig, out: Path) -> int:
    reports = _scenario_reports(out)
    stage = out / "report"
    figs = stage / "figures"
    inputs = [p for p, _ in reports.values()]
    vreports = {}
    for sc in reports:
        p = out / "variogram" / f"scenario{sc}" / "report.json"
        if p.is_file():
            inputs.append(p)
            vreports[sc] = json.loads(p.read_text(encoding="utf-8"))
    outputs = list(write_summary_tables([d for _, d in reports.values()], stage, vreports or None).values())

    for sc, (_, d) in reports.items():
        report = ScenarioReport.from_dict(d)
        tag = f"scenario{sc}"
        if sc == min(reports):
            render_heatmap(report.test_x, report.test_y, report.test_y_true, figs / f"heatmap_measured_{report.test_fairway}.svg",
                           title=f"measured ECaR, {report.test_fairway}")
            outputs.append(figs / f"heatmap_measured_{report.test_fairway}.svg")
        errors = {}
        for name in report.models:
            t = report.prediction_table(name)
            errors[name] = np.concatenate([r.y_pred - r.y_true for r in report.models[name].records])
            if name == "baseline":
                continue
            for kind, fn in (("heatmap", render_heatmap), ("scatter", render_scatter)):
                path = figs / f"{tag}_{kind}_{name}.svg"
                if kind == "heatmap":
                    fn(t["x_m"], t["y_m"], t["y_pred_mean"], path, title=f"{name} mean prediction, scenario {sc}")
                else:
                    fn(t["y_true"], t["y_pred_mean"], path, title=f"{name}, scenario {sc}")
                outputs.append(path)
        if "baseline" in errors:
            errors = {**{k: v for k, v in errors.items() if k != "baseline"}, "baseline": errors["baseline"]}
        outputs.append(figs / f"{tag}_error_histograms.svg")
        render_histograms(errors, outputs[-1], title=f"prediction errors, scenario {sc}")
        vstage = out / "variogram" / tag
        if sc in vreports:
            for name in ["ground_truth"] + [m for m in report.models if m != "baseline"]:
                ev, fit_ = _read_variogram(vstage, name)
                inputs += [vstage / f"{name}_variogram.csv", vstage / f"{name}_fit.json"]
                outputs.append(figs / f"{tag}_variogram_{name}.svg")
                render_variogram(ev, fit_, outputs[-1], title=f"{name.replace('_', ' ')}, scenario {sc}")
    write_manifest(stage, out, "report", cfg_raw, inputs, outputs)
    log.info("report: %d files written to %s", len(outputs), stage)
    return 0


HANDLERS = {"synth": cmd_synth, "ingest": cmd_ingest, "preprocess": cmd_preprocess, "train": cmd_train,
            "evaluate": cmd_evaluate, "variogram": cmd_variogram, "report": cmd_report}


HELP = {
    "synth": "simulate two synthetic fairways",
    "ingest": "co-register raw streams or validate merged CSVs",
    "preprocess": "project, filter and stage each fairway",
    "train": "select hyperparameters and fit each model on the training fairway",
    "evaluate": "run scenario 1 (within fairway) or 2 (across fairways)",
    "variogram": "fit variograms to ground truth and predictions",
    "report": "write summary tables and figures",
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="terravario", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"terravario {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="{" + ",".join(COMMANDS) + "}")
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", type=Path, help="pipeline config JSON")
        sp.add_argument("--output-dir", type=Path, help="root directory for all outputs (default: config output_dir)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "synth":
            sp.add_argument("--quick", action="store_true", help="use the built-in small configuration")
            sp.add_argument("--seed", type=int, default=0, help="seed for --quick (default 0)")
        if name == "evaluate":
            sp.add_argument("--scenario", type=int, choices=(1, 2), required=True)
        if name == "variogram":
            sp.add_argument("--scenario", type=int, choices=(1, 2), help="only this scenario (default: all found)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("terravario: error: a subcommand is required")
        quick = args.command == "synth" and args.quick
        if args.config is None and not quick:
            raise UsageError(f"terravario {args.command}: error: --config is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if quick and args.config is None:
            cfg_raw = quick_config(args.seed)
            cfg = PipelineConfig.from_dict(cfg_raw)
            out = args.output_dir or Path(".")
        else:
            cfg = load_config(args.config)
            cfg_raw = cfg.raw
            out = args.output_dir or cfg.output_dir
        return HANDLERS[args.command](args, cfg_raw, cfg, Path(out))
    except ConfigError as exc:
        print(f"terravario {args.command}: configuration error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"terravario {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
