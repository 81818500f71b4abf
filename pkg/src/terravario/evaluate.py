"""Cross-validation harness, metrics, grid search and the two survey scenarios.

Every (repeat, fold) cell derives its randomness from ``(seed, repeat,
fold)`` alone, so runs are bit-reproducible regardless of execution order.
Metrics are computed in original target units after undoing the target
standardization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DegenerateCorrelationError, PipelineError
from .preprocess import fit_normalizer_arrays
from .regress import ModelSpec, fit
from .survey_data import SurveyDataset

log = logging.getLogger(__name__)

NORMALIZE_SCOPES = ("train", "all")
METRICS = ("mae", "mse", "pearson_r")


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 63-bit seed for a ``(seed, *keys)`` cell."""
    state = np.random.SeedSequence([int(seed), *(int(k) for k in keys)]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


# --------------------------------------------------------------------------
# folds and metrics


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold_index: np.ndarray
    seed: int
    k: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_index == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_index != fold)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_index, minlength=self.k)


def kfold(n: int, k: int, seed: int) -> FoldAssignment:
    """Seeded random partition of ``range(n)`` into ``k`` folds whose sizes differ by at most one."""
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > n:
        raise ConfigError(f"cannot split {n} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    fold = np.empty(n, dtype=np.int64)
    for f, chunk in enumerate(np.array_split(perm, k)):
        fold[chunk] = f
    fold.flags.writeable = False
    return FoldAssignment(fold, int(seed), int(k))


def _pair(y_true, y_pred):
    a = np.asarray(y_true, dtype=np.float64).reshape(-1)
    b = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("metrics need at least one value")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("metrics need finite inputs")
    return a, b


def mae(y_true, y_pred) -> float:
    a, b = _pair(y_true, y_pred)
    return float(np.mean(np.abs(a - b)))


def mse(y_true, y_pred) -> float:
    a, b = _pair(y_true, y_pred)
    return float(np.mean((a - b) ** 2))


def pearson_r(y_true, y_pred) -> float:
    a, b = _pair(y_true, y_pred)
    if a.size < 2:
        raise ValueError("pearson_r needs at least two values")
    # a constant vector's mean need not round to the constant, so test equality directly
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise DegenerateCorrelationError("correlation undefined: an input has zero variance")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    return float(np.clip((da @ db) / np.sqrt(saa * sbb), -1.0, 1.0))


# --------------------------------------------------------------------------
# records and summaries


@dataclass(eq=False)
class EvalRecord:
    """One train/test evaluation: metrics plus the index sets used.

    ``train_ids`` are the samples the model saw and ``normalizer_ids`` those
    that entered the normalizer moments, each qualified by fairway.
    """

    model: str
    repeat_index: int
    fold_index: int
    mae: float
    mse: float
    pearson_r: float | None
    ids: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray
    test_fairway: str = ""
    train_fairway: str = ""
    train_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    normalizer_fairways: tuple = ()
    normalizer_ids: tuple = ()

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "repeat_index": self.repeat_index,
            "fold_index": self.fold_index,
            "mae": self.mae,
            "mse": self.mse,
            "pearson_r": self.pearson_r,
            "test_fairway": self.test_fairway,
            "train_fairway": self.train_fairway,
            "ids": self.ids.tolist(),
            "y_true": [float(v) for v in self.y_true],
            "y_pred": [float(v) for v in self.y_pred],
            "train_ids": self.train_ids.tolist(),
            "normalizer_fairways": list(self.normalizer_fairways),
            "normalizer_ids": [np.asarray(a).tolist() for a in self.normalizer_ids],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        return cls(
            model=d["model"],
            repeat_index=int(d["repeat_index"]),
            fold_index=int(d["fold_index"]),
            mae=float(d["mae"]),
            mse=float(d["mse"]),
            pearson_r=None if d["pearson_r"] is None else float(d["pearson_r"]),
            ids=np.asarray(d["ids"], dtype=np.int64),
            y_true=np.asarray(d["y_true"], dtype=np.float64),
            y_pred=np.asarray(d["y_pred"], dtype=np.float64),
            test_fairway=d.get("test_fairway", ""),
            train_fairway=d.get("train_fairway", ""),
            train_ids=np.asarray(d.get("train_ids", []), dtype=np.int64),
            normalizer_fairways=tuple(d.get("normalizer_fairways", ())),
            normalizer_ids=tuple(np.asarray(a, dtype=np.int64) for a in d.get("normalizer_ids", ())),
        )


@dataclass
class MetricSummary:
    """Mean and one-sigma (sample standard deviation) of each metric over records.

    A metric that is undefined for every record (``pearson_r`` for constant
    predictions) has mean and std ``None``.
    """

    mean: dict
    std: dict
    n_evaluations: int
    n_defined: dict

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n_evaluations": self.n_evaluations,
                "n_defined": self.n_defined}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricSummary":
        return cls(dict(d["mean"]), dict(d["std"]), int(d["n_evaluations"]), dict(d["n_defined"]))


def summarize(records: list[EvalRecord]) -> MetricSummary:
    mean, std, n_def = {}, {}, {}
    for m in METRICS:
        vals = np.array([getattr(r, m) for r in records if getattr(r, m) is not None], dtype=np.float64)
        n_def[m] = int(vals.size)
        if vals.size == 0:
            mean[m] = std[m] = None
        else:
            mean[m] = float(vals.mean())
            std[m] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return MetricSummary(mean, std, len(records), n_def)


def check_no_leakage(records: list[EvalRecord], normalize_scope: str = "train") -> None:
    """Raise ``AssertionError`` if any record's model or normalizer saw its test samples."""
    for r in records:
        where = f"{r.model} repeat {r.repeat_index} fold {r.fold_index}"
        if r.train_fairway == r.test_fairway and np.intersect1d(r.train_ids, r.ids).size:
            raise AssertionError(f"{where}: training and test ids overlap")
        if normalize_scope != "train":
            continue
        for fw, ids in zip(r.normalizer_fairways, r.normalizer_ids):
            if fw != r.train_fairway:
                raise AssertionError(f"{where}: normalizer fit on fairway {fw!r}, model on {r.train_fairway!r}")
            if not np.all(np.isin(ids, r.train_ids)):
                raise AssertionError(f"{where}: normalizer used samples outside the training set")
            if fw == r.test_fairway and np.intersect1d(ids, r.ids).size:
                raise AssertionError(f"{where}: normalizer saw test samples")


# --------------------------------------------------------------------------
# single train/test evaluation


def _cell_spec(spec: ModelSpec, seed: int, repeat: int, fold: int) -> ModelSpec:
    if spec.kind == "forest":
        return spec.with_params(seed=derive_seed(spec.params["seed"], seed, repeat, fold))
    return spec


def _evaluate_split(spec, train: SurveyDataset, tr_idx, test: SurveyDataset, te_idx,
                    norm_sets, repeat, fold, label=None) -> EvalRecord:
    """Fit normalizer on ``norm_sets`` [(dataset, idx)], model on train[tr_idx]; score on test[te_idx]."""
    X_norm = np.vstack([ds.features[i] for ds, i in norm_sets])
    y_norm = np.concatenate([ds.ecar[i] for ds, i in norm_sets])
    norm = fit_normalizer_arrays(X_norm, y_norm)
    Xtr = norm.transform_features(train.features[tr_idx])
    ytr = norm.transform_target(train.ecar[tr_idx])
    model = fit(spec, Xtr, ytr)
    pred = norm.inverse_target(model.predict(norm.transform_features(test.features[te_idx])))
    y_true = test.ecar[te_idx]
    try:
        r = pearson_r(y_true, pred)
    except DegenerateCorrelationError:
        r = None
    return EvalRecord(
        model=label or spec.kind,
        repeat_index=repeat,
        fold_index=fold,
        mae=mae(y_true, pred),
        mse=mse(y_true, pred),
        pearson_r=r,
        ids=test.ids[te_idx].copy(),
        y_true=y_true.copy(),
        y_pred=pred,
        test_fairway=test.fairway_id,
        train_fairway=train.fairway_id,
        train_ids=train.ids[tr_idx].copy(),
        normalizer_fairways=tuple(ds.fairway_id for ds, _ in norm_sets),
        normalizer_ids=tuple(ds.ids[i].copy() for ds, i in norm_sets),
    )


def _check_scope(normalize_scope):
    if normalize_scope not in NORMALIZE_SCOPES:
        raise ConfigError(f"normalize_scope must be one of {NORMALIZE_SCOPES}")


def _annotate(exc, repeat, fold):
    msg = f"repeat {repeat}, fold {fold}: {exc}"
    if isinstance(exc, ConfigError):
        return ConfigError(msg)
    if isinstance(exc, DataError):
        return type(exc)(msg) if type(exc).__init__ is DataError.__init__ else DataError(msg)
    return exc


def repeated_cv(dataset: SurveyDataset, spec: ModelSpec, repeats: int = 10, k: int = 5, seed: int = 0,
                normalize_scope: str = "train", label: str | None = None):
    """Repeated k-fold CV of one model on one dataset.

    For every repeat a fresh seeded split is drawn; in each fold the
    normalizer and model are fit on the training folds only (or the
    normalizer on all samples when ``normalize_scope="all"``).

    Returns ``(records, summary)`` with ``repeats * k`` records.
    """
    _check_scope(normalize_scope)
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    n = len(dataset)
    all_idx = np.arange(n)
    records = []
    for rep in range(repeats):
        folds = kfold(n, k, derive_seed(seed, rep))
        for f in range(k):
            tr, te = folds.train_indices(f), folds.test_indices(f)
            norm_sets = [(dataset, tr)] if normalize_scope == "train" else [(dataset, all_idx)]
            try:
                rec = _evaluate_split(_cell_spec(spec, seed, rep, f), dataset, tr, dataset, te,
                                      norm_sets, rep, f, label)
            except (ConfigError, DataError) as exc:
                raise _annotate(exc, rep, f) from exc
            records.append(rec)
    return records, summarize(records)


# --------------------------------------------------------------------------
# nested grid search


@dataclass
class GridSearchResult:
    specs: list
    inner_mse: np.ndarray  # (repeats, outer_k, n_specs)
    selected: ModelSpec
    outer_mse: np.ndarray  # (repeats, outer_k) test MSE of each outer fold's inner winner

    @property
    def mean_inner_mse(self) -> np.ndarray:
        return self.inner_mse.mean(axis=(0, 1))

    def to_dict(self) -> dict:
        return {
            "selected": self.selected.to_dict(),
            "candidates": [
                {"spec": s.to_dict(), "mean_inner_mse": float(m)} for s, m in zip(self.specs, self.mean_inner_mse)
            ],
            "outer_mse_mean": float(self.outer_mse.mean()) if self.outer_mse.size else None,
        }


def nested_grid_scores(dataset: SurveyDataset, grid: list[ModelSpec], outer_k: int = 5, inner_k: int = 5,
                       repeats: int = 1, seed: int = 0, normalize_scope: str = "train") -> GridSearchResult:
    """Score every grid point with inner CV inside each outer training set."""
    _check_scope(normalize_scope)
    grid = list(grid)
    if not grid:
        raise ConfigError("grid search needs at least one candidate")
    n = len(dataset)
    sub_seed = derive_seed(seed, 7919)
    inner = np.zeros((repeats, outer_k, len(grid)))
    outer = np.zeros((repeats, outer_k))
    for rep in range(repeats):
        folds = kfold(n, outer_k, derive_seed(sub_seed, rep))
        for f in range(outer_k):
            tr, te = folds.train_indices(f), folds.test_indices(f)
            inner_folds = kfold(tr.size, inner_k, derive_seed(sub_seed, rep, f))
            for s, spec in enumerate(grid):
                scores = []
                for g in range(inner_k):
                    itr, ite = tr[inner_folds.train_indices(g)], tr[inner_folds.test_indices(g)]
                    norm_idx = itr if normalize_scope == "train" else np.arange(n)
                    try:
                        rec = _evaluate_split(_cell_spec(spec, sub_seed, rep, f * inner_k + g), dataset, itr,
                                              dataset, ite, [(dataset, norm_idx)], rep, f)
                    except (ConfigError, DataError) as exc:
                        raise _annotate(exc, rep, f) from exc
                    scores.append(rec.mse)
                inner[rep, f, s] = np.mean(scores)
            best = grid[int(np.argmin(inner[rep, f]))]
            norm_idx = tr if normalize_scope == "train" else np.arange(n)
            outer[rep, f] = _evaluate_split(_cell_spec(best, sub_seed, rep, f), dataset, tr, dataset, te,
                                            [(dataset, norm_idx)], rep, f).mse
    mean_inner = inner.mean(axis=(0, 1))
    selected = grid[int(np.argmin(mean_inner))]
    return GridSearchResult(grid, inner, selected, outer)


def nested_grid_search(dataset: SurveyDataset, kind: str, grid, outer_k: int = 5, inner_k: int = 5,
                       repeats: int = 1, seed: int = 0, normalize_scope: str = "train") -> ModelSpec:
    """Select the grid point with the lowest mean inner-CV MSE (first wins ties).

    ``grid`` is a list of :class:`ModelSpec` of the given ``kind``.
    """
    grid = list(grid)
    if not grid:
        raise ConfigError("grid search needs at least one candidate")
    if any(s.kind != kind for s in grid):
        raise ConfigError(f"grid contains specs that are not of kind {kind!r}")
    if len(grid) == 1:
        return grid[0]
    return nested_grid_scores(dataset, grid, outer_k, inner_k, repeats, seed, normalize_scope).selected


# --------------------------------------------------------------------------
# scenarios


@dataclass
class ModelResult:
    spec: ModelSpec
    records: list
    summary: MetricSummary
    grid_search: dict | None = None

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "summary": self.summary.to_dict(),
            "grid_search": self.grid_search,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelResult":
        return cls(ModelSpec.from_dict(d["spec"]), [EvalRecord.from_dict(r) for r in d["records"]],
                   MetricSummary.from_dict(d["summary"]), d.get("grid_search"))


@dataclass
class ScenarioReport:
    """Per-model CV results plus the test fairway's coordinates and targets."""

    scenario: int
    train_fairway: str
    test_fairway: str
    models: dict
    test_ids: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    test_y_true: np.ndarray
    settings: dict = field(default_factory=dict)

    def prediction_table(self, model: str) -> dict:
        """Per-sample mean and std (ddof 0) of predictions over all records."""
        recs = self.models[model].records
        pos = {int(i): p for p, i in enumerate(self.test_ids)}
        n = self.test_ids.size
        s1, s2, cnt = np.zeros(n), np.zeros(n), np.zeros(n)
        for r in recs:
            idx = np.array([pos[int(i)] for i in r.ids])
            np.add.at(s1, idx, r.y_pred)
            np.add.at(s2, idx, r.y_pred ** 2)
            np.add.at(cnt, idx, 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            m = s1 / cnt
            var = np.maximum(s2 / cnt - m * m, 0.0)
        return {"id": self.test_ids, "x_m": self.test_x, "y_m": self.test_y, "y_true": self.test_y_true,
                "y_pred_mean": m, "y_pred_std": np.sqrt(var), "n": cnt}

    def to_dict(self) -> dict:
        return {
            "format": "terravario-scenario-report",
            "version": 1,
            "scenario": self.scenario,
            "train_fairway": self.train_fairway,
            "test_fairway": self.test_fairway,
            "settings": self.settings,
            "summaries": {k: v.summary.to_dict() for k, v in self.models.items()},
            "selected_specs": {k: v.spec.to_dict() for k, v in self.models.items()},
            "test": {
                "ids": self.test_ids.tolist(),
                "x_m": [float(v) for v in self.test_x],
                "y_m": [float(v) for v in self.test_y],
                "y_true": [float(v) for v in self.test_y_true],
            },
            "models": {k: v.to_dict() for k, v in self.models.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioReport":
        t = d["test"]
        return cls(
            scenario=int(d["scenario"]),
            train_fairway=d["train_fairway"],
            test_fairway=d["test_fairway"],
            models={k: ModelResult.from_dict(v) for k, v in d["models"].items()},
            test_ids=np.asarray(t["ids"], dtype=np.int64),
            test_x=np.asarray(t["x_m"], dtype=np.float64),
            test_y=np.asarray(t["y_m"], dtype=np.float64),
            test_y_true=np.asarray(t["y_true"], dtype=np.float64),
            settings=d.get("settings", {}),
        )


def _as_grids(specs) -> dict:
    """Normalize ``{name: ModelSpec | [ModelSpec, ...]}`` and make sure a baseline is present."""
    grids = {}
    for name, value in dict(specs).items():
        grid = [value] if isinstance(value, ModelSpec) else list(value)
        if not grid:
            raise ConfigError(f"empty grid for model {name!r}")
        grids[name] = grid
    if not any(g[0].kind == "baseline" for g in grids.values()):
        grids["baseline"] = [ModelSpec("baseline")]
    return grids


def _select(dataset, name, grid, cv):
    if len(grid) == 1:
        return grid[0], None
    res = nested_grid_scores(dataset, grid, cv["outer_k"], cv["inner_k"], cv["inner_repeats"],
                             derive_seed(cv["seed"], 104729), cv["normalize_scope"])
    log.info("grid search %s: selected %s", name, res.selected.label)
    return res.selected, res.to_dict()


def _cv_settings(repeats, k, seed, outer_k, inner_k, inner_repeats, normalize_scope):
    _check_scope(normalize_scope)
    return {"repeats": int(repeats), "k": int(k), "seed": int(seed), "outer_k": int(outer_k),
            "inner_k": int(inner_k), "inner_repeats": int(inner_repeats), "normalize_scope": normalize_scope}


def _require(ds: SurveyDataset, what: str):
    if len(ds) == 0:
        raise PipelineError(f"{what} dataset is empty after filtering")
    if not ds.has_local_coords:
        raise PipelineError(f"{what} dataset has no local coordinates")


def _report(scenario, train, test, models, settings):
    return ScenarioReport(scenario, train.fairway_id, test.fairway_id, models, test.ids.copy(),
                          test.x_m.copy(), test.y_m.copy(), test.ecar.copy(), settings)


def run_scenario1(fwy16: SurveyDataset, specs, repeats: int = 10, k: int = 5, seed: int = 0,
                  outer_k: int = 5, inner_k: int = 5, inner_repeats: int = 1,
                  normalize_scope: str = "train") -> ScenarioReport:
    """Train and test on one fairway: grid search, then ``repeats`` x ``k`` random-split CV per model."""
    _require(fwy16, "test")
    cv = _cv_settings(repeats, k, seed, outer_k, inner_k, inner_repeats, normalize_scope)
    models = {}
    for name, grid in _as_grids(specs).items():
        spec, gs = _select(fwy16, name, grid, cv)
        records, summary = repeated_cv(fwy16, spec, repeats, k, seed, normalize_scope, label=name)
        models[name] = ModelResult(spec, records, summary, gs)
    return _report(1, fwy16, fwy16, models, {**cv, "scenario": 1})


def run_scenario2(fwy14: SurveyDataset, fwy16: SurveyDataset, specs, repeats: int = 10, k: int = 5,
                  seed: int = 0, outer_k: int = 5, inner_k: int = 5, inner_repeats: int = 1,
                  normalize_scope: str = "train") -> ScenarioReport:
    """Train on ``k - 1`` folds of one fairway, test on the whole other fairway.

    Hyperparameters are searched on the training fairway only.
    """
    _require(fwy14, "training")
    _require(fwy16, "test")
    if fwy14.n_features != fwy16.n_features:
        raise PipelineError("fairways have different feature dimensions")
    cv = _cv_settings(repeats, k, seed, outer_k, inner_k, inner_repeats, normalize_scope)
    test_idx = np.arange(len(fwy16))
    models = {}
    for name, grid in _as_grids(specs).items():
        spec, gs = _select(fwy14, name, grid, cv)
        records = []
        for rep in range(repeats):
            folds = kfold(len(fwy14), k, derive_seed(seed, rep))
            for f in range(k):
                tr = folds.train_indices(f)
                if normalize_scope == "train":
                    norm_sets = [(fwy14, tr)]
                else:
                    norm_sets = [(fwy14, np.arange(len(fwy14))), (fwy16, test_idx)]
                try:
                    records.append(_evaluate_split(_cell_spec(spec, seed, rep, f), fwy14, tr, fwy16, test_idx,
                                                   norm_sets, rep, f, name))
                except (ConfigError, DataError) as exc:
                    raise _annotate(exc, rep, f) from exc
        models[name] = ModelResult(spec, records, summarize(records), gs)
    return _report(2, fwy14, fwy16, models, {**cv, "scenario": 2})
