"""Track filters and feature/target normalization.

Filters only ever delete samples. Each appends a provenance record
``{filter, params, removed_count}``; re-applying a filter whose identical
record is already present is a no-op, which makes every filter idempotent
even though the quantile-based ones would otherwise keep trimming.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, DataError, DegenerateTargetError, DimensionError
from .survey_data import SurveyDataset

FILTER_ORDER = ("turns", "path_ends", "velocity", "target_outliers")


@dataclass(frozen=True)
class FilterConfig:
    heading_rate_max_deg_per_s: float = 15.0
    speed_quantile_low: float = 0.02
    speed_quantile_high: float = 0.98
    path_end_trim_m: float = 2.0
    outlier_fraction: float = 0.005

    def __post_init__(self):
        if not 0.0 <= self.speed_quantile_low < self.speed_quantile_high <= 1.0:
            raise ConfigError("speed quantiles must satisfy 0 <= low < high <= 1")
        if not 0.0 <= self.outlier_fraction < 0.5:
            raise ConfigError("outlier_fraction must lie in [0, 0.5)")
        if self.heading_rate_max_deg_per_s <= 0:
            raise ConfigError("heading_rate_max_deg_per_s must be positive")
        if self.path_end_trim_m < 0:
            raise ConfigError("path_end_trim_m must be non-negative")

    @classmethod
    def from_dict(cls, d: dict | None) -> "FilterConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown filter option(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _already_applied(dataset: SurveyDataset, name: str, params: dict) -> bool:
    return any(r.get("filter") == name and r.get("params") == params for r in dataset.provenance)


def _apply_mask(dataset: SurveyDataset, keep: np.ndarray, name: str, params: dict) -> SurveyDataset:
    removed = int(keep.size - np.count_nonzero(keep))
    return dataset.subset(keep, {"filter": name, "params": params, "removed_count": removed})


def segment_runs(dataset: SurveyDataset) -> list[np.ndarray]:
    """Split row positions into runs of consecutive sample ids.

    A jump in ids marks samples removed by an earlier filter, i.e. a break
    between driving segments.
    """
    n = len(dataset)
    if n == 0:
        return []
    breaks = np.flatnonzero(np.diff(dataset.ids) != 1) + 1
    return np.split(np.arange(n), breaks)


def _require_track(dataset: SurveyDataset) -> None:
    if len(dataset) and not dataset.has_local_coords:
        raise DataError("filter requires local coordinates")


def heading_rate(dataset: SurveyDataset) -> np.ndarray:
    """Absolute heading change rate per sample in degrees/second.

    Computed within each run of consecutive ids; zero-length steps inherit
    the previous bearing.
    """
    _require_track(dataset)
    rate = np.zeros(len(dataset))
    x, y, t = dataset.x_m, dataset.y_m, dataset.time_s
    for run in segment_runs(dataset):
        if run.size < 3:
            continue
        dx, dy = np.diff(x[run]), np.diff(y[run])
        moving = np.hypot(dx, dy) > 0
        if not moving.any():
            continue
        bearing = np.arctan2(dy, dx)
        # carry bearings across stationary steps
        idx = np.where(moving, np.arange(moving.size), -1)
        idx = np.maximum.accumulate(idx)
        first = int(np.flatnonzero(moving)[0])
        idx[idx < 0] = first
        bearing = bearing[idx]
        turn = np.angle(np.exp(1j * np.diff(bearing)))
        tr = t[run]
        r = np.abs(np.degrees(turn)) / (0.5 * (tr[2:] - tr[:-2]))
        rate[run[1:-1]] = r
        rate[run[0]] = r[0]
        rate[run[-1]] = r[-1]
    return rate


def filter_turns(dataset: SurveyDataset, cfg: FilterConfig = FilterConfig()) -> SurveyDataset:
    params = {"heading_rate_max_deg_per_s": cfg.heading_rate_max_deg_per_s}
    if _already_applied(dataset, "turns", params):
        return dataset
    keep = heading_rate(dataset) <= cfg.heading_rate_max_deg_per_s
    return _apply_mask(dataset, keep, "turns", params)


def filter_path_ends(dataset: SurveyDataset, cfg: FilterConfig = FilterConfig()) -> SurveyDataset:
    """Drop samples closer than ``path_end_trim_m`` (along track) to either end of their segment."""
    trim = cfg.path_end_trim_m
    params = {"path_end_trim_m": trim}
    if _already_applied(dataset, "path_ends", params):
        return dataset
    _require_track(dataset)
    keep = np.ones(len(dataset), dtype=bool)
    for run in segment_runs(dataset):
        step = np.hypot(np.diff(dataset.x_m[run]), np.diff(dataset.y_m[run]))
        s = np.concatenate([[0.0], np.cumsum(step)])
        keep[run] = (s >= trim) & (s[-1] - s >= trim)
    return _apply_mask(dataset, keep, "path_ends", params)


def filter_velocity(dataset: SurveyDataset, cfg: FilterConfig = FilterConfig()) -> SurveyDataset:
    """Keep samples whose speed lies within the configured empirical quantiles.

    Quantiles interpolate linearly between order statistics.
    """
    params = {"speed_quantile_low": cfg.speed_quantile_low, "speed_quantile_high": cfg.speed_quantile_high}
    if _already_applied(dataset, "velocity", params):
        return dataset
    if len(dataset) == 0:
        return _apply_mask(dataset, np.ones(0, dtype=bool), "velocity", params)
    v = dataset.speed_mps
    if not np.all(np.isfinite(v)):
        raise DataError("filter_velocity requires speeds; call estimate_velocity first")
    lo, hi = np.quantile(v, [cfg.speed_quantile_low, cfg.speed_quantile_high])
    return _apply_mask(dataset, (v >= lo) & (v <= hi), "velocity", params)


def trim_target_outliers(dataset: SurveyDataset, fraction: float = 0.005) -> SurveyDataset:
    """Remove targets below the ``fraction`` or above the ``1 - fraction`` quantile."""
    if not 0.0 <= fraction < 0.5:
        raise ConfigError("fraction must lie in [0, 0.5)")
    params = {"outlier_fraction": fraction}
    if _already_applied(dataset, "target_outliers", params):
        return dataset
    if len(dataset) == 0:
        return _apply_mask(dataset, np.ones(0, dtype=bool), "target_outliers", params)
    e = dataset.ecar
    lo, hi = np.quantile(e, [fraction, 1.0 - fraction])
    return _apply_mask(dataset, (e >= lo) & (e <= hi), "target_outliers", params)


def apply_filters(dataset: SurveyDataset, cfg: FilterConfig = FilterConfig()) -> SurveyDataset:
    """Run all filters in the fixed order turns, path ends, velocity, target outliers."""
    ds = filter_turns(dataset, cfg)
    ds = filter_path_ends(ds, cfg)
    ds = filter_velocity(ds, cfg)
    return trim_target_outliers(ds, cfg.outlier_fraction)


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Per-step feature centering plus target standardization.

    ``fit_ids`` records which samples the moments came from, so callers
    can check that no test sample contributed.
    """

    feature_means: np.ndarray
    target_mean: float
    target_std: float
    fit_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        if not self.target_std > 0:
            raise DegenerateTargetError("target_std must be positive")

    @property
    def n_features(self) -> int:
        return self.feature_means.size

    def transform_features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionError(f"expected {self.n_features} features, got array of shape {X.shape}")
        return X - self.feature_means

    def transform_target(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def inverse_target(self, value):
        return np.asarray(value, dtype=np.float64) * self.target_std + self.target_mean

    def to_dict(self) -> dict:
        return {
            "feature_means": [float(v) for v in self.feature_means],
            "target_mean": float(self.target_mean),
            "target_std": float(self.target_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["feature_means"], dtype=np.float64), float(d["target_mean"]), float(d["target_std"]))


def fit_normalizer_arrays(X, y, ids=None) -> Normalizer:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise DataError("cannot fit a normalizer on an empty dataset")
    std = float(np.std(y, ddof=1)) if y.size > 1 else 0.0
    if not std > 0:
        raise DegenerateTargetError(f"target variance is zero over {y.size} training sample(s)")
    ids = np.arange(y.size) if ids is None else np.asarray(ids, dtype=np.int64)
    return Normalizer(X.mean(axis=0), float(y.mean()), std, ids)


def fit_normalizer(train: SurveyDataset) -> Normalizer:
    """Fit feature means and target moments (std with n - 1) on ``train``."""
    return fit_normalizer_arrays(train.features, train.ecar, train.ids)


def transform(norm: Normalizer, dataset: SurveyDataset) -> SurveyDataset:
    return dataset.with_columns(
        {"transform": "normalize", "target_mean": norm.target_mean, "target_std": norm.target_std},
        features=norm.transform_features(dataset.features),
        ecar=norm.transform_target(dataset.ecar),
    )


def inverse_target(norm: Normalizer, value):
    out = norm.inverse_target(value)
    return float(out) if out.ndim == 0 else out
