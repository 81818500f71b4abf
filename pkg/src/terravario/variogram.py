"""Empirical semivariograms, spherical model fits and the nugget-to-sill ratio.

The empirical estimator is the classical method-of-moments one,

    gamma(b) = sum_{pairs in b} (v_i - v_j)**2 / (2 * N_b),

with pairs binned by separation ``h`` into half-open bins
``(b * w, (b + 1) * w]`` up to ``max_lag``. Per-bin sums are accumulated
with :func:`math.fsum`, so results are correctly rounded and independent of
point order or of how the pair loop is blocked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigError, EmptyVariogramError, FitError, UndefinedNSRError

DEFAULT_BIN_WIDTH_M = 1.0
_BLOCK_ROWS = 256


@dataclass(frozen=True, eq=False)
class EmpiricalVariogram:
    bin_centers: np.ndarray
    semivariances: np.ndarray
    pair_counts: np.ndarray
    max_lag_m: float
    bin_width_m: float
    mean_lags: np.ndarray | None = None

    def __len__(self):
        return self.bin_centers.size

    def lags(self, which: str = "center") -> np.ndarray:
        """Representative lag per bin: geometric ``"center"`` or ``"mean"`` pair distance."""
        if which == "center":
            return np.asarray(self.bin_centers, dtype=np.float64)
        if which == "mean":
            return np.asarray(self.bin_centers if self.mean_lags is None else self.mean_lags, dtype=np.float64)
        raise ValueError(f"unknown lag choice {which!r}")

    def rows(self):
        for c, g, n in zip(self.bin_centers, self.semivariances, self.pair_counts):
            yield float(c), float(g), int(n)

    def to_dict(self) -> dict:
        return {
            "bin_centers": [float(v) for v in self.bin_centers],
            "semivariances": [float(v) for v in self.semivariances],
            "pair_counts": [int(v) for v in self.pair_counts],
            "max_lag_m": float(self.max_lag_m),
            "bin_width_m": float(self.bin_width_m),
            "mean_lags": None if self.mean_lags is None else [float(v) for v in self.mean_lags],
        }


def max_pairwise_distance(points) -> float:
    """Largest distance between any two points (via the convex hull when possible)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 2:
        return 0.0
    cand = pts
    if pts.shape[0] > 64:
        from scipy.spatial import ConvexHull, QhullError

        try:
            cand = pts[ConvexHull(pts).vertices]
        except QhullError:
            # collinear: the extremes along the dominant axis bound the extent
            axis = int(np.argmax(np.ptp(pts, axis=0)))
            order = np.argsort(pts[:, axis])
            cand = pts[[order[0], order[-1]]]
    diff = cand[:, None, :] - cand[None, :, :]
    return float(np.sqrt((diff ** 2).sum(axis=-1)).max())


def default_max_lag(points) -> float:
    return 0.5 * max_pairwise_distance(points)


def _pair_terms(points: np.ndarray, values: np.ndarray, bin_width: float, max_lag: float):
    """Bin index, distance and squared difference for every pair with ``0 < h <= max_lag``."""
    x, y = points[:, 0], points[:, 1]
    n = x.size
    bins, dist, sq = [], [], []
    for a in range(0, n - 1, _BLOCK_ROWS):
        b = min(a + _BLOCK_ROWS, n - 1)
        dx = x[a:b, None] - x[None, a:]
        dy = y[a:b, None] - y[None, a:]
        h = np.sqrt(dx * dx + dy * dy)
        rows = np.arange(a, b)[:, None]
        cols = np.arange(a, n)[None, :]
        mask = (cols > rows) & (h > 0) & (h <= max_lag)
        r, c = np.nonzero(mask)
        hv = h[r, c]
        bins.append((np.ceil(hv / bin_width) - 1).astype(np.int64))
        dist.append(hv)
        dv = values[r + a] - values[c + a]
        sq.append(dv * dv)
    if not bins:
        return np.empty(0, dtype=np.int64), np.empty(0), np.empty(0)
    return np.concatenate(bins), np.concatenate(dist), np.concatenate(sq)


def empirical_variogram(points, values, bin_width_m: float = DEFAULT_BIN_WIDTH_M,
                        max_lag_m: float | None = None) -> EmpiricalVariogram:
    """Method-of-moments semivariogram of ``values`` at 2-D ``points``.

    Parameters
    ----------
    points : array (n, 2)
        Planar coordinates in meters.
    values : array (n,)
    bin_width_m : float
        Width of the lag bins.
    max_lag_m : float, optional
        Largest lag considered; defaults to half the maximum pairwise
        distance.

    Bins without pairs are omitted. Pairs at zero separation are excluded.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if pts.shape[0] != vals.size:
        raise ValueError(f"{pts.shape[0]} points but {vals.size} values")
    if pts.shape[0] < 2:
        raise EmptyVariogramError("need at least two points")
    if not bin_width_m > 0:
        raise ValueError("bin_width_m must be positive")
    if max_lag_m is None:
        max_lag_m = default_max_lag(pts)
    if not max_lag_m > 0:
        raise EmptyVariogramError("max_lag_m must be positive (all points coincide?)")
    bins, dist, sq = _pair_terms(pts, vals, bin_width_m, max_lag_m)
    if bins.size == 0:
        raise EmptyVariogramError(f"no point pairs within max lag {max_lag_m} m")
    order = np.argsort(bins, kind="stable")
    bins, dist, sq = bins[order], dist[order], sq[order]
    occupied, starts, counts = np.unique(bins, return_index=True, return_counts=True)
    gamma = np.array([math.fsum(sq[s:s + c].tolist()) / (2.0 * c) for s, c in zip(starts, counts)])
    mean_lags = np.array([math.fsum(dist[s:s + c].tolist()) / c for s, c in zip(starts, counts)])
    return EmpiricalVariogram(
        bin_centers=(occupied + 0.5) * bin_width_m,
        semivariances=gamma,
        pair_counts=counts.astype(np.int64),
        max_lag_m=float(max_lag_m),
        bin_width_m=float(bin_width_m),
        mean_lags=mean_lags,
    )


def _spherical_shape(r):
    r = np.minimum(r, 1.0)
    return 1.5 * r - 0.5 * r ** 3


def spherical_gamma(h, nugget: float, sill: float, range_m: float):
    """Spherical semivariogram; 0 at ``h == 0``, ``sill`` beyond the range."""
    h = np.asarray(h, dtype=np.float64)
    out = nugget + (sill - nugget) * _spherical_shape(h / range_m)
    out = np.where(h > 0, out, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SphericalFit:
    nugget: float
    sill: float
    range_m: float
    rss: float
    flags: tuple = field(default_factory=tuple)

    @property
    def nsr(self) -> float:
        return nugget_to_sill_ratio(self)

    @property
    def partial_sill(self) -> float:
        return self.sill - self.nugget

    def gamma(self, h):
        return spherical_gamma(h, self.nugget, self.sill, self.range_m)

    def to_dict(self) -> dict:
        try:
            nsr = self.nsr
        except UndefinedNSRError:
            nsr = None
        return {"nugget": self.nugget, "sill": self.sill, "range_m": self.range_m,
                "nsr": nsr, "rss": self.rss, "flags": list(self.flags)}

    @classmethod
    def from_dict(cls, d: dict) -> "SphericalFit":
        return cls(float(d["nugget"]), float(d["sill"]), float(d["range_m"]), float(d["rss"]),
                   tuple(d.get("flags", ())))


def nugget_to_sill_ratio(fit: SphericalFit) -> float:
    if not fit.sill > 0:
        raise UndefinedNSRError("nugget-to-sill ratio is undefined for a zero sill")
    return fit.nugget / fit.sill


def _linear_params(g, gamma, w):
    """Weighted non-negative least squares for ``gamma ~ nugget + psill * g``.

    When ``g`` is constant the two parameters are not separable and the
    nugget absorbs everything.
    """
    sw, sg, sgg = w.sum(), (w * g).sum(), (w * g * g).sum()
    sy, sgy = (w * gamma).sum(), (w * g * gamma).sum()
    cands = []
    det = sw * sgg - sg * sg
    if det > 1e-12 * sw * sgg:
        nug = (sgg * sy - sg * sgy) / det
        ps = (sw * sgy - sg * sy) / det
        if nug >= 0 and ps >= 0:
            cands.append((nug, ps))
    cands.append((max(sy / sw, 0.0), 0.0))
    if sgg > 0:
        cands.append((0.0, max(sgy / sgg, 0.0)))
    best = None
    for nug, ps in cands:
        r = gamma - nug - ps * g
        rss = float((w * r * r).sum())
        if best is None or rss < best[2]:
            best = (nug, ps, rss)
    return best


WEIGHTINGS = ("pairs", "uniform", "cressie")


def fit_spherical(ev: EmpiricalVariogram, init: SphericalFit | dict | None = None,
                  n_grid: int = 80, weights: str = "pairs", lags: str = "center",
                  max_reweight: int = 25) -> SphericalFit:
    """Weighted least-squares spherical fit to an empirical variogram.

    For a fixed range the model is linear in (nugget, partial sill), which
    are solved exactly under non-negativity. The range is located on a
    coarse log-spaced grid (between the second lag and twice the last)
    and refined with bounded Brent minimization of the profiled
    residual.

    ``weights`` is ``"pairs"`` (pair counts), ``"uniform"``, or
    ``"cressie"``: pair counts over the squared model semivariance,
    iterated from the pair-count fit until the parameters settle. ``lags``
    picks the bin ``"center"`` or the ``"mean"`` pair distance per bin as
    the abscissa.
    """
    if weights not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weights!r}")
    h = ev.lags(lags)
    gamma = np.asarray(ev.semivariances, dtype=np.float64)
    counts = np.asarray(ev.pair_counts, dtype=np.float64)
    if h.size < 3:
        raise FitError(f"need at least 3 populated bins, got {h.size}")
    if not (np.all(np.isfinite(gamma)) and np.all(counts > 0)):
        raise FitError("semivariances must be finite and pair counts positive")
    w = np.ones_like(h) if weights == "uniform" else counts
    fit = _fit_weighted(h, gamma, w, init, n_grid)
    if weights != "cressie" or "pure_nugget" in fit.flags:
        return fit
    for _ in range(max_reweight):
        model = np.maximum(spherical_gamma(h, fit.nugget, fit.sill, fit.range_m), 1e-12 * max(fit.sill, 1e-300))
        new = _fit_weighted(h, gamma, counts / model ** 2, fit, n_grid)
        done = np.allclose([new.nugget, new.sill, new.range_m], [fit.nugget, fit.sill, fit.range_m],
                           rtol=1e-9, atol=1e-12 * max(fit.sill, 1.0))
        fit = new
        if done:
            return fit
    return SphericalFit(fit.nugget, fit.sill, fit.range_m, fit.rss, fit.flags + ("reweighting_not_converged",))


def _fit_weighted(h, gamma, w, init, n_grid) -> SphericalFit:
    # A range below the second lag leaves one lag on the rising limb, and the
    # nugget then comes from dividing by 1 - shape(h0 / range), which blows
    # up as the range nears h0. The search starts at the second lag.
    grid = np.geomspace(h[1], 2.0 * h[-1], n_grid)
    if init is not None:
        r0 = init["range_m"] if isinstance(init, dict) else init.range_m
        grid = np.unique(np.append(grid, np.clip(r0, grid[0], grid[-1])))

    scale = max(float(np.abs(gamma).max()), np.finfo(float).tiny)
    if np.ptp(gamma) <= 1e-12 * scale:
        c = float(np.clip(np.average(gamma, weights=w), 0.0, None))
        flags = ("pure_nugget", "range_unidentifiable") + (("zero_variogram",) if c == 0 else ())
        r = gamma - c
        return SphericalFit(c, c, float(grid[0]), float((w * r * r).sum()), flags)

    def profile(a):
        return _linear_params(_spherical_shape(h / a), gamma, w)

    rss_grid = np.array([profile(a)[2] for a in grid])
    i = int(np.argmin(rss_grid))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, grid.size - 1)]
    best_a, best = float(grid[i]), profile(grid[i])
    if hi > lo:
        res = minimize_scalar(lambda a: profile(a)[2], bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-10 * hi, "maxiter": 500})
        if not res.success:
            raise FitError(f"range refinement did not converge: {res.message}",
                           best=SphericalFit(best[0], best[0] + best[1], best_a, best[2]), rss=best[2])
        cand = profile(res.x)
        if cand[2] <= best[2]:
            best_a, best = float(res.x), cand
    nug, ps, rss = best
    flags = []
    if ps <= 1e-12 * max(nug, scale):
        flags += ["pure_nugget", "range_unidentifiable"]
    if best_a >= grid[-1] * (1 - 1e-9):
        flags.append("range_at_upper_bound")
    if best_a <= grid[0] * (1 + 1e-9):
        flags.append("range_at_lower_bound")
    return SphericalFit(float(nug), float(nug + ps), best_a, float(rss), tuple(flags))


@dataclass(frozen=True)
class VariogramConfig:
    bin_width_m: float = DEFAULT_BIN_WIDTH_M
    max_lag_m: float | None = None
    weights: str = "pairs"
    lags: str = "center"
    # "record": one fit per evaluation record (its test-set predictions);
    # "repeat": one fit per CV repeat, pooling that repeat's out-of-fold predictions
    unit: str = "record"

    def __post_init__(self):
        if not self.bin_width_m > 0:
            raise ConfigError("variogram bin_width_m must be positive")
        if self.max_lag_m is not None and not self.max_lag_m > 0:
            raise ConfigError("variogram max_lag_m must be positive or null")
        if self.weights not in WEIGHTINGS:
            raise ConfigError(f"variogram weights must be one of {WEIGHTINGS}")
        if self.lags not in ("center", "mean"):
            raise ConfigError("variogram lags must be 'center' or 'mean'")
        if self.unit not in ("record", "repeat"):
            raise ConfigError("variogram unit must be 'record' or 'repeat'")

    @classmethod
    def from_dict(cls, d: dict | None) -> "VariogramConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown variogram option(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {"bin_width_m": self.bin_width_m, "max_lag_m": self.max_lag_m,
                "weights": self.weights, "lags": self.lags, "unit": self.unit}


def fit_values(points, values, cfg: VariogramConfig = VariogramConfig()):
    """Empirical variogram plus spherical fit; constant values give a flagged zero fit."""
    ev = empirical_variogram(points, values, cfg.bin_width_m, cfg.max_lag_m)
    return ev, fit_spherical(ev, weights=cfg.weights, lags=cfg.lags)


@dataclass
class ModelVariogram:
    """Per-model collection of fits with mean and one-sigma per parameter."""

    model: str
    fits: list
    mean: dict
    std: dict
    n_fits: int
    n_degenerate: int

    def to_dict(self) -> dict:
        return {"model": self.model, "mean": self.mean, "std": self.std, "n_fits": self.n_fits,
                "n_degenerate": self.n_degenerate, "fits": [f.to_dict() for f in self.fits]}


def summarize_fits(model: str, fits: list[SphericalFit]) -> ModelVariogram:
    mean, std = {}, {}
    for key in ("nugget", "sill", "range_m", "nsr"):
        vals = []
        for f in fits:
            if key == "nsr":
                if f.sill > 0:
                    vals.append(f.nsr)
            else:
                vals.append(getattr(f, key))
        if vals:
            mean[key] = float(np.mean(vals))
            std[key] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        else:
            mean[key] = std[key] = None
    degenerate = sum(1 for f in fits if "pure_nugget" in f.flags or f.sill == 0)
    return ModelVariogram(model, list(fits), mean, std, len(fits), degenerate)


@dataclass
class VariogramReport:
    ground_truth_ev: EmpiricalVariogram
    ground_truth: SphericalFit
    models: dict
    config: VariogramConfig

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "ground_truth": self.ground_truth.to_dict(),
            "models": {k: v.to_dict() for k, v in self.models.items()},
        }


def variogram_of_predictions(report, cfg: VariogramConfig = VariogramConfig()) -> VariogramReport:
    """Fit a variogram to every evaluation's test-set predictions.

    ``report`` is a :class:`terravario.evaluate.ScenarioReport`. Returns the
    ground-truth fit (measured values of the whole test fairway) and, per
    model, the list of fits with mean and one-sigma of nugget, sill, range
    and NSR.
    """
    coords = {int(i): (x, y) for i, x, y in zip(report.test_ids, report.test_x, report.test_y)}
    pts_all = np.column_stack([report.test_x, report.test_y])
    max_lag = cfg.max_lag_m if cfg.max_lag_m is not None else default_max_lag(pts_all)
    cfg = replace(cfg, max_lag_m=max_lag)
    gt_ev, gt_fit = fit_values(pts_all, report.test_y_true, cfg)

    models = {}
    for name, result in report.models.items():
        fits = []
        for ids, pred in _prediction_sets(result.records, cfg.unit):
            pts = np.array([coords[int(i)] for i in ids])
            try:
                fits.append(fit_values(pts, pred, cfg)[1])
            except EmptyVariogramError:
                continue
        models[name] = summarize_fits(name, fits)
    return VariogramReport(gt_ev, gt_fit, models, cfg)


def _prediction_sets(records, unit: str):
    if unit == "record":
        for r in records:
            yield r.ids, r.y_pred
    elif unit == "repeat":
        by_repeat: dict = {}
        for r in records:
            by_repeat.setdefault(r.repeat_index, []).append(r)
        for rep in sorted(by_repeat):
            rs = by_repeat[rep]
            ids = np.concatenate([r.ids for r in rs])
            pred = np.concatenate([r.y_pred for r in rs])
            # an id tested more than once within a repeat contributes its mean prediction
            uniq, inverse, counts = np.unique(ids, return_inverse=True, return_counts=True)
            yield uniq, np.bincount(inverse, weights=pred) / counts
    else:
        raise ValueError(f"unknown variogram unit {unit!r}")
