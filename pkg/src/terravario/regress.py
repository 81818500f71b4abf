"""Regressors trained under squared-error loss.

Four model kinds share one interface: ``fit(spec, X, y)`` returns a fitted
model and ``predict(model, X)`` evaluates it.

* ``linear``: ridge-regularized least squares with an unpenalized
  intercept, solved through an SVD (minimum-norm when ``ridge_lambda`` is 0
  and the design is rank deficient).
* ``knn``: brute-force Euclidean neighbours, uniform or inverse-distance
  weights, ties broken by lowest training index.
* ``forest``: bagged CART regression trees with per-node feature
  subsampling.
* ``baseline``: the training-target mean.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError

KINDS = ("linear", "knn", "forest", "baseline")

DEFAULT_PARAMS = {
    "linear": {"ridge_lambda": 0.0},
    "knn": {"k": 5, "weighting": "uniform"},
    "forest": {
        "n_trees": 100,
        "max_depth": None,
        "min_samples_leaf": 1,
        "max_features": "sqrt",
        "bootstrap": True,
        "seed": 0,
    },
    "baseline": {},
}

# Hyperparameter grids searched when a config does not override them.
DEFAULT_GRIDS = {
    "linear": {"ridge_lambda": [0.0, 1e-4, 1e-2, 1.0]},
    "knn": {"k": [1, 2, 5, 10, 20, 50], "weighting": ["uniform", "inverse_distance"]},
    "forest": {
        "n_trees": [100, 300],
        "max_depth": [None, 10, 20],
        "min_samples_leaf": [1, 5, 20],
        "max_features": ["all", "third", "sqrt"],
    },
    "baseline": {},
}

KNN_EPS = 1e-12
MODEL_FORMAT = "terravario-model"
MODEL_VERSION = 1


def resolve_max_features(value, d: int) -> int:
    """Map ``"all"``, ``"third"``, ``"sqrt"`` or an integer onto a count in ``[1, d]``."""
    if value in ("all", None):
        m = d
    elif value == "third":
        m = math.ceil(d / 3)
    elif value == "sqrt":
        m = math.ceil(math.sqrt(d))
    elif isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        m = int(value)
    else:
        raise ConfigError(f"invalid max_features {value!r}")
    if not 1 <= m <= d:
        raise ConfigError(f"max_features={m} outside [1, {d}]")
    return m


@dataclass(frozen=True)
class ModelSpec:
    """Model kind plus hyperparameters; missing keys take the kind's defaults."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        defaults = DEFAULT_PARAMS[self.kind]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown {self.kind} hyperparameter(s): {sorted(unknown)}")
        merged = {**defaults, **self.params}
        object.__setattr__(self, "params", merged)
        self._validate()

    def _validate(self):
        p = self.params
        if self.kind == "linear":
            if not p["ridge_lambda"] >= 0:
                raise ConfigError("ridge_lambda must be non-negative")
        elif self.kind == "knn":
            if not isinstance(p["k"], (int, np.integer)) or p["k"] < 1:
                raise ConfigError("k must be a positive integer")
            if p["weighting"] not in ("uniform", "inverse_distance"):
                raise ConfigError(f"unknown knn weighting {p['weighting']!r}")
        elif self.kind == "forest":
            if p["n_trees"] < 1:
                raise ConfigError("n_trees must be >= 1")
            if p["max_depth"] is not None and p["max_depth"] < 0:
                raise ConfigError("max_depth must be None or >= 0")
            if p["min_samples_leaf"] < 1:
                raise ConfigError("min_samples_leaf must be >= 1")
            if isinstance(p["max_features"], str) and p["max_features"] not in ("all", "third", "sqrt"):
                raise ConfigError(f"invalid max_features {p['max_features']!r}")

    def __hash__(self):
        return hash((self.kind, json.dumps(self.params, sort_keys=True)))

    @property
    def label(self) -> str:
        if not self.params:
            return self.kind
        inner = ",".join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.kind}({inner})"

    def with_params(self, **params) -> "ModelSpec":
        return ModelSpec(self.kind, {**self.params, **params})

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["kind"], dict(d.get("params", {})))


def expand_grid(kind: str, grid: dict | None = None, **fixed) -> list[ModelSpec]:
    """Cartesian product of a hyperparameter grid, in key order then value order."""
    grid = DEFAULT_GRIDS[kind] if grid is None else grid
    keys = list(grid)
    specs = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        specs.append(ModelSpec(kind, {**fixed, **dict(zip(keys, combo))}))
    return specs or [ModelSpec(kind, dict(fixed))]


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2:
        raise DimensionError(f"X must be 2-D, got shape {X.shape}")
    if X.shape[0] != y.size:
        raise DimensionError(f"X has {X.shape[0]} rows but y has {y.size} values")
    if y.size < 1:
        raise ConfigError("cannot fit on an empty training set")
    return X, y


class FittedModel:
    """Common base: spec, feature dimension and prediction checks."""

    spec: ModelSpec
    n_features: int

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionError(f"model expects {self.n_features} features, got shape {X.shape}")
        return X

    def predict(self, X) -> np.ndarray:
        raise NotImplementedError

    def state_dict(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "spec": self.spec.to_dict(),
            "n_features": self.n_features,
            "state": self.state_dict(),
        }


class BaselineModel(FittedModel):
    def __init__(self, spec, n_features, constant):
        self.spec, self.n_features, self.constant = spec, n_features, float(constant)

    def predict(self, X):
        X = self._check(X)
        return np.full(X.shape[0], self.constant)

    def state_dict(self):
        return {"constant": self.constant}

    @classmethod
    def from_state(cls, spec, n_features, state):
        return cls(spec, n_features, state["constant"])


class LinearModel(FittedModel):
    def __init__(self, spec, n_features, coef, intercept, diagnostics=None):
        self.spec, self.n_features = spec, n_features
        self.coef = np.asarray(coef, dtype=np.float64)
        self.intercept = float(intercept)
        self.diagnostics = dict(diagnostics or {})

    def predict(self, X):
        X = self._check(X)
        return X @ self.coef + self.intercept

    def state_dict(self):
        return {"coef": [float(v) for v in self.coef], "intercept": self.intercept,
                "diagnostics": self.diagnostics}

    @classmethod
    def from_state(cls, spec, n_features, state):
        return cls(spec, n_features, state["coef"], state["intercept"], state.get("diagnostics"))


def _fit_linear(spec, X, y) -> LinearModel:
    lam = float(spec.params["ridge_lambda"])
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    cutoff = (s[0] if s.size else 0.0) * max(X.shape) * np.finfo(float).eps
    rank = int(np.count_nonzero(s > cutoff))
    uty = U.T @ yc
    if lam > 0:
        factor = s / (s * s + lam)
    else:
        factor = np.zeros_like(s)
        keep = s > cutoff
        factor[keep] = 1.0 / s[keep]
    coef = Vt.T @ (factor * uty)
    intercept = y_mean - x_mean @ coef
    # centering removes one degree of freedom from the design
    full_rank = min(X.shape[0] - 1, X.shape[1])
    diagnostics = {
        "rank": rank,
        "rank_deficient": bool(rank < full_rank or X.shape[0] - 1 < X.shape[1]),
        "min_norm_solution": bool(lam == 0 and rank < X.shape[1]),
        "singular_value_max": float(s[0]) if s.size else 0.0,
        "singular_value_min": float(s[-1]) if s.size else 0.0,
    }
    return LinearModel(spec, X.shape[1], coef, intercept, diagnostics)


class KNNModel(FittedModel):
    def __init__(self, spec, X_train, y_train):
        self.spec = spec
        self.X_train = np.asarray(X_train, dtype=np.float64)
        self.y_train = np.asarray(y_train, dtype=np.float64)
        self.n_features = self.X_train.shape[1]
        self._sq_norms = np.einsum("ij,ij->i", self.X_train, self.X_train)

    def neighbors(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Indices and exact Euclidean distances of the k nearest training rows.

        Candidates come from the Gram-matrix expansion; their distances are
        then recomputed directly so that exact ties (duplicates, the query
        itself) resolve to the lowest training index.
        """
        X = self._check(X)
        k = int(self.spec.params["k"])
        n = self.X_train.shape[0]
        m = min(n, k + 8)
        q_norms = np.einsum("ij,ij->i", X, X)
        out_idx = np.empty((X.shape[0], k), dtype=np.int64)
        out_dist = np.empty((X.shape[0], k))
        for start in range(0, X.shape[0], 512):
            Q = X[start:start + 512]
            approx = q_norms[start:start + 512, None] + self._sq_norms[None, :] - 2.0 * (Q @ self.X_train.T)
            np.maximum(approx, 0.0, out=approx)
            cand = np.argpartition(approx, m - 1, axis=1)[:, :m] if m < n else np.tile(np.arange(n), (Q.shape[0], 1))
            for r in range(Q.shape[0]):
                row_cand = cand[r]
                exact = np.sqrt(((self.X_train[row_cand] - Q[r]) ** 2).sum(axis=1))
                if m < n:
                    # widen to every training row that could tie or beat the k-th candidate
                    kth = np.sort(exact)[k - 1]
                    scale = q_norms[start + r] + self._sq_norms.max() + 1.0
                    bound = kth * kth + 1e-9 * scale
                    wide = np.flatnonzero(approx[r] <= bound)
                    if wide.size > m:
                        row_cand = wide
                        exact = np.sqrt(((self.X_train[row_cand] - Q[r]) ** 2).sum(axis=1))
                order = np.lexsort((row_cand, exact))[:k]
                out_idx[start + r] = row_cand[order]
                out_dist[start + r] = exact[order]
        return out_idx, out_dist

    def predict(self, X):
        idx, dist = self.neighbors(X)
        targets = self.y_train[idx]
        if self.spec.params["weighting"] == "uniform":
            return targets.mean(axis=1)
        w = 1.0 / (KNN_EPS + dist)
        return (w * targets).sum(axis=1) / w.sum(axis=1)

    def state_dict(self):
        return {"X_train": self.X_train.tolist(), "y_train": self.y_train.tolist()}

    @classmethod
    def from_state(cls, spec, n_features, state):
        X = np.asarray(state["X_train"], dtype=np.float64).reshape(-1, n_features)
        return cls(spec, X, state["y_train"])


@dataclass
class Tree:
    """Array-encoded binary regression tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def apply(self, X) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(v) for v in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": [float(v) for v in self.value],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
        )


def _best_split(X, y, idx, feats, min_leaf):
    """Best variance-reduction split of rows ``idx`` over candidate ``feats``.

    Returns ``(feature, threshold)`` or ``None`` when no split leaves at
    least ``min_leaf`` rows on each side.
    """
    m = idx.size
    Xs = X[idx[:, None], feats[None, :]]
    order = np.argsort(Xs, axis=0, kind="stable")
    xs = np.take_along_axis(Xs, order, axis=0)
    ys = y[idx][order]
    csum = np.cumsum(ys, axis=0)[:-1]
    total = csum[-1] + ys[-1] if m > 1 else ys[-1]
    n_left = np.arange(1, m, dtype=np.float64)[:, None]
    n_right = m - n_left
    # maximizing this is equivalent to minimizing the children's summed squared error
    score = csum * csum / n_left + (total - csum) ** 2 / n_right
    valid = xs[1:] > xs[:-1]
    if min_leaf > 1:
        valid[: min_leaf - 1] = False
        valid[m - min_leaf:] = False
    if not valid.any():
        return None
    score = np.where(valid, score, -np.inf)
    flat = int(np.argmax(score))
    row, col = divmod(flat, feats.size)
    lo, hi = xs[row, col], xs[row + 1, col]
    thr = lo + (hi - lo) / 2.0
    if not thr < hi:
        thr = lo
    return int(feats[col]), float(thr)


def build_tree(X, y, rng, max_depth=None, min_samples_leaf=1, max_features=None) -> Tree:
    """Grow one CART regression tree on all rows of ``(X, y)``."""
    n, d = X.shape
    mf = d if max_features is None else max_features
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if (max_depth is not None and depth >= max_depth) or idx.size < 2 * min_samples_leaf:
            continue
        yi = y[idx]
        if yi.max() == yi.min():
            continue
        split = None
        if mf >= d:
            split = _best_split(X, y, idx, np.arange(d), min_samples_leaf)
        else:
            perm = rng.permutation(d)
            for start in range(0, d, mf):
                split = _best_split(X, y, idx, perm[start:start + mf], min_samples_leaf)
                if split is not None:
                    break
        if split is None:
            continue
        f, thr = split
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
    )


def n_threads() -> int:
    """Worker count from ``TERRAVARIO_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("TERRAVARIO_THREADS", "1")))
    except ValueError:
        return 1


class ForestModel(FittedModel):
    def __init__(self, spec, n_features, trees):
        self.spec, self.n_features, self.trees = spec, n_features, list(trees)

    def predict(self, X):
        X = self._check(X)
        out = np.zeros(X.shape[0])
        for tree in self.trees:
            out += tree.predict(X)
        return out / len(self.trees)

    def state_dict(self):
        return {"trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_state(cls, spec, n_features, state):
        return cls(spec, n_features, [Tree.from_dict(t) for t in state["trees"]])


def _fit_forest(spec, X, y) -> ForestModel:
    p = spec.params
    n, d = X.shape
    mf = resolve_max_features(p["max_features"], d)
    # one independent substream per tree keeps results schedule-independent
    children = np.random.SeedSequence(int(p["seed"])).spawn(int(p["n_trees"]))

    def grow(child):
        rng = np.random.default_rng(child)
        if p["bootstrap"]:
            rows = rng.integers(0, n, size=n)
            Xb, yb = X[rows], y[rows]
        else:
            Xb, yb = X, y
        return build_tree(Xb, yb, rng, p["max_depth"], int(p["min_samples_leaf"]), mf)

    workers = min(n_threads(), len(children))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trees = list(pool.map(grow, children))
    else:
        trees = [grow(c) for c in children]
    return ForestModel(spec, d, trees)


def fit(spec: ModelSpec, X, y) -> FittedModel:
    """Train the model described by ``spec`` on features ``X`` (n, d) and targets ``y``."""
    X, y = _check_xy(X, y)
    if spec.kind == "baseline":
        return BaselineModel(spec, X.shape[1], y.mean())
    if spec.kind == "linear":
        return _fit_linear(spec, X, y)
    if spec.kind == "knn":
        if spec.params["k"] > y.size:
            raise ConfigError(f"knn k={spec.params['k']} exceeds the {y.size} training samples")
        return KNNModel(spec, X, y)
    return _fit_forest(spec, X, y)


def predict(model: FittedModel, X) -> np.ndarray:
    return model.predict(X)


_MODEL_CLASSES = {"baseline": BaselineModel, "linear": LinearModel, "knn": KNNModel, "forest": ForestModel}


def model_from_dict(d: dict) -> FittedModel:
    if d.get("format") != MODEL_FORMAT:
        raise ConfigError("not a terravario model file")
    if d.get("version") != MODEL_VERSION:
        raise ConfigError(f"unsupported model file version {d.get('version')!r}")
    spec = ModelSpec.from_dict(d["spec"])
    return _MODEL_CLASSES[spec.kind].from_state(spec, int(d["n_features"]), d["state"])


def save_model(model: FittedModel, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(model.to_dict()), encoding="utf-8")
    tmp.replace(path)
    return path


def load_model(path) -> FittedModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
