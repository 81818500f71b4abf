"""Pipeline configuration read from JSON.

Relative input paths are resolved against the directory holding the
config file; ``{output_dir}`` in a path expands to the run's output
directory, which lets a config point at data written by ``synth``. The schema is documented in ``docs/config.md``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .evaluate import NORMALIZE_SCOPES
from .preprocess import FilterConfig
from .regress import DEFAULT_GRIDS, KINDS, ModelSpec, expand_grid
from .survey_data import N_STEPS
from .variogram import VariogramConfig

TOP_LEVEL_KEYS = {"inputs", "train_fairway", "test_fairway", "n_steps", "origin", "filters", "normalize_scope",
                  "models", "cv", "variogram", "synth", "output_dir"}
CV_KEYS = {"repeats", "k", "seed", "outer_k", "inner_k", "inner_repeats"}
CV_DEFAULTS = {"repeats": 10, "k": 5, "outer_k": 5, "inner_k": 5, "inner_repeats": 1}


def canonical_json(obj) -> str:
    """Sorted-key, fixed-separator JSON with a trailing newline; NaN is rejected."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _parse_input(fairway: str, value):
    if isinstance(value, str):
        return value
    if isinstance(value, dict) and set(value) == {"gps", "emi", "radar"} and all(isinstance(v, str) for v in value.values()):
        return dict(value)
    raise ConfigError(f"input {fairway!r} must be a CSV path or an object with gps, emi and radar paths")


def _parse_models(d) -> dict:
    if not isinstance(d, dict) or not d:
        raise ConfigError("'models' must be a non-empty object")
    out = {}
    for name, entry in d.items():
        entry = dict(entry or {})
        unknown = set(entry) - {"kind", "grid", "params"}
        if unknown:
            raise ConfigError(f"model {name!r}: unknown key(s) {sorted(unknown)}")
        kind = entry.get("kind", name)
        if kind not in KINDS:
            raise ConfigError(f"model {name!r}: unknown kind {kind!r}")
        params = dict(entry.get("params", {}))
        grid = entry.get("grid")
        if grid == "default":
            grid = DEFAULT_GRIDS[kind]
        if grid is None:
            out[name] = [ModelSpec(kind, params)]
        elif isinstance(grid, dict) and all(isinstance(v, list) and v for v in grid.values()):
            out[name] = expand_grid(kind, grid, **params)
        else:
            raise ConfigError(f"model {name!r}: grid must map parameter names to non-empty lists")
    return out


@dataclass(frozen=True, eq=False)
class PipelineConfig:
    inputs: dict
    models: dict
    cv: dict
    train_fairway: str = "fwy14"
    test_fairway: str = "fwy16"
    n_steps: int = N_STEPS
    origin: tuple | None = None
    filters: FilterConfig = field(default_factory=FilterConfig)
    normalize_scope: str = "train"
    variogram: VariogramConfig = field(default_factory=VariogramConfig)
    synth: dict | None = None
    output_dir: Path = Path(".")
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.cv["seed"]

    @property
    def sha256(self) -> str:
        return hashlib.sha256(canonical_json(self.raw).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - TOP_LEVEL_KEYS
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        for key in ("inputs", "models", "cv"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        if not isinstance(d["inputs"], dict) or not d["inputs"]:
            raise ConfigError("'inputs' must map fairway ids to files")
        inputs = {str(k): _parse_input(k, v) for k, v in d["inputs"].items()}

        cv = dict(d["cv"])
        if set(cv) - CV_KEYS:
            raise ConfigError(f"unknown cv key(s): {sorted(set(cv) - CV_KEYS)}")
        # seeds must be written down; a missing seed is an error, never a clock read
        if not isinstance(cv.get("seed"), int) or isinstance(cv.get("seed"), bool):
            raise ConfigError("cv.seed must be an explicit integer")
        cv = {**CV_DEFAULTS, **cv}
        for key in CV_KEYS - {"seed"}:
            if not isinstance(cv[key], int) or cv[key] < 1:
                raise ConfigError(f"cv.{key} must be a positive integer")

        scope = d.get("normalize_scope", "train")
        if scope not in NORMALIZE_SCOPES:
            raise ConfigError(f"normalize_scope must be one of {NORMALIZE_SCOPES}")
        origin = d.get("origin")
        if origin is not None:
            if not (isinstance(origin, list) and len(origin) == 2):
                raise ConfigError("origin must be [lat_deg, lon_deg] or null")
            origin = (float(origin[0]), float(origin[1]))
        synth = d.get("synth")
        if synth is not None and not isinstance(synth.get("seed"), int):
            raise ConfigError("synth.seed must be an explicit integer")
        n_steps = d.get("n_steps", N_STEPS)
        if not isinstance(n_steps, int) or n_steps < 1:
            raise ConfigError("n_steps must be a positive integer")
        cfg = cls(
            inputs=inputs,
            models=_parse_models(d["models"]),
            cv=cv,
            train_fairway=d.get("train_fairway", "fwy14"),
            test_fairway=d.get("test_fairway", "fwy16"),
            n_steps=n_steps,
            origin=origin,
            filters=FilterConfig.from_dict(d.get("filters")),
            normalize_scope=scope,
            variogram=VariogramConfig.from_dict(d.get("variogram")),
            synth=synth,
            output_dir=base / d.get("output_dir", "."),
            base_dir=base,
            raw=d,
        )
        for fw in (cfg.train_fairway, cfg.test_fairway):
            if fw not in inputs:
                raise ConfigError(f"fairway {fw!r} has no entry in 'inputs'")
        return cfg

    def resolve(self, value: str, output_dir) -> Path:
        """Path of an input entry; ``{output_dir}`` expands to the run's output directory."""
        if "{output_dir}" in value:
            return Path(value.replace("{output_dir}", str(output_dir)))
        return self.base_dir / value

    def input_source(self, fairway: str, output_dir):
        """A merged-CSV :class:`Path`, or a dict of gps/emi/radar paths."""
        v = self.inputs[fairway]
        if isinstance(v, str):
            return self.resolve(v, output_dir)
        return {k: self.resolve(p, output_dir) for k, p in v.items()}

    def input_files(self, fairway: str, output_dir) -> list[Path]:
        v = self.input_source(fairway, output_dir)
        return [v] if isinstance(v, Path) else [v["gps"], v["emi"], v["radar"]]

    def check_inputs(self, output_dir) -> None:
        """Raise :class:`ConfigError` naming the first input file that does not exist."""
        for fw in sorted(self.inputs):
            for p in self.input_files(fw, output_dir):
                if not p.is_file():
                    raise ConfigError(f"input for {fw!r} not found: {p}")


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return PipelineConfig.from_dict(d, path.resolve().parent)
