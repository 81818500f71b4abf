"""Survey records, CSV ingestion, co-registration and local projection.

A survey is held column-wise in :class:`SurveyDataset`: one row per
co-registered radar sweep with its position, time, tractor speed, radar
feature vector and EMI target. Arrays are read-only so datasets can be
shared freely; every transform returns a new dataset and appends a
provenance record.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (
    CoverageError,
    DataError,
    GapError,
    OrderingError,
    ParseError,
    SchemaError,
)

N_STEPS = 400
METERS_PER_DEGREE = 111320.0
DEFAULT_EMI_WINDOW_S = 0.1


def feature_columns(n_steps: int = N_STEPS) -> list[str]:
    return [f"f{i:03d}" for i in range(n_steps)]


class GpsFix(NamedTuple):
    time_s: float
    lat_deg: float
    lon_deg: float


class EmiReading(NamedTuple):
    time_s: float
    ecar_raw: float


class RadarSweep(NamedTuple):
    time_s: float
    features: np.ndarray


@dataclass(frozen=True, eq=False)
class Sample:
    """One geo-located observation."""

    x_m: float
    y_m: float
    time_s: float
    speed_mps: float
    features: np.ndarray
    ecar: float
    lat_deg: float = math.nan
    lon_deg: float = math.nan
    id: int = 0


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def _check_increasing(t: np.ndarray, what: str) -> None:
    if t.size > 1:
        bad = np.flatnonzero(np.diff(t) <= 0)
        if bad.size:
            i = int(bad[0]) + 1
            raise OrderingError(
                f"{what}: timestamps not strictly increasing at index {i} "
                f"({t[i - 1]!r} -> {t[i]!r})"
            )


@dataclass(frozen=True, eq=False)
class SurveyDataset:
    """Immutable, ordered collection of samples from one fairway.

    Unset columns (local coordinates before projection, speed before
    estimation, lat/lon for purely synthetic data) hold NaN. ``ids`` are
    stable sample identifiers that survive filtering.
    """

    time_s: np.ndarray
    features: np.ndarray
    ecar: np.ndarray
    x_m: np.ndarray | None = None
    y_m: np.ndarray | None = None
    speed_mps: np.ndarray | None = None
    lat_deg: np.ndarray | None = None
    lon_deg: np.ndarray | None = None
    ids: np.ndarray | None = None
    fairway_id: str = ""
    provenance: tuple = field(default_factory=tuple)

    def __post_init__(self):
        t = np.asarray(self.time_s, dtype=np.float64).reshape(-1)
        n = t.size
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1 and feats.size == 0:
            feats = feats.reshape(0, 0)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise DataError(f"features must be an (n, d) array with n={n}, got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise DataError("features must be finite")
        _check_increasing(t, self.fairway_id or "dataset")
        object.__setattr__(self, "time_s", _frozen(t))
        object.__setattr__(self, "features", _frozen(feats))
        for name in ("ecar", "x_m", "y_m", "speed_mps", "lat_deg", "lon_deg"):
            value = getattr(self, name)
            arr = np.full(n, np.nan) if value is None else np.asarray(value, dtype=np.float64).reshape(-1)
            if arr.size != n:
                raise DataError(f"column {name} has length {arr.size}, expected {n}")
            object.__setattr__(self, name, _frozen(arr))
        ids = np.arange(n) if self.ids is None else np.asarray(self.ids).reshape(-1)
        if ids.size != n:
            raise DataError(f"ids has length {ids.size}, expected {n}")
        object.__setattr__(self, "ids", _frozen(ids, dtype=np.int64))
        object.__setattr__(self, "provenance", tuple(self.provenance))
        speeds = self.speed_mps[np.isfinite(self.speed_mps)]
        if np.any(speeds < 0):
            raise DataError("speeds must be non-negative")

    def __len__(self) -> int:
        return self.time_s.size

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def has_local_coords(self) -> bool:
        return len(self) > 0 and bool(np.all(np.isfinite(self.x_m)) and np.all(np.isfinite(self.y_m)))

    @property
    def has_geographic(self) -> bool:
        return len(self) > 0 and bool(np.all(np.isfinite(self.lat_deg)) and np.all(np.isfinite(self.lon_deg)))

    @property
    def coords(self) -> np.ndarray:
        """(n, 2) array of local planar coordinates in meters."""
        return np.column_stack([self.x_m, self.y_m])

    def sample(self, i: int) -> Sample:
        return Sample(
            x_m=float(self.x_m[i]),
            y_m=float(self.y_m[i]),
            time_s=float(self.time_s[i]),
            speed_mps=float(self.speed_mps[i]),
            features=self.features[i],
            ecar=float(self.ecar[i]),
            lat_deg=float(self.lat_deg[i]),
            lon_deg=float(self.lon_deg[i]),
            id=int(self.ids[i]),
        )

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]

    def __iter__(self):
        return iter(self.samples)

    @classmethod
    def from_samples(cls, samples: Iterable[Sample], fairway_id: str = "", n_steps: int = N_STEPS,
                     provenance: Sequence[dict] = ()) -> "SurveyDataset":
        samples = list(samples)
        if samples:
            feats = np.vstack([np.asarray(s.features, dtype=np.float64) for s in samples])
        else:
            feats = np.empty((0, n_steps))
        col = lambda name: [getattr(s, name) for s in samples]  # noqa: E731
        return cls(
            time_s=col("time_s"),
            features=feats,
            ecar=col("ecar"),
            x_m=col("x_m"),
            y_m=col("y_m"),
            speed_mps=col("speed_mps"),
            lat_deg=col("lat_deg"),
            lon_deg=col("lon_deg"),
            ids=np.array(col("id"), dtype=np.int64),
            fairway_id=fairway_id,
            provenance=tuple(provenance),
        )

    def equals(self, other: "SurveyDataset") -> bool:
        """Exact equality of all columns, ids, fairway label and provenance (NaN == NaN)."""
        if not isinstance(other, SurveyDataset) or len(self) != len(other):
            return False
        cols = ("time_s", "features", "ecar", "x_m", "y_m", "speed_mps", "lat_deg", "lon_deg", "ids")
        return (
            all(np.array_equal(getattr(self, c), getattr(other, c), equal_nan=c != "ids") for c in cols)
            and self.fairway_id == other.fairway_id
            and self.provenance == other.provenance
        )

    def with_record(self, record: dict) -> "SurveyDataset":
        return replace(self, provenance=self.provenance + (dict(record),))

    def with_columns(self, record: dict | None = None, **columns) -> "SurveyDataset":
        """Return a copy with some columns replaced (and optionally a provenance record)."""
        out = replace(self, **columns)
        return out.with_record(record) if record is not None else out

    def subset(self, index, record: dict | None = None) -> "SurveyDataset":
        """Select rows by boolean mask or integer index (order is kept)."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        index = np.sort(index.astype(np.int64, copy=False))
        out = SurveyDataset(
            time_s=self.time_s[index],
            features=self.features[index],
            ecar=self.ecar[index],
            x_m=self.x_m[index],
            y_m=self.y_m[index],
            speed_mps=self.speed_mps[index],
            lat_deg=self.lat_deg[index],
            lon_deg=self.lon_deg[index],
            ids=self.ids[index],
            fairway_id=self.fairway_id,
            provenance=self.provenance,
        )
        return out.with_record(record) if record is not None else out

    def find_records(self, key: str, name: str) -> list[dict]:
        return [r for r in self.provenance if r.get(key) == name]

    def metadata(self) -> dict:
        """JSON-serializable description of the dataset (no sample data)."""
        return {
            "fairway_id": self.fairway_id,
            "n_samples": len(self),
            "n_features": self.n_features,
            "provenance": [dict(r) for r in self.provenance],
        }


# --------------------------------------------------------------------------
# CSV input/output


def _parse_float(cell: str, row: int, column: str, path) -> float:
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"{path}: non-numeric value {cell!r} in column {column!r} at row {row}") from None


def _check_feature_header(header: list[str], start: int, n_steps: int, path) -> None:
    feats = header[start:]
    expected = feature_columns(n_steps)
    for i, name in enumerate(expected):
        if i >= len(feats):
            raise SchemaError(f"{path}: expected {n_steps} features, missing column {name!r}")
        if feats[i] != name:
            raise SchemaError(f"{path}: expected {n_steps} features, unexpected column {feats[i]!r} "
                              f"where {name!r} belongs")
    if len(feats) > n_steps:
        raise SchemaError(f"{path}: expected {n_steps} features, extra column {feats[n_steps]!r}")


def _read_rows(path):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        rows = []
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {rownum} has {len(row)} cells, header has {len(header)}")
            rows.append(row)
    return header, rows


def _rows_to_array(rows, header, path) -> np.ndarray:
    out = np.empty((len(rows), len(header)))
    for r, row in enumerate(rows):
        try:
            out[r] = [float(c) for c in row]
        except ValueError:
            for c, cell in enumerate(row):
                _parse_float(cell, r + 1, header[c], path)
    return out


def parse_merged_csv(path, n_steps: int = N_STEPS, fairway_id: str | None = None) -> SurveyDataset:
    """Read a merged survey CSV.

    The header is ``time_s,lat_deg,lon_deg[,speed_mps],ecar,f000..f399``.
    Local coordinates are left unset until :func:`project_to_local`.
    """
    path = Path(path)
    header, rows = _read_rows(path)
    base = ["time_s", "lat_deg", "lon_deg"]
    if header[:3] != base:
        raise SchemaError(f"{path}: header must start with {','.join(base)}, got {','.join(header[:3])}")
    has_speed = len(header) > 3 and header[3] == "speed_mps"
    ecar_col = 4 if has_speed else 3
    if len(header) <= ecar_col or header[ecar_col] != "ecar":
        raise SchemaError(f"{path}: expected column 'ecar' at position {ecar_col}")
    _check_feature_header(header, ecar_col + 1, n_steps, path)
    data = _rows_to_array(rows, header, path)
    return SurveyDataset(
        time_s=data[:, 0],
        lat_deg=data[:, 1],
        lon_deg=data[:, 2],
        speed_mps=data[:, 3] if has_speed else None,
        ecar=data[:, ecar_col],
        features=data[:, ecar_col + 1:].reshape(len(rows), n_steps),
        fairway_id=path.stem if fairway_id is None else fairway_id,
        provenance=({"transform": "parse_merged_csv", "path": path.name, "n_rows": len(rows)},),
    )


def _fmt(v) -> str:
    return repr(float(v))


def write_merged_csv(dataset: SurveyDataset, path) -> Path:
    """Write ``dataset`` in the merged CSV layout; floats round-trip exactly."""
    path = Path(path)
    has_speed = bool(np.any(np.isfinite(dataset.speed_mps)))
    header = ["time_s", "lat_deg", "lon_deg"] + (["speed_mps"] if has_speed else []) + ["ecar"]
    header += feature_columns(dataset.n_features)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            lead = [dataset.time_s[i], dataset.lat_deg[i], dataset.lon_deg[i]]
            if has_speed:
                lead.append(dataset.speed_mps[i])
            lead.append(dataset.ecar[i])
            w.writerow([_fmt(v) for v in lead] + [_fmt(v) for v in dataset.features[i]])
    tmp.replace(path)
    return path


class GpsStream(NamedTuple):
    time_s: np.ndarray
    lat_deg: np.ndarray
    lon_deg: np.ndarray

    def __len__(self):
        return self.time_s.size

    def fixes(self) -> list[GpsFix]:
        return [GpsFix(*map(float, r)) for r in zip(self.time_s, self.lat_deg, self.lon_deg)]


class EmiStream(NamedTuple):
    time_s: np.ndarray
    ecar_raw: np.ndarray

    def __len__(self):
        return self.time_s.size

    def readings(self) -> list[EmiReading]:
        return [EmiReading(float(t), float(v)) for t, v in zip(self.time_s, self.ecar_raw)]


class RadarStream(NamedTuple):
    time_s: np.ndarray
    features: np.ndarray

    def __len__(self):
        return self.time_s.size

    def sweeps(self) -> list[RadarSweep]:
        return [RadarSweep(float(t), f) for t, f in zip(self.time_s, self.features)]


def _read_stream(path, columns: list[str], what: str) -> np.ndarray:
    header, rows = _read_rows(path)
    if what == "radar" and header[:1] == ["time_s"]:
        _check_feature_header(header, 1, len(columns) - 1, path)
    elif header != columns:
        missing = [c for c in columns if c not in header]
        extra = [c for c in header if c not in columns]
        detail = f"missing {missing[0]!r}" if missing else f"unexpected {extra[0]!r}" if extra else "wrong order"
        raise SchemaError(f"{path}: {what} header must be {','.join(columns)}; {detail}")
    data = _rows_to_array(rows, header, path)
    if not np.all(np.isfinite(data)):
        r = int(np.flatnonzero(~np.all(np.isfinite(data), axis=1))[0]) + 1
        raise ParseError(f"{path}: non-finite value at row {r}")
    _check_increasing(data[:, 0], f"{path} ({what})")
    return data


def parse_raw_streams(gps_path, emi_path, radar_path, n_steps: int = N_STEPS):
    """Read the three raw sensor logs.

    Returns ``(gps, emi, radar)`` stream containers; each has strictly
    increasing timestamps or an :class:`OrderingError` is raised.
    """
    g = _read_stream(gps_path, ["time_s", "lat_deg", "lon_deg"], "gps")
    e = _read_stream(emi_path, ["time_s", "ecar"], "emi")
    r = _read_stream(radar_path, ["time_s"] + feature_columns(n_steps), "radar")
    gps = GpsStream(g[:, 0].copy(), g[:, 1].copy(), g[:, 2].copy())
    if np.any(np.abs(gps.lat_deg) > 90) or np.any(np.abs(gps.lon_deg) > 180):
        raise DataError(f"{gps_path}: latitude/longitude out of range")
    emi = EmiStream(e[:, 0].copy(), e[:, 1].copy())
    radar = RadarStream(r[:, 0].copy(), r[:, 1:].reshape(len(r), n_steps).copy())
    return gps, emi, radar


def _as_gps(gps) -> GpsStream:
    if isinstance(gps, GpsStream):
        return gps
    fixes = list(gps)
    return GpsStream(*(np.array([getattr(f, k) for f in fixes], dtype=float) for k in GpsFix._fields))


def _as_emi(emi) -> EmiStream:
    if isinstance(emi, EmiStream):
        return emi
    rs = list(emi)
    return EmiStream(np.array([r.time_s for r in rs], dtype=float), np.array([r.ecar_raw for r in rs], dtype=float))


def _as_radar(radar) -> RadarStream:
    if isinstance(radar, RadarStream):
        return radar
    sw = list(radar)
    feats = np.vstack([np.asarray(s.features, dtype=float) for s in sw]) if sw else np.empty((0, N_STEPS))
    return RadarStream(np.array([s.time_s for s in sw], dtype=float), feats)


def coregister(gps, emi, radar, emi_window_s: float = DEFAULT_EMI_WINDOW_S,
               fairway_id: str = "", origin: tuple[float, float] | None = None) -> SurveyDataset:
    """Resample GPS and EMI onto the radar timeline.

    Positions are linearly interpolated between GPS fixes; sweeps up to one
    GPS interval beyond either end are linearly extrapolated, anything
    further raises :class:`CoverageError`. The target is the mean of EMI
    readings within ``[t - w/2, t + w/2]``. The result is projected to the
    local frame and speeds are estimated from the track.
    """
    gps, emi, radar = _as_gps(gps), _as_emi(emi), _as_radar(radar)
    if len(radar) == 0:
        raise DataError("radar stream is empty")
    if len(gps) == 0:
        raise CoverageError("GPS stream is empty")
    for name, t in (("gps", gps.time_s), ("emi", emi.time_s), ("radar", radar.time_s)):
        _check_increasing(np.asarray(t), name)

    tg, t = gps.time_s, radar.time_s
    if len(gps) == 1:
        lo_lim = hi_lim = tg[0]
    else:
        lo_lim = tg[0] - (tg[1] - tg[0])
        hi_lim = tg[-1] + (tg[-1] - tg[-2])
    outside = (t < lo_lim) | (t > hi_lim)
    if np.any(outside):
        bad = t[outside]
        raise CoverageError(f"{bad.size} radar sweep(s) outside GPS span [{tg[0]}, {tg[-1]}], first at t={bad[0]!r}")
    if len(gps) == 1:
        lat = np.full(t.size, gps.lat_deg[0])
        lon = np.full(t.size, gps.lon_deg[0])
    else:
        seg = np.clip(np.searchsorted(tg, t, side="right") - 1, 0, len(gps) - 2)
        frac = (t - tg[seg]) / (tg[seg + 1] - tg[seg])
        lat = gps.lat_deg[seg] + frac * (gps.lat_deg[seg + 1] - gps.lat_deg[seg])
        lon = gps.lon_deg[seg] + frac * (gps.lon_deg[seg + 1] - gps.lon_deg[seg])

    half = emi_window_s / 2.0
    lo = np.searchsorted(emi.time_s, t - half, side="left")
    hi = np.searchsorted(emi.time_s, t + half, side="right")
    empty = hi <= lo
    if np.any(empty):
        times = ", ".join(repr(float(v)) for v in t[empty][:10])
        more = "" if empty.sum() <= 10 else f" (+{int(empty.sum()) - 10} more)"
        raise GapError(f"no EMI readings within ±{half} s of sweep time(s) {times}{more}")
    ecar = np.array([emi.ecar_raw[a:b].mean() for a, b in zip(lo, hi)])

    ds = SurveyDataset(
        time_s=t,
        features=radar.features,
        ecar=ecar,
        lat_deg=lat,
        lon_deg=lon,
        fairway_id=fairway_id,
        provenance=({"transform": "coregister", "emi_window_s": emi_window_s,
                     "n_gps": len(gps), "n_emi": len(emi), "n_radar": len(radar)},),
    )
    return estimate_velocity(project_to_local(ds, origin))


def project_to_local(dataset: SurveyDataset, origin: tuple[float, float] | None = None) -> SurveyDataset:
    """Equirectangular tangent-plane projection around ``origin`` (lat, lon).

    The origin defaults to the first sample.
    """
    if len(dataset) == 0:
        return dataset.with_record({"transform": "project_to_local", "origin": None})
    if not dataset.has_geographic:
        raise DataError("project_to_local requires latitude/longitude for every sample")
    if origin is None:
        origin = (float(dataset.lat_deg[0]), float(dataset.lon_deg[0]))
    x, y = geographic_to_local(dataset.lat_deg, dataset.lon_deg, origin)
    return dataset.with_columns(
        {"transform": "project_to_local", "origin": [float(origin[0]), float(origin[1])]}, x_m=x, y_m=y
    )


def geographic_to_local(lat, lon, origin):
    lat0, lon0 = origin
    x = (np.asarray(lon, dtype=float) - lon0) * math.cos(lat0 * math.pi / 180.0) * METERS_PER_DEGREE
    y = (np.asarray(lat, dtype=float) - lat0) * METERS_PER_DEGREE
    return x, y


def local_to_geographic(x, y, origin):
    """Inverse of :func:`geographic_to_local`."""
    lat0, lon0 = origin
    lat = lat0 + np.asarray(y, dtype=float) / METERS_PER_DEGREE
    lon = lon0 + np.asarray(x, dtype=float) / (math.cos(lat0 * math.pi / 180.0) * METERS_PER_DEGREE)
    return lat, lon


def _central_difference(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    d = np.empty_like(v)
    d[1:-1] = (v[2:] - v[:-2]) / (t[2:] - t[:-2])
    d[0] = (v[1] - v[0]) / (t[1] - t[0])
    d[-1] = (v[-1] - v[-2]) / (t[-1] - t[-2])
    return d


def estimate_velocity(dataset: SurveyDataset) -> SurveyDataset:
    """Overwrite speeds with finite-difference estimates from the track.

    Central differences in the interior, one-sided at the ends.
    """
    n = len(dataset)
    if n == 0:
        return dataset.with_record({"transform": "estimate_velocity", "n": 0})
    if not dataset.has_local_coords:
        raise DataError("estimate_velocity requires local coordinates, call project_to_local first")
    if n == 1:
        return dataset.with_columns(
            {"transform": "estimate_velocity", "warning": "single sample, speed set to 0"},
            speed_mps=np.zeros(1),
        )
    t = dataset.time_s
    vx = _central_difference(dataset.x_m, t)
    vy = _central_difference(dataset.y_m, t)
    return dataset.with_columns({"transform": "estimate_velocity"}, speed_mps=np.hypot(vx, vy))


def load_survey(path, origin=None, n_steps: int = N_STEPS) -> SurveyDataset:
    """Parse a merged CSV, project it and estimate speeds when the file has none."""
    ds = project_to_local(parse_merged_csv(path, n_steps=n_steps), origin)
    if len(ds) and not np.all(np.isfinite(ds.speed_mps)):
        ds = estimate_velocity(ds)
    return ds
