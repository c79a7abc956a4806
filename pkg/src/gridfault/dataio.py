"""Fault dataset: schema, CSV ingestion, stream alignment, normalization,
stratified folds and minority rebalancing."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from ._util import DataError, content_id

logger = logging.getLogger(__name__)

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[str, ...]
    units: tuple[str, ...]

    def __post_init__(self):
        if len(self.features) != 12:
            raise ValueError(f"schema needs exactly 12 features, got {len(self.features)}")
        if len(set(self.features)) != len(self.features):
            raise ValueError("feature identifiers must be unique")
        if len(self.units) != len(self.features):
            raise ValueError("one unit per feature")

    def __len__(self):
        return len(self.features)

    def index(self, name: str) -> int:
        return self.features.index(name)

    @property
    def csv_header(self) -> tuple[str, ...]:
        return self.features + ("label", "timestamp")


SCHEMA = FeatureSchema(
    features=(
        "wind_gust",
        "wind_dir",
        "temperature",
        "pressure",
        "humidity",
        "precipitation",
        "d_frequency",
        "d_voltage_imbalance",
        "d_active_power",
        "min_power_factor",
        "d_reactive_power",
        "flicker",
    ),
    units=("m/s", "deg", "degC", "hPa", "%", "mm", "Hz", "%", "kW", "1", "kVAr", "1"),
)

WEATHER_FEATURES = SCHEMA.features[:6]
POWER_FEATURES = SCHEMA.features[6:]


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable set of labelled 12-feature samples.

    ``ids`` are stable sample identifiers (the data-row index in the source
    file for CSV input). ``timestamps`` are ``datetime64[s]`` in UTC.
    """

    X: np.ndarray
    y: np.ndarray
    timestamps: np.ndarray | None = None
    ids: np.ndarray | None = None
    schema: FeatureSchema = SCHEMA
    dropped_count: int = 0
    warnings: tuple[str, ...] = ()
    class_counts: tuple[int, int] = field(init=False)

    def __post_init__(self):
        X = _frozen(self.X, float)
        if X.ndim != 2 or X.shape[1] != len(self.schema):
            raise DataError(f"X must have shape (n, {len(self.schema)}), got {X.shape}")
        y = _frozen(self.y, np.int64)
        if y.shape != (X.shape[0],):
            raise DataError("y must have one label per row")
        if not np.isin(y, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        if not np.isfinite(X).all():
            raise DataError("features contain NaN or Inf")
        ids = np.arange(len(y)) if self.ids is None else self.ids
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", _frozen(ids, np.int64))
        if self.timestamps is not None:
            object.__setattr__(self, "timestamps", _frozen(self.timestamps, "datetime64[s]"))
        n1 = int(y.sum())
        object.__setattr__(self, "class_counts", (len(y) - n1, n1))

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        idx = np.flatnonzero(idx) if idx.dtype == bool else idx.astype(np.int64)
        ts = None if self.timestamps is None else self.timestamps[idx]
        return Dataset(self.X[idx], self.y[idx], ts, self.ids[idx], self.schema, warnings=self.warnings)

    def with_features(self, X) -> "Dataset":
        return Dataset(X, self.y, self.timestamps, self.ids, self.schema, self.dropped_count, self.warnings)


def _require_both_classes(ds: Dataset, what: str):
    if min(ds.class_counts) == 0:
        raise DataError(f"{what} needs both classes present, got counts {ds.class_counts}")


# ---------------------------------------------------------------- CSV

def parse_timestamp(text: str) -> np.datetime64:
    dt = datetime.strptime(text, TIMESTAMP_FORMAT)
    return np.datetime64(dt.replace(tzinfo=None), "s")


def format_timestamp(ts) -> str:
    return pd.Timestamp(ts).strftime(TIMESTAMP_FORMAT)


def load_csv(path, schema: FeatureSchema = SCHEMA) -> Dataset:
    """Read a fault CSV. Rows with unparseable or non-finite values are
    dropped and counted in ``dropped_count``."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    expected = list(schema.csv_header)
    X, y, ts, ids = [], [], [], []
    dropped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header != expected:
            bad = [h for h, e in zip(header, expected) if h != e]
            if len(header) != len(expected):
                bad += [f"<{len(header)} columns, expected {len(expected)}>"]
            raise DataError(f"{path}: header mismatch at column(s) {bad}")
        for row_no, row in enumerate(reader):
            try:
                if len(row) != len(expected):
                    raise ValueError("wrong field count")
                feats = [float(v) for v in row[:12]]
                if not all(math.isfinite(v) for v in feats):
                    raise ValueError("non-finite")
                label = int(row[12])
                if label not in (0, 1):
                    raise ValueError("bad label")
                stamp = parse_timestamp(row[13].strip())
            except ValueError:
                dropped += 1
                continue
            X.append(feats)
            y.append(label)
            ts.append(stamp)
            ids.append(row_no)
    if not X:
        raise DataError(f"{path}: no valid rows ({dropped} dropped)")
    if dropped:
        logger.warning("%s: dropped %d invalid rows", path, dropped)
    return Dataset(np.array(X), np.array(y), np.array(ts, dtype="datetime64[s]"),
                   np.array(ids), schema, dropped_count=dropped)


def save_csv(ds: Dataset, path) -> None:
    if ds.timestamps is None:
        raise DataError("dataset has no timestamps to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ds.schema.csv_header)
        for x, label, stamp in zip(ds.X, ds.y, ds.timestamps):
            w.writerow([repr(float(v)) for v in x] + [int(label), format_timestamp(stamp)])


# ---------------------------------------------------------------- alignment

def align_streams(power: pd.DataFrame, weather: pd.DataFrame, schema: FeatureSchema = SCHEMA) -> Dataset:
    """Join minute-level power-quality rows with hourly weather rows.

    ``power`` has columns ``timestamp``, the six power features and
    ``label``; ``weather`` has ``timestamp`` and the six weather features.
    Non-fault minutes are kept only at weather timestamps (one in 60);
    fault minutes are all kept and joined to the preceding weather hour.
    """
    power = power.copy()
    weather = weather.copy()
    power["timestamp"] = pd.to_datetime(power["timestamp"], utc=True)
    weather["timestamp"] = pd.to_datetime(weather["timestamp"], utc=True)
    if len(power) == 0:
        raise DataError("power stream is empty")
    steps = power["timestamp"].diff().dropna()
    if not (steps == pd.Timedelta(minutes=1)).all():
        raise DataError("power timestamps must increase at a 1-minute cadence")
    weather = weather.sort_values("timestamp").reset_index(drop=True)
    if len(weather) == 0 or weather["timestamp"].iloc[0] > power["timestamp"].iloc[0]:
        raise DataError("weather stream does not cover the start of the power stream")
    # every minute must have a weather row within the preceding hour
    floor = pd.merge_asof(power[["timestamp"]], weather[["timestamp"]].assign(wt=weather["timestamp"]),
                          on="timestamp", direction="backward")
    lag = power["timestamp"] - floor["wt"]
    uncovered = (lag >= pd.Timedelta(hours=1)).to_numpy()
    if uncovered.any():
        at = power["timestamp"].iloc[int(np.argmax(uncovered))]
        raise DataError(f"weather coverage gap larger than 1 hour at {at}")

    on_hour = power["timestamp"].isin(weather["timestamp"])
    keep = power[(power["label"] == 1) | on_hour]
    joined = pd.merge_asof(keep.sort_values("timestamp"), weather, on="timestamp", direction="backward")
    X = joined[list(schema.features)].to_numpy(dtype=float)
    y = joined["label"].to_numpy(dtype=int)
    stamps = joined["timestamp"].dt.tz_localize(None).to_numpy().astype("datetime64[s]")
    ok = np.isfinite(X).all(axis=1)
    return Dataset(X[ok], y[ok], stamps[ok], None, schema, dropped_count=int((~ok).sum()))


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean, float))
        object.__setattr__(self, "std", _frozen(self.std, float))

    @property
    def constant(self) -> np.ndarray:
        return self.std <= 0

    def apply(self, X):
        X = np.asarray(X, dtype=float)
        scale = np.where(self.constant, 1.0, self.std)
        return np.where(self.constant, 0.0, (X - self.mean) / scale)

    def invert(self, Z):
        Z = np.asarray(Z, dtype=float)
        return np.where(self.constant, self.mean, Z * self.std + self.mean)

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))

    @property
    def id(self) -> str:
        return content_id(self.to_dict())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def fit_norm(train: Dataset) -> NormStats:
    if len(train) == 0:
        raise DataError("cannot fit normalization on an empty dataset")
    mean = train.X.mean(axis=0)
    std = train.X.std(axis=0)
    # a column whose spread is pure rounding noise is treated as constant
    tiny = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(tiny, 0.0, std)
    if tiny.any():
        names = [train.schema.features[i] for i in np.flatnonzero(tiny)]
        warnings.warn(f"constant features normalized to 0: {names}", stacklevel=2)
    return NormStats(mean, std)


def apply_norm(ds: Dataset, stats: NormStats) -> Dataset:
    if len(ds) == 0:
        raise DataError("empty dataset")
    return ds.with_features(stats.apply(ds.X))


# ---------------------------------------------------------------- splitting

@dataclass(frozen=True, eq=False)
class FoldPlan:
    k: int
    assignments: np.ndarray
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "assignments", _frozen(self.assignments, np.int64))

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def __iter__(self):
        for f in range(self.k):
            yield self.train_indices(f), self.test_indices(f)


def stratified_kfold(ds: Dataset, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle within each class, then deal samples round-robin to folds.

    The deal continues across classes so total fold sizes also differ by at
    most one.
    """
    if k < 2:
        raise DataError("k must be at least 2")
    if min(ds.class_counts) < k:
        raise DataError(f"each class needs at least k={k} samples, got {ds.class_counts}")
    rng = np.random.default_rng(seed)
    assignments = np.empty(len(ds), dtype=np.int64)
    offset = 0
    for c in (1, 0):
        members = rng.permutation(np.flatnonzero(ds.y == c))
        assignments[members] = (offset + np.arange(len(members))) % k
        offset += len(members)
    return FoldPlan(k, assignments, seed)


def stratified_holdout(y, fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (train_idx, val_idx) split; every class keeps at least one
    sample on each side."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    val = []
    for c in (0, 1):
        members = rng.permutation(np.flatnonzero(y == c))
        if len(members) < 2:
            raise DataError(f"class {c} needs at least 2 samples for a holdout split")
        n_val = min(max(1, int(round(fraction * len(members)))), len(members) - 1)
        val.append(members[:n_val])
    val_idx = np.sort(np.concatenate(val))
    train_idx = np.setdiff1d(np.arange(len(y)), val_idx)
    return train_idx, val_idx


# ---------------------------------------------------------------- imbalance

def class_weights(ds_or_y) -> tuple[float, float]:
    """Balanced weights N / (2 n_c); equalizes the weighted class masses."""
    y = ds_or_y.y if isinstance(ds_or_y, Dataset) else np.asarray(ds_or_y)
    n1 = int(np.sum(y == 1))
    n0 = int(np.sum(y == 0))
    if n0 == 0 or n1 == 0:
        raise DataError("class weights need both classes present")
    n = n0 + n1
    return n / (2 * n0), n / (2 * n1)


def sample_weights(y, weights: tuple[float, float]) -> np.ndarray:
    y = np.asarray(y)
    return np.where(y == 1, weights[1], weights[0]).astype(float)


def oversample_minority(train: Dataset, seed: int = 0) -> Dataset:
    """Append minority rows drawn with replacement until both classes have
    the same count."""
    _require_both_classes(train, "oversampling")
    n0, n1 = train.class_counts
    minority = 1 if n1 < n0 else 0
    extra = abs(n0 - n1)
    if extra == 0:
        return train
    rng = np.random.default_rng(seed)
    pool = np.flatnonzero(train.y == minority)
    picks = rng.choice(pool, size=extra, replace=True)
    return train.subset(np.concatenate([np.arange(len(train)), picks]))
