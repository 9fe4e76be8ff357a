"""Trace ingestion, feature windowing, and synthetic trace generation.

A trace is a per-second multivariate throughput series for one location.
Supervised samples are built by sliding a history window of length L over the
trace and pairing it with the next H throughput values; splits are
chronologically contiguous so calibration and test data always lie strictly
after the training period.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .errors import (
    InvalidSpec,
    MissingColumn,
    NegativeThroughput,
    NonMonotoneTimestamps,
    ParseError,
    TraceTooShort,
)

# Canonical auxiliary series, in the order they appear in feature layouts.
AUX_KEYS = (
    "elevation_deg",
    "azimuth_deg",
    "sat_distance_km",
    "sat_id_code",
    "num_candidates",
    "cloud_pct",
    "pressure_hpa",
    "humidity_pct",
)

TIME_FEATURES = ("phase15", "minute", "hour", "day_of_week")

THROUGHPUT_COLUMN = "throughput_mbps"

_SECONDS_PER_DAY = 86_400


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Trace:
    """A timestamped throughput series with optional auxiliary series."""

    name: str
    timestamps: np.ndarray
    throughput: np.ndarray
    aux: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype=np.int64)
        tp = np.asarray(self.throughput, dtype=np.float64)
        if ts.ndim != 1 or tp.ndim != 1 or len(ts) != len(tp):
            raise ValueError("timestamps and throughput must be 1-D and equal length")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise NonMonotoneTimestamps("timestamps must be strictly increasing")
        if not np.all(np.isfinite(tp)):
            raise ValueError("throughput contains non-finite values")
        if np.any(tp < 0):
            raise NegativeThroughput("throughput contains negative values")
        aux = {}
        for key, series in self.aux.items():
            if key not in AUX_KEYS:
                raise ValueError(f"unknown aux series {key!r}")
            s = np.asarray(series, dtype=np.float64)
            if s.shape != tp.shape:
                raise ValueError(f"aux series {key!r} length differs from throughput")
            aux[key] = _freeze(s)
        object.__setattr__(self, "timestamps", _freeze(ts))
        object.__setattr__(self, "throughput", _freeze(tp))
        object.__setattr__(self, "aux", aux)

    def __len__(self) -> int:
        return len(self.throughput)

    @property
    def aux_keys(self) -> tuple[str, ...]:
        return tuple(k for k in AUX_KEYS if k in self.aux)


def derive_time_features(timestamps: np.ndarray) -> dict[str, np.ndarray]:
    """Per-timestep clock features (UTC): 15-second phase, minute, hour, weekday.

    day_of_week uses Python's convention (Monday = 0); the Unix epoch is a
    Thursday, code 3.
    """
    ts = np.asarray(timestamps)
    if not np.all(np.isfinite(ts)):
        raise ValueError("timestamps must be finite")
    ts = ts.astype(np.int64)
    return {
        "phase15": (ts % 15).astype(np.float64),
        "minute": ((ts % 3600) // 60).astype(np.float64),
        "hour": ((ts % _SECONDS_PER_DAY) // 3600).astype(np.float64),
        "day_of_week": ((ts // _SECONDS_PER_DAY + 3) % 7).astype(np.float64),
    }


@dataclass(frozen=True)
class FeatureVector:
    """One flattened history window plus its ordered feature-name layout."""

    values: np.ndarray
    layout: tuple[str, ...]

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or len(v) != len(self.layout):
            raise ValueError("values length must match layout length")
        object.__setattr__(self, "values", _freeze(v))
        object.__setattr__(self, "layout", tuple(self.layout))


@dataclass(frozen=True)
class Samples:
    """A view over one split: feature matrix X, targets Y, and origins."""

    X: np.ndarray
    Y: np.ndarray
    origin_index: np.ndarray
    layout: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.X)


@dataclass(frozen=True)
class WindowedDataset:
    """Supervised (X, Y) samples with chronological train/cal/test partitions.

    Sample i originates at trace index origin_index[i]; its features cover the
    preceding `history` steps and its target the following `horizon` steps.
    Split membership is decided purely by origin index, so the partitions are
    contiguous in time.
    """

    X: np.ndarray
    Y: np.ndarray
    origin_index: np.ndarray
    layout: tuple[str, ...]
    history: int
    horizon: int
    train_end: int
    cal_end: int

    def __post_init__(self) -> None:
        if self.Y.shape[1] != self.horizon:
            raise ValueError("target width must equal horizon")
        if np.any(self.Y < 0):
            raise ValueError("targets must be non-negative")
        if not 0 <= self.train_end <= self.cal_end <= len(self.X):
            raise ValueError("split boundaries out of order")
        object.__setattr__(self, "X", _freeze(self.X))
        object.__setattr__(self, "Y", _freeze(self.Y))
        object.__setattr__(self, "origin_index", _freeze(self.origin_index))
        object.__setattr__(self, "layout", tuple(self.layout))

    def __len__(self) -> int:
        return len(self.X)

    def _slice(self, lo: int, hi: int) -> Samples:
        return Samples(self.X[lo:hi], self.Y[lo:hi], self.origin_index[lo:hi], self.layout)

    @property
    def train(self) -> Samples:
        return self._slice(0, self.train_end)

    @property
    def calibration(self) -> Samples:
        return self._slice(self.train_end, self.cal_end)

    @property
    def test(self) -> Samples:
        return self._slice(self.cal_end, len(self))

    @property
    def split_labels(self) -> np.ndarray:
        labels = np.empty(len(self), dtype=object)
        labels[: self.train_end] = "train"
        labels[self.train_end : self.cal_end] = "calibration"
        labels[self.cal_end :] = "test"
        return labels

    def feature_vector(self, i: int) -> FeatureVector:
        return FeatureVector(self.X[i].copy(), self.layout)

    def without_test(self) -> "WindowedDataset":
        """Drop the test partition (protocol guard: calibrate before seeing it)."""
        return WindowedDataset(
            self.X[: self.cal_end].copy(),
            self.Y[: self.cal_end].copy(),
            self.origin_index[: self.cal_end].copy(),
            self.layout,
            self.history,
            self.horizon,
            self.train_end,
            self.cal_end,
        )


def build_layout(history: int, aux_keys: tuple[str, ...]) -> tuple[str, ...]:
    """Ordered feature names: throughput lags, aux lags, then clock features."""
    names: list[str] = []
    for feat in ("throughput",) + tuple(aux_keys) + TIME_FEATURES:
        names.extend(f"{feat}.lag{history - 1 - j}" for j in range(history))
    return tuple(names)


def make_windows(
    trace: Trace,
    history: int,
    horizon: int,
    split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15),
) -> WindowedDataset:
    """Slide a length-`history` window over the trace and split chronologically.

    One sample per valid origin index; sample counts per split match the
    ratios within one sample. Raises TraceTooShort when the trace cannot fit
    a single window plus horizon.
    """
    if history < 1 or horizon < 1:
        raise ValueError("history and horizon must be >= 1")
    ratios = tuple(float(r) for r in split_ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split_ratios must be three positive fractions summing to 1")
    n = len(trace) - history - horizon + 1
    if n < 1:
        raise TraceTooShort(
            f"trace of length {len(trace)} cannot fit history {history} + horizon {horizon}"
        )

    series: list[np.ndarray] = [trace.throughput]
    aux_keys = trace.aux_keys
    series.extend(trace.aux[k] for k in aux_keys)
    clock = derive_time_features(trace.timestamps)
    series.extend(clock[k] for k in TIME_FEATURES)

    blocks = [np.lib.stride_tricks.sliding_window_view(s, history)[:n] for s in series]
    X = np.hstack(blocks).astype(np.float64)
    Y = np.lib.stride_tricks.sliding_window_view(trace.throughput, horizon)[
        history : history + n
    ].astype(np.float64)
    origins = np.arange(history - 1, history - 1 + n, dtype=np.int64)

    train_end = int(math.floor(ratios[0] * n + 0.5))
    cal_end = int(math.floor((ratios[0] + ratios[1]) * n + 0.5))
    return WindowedDataset(
        X=X,
        Y=Y,
        origin_index=origins,
        layout=build_layout(history, aux_keys),
        history=history,
        horizon=horizon,
        train_end=train_end,
        cal_end=cal_end,
    )


# ---------------------------------------------------------------------------
# Synthetic traces
# ---------------------------------------------------------------------------


class NoNoise:
    """Zero noise; the quantile function is identically zero."""

    def sample(self, rng: np.random.Generator, timestamps: np.ndarray) -> np.ndarray:
        return np.zeros(len(timestamps))

    def quantile(self, tau: float, timestamps: np.ndarray | None = None):
        return 0.0

    def to_dict(self) -> dict:
        return {"kind": "none"}


@dataclass(frozen=True)
class UniformNoise:
    """Additive noise uniform on (-half_width, +half_width)."""

    half_width: float

    def __post_init__(self) -> None:
        if self.half_width < 0:
            raise InvalidSpec("half_width must be non-negative")

    def sample(self, rng: np.random.Generator, timestamps: np.ndarray) -> np.ndarray:
        return rng.uniform(-self.half_width, self.half_width, size=len(timestamps))

    def quantile(self, tau: float, timestamps: np.ndarray | None = None):
        return -self.half_width + 2.0 * self.half_width * tau

    def to_dict(self) -> dict:
        return {"kind": "uniform", "half_width": self.half_width}


@dataclass(frozen=True)
class GaussianNoise:
    """Additive zero-mean Gaussian noise."""

    sigma: float

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise InvalidSpec("sigma must be non-negative")

    def sample(self, rng: np.random.Generator, timestamps: np.ndarray) -> np.ndarray:
        return rng.normal(0.0, self.sigma, size=len(timestamps)) if self.sigma else np.zeros(len(timestamps))

    def quantile(self, tau: float, timestamps: np.ndarray | None = None):
        return float(self.sigma * norm.ppf(tau))

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "sigma": self.sigma}


@dataclass(frozen=True)
class CyclicScaleNoise:
    """Base noise whose scale oscillates with a fixed period.

    scale(t) = 1 + depth * sin(2*pi*t/period); depth must stay below 1 so the
    scale remains positive and the conditional quantile is just the base
    quantile times scale(t).
    """

    base: UniformNoise | GaussianNoise
    period: float = 3600.0
    depth: float = 0.5

    def __post_init__(self) -> None:
        if self.period <= 0:
            raise InvalidSpec("period must be positive")
        if not 0 <= self.depth < 1:
            raise InvalidSpec("depth must be in [0, 1)")

    def scale(self, timestamps: np.ndarray) -> np.ndarray:
        t = np.asarray(timestamps, dtype=np.float64)
        return 1.0 + self.depth * np.sin(2.0 * np.pi * t / self.period)

    def sample(self, rng: np.random.Generator, timestamps: np.ndarray) -> np.ndarray:
        return self.base.sample(rng, timestamps) * self.scale(timestamps)

    def quantile(self, tau: float, timestamps: np.ndarray | None = None):
        if timestamps is None:
            raise ValueError("cyclic-scale noise needs timestamps for its conditional quantile")
        return self.base.quantile(tau) * self.scale(timestamps)

    def to_dict(self) -> dict:
        return {
            "kind": "cyclic_scale",
            "base": self.base.to_dict(),
            "period": self.period,
            "depth": self.depth,
        }


def noise_from_dict(d: dict) -> NoNoise | UniformNoise | GaussianNoise | CyclicScaleNoise:
    kind = d.get("kind", "none")
    if kind == "none":
        return NoNoise()
    if kind == "uniform":
        return UniformNoise(float(d["half_width"]))
    if kind == "gaussian":
        return GaussianNoise(float(d["sigma"]))
    if kind == "cyclic_scale":
        base = noise_from_dict(d["base"])
        if isinstance(base, (NoNoise, CyclicScaleNoise)):
            raise InvalidSpec("cyclic_scale base must be uniform or gaussian")
        return CyclicScaleNoise(base, float(d.get("period", 3600.0)), float(d.get("depth", 0.5)))
    raise InvalidSpec(f"unknown noise kind {kind!r}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a deterministic-plus-noise throughput trace.

    The deterministic part is a base level, a daily sinusoid, and a one-slot
    dip every `handover_period` seconds; noise is added on top and the result
    is clamped at zero.
    """

    length: int
    seed: int
    base_level: float
    diurnal_amplitude: float = 0.0
    handover_period: int = 15
    handover_drop: float = 0.0
    noise: NoNoise | UniformNoise | GaussianNoise | CyclicScaleNoise = field(
        default_factory=NoNoise
    )
    start_timestamp: int = 0

    def __post_init__(self) -> None:
        if self.length < 1:
            raise InvalidSpec("length must be >= 1")
        if self.handover_period < 1:
            raise InvalidSpec("handover_period must be >= 1")

    def with_seed(self, seed: int) -> "SyntheticSpec":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "seed": self.seed,
            "base_level": self.base_level,
            "diurnal_amplitude": self.diurnal_amplitude,
            "handover_period": self.handover_period,
            "handover_drop": self.handover_drop,
            "noise": self.noise.to_dict(),
            "start_timestamp": self.start_timestamp,
        }


def synthetic_timestamps(spec: SyntheticSpec) -> np.ndarray:
    return np.arange(spec.start_timestamp, spec.start_timestamp + spec.length, dtype=np.int64)


def deterministic_level(spec: SyntheticSpec) -> np.ndarray:
    """The noise-free component of a synthetic trace, before clamping."""
    t = synthetic_timestamps(spec).astype(np.float64)
    level = np.full(spec.length, spec.base_level, dtype=np.float64)
    if spec.diurnal_amplitude:
        level += spec.diurnal_amplitude * np.sin(2.0 * np.pi * t / _SECONDS_PER_DAY)
    if spec.handover_drop:
        level -= spec.handover_drop * (synthetic_timestamps(spec) % spec.handover_period == 0)
    return level


def generate_synthetic(spec: SyntheticSpec) -> Trace:
    """Deterministic given the seed: level + noise, clamped at zero."""
    ts = synthetic_timestamps(spec)
    rng = np.random.default_rng(spec.seed)
    values = deterministic_level(spec) + spec.noise.sample(rng, ts)
    return Trace(name=f"synthetic-{spec.seed}", timestamps=ts, throughput=np.maximum(values, 0.0))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def default_schema() -> dict[str, str]:
    schema = {"timestamp": "timestamp", "throughput": THROUGHPUT_COLUMN}
    schema.update({k: k for k in AUX_KEYS})
    return schema


def ingest_csv(path: str, schema: dict[str, str] | None = None, name: str | None = None) -> Trace:
    """Read a trace CSV, sort by timestamp, and validate invariants.

    `schema` maps canonical field names (timestamp, throughput, aux keys) to
    the column names actually present in the file; omitted aux fields fall
    back to their canonical names and are skipped when absent.
    """
    mapping = default_schema()
    if schema:
        for key, col in schema.items():
            if key not in mapping:
                raise MissingColumn(f"unknown schema field {key!r}")
            mapping[key] = col

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for required in ("timestamp", "throughput"):
            if mapping[required] not in header:
                raise MissingColumn(f"required column {mapping[required]!r} not found")
        aux_present = [k for k in AUX_KEYS if mapping[k] in header]

        timestamps: list[int] = []
        throughput: list[float] = []
        aux_values: dict[str, list[float]] = {k: [] for k in aux_present}
        for line_no, row in enumerate(reader, start=2):
            timestamps.append(_parse_int(row, mapping["timestamp"], line_no))
            throughput.append(_parse_float(row, mapping["throughput"], line_no))
            for key in aux_present:
                aux_values[key].append(_parse_float(row, mapping[key], line_no))

    ts = np.asarray(timestamps, dtype=np.int64)
    tp = np.asarray(throughput, dtype=np.float64)
    if np.any(tp < 0):
        raise NegativeThroughput("throughput column contains negative values")

    order = np.argsort(ts, kind="stable")
    ts = ts[order]
    if len(ts) > 1 and not np.all(np.diff(ts) > 0):
        raise NonMonotoneTimestamps("duplicate timestamps remain after sorting")
    aux = {k: np.asarray(v, dtype=np.float64)[order] for k, v in aux_values.items()}
    return Trace(name=name or str(path), timestamps=ts, throughput=tp[order], aux=aux)


def _parse_int(row: dict, column: str, line_no: int) -> int:
    raw = (row.get(column) or "").strip()
    try:
        return int(raw)
    except ValueError:
        try:
            f = float(raw)
        except ValueError:
            raise ParseError("not an integer", row=line_no, column=column) from None
        if not f.is_integer():
            raise ParseError("timestamp is not a whole number of seconds", row=line_no, column=column)
        return int(f)


def _parse_float(row: dict, column: str, line_no: int) -> float:
    raw = (row.get(column) or "").strip()
    try:
        value = float(raw)
    except ValueError:
        raise ParseError("not a number", row=line_no, column=column) from None
    if not math.isfinite(value):
        raise ParseError("non-finite value", row=line_no, column=column)
    return value


def write_trace_csv(trace: Trace, path: str) -> None:
    """Write a trace in the standard CSV layout (timestamp, throughput, aux)."""
    columns = ["timestamp", THROUGHPUT_COLUMN, *trace.aux_keys]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for i in range(len(trace)):
            row = [int(trace.timestamps[i]), repr(float(trace.throughput[i]))]
            row.extend(repr(float(trace.aux[k][i])) for k in trace.aux_keys)
            writer.writerow(row)
