"""Accuracy and safety metrics over (prediction, truth) batches.

Overestimation is the harmful direction: besides MAE/RMSE we track how often
predictions exceed the truth (over_rate), how large those excesses are on
average (mpe), and how heavy their tail is (p95_pos_err). Low-throughput
subsets (lowest 30% / 10% of true values) isolate the regimes where
overestimation does the most damage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatch

SUBSET_NAMES = ("all", "p30", "p10")
SUBSET_PERCENTILES = {"p30": 30.0, "p10": 10.0}
METRIC_NAMES = ("mae", "rmse", "over_rate", "mpe", "p95_pos_err")


@dataclass(frozen=True)
class PredictionBatch:
    """Paired N x H matrices of predicted and true throughput (Mbps)."""

    preds: np.ndarray
    truths: np.ndarray

    def __post_init__(self) -> None:
        p = np.atleast_2d(np.asarray(self.preds, dtype=np.float64))
        t = np.atleast_2d(np.asarray(self.truths, dtype=np.float64))
        if p.shape != t.shape:
            raise ValueError(f"shape mismatch: preds {p.shape} vs truths {t.shape}")
        if p.size == 0:
            raise EmptyBatch("batch has no elements")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
            raise ValueError("batch contains non-finite values")
        if np.any(t < 0):
            raise ValueError("truths must be non-negative")
        object.__setattr__(self, "preds", p)
        object.__setattr__(self, "truths", t)

    @property
    def n_elements(self) -> int:
        return self.preds.size

    def scaled(self, factor: float) -> "PredictionBatch":
        return PredictionBatch(self.preds * factor, self.truths)


def percentile(values: np.ndarray, q: float) -> float:
    """Empirical percentile, linear interpolation between closest ranks."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), q))


def mae(batch: PredictionBatch) -> float:
    return float(np.mean(np.abs(batch.preds - batch.truths)))


def rmse(batch: PredictionBatch) -> float:
    return float(np.sqrt(np.mean((batch.preds - batch.truths) ** 2)))


def over_rate(batch: PredictionBatch) -> float:
    """Fraction of elements whose prediction strictly exceeds the truth."""
    return float(np.mean(batch.preds > batch.truths))


def mpe(batch: PredictionBatch) -> float:
    """Mean positive error: average of max(pred - truth, 0)."""
    return float(np.mean(np.maximum(batch.preds - batch.truths, 0.0)))


def p95_pos_err(batch: PredictionBatch) -> float:
    """95th percentile of max(pred - truth, 0), zeros included."""
    return percentile(np.maximum(batch.preds - batch.truths, 0.0), 95.0)


def subset_mask(batch: PredictionBatch, pct: float) -> np.ndarray:
    """Element mask selecting truths at or below the given truth percentile."""
    if pct <= 0 or pct >= 100:
        raise ValueError("percentile must lie in (0, 100)")
    threshold = percentile(batch.truths, pct)
    return batch.truths <= threshold


@dataclass(frozen=True)
class SafetyReport:
    """All five metrics for one predictor on one element set."""

    mae: float
    rmse: float
    over_rate: float
    mpe: float
    p95_pos_err: float
    n_elements: int
    subsets: dict[str, "SafetyReport"] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.over_rate <= 1.0:
            raise ValueError("over_rate must lie in [0, 1]")
        if self.mpe > self.mae + 1e-9:
            raise ValueError("mpe cannot exceed mae")
        if self.p95_pos_err < 0:
            raise ValueError("p95_pos_err must be non-negative")

    def metric(self, name: str) -> float:
        return float(getattr(self, name))

    def to_dict(self) -> dict:
        out = {name: self.metric(name) for name in METRIC_NAMES}
        out["n_elements"] = self.n_elements
        if self.subsets:
            out["subsets"] = {k: v.to_dict() for k, v in self.subsets.items()}
        return out

    @staticmethod
    def from_dict(d: dict) -> "SafetyReport":
        subsets = {k: SafetyReport.from_dict(v) for k, v in d.get("subsets", {}).items()}
        return SafetyReport(
            mae=d["mae"],
            rmse=d["rmse"],
            over_rate=d["over_rate"],
            mpe=d["mpe"],
            p95_pos_err=d["p95_pos_err"],
            n_elements=d["n_elements"],
            subsets=subsets,
        )


def _report_from_flat(preds: np.ndarray, truths: np.ndarray) -> SafetyReport:
    b = PredictionBatch(preds.reshape(1, -1), truths.reshape(1, -1))
    return SafetyReport(
        mae=mae(b),
        rmse=rmse(b),
        over_rate=over_rate(b),
        mpe=mpe(b),
        p95_pos_err=p95_pos_err(b),
        n_elements=b.n_elements,
    )


def safety_report(batch: PredictionBatch, with_subsets: bool = False) -> SafetyReport:
    """Aggregate metrics, optionally broken down over P30/P10 truth subsets."""
    top = _report_from_flat(batch.preds.ravel(), batch.truths.ravel())
    if not with_subsets:
        return top
    subsets: dict[str, SafetyReport] = {"all": top}
    for name, pct in SUBSET_PERCENTILES.items():
        mask = subset_mask(batch, pct)
        if mask.any():
            subsets[name] = _report_from_flat(batch.preds[mask], batch.truths[mask])
    return SafetyReport(
        mae=top.mae,
        rmse=top.rmse,
        over_rate=top.over_rate,
        mpe=top.mpe,
        p95_pos_err=top.p95_pos_err,
        n_elements=top.n_elements,
        subsets=subsets,
    )
