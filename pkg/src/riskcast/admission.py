"""Slot-level admission control driven by throughput forecasts.

Each slot admits floor(forecast / b) sessions of b Mbps; the truth supports
floor(actual / b). Sessions admitted beyond the oracle capacity are dropped,
so overestimation is the only way to drop sessions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidBandwidth, SlotMismatch
from .metrics import PredictionBatch, percentile, subset_mask, SUBSET_PERCENTILES

ADMISSION_METRICS = ("mean_dropped", "violation_rate", "p95_dropped")


@dataclass(frozen=True)
class AdmissionOutcome:
    """Admitted/oracle/served/dropped session counts for one decision slot."""

    n_admit: int
    n_oracle: int
    n_served: int
    n_drop: int


def admit(y_safe: float, y_true: float, b: float) -> AdmissionOutcome:
    """Floor-based admission of b-Mbps sessions against a forecast."""
    if b <= 0:
        raise InvalidBandwidth(f"per-service bandwidth must be positive, got {b}")
    if y_safe < 0 or y_true < 0:
        raise ValueError("throughput values must be non-negative")
    n_admit = math.floor(y_safe / b)
    n_oracle = math.floor(y_true / b)
    return AdmissionOutcome(
        n_admit=n_admit,
        n_oracle=n_oracle,
        n_served=min(n_admit, n_oracle),
        n_drop=max(n_admit - n_oracle, 0),
    )


@dataclass(frozen=True)
class AdmissionReport:
    """Dropped-session statistics over a batch of decision slots."""

    mean_dropped: float
    violation_rate: float
    p95_dropped: float
    n_slots: int
    subsets: dict[str, "AdmissionReport"] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.violation_rate <= 1.0:
            raise ValueError("violation_rate must lie in [0, 1]")
        if self.p95_dropped < 0 or self.mean_dropped < 0:
            raise ValueError("drop statistics must be non-negative")

    def metric(self, name: str) -> float:
        return float(getattr(self, name))

    def to_dict(self) -> dict:
        out = {name: self.metric(name) for name in ADMISSION_METRICS}
        out["n_slots"] = self.n_slots
        if self.subsets:
            out["subsets"] = {k: v.to_dict() for k, v in self.subsets.items()}
        return out

    @staticmethod
    def from_dict(d: dict) -> "AdmissionReport":
        subsets = {k: AdmissionReport.from_dict(v) for k, v in d.get("subsets", {}).items()}
        return AdmissionReport(
            mean_dropped=d["mean_dropped"],
            violation_rate=d["violation_rate"],
            p95_dropped=d["p95_dropped"],
            n_slots=d["n_slots"],
            subsets=subsets,
        )


def _drops(preds: np.ndarray, truths: np.ndarray, b: float) -> np.ndarray:
    n_admit = np.floor(preds / b)
    n_oracle = np.floor(truths / b)
    return np.maximum(n_admit - n_oracle, 0.0)


def _stats(drops: np.ndarray) -> tuple[float, float, float]:
    return (
        float(drops.mean()),
        float(np.mean(drops > 0)),
        percentile(drops, 95.0),
    )


def simulate(batch: PredictionBatch, b: float, with_subsets: bool = False) -> AdmissionReport:
    """One admission decision per (sample, horizon) element."""
    if b <= 0:
        raise InvalidBandwidth(f"per-service bandwidth must be positive, got {b}")
    drops = _drops(batch.preds, batch.truths, b)
    mean_d, viol, p95 = _stats(drops)
    subsets: dict[str, AdmissionReport] = {}
    if with_subsets:
        subsets["all"] = AdmissionReport(mean_d, viol, p95, drops.size)
        for name, pct in SUBSET_PERCENTILES.items():
            mask = subset_mask(batch, pct)
            if mask.any():
                m, v, p = _stats(drops[mask])
                subsets[name] = AdmissionReport(m, v, p, int(mask.sum()))
    return AdmissionReport(mean_d, viol, p95, drops.size, subsets)


def compare(baseline: AdmissionReport, candidate: AdmissionReport) -> dict[str, float | None]:
    """Relative reduction (baseline - candidate) / baseline per metric.

    A zero baseline makes the reduction undefined; those entries are None
    rather than a number.
    """
    if baseline.n_slots != candidate.n_slots:
        raise SlotMismatch(
            f"reports cover different slot counts: {baseline.n_slots} vs {candidate.n_slots}"
        )
    out: dict[str, float | None] = {}
    for name in ADMISSION_METRICS:
        base = baseline.metric(name)
        out[name] = None if base == 0 else (base - candidate.metric(name)) / base
    return out
