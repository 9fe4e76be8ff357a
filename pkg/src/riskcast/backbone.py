"""Quantile predictor family: pinball loss, boosted trees, linear reference.

Each model predicts all H horizon steps with H independently fitted
regressors over the same flattened history window. Quantile models minimise
the pinball loss; point models minimise squared error. The boosted-tree
fitting follows standard quantile boosting: trees are grown on the pinball
subgradient with a unit curvature surrogate (the true second derivative is
zero almost everywhere), then each leaf value is refit to the tau-quantile of
the residuals that landed in it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import FeatureVector, Samples
from .errors import (
    EmptyTrainingSet,
    InvalidTau,
    LayoutMismatch,
    LengthMismatch,
)

_MAX_BINS = 256


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0 or not np.isfinite(tau):
        raise InvalidTau(f"quantile level must lie in (0, 1), got {tau}")
    return tau


def pinball_loss(y, y_hat, tau: float):
    """max(tau*(y - y_hat), (tau - 1)*(y - y_hat)); zero iff y == y_hat."""
    tau = _check_tau(tau)
    d = np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)
    out = np.maximum(tau * d, (tau - 1.0) * d)
    return float(out) if out.ndim == 0 else out


def pinball_loss_horizon(Y, Y_hat, tau: float) -> float:
    """Mean per-step pinball loss over one prediction horizon."""
    Y = np.asarray(Y, dtype=np.float64)
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    if Y.shape != Y_hat.shape:
        raise LengthMismatch(f"target shape {Y.shape} != prediction shape {Y_hat.shape}")
    if Y.size == 0:
        raise LengthMismatch("horizon must contain at least one step")
    return float(np.mean(pinball_loss(Y, Y_hat, tau)))


def pinball_subgradient(y, y_hat, tau: float):
    """d/d(y_hat) of the pinball loss; zero residuals take the (1 - tau) side."""
    tau = _check_tau(tau)
    r = np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)
    out = np.where(r > 0, -tau, 1.0 - tau)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BackboneParams:
    """Hyperparameters for both backbone kinds.

    Tree fields apply when kind == "boosted_trees"; steps/step_size apply to
    the linear backbone (step_size is scaled internally by the data's largest
    curvature so it stays stable across feature counts). One seed drives all
    stochastic parts.
    """

    kind: str = "boosted_trees"
    n_trees: int = 200
    max_depth: int = 6
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    subsample: float = 1.0
    seed: int = 0
    steps: int = 400
    step_size: float = 0.1

    def __post_init__(self) -> None:
        if self.kind not in ("boosted_trees", "linear"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if min(self.n_trees, self.max_depth, self.min_samples_leaf, self.steps) < 1:
            raise ValueError("counts must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")

    def with_seed(self, seed: int) -> "BackboneParams":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "learning_rate": self.learning_rate,
            "min_samples_leaf": self.min_samples_leaf,
            "subsample": self.subsample,
            "seed": self.seed,
            "steps": self.steps,
            "step_size": self.step_size,
        }


# ---------------------------------------------------------------------------
# Decision trees
# ---------------------------------------------------------------------------


@dataclass
class DecisionTree:
    """Flat-array binary tree; feature < 0 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        idx = np.zeros(len(X), dtype=np.int32)
        rows = np.arange(len(X))
        while True:
            at_leaf = self.feature[idx] < 0
            if at_leaf.all():
                return self.value[idx]
            go_left = X[rows, np.maximum(self.feature[idx], 0)] <= self.threshold[idx]
            nxt = np.where(go_left, self.left[idx], self.right[idx])
            idx = np.where(at_leaf, idx, nxt).astype(np.int32)

    def to_payload(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @staticmethod
    def from_payload(d: dict) -> "DecisionTree":
        return DecisionTree(
            feature=np.asarray(d["feature"], dtype=np.int32),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int32),
            right=np.asarray(d["right"], dtype=np.int32),
            value=np.asarray(d["value"], dtype=np.float64),
        )


def _bin_features(X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Quantile-bin each column; a split at bin b means x <= cuts[b]."""
    n, n_feat = X.shape
    binned = np.empty((n, n_feat), dtype=np.uint8)
    cuts: list[np.ndarray] = []
    for j in range(n_feat):
        col = X[:, j]
        uniq = np.unique(col)
        if uniq.size <= 1:
            c = np.empty(0, dtype=np.float64)
        elif uniq.size <= _MAX_BINS:
            c = (uniq[:-1] + uniq[1:]) / 2.0
        else:
            qs = np.quantile(col, np.linspace(0.0, 1.0, _MAX_BINS)[1:-1])
            c = np.unique(qs)
        binned[:, j] = np.searchsorted(c, col, side="left")
        cuts.append(c)
    return binned, cuts


def _grow_tree(
    binned: np.ndarray,
    cuts: list[np.ndarray],
    grad: np.ndarray,
    resid: np.ndarray,
    tau: float | None,
    max_depth: int,
    min_samples_leaf: int,
) -> DecisionTree:
    n_feat = binned.shape[1]
    n_cuts = np.asarray([c.size for c in cuts], dtype=np.int64)
    n_bins = int(n_cuts.max(initial=0)) + 1
    offsets = np.arange(n_feat, dtype=np.int64) * n_bins
    bin_ids = np.arange(n_bins - 1, dtype=np.int64)[None, :] if n_bins > 1 else None

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def leaf_value(idx: np.ndarray) -> float:
        r = resid[idx]
        return float(np.quantile(r, tau)) if tau is not None else float(r.mean())

    def add_leaf(idx: np.ndarray) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(leaf_value(idx))
        return node

    def build(idx: np.ndarray, depth: int) -> int:
        n = idx.size
        if depth >= max_depth or n < 2 * min_samples_leaf or bin_ids is None:
            return add_leaf(idx)
        g = grad[idx]
        total_g = g.sum()
        flat = (binned[idx].astype(np.int64) + offsets).ravel()
        hist_g = np.bincount(flat, weights=np.repeat(g, n_feat), minlength=n_feat * n_bins)
        hist_n = np.bincount(flat, minlength=n_feat * n_bins)
        cum_g = hist_g.reshape(n_feat, n_bins).cumsum(axis=1)[:, :-1]
        cum_n = hist_n.reshape(n_feat, n_bins).cumsum(axis=1)[:, :-1]
        n_right = n - cum_n
        ok = (cum_n >= min_samples_leaf) & (n_right >= min_samples_leaf)
        ok &= bin_ids < n_cuts[:, None]
        if not ok.any():
            return add_leaf(idx)
        g_right = total_g - cum_g
        base_score = total_g * total_g / n
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(
                ok,
                cum_g**2 / np.maximum(cum_n, 1) + g_right**2 / np.maximum(n_right, 1) - base_score,
                -np.inf,
            )
        best = int(np.argmax(gain))
        best_gain = gain.ravel()[best]
        if best_gain <= 1e-9 * max(1.0, abs(base_score)):
            return add_leaf(idx)
        f_best, b_best = divmod(best, n_bins - 1)
        go_left = binned[idx, f_best] <= b_best
        node = len(feature)
        feature.append(f_best)
        threshold.append(float(cuts[f_best][b_best]))
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        left[node] = build(idx[go_left], depth + 1)
        right[node] = build(idx[~go_left], depth + 1)
        return node

    build(np.arange(binned.shape[0], dtype=np.int64), 0)
    return DecisionTree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        value=np.asarray(value, dtype=np.float64),
    )


@dataclass
class BoostedTreesRegressor:
    """Additive tree ensemble: base_score + learning_rate * sum(tree outputs)."""

    base_score: float
    learning_rate: float
    trees: list[DecisionTree] = field(default_factory=list)

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.full(len(X), self.base_score, dtype=np.float64)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
        return out

    def to_payload(self) -> dict:
        return {
            "type": "boosted_trees",
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "trees": [t.to_payload() for t in self.trees],
        }

    @staticmethod
    def from_payload(d: dict) -> "BoostedTreesRegressor":
        return BoostedTreesRegressor(
            base_score=float(d["base_score"]),
            learning_rate=float(d["learning_rate"]),
            trees=[DecisionTree.from_payload(t) for t in d["trees"]],
        )


def _fit_boosted_column(
    X: np.ndarray,
    y: np.ndarray,
    tau: float | None,
    params: BackboneParams,
    rng: np.random.Generator,
) -> BoostedTreesRegressor:
    n = len(y)
    base = float(np.quantile(y, tau)) if tau is not None else float(y.mean())
    model = BoostedTreesRegressor(base_score=base, learning_rate=params.learning_rate)
    binned, cuts = _bin_features(X)
    pred = np.full(n, base, dtype=np.float64)
    for _ in range(params.n_trees):
        resid = y - pred
        if not np.any(resid):
            break
        grad = pinball_subgradient(y, pred, tau) if tau is not None else -resid
        if params.subsample < 1.0:
            m = max(1, int(round(params.subsample * n)))
            rows = np.sort(rng.choice(n, size=m, replace=False))
            tree = _grow_tree(
                binned[rows], cuts, grad[rows], resid[rows], tau,
                params.max_depth, params.min_samples_leaf,
            )
        else:
            tree = _grow_tree(
                binned, cuts, grad, resid, tau, params.max_depth, params.min_samples_leaf
            )
        pred += params.learning_rate * tree.predict(X)
        model.trees.append(tree)
    return model


# ---------------------------------------------------------------------------
# Linear reference backbone
# ---------------------------------------------------------------------------


@dataclass
class LinearRegressor:
    """Linear model on standardized features, fit by (sub)gradient descent."""

    weights: np.ndarray
    bias: float
    center: np.ndarray
    scale: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        return ((X - self.center) / self.scale) @ self.weights + self.bias

    def to_payload(self) -> dict:
        return {
            "type": "linear",
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
        }

    @staticmethod
    def from_payload(d: dict) -> "LinearRegressor":
        return LinearRegressor(
            weights=np.asarray(d["weights"], dtype=np.float64),
            bias=float(d["bias"]),
            center=np.asarray(d["center"], dtype=np.float64),
            scale=np.asarray(d["scale"], dtype=np.float64),
        )


def _curvature_bound(Z: np.ndarray) -> float:
    # Deterministic power iteration on Z'Z/n bounds the quadratic curvature.
    n, n_feat = Z.shape
    v = np.full(n_feat, 1.0 / np.sqrt(n_feat))
    lam = 1.0
    for _ in range(30):
        w = Z.T @ (Z @ v) / n
        lam = float(np.linalg.norm(w))
        if lam < 1e-12:
            return 1.0
        v = w / lam
    return max(lam, 1.0)


def _fit_linear_column(
    X: np.ndarray, y: np.ndarray, tau: float | None, params: BackboneParams
) -> LinearRegressor:
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Z = (X - center) / scale
    n = len(y)
    step0 = params.step_size / _curvature_bound(Z)
    w = np.zeros(X.shape[1])
    b = float(np.quantile(y, tau)) if tau is not None else float(y.mean())
    for t in range(params.steps):
        resid = y - (Z @ w + b)
        if not np.any(resid):
            break
        if tau is not None:
            g = np.where(resid > 0, -tau, 1.0 - tau)
            step = step0 / np.sqrt(t + 1.0)
        else:
            g = -resid
            step = step0
        w -= step * (Z.T @ g) / n
        b -= step * float(g.mean())
    return LinearRegressor(weights=w, bias=b, center=center, scale=scale)


# ---------------------------------------------------------------------------
# Multi-horizon model
# ---------------------------------------------------------------------------


@dataclass
class QuantileModel:
    """One regressor per horizon step, all trained at the same quantile level.

    Predictions are clamped below at zero (throughput is non-negative), and
    the feature layout seen at training time is enforced at prediction time.
    """

    tau: float
    objective: str
    backbone_kind: str
    params: BackboneParams
    feature_layout: tuple[str, ...]
    horizon_models: list

    def __post_init__(self) -> None:
        _check_tau(self.tau)
        if self.objective not in ("pinball", "squared"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not self.horizon_models:
            raise ValueError("model needs at least one horizon step")

    @property
    def horizon(self) -> int:
        return len(self.horizon_models)

    def _check_layout(self, layout) -> None:
        if tuple(layout) != self.feature_layout:
            raise LayoutMismatch(
                f"feature layout has {len(tuple(layout))} names and differs from "
                f"the training layout of {len(self.feature_layout)} names"
            )

    def predict(self, X: np.ndarray, layout) -> np.ndarray:
        self._check_layout(layout)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_layout):
            raise LayoutMismatch(f"feature matrix width {X.shape} does not match layout")
        out = np.column_stack([m.predict(X) for m in self.horizon_models])
        return np.maximum(out, 0.0)

    def predict_vector(self, fv: FeatureVector) -> np.ndarray:
        return self.predict(fv.values.reshape(1, -1), fv.layout)[0]


def predict(model: QuantileModel, fv: FeatureVector) -> np.ndarray:
    """Length-H forecast for a single feature vector."""
    return model.predict_vector(fv)


def _train(train: Samples, tau: float | None, objective: str, params: BackboneParams) -> QuantileModel:
    if len(train) == 0:
        raise EmptyTrainingSet("training split is empty")
    X = np.asarray(train.X, dtype=np.float64)
    Y = np.asarray(train.Y, dtype=np.float64)
    models = []
    for h in range(Y.shape[1]):
        if params.kind == "boosted_trees":
            rng = np.random.default_rng([params.seed, h])
            models.append(_fit_boosted_column(X, Y[:, h], tau, params, rng))
        else:
            models.append(_fit_linear_column(X, Y[:, h], tau, params))
    return QuantileModel(
        tau=tau if tau is not None else 0.5,
        objective=objective,
        backbone_kind=params.kind,
        params=params,
        feature_layout=tuple(train.layout),
        horizon_models=models,
    )


def train_quantile_model(train: Samples, tau: float, params: BackboneParams) -> QuantileModel:
    """Fit one pinball-loss regressor per horizon step at level tau."""
    return _train(train, _check_tau(tau), "pinball", params)


def train_point_model(train: Samples, params: BackboneParams) -> QuantileModel:
    """Fit the squared-error point predictor (same shape as a quantile model)."""
    return _train(train, None, "squared", params)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_FORMAT = "riskcast-model"
_VERSION = 1


def save_model(model: QuantileModel, path: str) -> None:
    """Write a self-describing JSON payload; round-trips predictions exactly."""
    doc = {
        "format": _FORMAT,
        "version": _VERSION,
        "backbone_kind": model.backbone_kind,
        "objective": model.objective,
        "tau": model.tau,
        "params": model.params.to_dict(),
        "feature_layout": list(model.feature_layout),
        "horizon_models": [m.to_payload() for m in model.horizon_models],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path: str) -> QuantileModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != _FORMAT:
        raise ValueError(f"{path} is not a saved model")
    loaders = {"boosted_trees": BoostedTreesRegressor.from_payload, "linear": LinearRegressor.from_payload}
    models = [loaders[p["type"]](p) for p in doc["horizon_models"]]
    return QuantileModel(
        tau=float(doc["tau"]),
        objective=doc["objective"],
        backbone_kind=doc["backbone_kind"],
        params=BackboneParams(**doc["params"]),
        feature_layout=tuple(doc["feature_layout"]),
        horizon_models=models,
    )
