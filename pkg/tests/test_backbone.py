from __future__ import annotations

import numpy as np
import pytest

from riskcast.backbone import (
    BackboneParams,
    BoostedTreesRegressor,
    DecisionTree,
    LinearRegressor,
    QuantileModel,
    load_model,
    pinball_loss,
    pinball_loss_horizon,
    pinball_subgradient,
    predict,
    save_model,
    train_point_model,
    train_quantile_model,
)
from riskcast.data import FeatureVector, Samples
from riskcast.errors import EmptyTrainingSet, InvalidTau, LayoutMismatch, LengthMismatch

from conftest import iid_samples


class TestPinball:
    def test_unit_cases(self):
        assert pinball_loss(10.0, 8.0, 0.5) == 1.0
        assert pinball_loss(10.0, 12.0, 0.25) == 1.5
        assert pinball_loss(7.0, 7.0, 0.9) == 0.0

    def test_zero_iff_equal(self, rng):
        y, y_hat = rng.uniform(-5, 5, size=2)
        if y != y_hat:
            assert pinball_loss(y, y_hat, 0.3) > 0

    @pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5])
    def test_invalid_tau(self, tau):
        with pytest.raises(InvalidTau):
            pinball_loss(1.0, 2.0, tau)

    def test_horizon_mean(self):
        # per-step losses 1.0 and 3.0
        assert pinball_loss_horizon([10.0, 10.0], [8.0, 4.0], 0.5) == 2.0
        assert pinball_loss_horizon([3.0, 4.0], [3.0, 4.0], 0.2) == 0.0

    def test_horizon_matches_scalar_loop(self, rng):
        y = rng.uniform(0, 100, size=15)
        y_hat = rng.uniform(0, 100, size=15)
        expected = sum(pinball_loss(float(a), float(b), 0.3) for a, b in zip(y, y_hat)) / 15
        assert pinball_loss_horizon(y, y_hat, 0.3) == pytest.approx(expected, rel=1e-12)

    def test_horizon_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            pinball_loss_horizon([1.0, 2.0], [1.0], 0.5)

    def test_convexity(self, rng):
        for _ in range(200):
            y = rng.uniform(-10, 10)
            a, b = rng.uniform(-10, 10, size=2)
            lam = rng.uniform()
            tau = rng.uniform(0.05, 0.95)
            mid = lam * a + (1 - lam) * b
            assert pinball_loss(y, mid, tau) <= (
                lam * pinball_loss(y, a, tau) + (1 - lam) * pinball_loss(y, b, tau) + 1e-12
            )

    def test_subgradient_matches_finite_difference(self, rng):
        step = 1e-6
        checked = 0
        while checked < 500:
            y = rng.uniform(-10, 10)
            y_hat = rng.uniform(-10, 10)
            tau = rng.uniform(0.05, 0.95)
            if abs(y - y_hat) <= 10 * step:
                continue
            fd = (pinball_loss(y, y_hat + step, tau) - pinball_loss(y, y_hat - step, tau)) / (2 * step)
            g = pinball_subgradient(y, y_hat, tau)
            assert fd == pytest.approx(g, rel=1e-6, abs=1e-9)
            checked += 1

    def test_subgradient_tie_break_at_kink(self):
        # zero residual takes the non-positive-residual side
        assert pinball_subgradient(5.0, 5.0, 0.3) == pytest.approx(0.7)


def stump_model(horizon=1):
    tree = DecisionTree(
        feature=np.array([0, -1, -1], dtype=np.int32),
        threshold=np.array([5.0, 0.0, 0.0]),
        left=np.array([1, -1, -1], dtype=np.int32),
        right=np.array([2, -1, -1], dtype=np.int32),
        value=np.array([0.0, 2.0, 8.0]),
    )
    reg = BoostedTreesRegressor(base_score=0.0, learning_rate=1.0, trees=[tree])
    return QuantileModel(
        tau=0.5,
        objective="pinball",
        backbone_kind="boosted_trees",
        params=BackboneParams(),
        feature_layout=("f0", "f1"),
        horizon_models=[reg] * horizon,
    )


class TestPredict:
    def test_single_split_stump(self):
        model = stump_model(horizon=2)
        out = model.predict(np.array([[3.0, 99.0]]), ("f0", "f1"))
        assert out.tolist() == [[2.0, 2.0]]
        out = model.predict(np.array([[6.0, -1.0]]), ("f0", "f1"))
        assert out.tolist() == [[8.0, 8.0]]

    def test_negative_output_clamped_to_zero(self):
        reg = LinearRegressor(
            weights=np.zeros(2), bias=-3.0, center=np.zeros(2), scale=np.ones(2)
        )
        model = QuantileModel(
            tau=0.25,
            objective="pinball",
            backbone_kind="linear",
            params=BackboneParams(kind="linear"),
            feature_layout=("f0", "f1"),
            horizon_models=[reg],
        )
        assert model.predict(np.array([[1.0, 2.0]]), ("f0", "f1")).tolist() == [[0.0]]

    def test_layout_mismatch(self):
        model = stump_model()
        with pytest.raises(LayoutMismatch):
            model.predict(np.array([[1.0, 2.0]]), ("f0", "other"))
        with pytest.raises(LayoutMismatch):
            model.predict(np.array([[1.0, 2.0, 3.0]]), ("f0", "f1", "f2"))

    def test_feature_vector_entry_point(self):
        model = stump_model(horizon=3)
        fv = FeatureVector(np.array([7.0, 0.0]), ("f0", "f1"))
        assert predict(model, fv).tolist() == [8.0, 8.0, 8.0]


def constant_samples(n=200, value=40.0, horizon=2, n_features=3):
    layout = tuple(f"f{j}" for j in range(n_features))
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 1, size=(n, n_features))
    Y = np.full((n, horizon), value)
    return Samples(X=X, Y=Y, origin_index=np.arange(n), layout=layout)


class TestTraining:
    @pytest.mark.parametrize("kind", ["boosted_trees", "linear"])
    @pytest.mark.parametrize("tau", [0.15, 0.5, 0.8])
    def test_constant_target(self, kind, tau):
        train = constant_samples(value=40.0)
        params = BackboneParams(kind=kind, n_trees=20, max_depth=3, min_samples_leaf=5)
        model = train_quantile_model(train, tau, params)
        preds = model.predict(train.X, train.layout)
        assert np.all(np.abs(preds - 40.0) < 1e-6)

    @pytest.mark.parametrize("kind", ["boosted_trees", "linear"])
    def test_constant_target_point(self, kind):
        train = constant_samples(value=25.0)
        model = train_point_model(train, BackboneParams(kind=kind, n_trees=10))
        preds = model.predict(train.X, train.layout)
        assert np.all(np.abs(preds - 25.0) < 1e-6)

    @pytest.mark.parametrize("kind", ["boosted_trees", "linear"])
    def test_uninformative_features_hit_target_quantile(self, rng, kind):
        train = iid_samples(rng, n=4000, low=50.0, high=150.0)
        tau = 0.3
        params = BackboneParams(
            kind=kind, n_trees=30, max_depth=3, min_samples_leaf=200, seed=5
        )
        model = train_quantile_model(train, tau, params)
        preds = model.predict(train.X, train.layout)
        target = np.quantile(train.Y[:, 0], tau)
        assert abs(preds.mean() - target) <= 0.02 * 100.0  # 2% of target range

    @pytest.mark.parametrize("kind", ["boosted_trees", "linear"])
    def test_uninformative_features_hit_mean(self, rng, kind):
        train = iid_samples(rng, n=4000, low=50.0, high=150.0)
        params = BackboneParams(
            kind=kind, n_trees=30, max_depth=3, min_samples_leaf=200, seed=5
        )
        model = train_point_model(train, params)
        preds = model.predict(train.X, train.layout)
        assert abs(preds.mean() - train.Y[:, 0].mean()) <= 0.02 * 100.0

    def test_determinism(self, rng):
        train = iid_samples(rng, n=500, horizon=2)
        params = BackboneParams(n_trees=15, max_depth=4, subsample=0.8, seed=11)
        a = train_quantile_model(train, 0.25, params)
        b = train_quantile_model(train, 0.25, params)
        pa = a.predict(train.X, train.layout)
        pb = b.predict(train.X, train.layout)
        assert np.array_equal(pa, pb)

    def test_quantile_monotonicity_on_aggregate(self, rng):
        train = iid_samples(rng, n=2000)
        params = BackboneParams(n_trees=20, max_depth=3, min_samples_leaf=50, seed=2)
        low = train_quantile_model(train, 0.2, params)
        high = train_quantile_model(train, 0.45, params)
        mean_low = low.predict(train.X, train.layout).mean()
        mean_high = high.predict(train.X, train.layout).mean()
        assert mean_low <= mean_high

    def test_learns_informative_split(self, rng):
        # one binary feature controls the level; the model must find it
        n = 2000
        X = np.zeros((n, 2))
        X[:, 0] = rng.integers(0, 2, size=n)
        X[:, 1] = rng.uniform(0, 1, size=n)
        Y = np.where(X[:, 0] > 0.5, 80.0, 20.0).reshape(-1, 1)
        train = Samples(X=X, Y=Y, origin_index=np.arange(n), layout=("flag", "junk"))
        model = train_point_model(train, BackboneParams(n_trees=60, max_depth=2, min_samples_leaf=10))
        preds = model.predict(np.array([[1.0, 0.3], [0.0, 0.9]]), ("flag", "junk"))
        assert preds[0, 0] == pytest.approx(80.0, abs=0.5)
        assert preds[1, 0] == pytest.approx(20.0, abs=0.5)

    def test_empty_training_set(self):
        empty = Samples(
            X=np.empty((0, 2)), Y=np.empty((0, 1)), origin_index=np.empty(0, dtype=int),
            layout=("a", "b"),
        )
        with pytest.raises(EmptyTrainingSet):
            train_quantile_model(empty, 0.3, BackboneParams())

    def test_invalid_tau(self):
        with pytest.raises(InvalidTau):
            train_quantile_model(constant_samples(), 1.2, BackboneParams())

    def test_coverage_on_feature_independent_noise(self, rng):
        # fraction of targets below the forecast should track tau out of sample
        n = 12_000
        X = rng.uniform(0, 1, size=(n, 3))
        Y = (100.0 + rng.uniform(-30, 30, size=(n, 1)))
        samples = Samples(X=X, Y=Y, origin_index=np.arange(n), layout=("a", "b", "c"))
        train = Samples(samples.X[:8000], samples.Y[:8000], samples.origin_index[:8000], samples.layout)
        held = Samples(samples.X[8000:], samples.Y[8000:], samples.origin_index[8000:], samples.layout)
        params = BackboneParams(n_trees=25, max_depth=3, min_samples_leaf=200, seed=3)
        for tau in (0.15, 0.25, 0.40):
            model = train_quantile_model(train, tau, params)
            preds = model.predict(held.X, held.layout)
            below = np.mean(held.Y < preds)
            assert abs(below - tau) <= 0.05


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            BackboneParams(n_trees=0)
        with pytest.raises(ValueError):
            BackboneParams(learning_rate=0.0)
        with pytest.raises(ValueError):
            BackboneParams(subsample=1.5)
        with pytest.raises(ValueError):
            BackboneParams(kind="mlp")


class TestSerialization:
    @pytest.mark.parametrize("kind", ["boosted_trees", "linear"])
    def test_round_trip_is_bit_exact(self, rng, tmp_path, kind):
        train = iid_samples(rng, n=600, horizon=3)
        params = BackboneParams(kind=kind, n_trees=10, max_depth=3, seed=4)
        model = train_quantile_model(train, 0.35, params)
        path = tmp_path / "model.json"
        save_model(model, str(path))
        back = load_model(str(path))
        X = rng.uniform(0, 1, size=(50, train.X.shape[1]))
        assert np.array_equal(model.predict(X, train.layout), back.predict(X, train.layout))
        assert back.feature_layout == model.feature_layout
        assert back.tau == model.tau
        assert back.params == model.params

    def test_rejects_foreign_files(self, tmp_path):
        path = tmp_path / "junk.json"
        path.write_text('{"something": 1}')
        with pytest.raises(ValueError):
            load_model(str(path))
