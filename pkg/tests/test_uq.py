import numpy as np
import pytest

from cftruth.model import MVEConfig, ModelParams, RegressorConfig, TrainConfig, init_params, predict_batch
from cftruth.molgraph import morgan_fingerprint, parse_smiles, tanimoto_distance
from cftruth.oracle import generate_dataset
from cftruth.uq import (
    EstimatorKind,
    FittedEstimator,
    SwagPosterior,
    UncertainPrediction,
    combine_de_mve,
    fit,
    load_estimator,
    nearest_distances,
    save_estimator,
    trust_score_classification,
)

RC = RegressorConfig("gin", layers=1, hidden_dim=4)
TC = TrainConfig(epochs=4, batch_size=16, mve=MVEConfig(0.5, 2))


@pytest.fixture(scope="module")
def data():
    return generate_dataset(60, 8, np.random.default_rng(0))


@pytest.fixture(scope="module")
def train_set(data):
    return data[:40]


@pytest.fixture(scope="module")
def queries(data):
    return [s.graph for s in data[40:]]


@pytest.fixture(scope="module")
def fitted(train_set):
    kinds = {
        "de": EstimatorKind("de"),
        "de_mve": EstimatorKind("de_mve"),
        "mve": EstimatorKind("mve"),
        "swag": EstimatorKind("swag", swag_window=3, swag_samples=5),
        "ts_tanimoto": EstimatorKind("ts_tanimoto"),
        "ts_euclidean": EstimatorKind("ts_euclidean"),
        "random": EstimatorKind("random"),
    }
    return {k: fit(kind, train_set, RC, TC, np.random.default_rng(1)) for k, kind in kinds.items()}


def test_kind_validation():
    with pytest.raises(ValueError):
        EstimatorKind("mc_dropout")
    with pytest.raises(ValueError):
        EstimatorKind("de", ensemble_size=1)


def test_swag_window_longer_than_training(train_set):
    with pytest.raises(ValueError):
        fit(EstimatorKind("swag", swag_window=10), train_set, RC, TC, np.random.default_rng(0))


def test_empty_train_set():
    with pytest.raises(ValueError):
        fit(EstimatorKind("de"), [], RC, TC, np.random.default_rng(0))


class TestEnsembles:
    def test_members_differ(self, fitted):
        members = fitted["de"].members
        assert len(members) == 3
        assert all(not np.array_equal(a.theta, b.theta) for a, b in zip(members, members[1:]))

    def test_mean_and_population_variance(self, fitted, queries):
        est = fitted["de"]
        ys = np.stack([predict_batch(m, queries)[0] for m in est.members])
        y_hat, s2 = est.predict_many(queries)
        np.testing.assert_allclose(y_hat, ys.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(s2, ys.var(axis=0), atol=1e-12)

    def test_identical_members_zero_variance(self, queries):
        p = init_params(RC, np.random.default_rng(3))
        est = FittedEstimator(EstimatorKind("de"), (p, p, p))
        assert np.all(est.predict_many(queries)[1] == 0.0)

    def test_combination_formula(self):
        assert combine_de_mve(0.2, np.array([[0.3], [0.4], [0.5]]))[0] == pytest.approx(0.3)

    def test_de_mve_uses_combination(self, fitted, queries):
        est = fitted["de_mve"]
        outs = [predict_batch(m, queries) for m in est.members]
        ys = np.stack([o[0] for o in outs])
        expected = 0.5 * (ys.var(axis=0) + np.mean([o[1] for o in outs], axis=0))
        np.testing.assert_allclose(est.predict_many(queries)[1], expected, atol=1e-12)

    def test_mve_single_model(self, fitted, queries):
        est = fitted["mve"]
        assert len(est.members) == 1 and est.members[0].config.mve
        assert np.all(est.predict_many(queries)[1] > 0)


class TestSwag:
    def test_snapshot_count(self, fitted):
        assert fitted["swag"].swag.rank == 3

    def test_zero_covariance(self, queries):
        theta = init_params(RC, np.random.default_rng(4)).theta
        post = SwagPosterior.from_snapshots(np.stack([theta, theta, theta]))
        samples = post.sample(np.random.default_rng(0), 4)
        np.testing.assert_array_equal(samples, np.tile(theta, (4, 1)))
        est = FittedEstimator(EstimatorKind("swag", swag_samples=4), (ModelParams(RC, theta),), swag=post)
        y_hat, s2 = est.predict_many(queries)
        np.testing.assert_allclose(s2, 0.0, atol=1e-24)
        np.testing.assert_allclose(y_hat, predict_batch(ModelParams(RC, theta), queries)[0], atol=1e-12)

    def test_sample_moments(self):
        rng = np.random.default_rng(5)
        snaps = rng.normal(size=(6, 3))
        post = SwagPosterior.from_snapshots(snaps)
        draws = post.sample(np.random.default_rng(6), 200_000)
        # diagonal half plus low-rank half of the snapshot covariance
        expected = 0.5 * np.diag(post.diag) + 0.5 * (post.deviations.T @ post.deviations) / (post.rank - 1)
        np.testing.assert_allclose(np.cov(draws.T), expected, atol=0.02)
        np.testing.assert_allclose(draws.mean(axis=0), snaps.mean(axis=0), atol=0.01)

    def test_deterministic_predictions(self, fitted, queries):
        a = fitted["swag"].predict_many(queries)
        b = fitted["swag"].predict_many(queries)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_negative_diagonal_rejected(self):
        with pytest.raises(ValueError):
            SwagPosterior(np.zeros(2), np.array([1.0, -1.0]), np.zeros((2, 2)))


class TestTrustScores:
    def test_reference_sizes(self, fitted, train_set):
        assert fitted["ts_tanimoto"].reference.shape[0] == len(train_set)
        assert fitted["ts_euclidean"].reference.shape == (len(train_set), RC.hidden_dim)

    @pytest.mark.parametrize("name", ["ts_tanimoto", "ts_euclidean"])
    def test_training_element_has_zero_uncertainty(self, fitted, train_set, name):
        _, s2 = fitted[name].predict_many([s.graph for s in train_set[:5]])
        np.testing.assert_array_equal(s2, 0.0)

    def test_tanimoto_matches_brute_force(self, fitted, train_set, queries):
        _, s2 = fitted["ts_tanimoto"].predict_many(queries)
        ref = [morgan_fingerprint(s.graph) for s in train_set]
        brute = [min(tanimoto_distance(morgan_fingerprint(q), r) for r in ref) for q in queries]
        np.testing.assert_allclose(s2, brute, atol=1e-12)

    def test_euclidean_matches_brute_force(self, fitted, train_set, queries):
        est = fitted["ts_euclidean"]
        _, s2 = est.predict_many(queries)
        ref = predict_batch(est.base, [s.graph for s in train_set])[2]
        emb = predict_batch(est.base, queries)[2]
        brute = [min(np.linalg.norm(e - r) for r in ref) for e in emb]
        np.testing.assert_allclose(s2, brute, atol=1e-6)
        assert list(np.argsort(s2, kind="stable")) == list(np.argsort(brute, kind="stable"))

    def test_nearest_distances_all_pairs(self):
        rng = np.random.default_rng(8)
        q, r = rng.normal(size=(200, 5)), rng.normal(size=(150, 5))
        brute = [min(np.linalg.norm(a - b) for b in r) for a in q]
        np.testing.assert_allclose(nearest_distances(q, r, "euclidean"), brute, atol=1e-9)


class TestRandomBaseline:
    def test_range_and_seeded(self, fitted, queries):
        est = fitted["random"]
        _, s2 = est.predict_many(queries)
        assert np.all((s2 >= 0) & (s2 < 1))
        again = FittedEstimator(est.kind, est.members, seed=est.seed)
        np.testing.assert_array_equal(again.predict_many(queries)[1], s2)

    def test_shares_base_model(self, train_set):
        base = init_params(RC, np.random.default_rng(9))
        est = fit(EstimatorKind("random"), train_set, RC, TC, np.random.default_rng(0), base=base)
        assert est.base is base


def test_single_prediction_type(fitted, queries):
    p = fitted["de"].predict(queries[0])
    assert isinstance(p, UncertainPrediction) and p.sigma2_calibrated is None
    with pytest.raises(ValueError):
        UncertainPrediction(0.0, -1.0)


class TestTrustScoreClassification:
    dist = staticmethod(lambda a, b: abs(a - b))

    def test_examples(self):
        assert trust_score_classification(0.0, [1.0], [2.0], self.dist) == 0.5
        assert trust_score_classification(0.0, [0.0, 3.0], [2.0], self.dist) == 0.0
        assert trust_score_classification(0.0, [1.0], [-1.0], self.dist) == 1.0

    def test_zero_denominator(self):
        with pytest.warns(RuntimeWarning):
            assert trust_score_classification(0.0, [1.0], [0.0], self.dist) == float("inf")

    def test_empty_sets(self):
        with pytest.raises(ValueError):
            trust_score_classification(0.0, [], [1.0], self.dist)


@pytest.mark.parametrize("name", ["de_mve", "swag", "ts_tanimoto", "ts_euclidean", "random"])
def test_checkpoint_round_trip(fitted, queries, tmp_path, name):
    est = fitted[name]
    save_estimator(est, tmp_path / name)
    back = load_estimator(tmp_path / name)
    assert back.kind == est.kind
    assert all(a == b for a, b in zip(back.members, est.members))
    fresh = FittedEstimator(est.kind, est.members, est.swag, est.reference, est.seed)
    a, b = back.predict_many(queries), fresh.predict_many(queries)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
