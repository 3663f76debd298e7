import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from npos.estimator import KNNScorer, NPOSClassifier
from npos.trainer import TrainConfig

FAST = dict(epochs=4, warmup_epochs=2, queue_capacity=60, batch_size=64, k=20, m=10, p=50)


@pytest.fixture(scope="module")
def fitted(toy_data):
    train, _, _ = toy_data
    X, y = train.data.astype(np.float64), np.array(["a", "b", "c"])[train.labels]
    return NPOSClassifier(**FAST).fit(X, y), X, y


class TestParams:
    def test_defaults_match_train_config(self):
        assert NPOSClassifier().to_config() == TrainConfig()

    def test_get_set_params(self):
        est = NPOSClassifier()
        est.set_params(alpha=0.3, sigma2=0.5)
        params = est.get_params()
        assert params["alpha"] == 0.3 and params["sigma2"] == 0.5
        cfg = est.to_config()
        assert cfg.alpha == 0.3 and cfg.synthesis.sigma2 == 0.5

    def test_from_config_round_trip(self):
        cfg = TrainConfig(epochs=3, seed=9)
        assert NPOSClassifier.from_config(cfg).to_config() == cfg

    def test_clone(self):
        est = NPOSClassifier(**FAST)
        assert clone(est).get_params() == est.get_params()


class TestClassifier:
    def test_predicts_original_labels(self, fitted):
        est, X, y = fitted
        pred = est.predict(X)
        assert set(pred) <= {"a", "b", "c"}
        assert est.score(X, y) > 0.9

    def test_shapes(self, fitted):
        est, X, _ = fitted
        proba = est.predict_proba(X[:5])
        np.testing.assert_allclose(proba.sum(1), 1.0)
        assert est.decision_function(X[:5]).shape == (5, 3)
        np.testing.assert_allclose(np.linalg.norm(est.transform(X[:5]), axis=1), 1.0)

    def test_score_is_max_probability(self, fitted):
        est, X, _ = fitted
        np.testing.assert_allclose(est.score_samples(X[:10]), est.predict_proba(X[:10]).max(1), rtol=1e-12)

    def test_threshold_keeps_training_tpr(self, fitted):
        est, X, _ = fitted
        assert np.mean(~est.predict_ood(X)) >= est.tpr

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            NPOSClassifier().predict(np.zeros((1, 2)))

    def test_feature_count_checked(self, fitted):
        with pytest.raises(ValueError):
            fitted[0].predict(np.zeros((2, 5)))

    def test_rejects_nan(self, toy_data):
        X = toy_data[0].data.astype(np.float64).copy()
        X[0, 0] = np.nan
        with pytest.raises(ValueError):
            NPOSClassifier(**FAST).fit(X, toy_data[0].labels)

    def test_pipeline(self, toy_data):
        train, test, _ = toy_data
        pipe = make_pipeline(StandardScaler(), NPOSClassifier(**FAST))
        pipe.fit(train.data, train.labels)
        assert pipe.predict(test.data).shape == (test.n,)


class TestKNNScorer:
    def test_far_points_flagged(self, toy_data):
        train, test, ood = toy_data
        scorer = KNNScorer(k=10, normalize=False).fit(train.data)
        assert np.mean(scorer.predict_ood(ood.data)) > np.mean(scorer.predict_ood(test.data))

    def test_scores_are_negative_distances(self, rng):
        X = rng.standard_normal((30, 3))
        s = KNNScorer(k=1, normalize=False).fit(X).score_samples(X[:4])
        assert np.all(s == 0.0)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            KNNScorer().score_samples(np.zeros((1, 2)))
