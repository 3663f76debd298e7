"""scikit-learn estimators wrapping the training loop and the scores."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import l2_normalize
from .knn import CLASS_AGNOSTIC, KnnParams, knn_distances_batch
from .metrics import choose_threshold, npos_score
from .synth import SynthesisConfig
from .trainer import TrainConfig, train

_SYNTH_PARAMS = ("k", "m", "p", "sigma2", "accept_per_boundary", "filter_mode", "beta_quantile",
                 "density_mode", "renormalize_candidates")


class NPOSClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Prototype classifier trained with non-parametric outlier synthesis.

    Hyperparameter defaults follow the CIFAR from-scratch configuration.
    After fitting, ``score_samples`` returns the ID score (higher is more
    in-distribution) and ``predict_ood`` flags inputs scoring below
    ``threshold_``, the level that keeps ``tpr`` of the training data.

    Attributes
    ----------
    classes_ : ndarray
    model_ : npos.model.Model
    history_ : npos.trainer.TrainHistory
    threshold_ : float
    """

    def __init__(self, epochs=500, batch_size=256, lr_closed=0.5, lr_open=0.05, momentum=0.9,
                 weight_decay=1e-4, lr_schedule="cosine", alpha=0.1, warmup_epochs=200, tau=0.1,
                 gamma=0.95, queue_capacity=600, k=300, m=200, p=1000, sigma2=0.1,
                 accept_per_boundary=1, filter_mode="select-top", beta_quantile=0.95,
                 density_mode="class-conditional", renormalize_candidates=False, logit_norm=True,
                 hidden_dim=64, embed_dim=16, synth_every=1, holdout_fraction=0.1, tpr=0.95,
                 random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_closed = lr_closed
        self.lr_open = lr_open
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.alpha = alpha
        self.warmup_epochs = warmup_epochs
        self.tau = tau
        self.gamma = gamma
        self.queue_capacity = queue_capacity
        self.k = k
        self.m = m
        self.p = p
        self.sigma2 = sigma2
        self.accept_per_boundary = accept_per_boundary
        self.filter_mode = filter_mode
        self.beta_quantile = beta_quantile
        self.density_mode = density_mode
        self.renormalize_candidates = renormalize_candidates
        self.logit_norm = logit_norm
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.synth_every = synth_every
        self.holdout_fraction = holdout_fraction
        self.tpr = tpr
        self.random_state = random_state

    def to_config(self) -> TrainConfig:
        params = self.get_params()
        synth = SynthesisConfig(**{name: params.pop(name) for name in _SYNTH_PARAMS})
        params.pop("tpr")
        seed = params.pop("random_state")
        return TrainConfig(synthesis=synth, seed=int(seed or 0), **params)

    @classmethod
    def from_config(cls, cfg: TrainConfig, **extra):
        params = {name: getattr(cfg.synthesis, name) for name in _SYNTH_PARAMS}
        for name in cls._get_param_names():
            if hasattr(cfg, name):
                params[name] = getattr(cfg, name)
        params["random_state"] = cfg.seed
        params.update(extra)
        return cls(**params)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self._label_encoder = LabelEncoder().fit(y)
        self.classes_ = self._label_encoder.classes_
        self.n_features_in_ = X.shape[1]
        self.model_, self.history_ = train(X, self._label_encoder.transform(y), self.to_config())
        self.threshold_ = choose_threshold(self.score_samples(X), self.tpr)
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        """Unit-norm embeddings."""
        X = self._check(X)
        return self.model_.embed(X)

    def decision_function(self, X):
        """Cosine logits against the class prototypes."""
        X = self._check(X)
        return self.model_.logits(X)

    def predict_proba(self, X):
        S = self.decision_function(X) / self.model_.tau
        S -= S.max(axis=1, keepdims=True)
        E = np.exp(S)
        return E / E.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def score_samples(self, X):
        X = self._check(X)
        return npos_score(self.model_, self.model_.encode(X))

    def predict_ood(self, X):
        """Boolean mask, ``True`` where the score falls below ``threshold_``."""
        return self.score_samples(X) < self.threshold_


class KNNScorer(BaseEstimator):
    """Negative k-NN distance to the (normalized) training set; higher is more ID."""

    def __init__(self, k=50, normalize=True, tpr=0.95):
        self.k = k
        self.normalize = normalize
        self.tpr = tpr

    def _prep(self, X):
        X = check_array(X, dtype=np.float64)
        return l2_normalize(X) if self.normalize else X

    def fit(self, X, y=None):
        self.train_ = self._prep(X)
        self.n_features_in_ = self.train_.shape[1]
        d = knn_distances_batch(None, self.train_, KnnParams(self.k, CLASS_AGNOSTIC, exclude_self=True))
        self.threshold_ = choose_threshold(-d, self.tpr)
        return self

    def score_samples(self, X):
        check_is_fitted(self, "train_")
        return -knn_distances_batch(self._prep(X), self.train_, KnnParams(self.k, CLASS_AGNOSTIC))

    def predict_ood(self, X):
        return self.score_samples(X) < self.threshold_
