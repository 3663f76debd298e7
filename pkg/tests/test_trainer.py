import math

import numpy as np
import pytest
from conftest import small_config

from npos.exceptions import BadValue, NonFiniteGradient, UnknownKey
from npos.model import Model, encode_model
from npos.synth import SynthesisConfig
from npos.trainer import (
    TrainConfig,
    cosine_lr,
    format_config,
    holdout_split,
    parse_config,
    sgd_step,
    train,
)


class TestSgd:
    def test_vanilla_step(self):
        p, g = np.array([1.0, 2.0]), np.array([0.5, -1.0])
        sgd_step([p], [g], 0.1, 0.0, 0.0, [np.zeros(2)])
        assert p.tolist() == [1.0 - 0.05, 2.0 + 0.1]

    def test_fixed_point(self):
        p = np.array([3.0])
        sgd_step([p], [np.zeros(1)], 0.7, 0.9, 0.0, [np.zeros(1)])
        assert p.tolist() == [3.0]

    def test_momentum_recurrence(self):
        p, g, v = np.zeros(2), np.array([1.0, -2.0]), [np.zeros(2)]
        for _ in range(2):
            sgd_step([p], [g], 1.0, 0.9, 0.0, v)
        np.testing.assert_allclose(p, -2.9 * g, rtol=1e-15)

    def test_weight_decay(self):
        p = np.array([2.0])
        sgd_step([p], [np.zeros(1)], 0.5, 0.0, 0.1, [np.zeros(1)])
        assert p.tolist() == [2.0 - 0.5 * 0.2]

    def test_non_finite(self):
        with pytest.raises(NonFiniteGradient):
            sgd_step([np.zeros(1)], [np.array([np.inf])], 0.1, 0.9, 0.0, [np.zeros(1)])


class TestCosineLr:
    def test_start(self):
        assert cosine_lr(0, 500, 0.5) == 0.5

    def test_middle(self):
        assert cosine_lr(250, 500, 0.5) == pytest.approx(0.25, rel=1e-15)

    def test_last_epoch(self):
        value = cosine_lr(499, 500, 0.5)
        assert value == pytest.approx(0.25 * (1 + math.cos(499 * math.pi / 500)), rel=1e-12)
        assert value == pytest.approx(4.93e-6, rel=1e-3)


class TestConfig:
    def test_empty_file_gives_defaults(self):
        cfg = parse_config("")
        s = cfg.synthesis
        assert (s.k, s.m, s.sigma2, s.p) == (300, 200, 0.1, 1000)
        assert (cfg.alpha, cfg.gamma, cfg.tau, cfg.queue_capacity) == (0.1, 0.95, 0.1, 600)
        assert (cfg.epochs, cfg.batch_size, cfg.momentum, cfg.weight_decay) == (500, 256, 0.9, 1e-4)
        assert (cfg.lr_closed, cfg.lr_open, cfg.lr_schedule, cfg.warmup_epochs) == (0.5, 0.05, "cosine", 200)

    def test_single_override(self):
        cfg = parse_config("alpha = 0.1\n")
        assert cfg == TrainConfig()

    def test_comments_and_overrides(self):
        cfg = parse_config("# header\nepochs = 7  # short\n\nsigma2 = 0.5\nlogit_norm = false\n")
        assert (cfg.epochs, cfg.synthesis.sigma2, cfg.logit_norm) == (7, 0.5, False)

    def test_bad_value_reports_line(self):
        with pytest.raises(BadValue) as info:
            parse_config("k = 10\nsigma2 = banana\n")
        assert info.value.line == 2

    def test_unknown_key(self):
        with pytest.raises(UnknownKey):
            parse_config("learning_rate = 0.1\n")

    def test_missing_equals(self):
        with pytest.raises(BadValue):
            parse_config("epochs 5\n")

    def test_format_round_trip(self):
        cfg = TrainConfig(epochs=9, alpha=0.25, synthesis=SynthesisConfig(k=7, density_mode="class-agnostic"))
        assert parse_config(format_config(cfg)) == cfg

    @pytest.mark.parametrize("bad", [
        dict(epochs=10, warmup_epochs=10), dict(lr_closed=0.0), dict(tau=-1.0), dict(alpha=-0.1),
        dict(gamma=1.5), dict(lr_schedule="step"), dict(holdout_fraction=1.0), dict(batch_size=0),
        dict(queue_capacity=100),
    ])
    def test_invalid(self, bad):
        with pytest.raises(BadValue):
            TrainConfig(**bad).validate()


class TestHoldout:
    def test_partition(self):
        tr, ho = holdout_split(100, 0.1, 3)
        assert ho.size == 10 and tr.size == 90
        assert sorted(np.concatenate([tr, ho]).tolist()) == list(range(100))

    def test_seeded(self):
        assert np.array_equal(holdout_split(50, 0.2, 1)[1], holdout_split(50, 0.2, 1)[1])


class TestTrain:
    def test_zero_epochs(self, toy_data):
        cfg = TrainConfig(epochs=0)
        model, hist = train(toy_data[0], cfg=cfg)
        fresh = Model.init(2, 3, np.random.default_rng([cfg.seed, 0]))
        assert encode_model(model) == encode_model(fresh)
        assert len(hist) == 0

    def test_history(self, toy_data):
        cfg = small_config()
        _, hist = train(toy_data[0], cfg=cfg)
        assert len(hist) == cfg.epochs
        assert np.all(hist.column("r_open")[:cfg.warmup_epochs] == 0.0)
        assert np.all(hist.column("n_outliers")[:cfg.warmup_epochs] == 0)
        assert np.all(hist.column("r_open")[cfg.warmup_epochs:] > 0.0)
        assert np.all(hist.column("n_outliers")[cfg.warmup_epochs:] > 0)
        lines = hist.to_csv().splitlines()
        assert lines[0] == "epoch,r_closed,r_open,lr,n_outliers,id_acc" and len(lines) == cfg.epochs + 1

    def test_reproducible(self, toy_data):
        a, ha = train(toy_data[0], cfg=small_config())
        b, hb = train(toy_data[0], cfg=small_config())
        assert encode_model(a) == encode_model(b)
        assert ha.to_csv() == hb.to_csv()

    def test_seed_changes_result(self, toy_data):
        a, _ = train(toy_data[0], cfg=small_config(seed=1))
        b, _ = train(toy_data[0], cfg=small_config(seed=2))
        assert encode_model(a) != encode_model(b)

    def test_alpha_zero_matches_disabled_synthesis(self, toy_data):
        cfg = small_config(alpha=0.0, warmup_epochs=3)
        a, _ = train(toy_data[0], cfg=cfg)
        b, _ = train(toy_data[0], cfg=cfg, enable_synthesis=False)
        assert encode_model(a) == encode_model(b)

    def test_synthesis_changes_training(self, toy_data):
        a, _ = train(toy_data[0], cfg=small_config())
        b, _ = train(toy_data[0], cfg=small_config(), enable_synthesis=False)
        assert encode_model(a) != encode_model(b)

    def test_queues_hold_latest_encodings(self, toy_data):
        cfg = small_config(epochs=2, warmup_epochs=1, holdout_fraction=0.0, batch_size=1000)
        seen = {}

        def grab(epoch, model, queues):
            seen[epoch] = (model.copy(), [q.as_array() for q in queues])

        train(toy_data[0], cfg=cfg, callback=grab)
        # one full-batch step per epoch, so epoch 1 encodes with the model left by epoch 0
        X, y = toy_data[0].data.astype(np.float64), toy_data[0].labels
        shuffle = np.random.default_rng([cfg.seed, 2])
        shuffle.permutation(len(y))
        order = shuffle.permutation(len(y))
        Z = seen[0][0].embed(X[order])
        for c, q in enumerate(seen[1][1]):
            expected = Z[y[order] == c][-cfg.queue_capacity:]
            np.testing.assert_allclose(q, expected, rtol=0, atol=1e-12)

    def test_prototypes_not_decayed(self, toy_data):
        model, _ = train(toy_data[0], cfg=small_config(weight_decay=0.5))
        # prototypes are not SGD parameters, so weight decay cannot reach them
        assert not any(np.shares_memory(p, model.prototypes.mu) for p in model.params())
        np.testing.assert_allclose(np.linalg.norm(model.prototypes.mu, axis=1), 1.0, atol=1e-12)

    def test_skips_synthesis_when_queues_short(self, toy_data):
        cfg = small_config(queue_capacity=15, k=20, m=10)
        _, hist = train(toy_data[0], cfg=cfg)
        assert np.all(hist.column("n_outliers") == 0)

    def test_closed_loss_descends(self):
        from npos.data import SyntheticSpec, gen_synthetic

        for seed in range(3):
            train_set, _, _ = gen_synthetic(SyntheticSpec(n_per_class=200, seed=seed))
            _, hist = train(train_set, cfg=small_config(epochs=11, warmup_epochs=10, seed=seed))
            rc = hist.column("r_closed")
            assert rc[10] < rc[0]

    def test_plain_arrays(self, toy_data):
        model, _ = train(toy_data[0].data, toy_data[0].labels, cfg=small_config(epochs=1, warmup_epochs=0))
        assert model.n_classes == 3
