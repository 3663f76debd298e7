import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npos.exceptions import BadMagic, DimMismatch, NonFiniteLoss, TruncatedFile, ZeroVector
from npos.model import (
    Model,
    Prototypes,
    cosine_logits,
    decode_model,
    encode_model,
    grad_check,
    init_mlp,
    load_model,
    mlp_backward,
    mlp_forward,
    prototype_ema_update,
    save_model,
)


class TestMlp:
    def test_identity_on_nonnegative_input(self):
        params = [[np.eye(3), np.zeros(3)], [np.eye(3), np.zeros(3)]]
        x = np.array([0.0, 1.5, 2.0])
        assert np.array_equal(mlp_forward(params, x)[0], x)

    def test_constant_network(self):
        b = np.array([-1.0, 2.0])
        params = [[np.zeros((3, 2)), b], [np.ones((2, 1)), np.zeros(1)]]
        out, _ = mlp_forward(params, np.array([5.0, -3.0, 1.0]))
        assert out.tolist() == [2.0]

    def test_matches_matmul_oracle(self, rng):
        params = init_mlp([4, 7, 3], rng)
        x = rng.standard_normal((5, 4))
        (W0, b0), (W1, b1) = params
        hidden = np.array([[max(0.0, sum(xi[a] * W0[a, j] for a in range(4)) + b0[j]) for j in range(7)] for xi in x])
        oracle = np.array([[sum(h[a] * W1[a, j] for a in range(7)) + b1[j] for j in range(3)] for h in hidden])
        np.testing.assert_allclose(mlp_forward(params, x)[0], oracle, atol=1e-6)

    def test_dim_mismatch(self, rng):
        with pytest.raises(DimMismatch):
            mlp_forward(init_mlp([4, 2], rng), np.ones(3))

    def test_init_bounds(self, rng):
        (W, b), = init_mlp([25, 10], rng)
        assert np.all(np.abs(W) <= 0.2) and np.all(np.abs(b) <= 0.2)

    def test_backward_against_finite_differences(self, rng):
        params = init_mlp([3, 8, 2], rng)
        x = rng.standard_normal((6, 3))
        g = rng.standard_normal((6, 2))

        def loss(flat):
            layers = [[flat[0], flat[1]], [flat[2], flat[3]]]
            out, cache = mlp_forward(layers, flat[4])
            grads, gx = mlp_backward(layers, cache, g)
            return float(np.sum(out * g)), [grads[0][0], grads[0][1], grads[1][0], grads[1][1], gx]

        assert grad_check(loss, [params[0][0], params[0][1], params[1][0], params[1][1], x]) < 1e-6


class TestCosineLogits:
    def test_self_similarity(self):
        mu = np.array([[0.6, 0.8], [1.0, 0.0]])
        assert cosine_logits(mu[0], mu)[0] == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_logits([0.0, 3.0], [[1.0, 0.0]])[0] == 0.0

    def test_45_degrees(self):
        f = cosine_logits(np.array([1.0, 1.0]) / np.sqrt(2), np.eye(2))
        np.testing.assert_allclose(f, [np.sqrt(2) / 2] * 2, rtol=1e-12)

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            cosine_logits([0.0, 0.0], np.eye(2))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, s_z, s_mu):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(5)
        mu = rng.standard_normal((3, 5))
        f = cosine_logits(z, mu)
        assert np.all((f >= -1) & (f <= 1))
        np.testing.assert_allclose(cosine_logits(s_z * z, s_mu * mu), f, atol=1e-12)


class TestArgmaxInvariance:
    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=10), st.floats(1e-6, 1e6))
    def test_positive_scale(self, f, s):
        f = np.array(f)
        assert np.argmax(f / s) == np.argmax(f)


class TestEma:
    def test_hand_value(self):
        p = Prototypes(np.array([[1.0, 0.0]]), gamma=0.95)
        prototype_ema_update(p, np.array([[0.0, 1.0]]), [0])
        np.testing.assert_allclose(p.mu[0], [0.99862, 0.05256], atol=5e-6)
        expected = np.array([0.95, 0.05]) / np.hypot(0.95, 0.05)
        np.testing.assert_allclose(p.mu[0], expected, rtol=1e-15)

    def test_gamma_one_is_noop(self):
        p = Prototypes(np.array([[1.0, 0.0]]), gamma=1.0)
        prototype_ema_update(p, np.array([[0.0, 1.0]]), [0])
        assert p.mu.tolist() == [[1.0, 0.0]]

    def test_gamma_zero_replaces(self):
        p = Prototypes(np.array([[1.0, 0.0]]), gamma=0.0)
        prototype_ema_update(p, np.array([[0.6, 0.8]]), [0])
        np.testing.assert_allclose(p.mu[0], [0.6, 0.8])

    def test_fixed_mode(self):
        p = Prototypes(np.array([[1.0, 0.0]]), gamma=0.5, mode="fixed")
        prototype_ema_update(p, np.array([[0.0, 1.0]]), [0])
        assert p.mu.tolist() == [[1.0, 0.0]]

    def test_antipodal(self):
        p = Prototypes(np.array([[1.0, 0.0]]), gamma=0.5)
        with pytest.raises(ZeroVector):
            prototype_ema_update(p, np.array([[-1.0, 0.0]]), [0])

    def test_order_matters(self):
        z = np.array([[0.0, 1.0], [0.6, 0.8]])
        a = prototype_ema_update(Prototypes(np.array([[1.0, 0.0]]), 0.5), z, [0, 0])
        b = prototype_ema_update(Prototypes(np.array([[1.0, 0.0]]), 0.5), z[::-1], [0, 0])
        assert not np.allclose(a.mu, b.mu)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 0.999))
    def test_rows_stay_unit(self, seed, gamma):
        rng = np.random.default_rng(seed)
        p = Prototypes.random(3, 4, rng, gamma)
        Z = rng.standard_normal((200, 4))
        Z /= np.linalg.norm(Z, axis=1, keepdims=True)
        prototype_ema_update(p, Z, rng.integers(0, 3, 200))
        np.testing.assert_allclose(np.linalg.norm(p.mu, axis=1), 1.0, atol=1e-6)


class TestGradCheck:
    def test_linear_loss(self, rng):
        x = rng.standard_normal(6)
        w = rng.standard_normal(6)
        assert grad_check(lambda p: (float(p[0] @ x), [x]), [w]) <= 1e-10

    def test_detects_wrong_gradient(self, rng):
        w = rng.standard_normal(3)
        assert grad_check(lambda p: (float(p[0] @ p[0]), [p[0]]), [w]) > 0.1

    def test_non_finite(self):
        with pytest.raises(NonFiniteLoss):
            grad_check(lambda p: (float("nan"), [np.zeros(1)]), [np.zeros(1)])

    def test_params_restored(self, rng):
        w = rng.standard_normal(4)
        before = w.copy()
        grad_check(lambda p: (float(np.sum(p[0] ** 3)), [3 * p[0] ** 2]), [w])
        assert np.array_equal(w, before)


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        model = Model.init(3, 4, rng, hidden_dim=5, embed_dim=6, tau=0.2, gamma=0.9, logit_norm=False)
        save_model(model, tmp_path / "m.bin")
        back = load_model(tmp_path / "m.bin")
        assert encode_model(back) == encode_model(model)
        assert (back.tau, back.prototypes.gamma, back.logit_norm) == (0.2, 0.9, False)
        x = rng.standard_normal((4, 3))
        assert np.array_equal(back.logits(x), model.logits(x))

    def test_record_names(self, rng):
        buf = encode_model(Model.init(2, 3, rng))
        for name in (b"enc.w0", b"enc.b1", b"phi.w1", b"proto", b"tau", b"gamma", b"logit_norm"):
            assert name in buf

    def test_truncated(self, rng):
        buf = encode_model(Model.init(2, 3, rng))
        with pytest.raises(TruncatedFile):
            decode_model(buf[:-5])

    def test_embedding_file_is_not_a_model(self):
        from npos.data import EmbeddingSet, encode_embeddings

        with pytest.raises(BadMagic):
            decode_model(encode_embeddings(EmbeddingSet(np.ones((1, 2)))))


class TestModel:
    def test_shapes(self, rng):
        m = Model.init(2, 3, rng, hidden_dim=8, embed_dim=4)
        x = rng.standard_normal((5, 2))
        assert m.encode(x).shape == (5, 4)
        np.testing.assert_allclose(np.linalg.norm(m.embed(x), axis=1), 1.0)
        assert m.logits(x).shape == (5, 3) and m.predict(x).shape == (5,)
        assert m.phi_logit(m.embed(x)).shape == (5,)
        assert len(m.params()) == 8

    def test_copy_is_deep(self, rng):
        m = Model.init(2, 3, rng)
        c = m.copy()
        c.encoder[0][0] += 1.0
        c.prototypes.mu[0] = 0.0
        assert not np.array_equal(c.encoder[0][0], m.encoder[0][0])
        assert np.all(np.linalg.norm(m.prototypes.mu, axis=1) > 0.5)
