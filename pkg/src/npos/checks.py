"""Finite-difference checks of the loss gradients on random toy problems."""

from __future__ import annotations

import numpy as np

from .data import l2_normalize
from .losses import r_closed, r_open
from .model import PHI_HIDDEN, grad_check, init_mlp

KINK_MARGIN = 1e-3


def _min_preactivation(phi, X):
    """Smallest |pre-activation| of any hidden unit; small values sit near a ReLU kink."""
    a = X
    worst = np.inf
    for W, b in phi[:-1]:
        a = a @ W + b
        worst = min(worst, float(np.min(np.abs(a))))
        a = np.maximum(a, 0.0)
    return worst


def check_r_closed(seed, epsilon=1e-5, n=8, d=5, n_classes=3, logit_norm=True):
    rng = np.random.default_rng([seed, 10])
    H = rng.standard_normal((n, d))
    labels = rng.integers(0, n_classes, size=n)
    mu = l2_normalize(rng.standard_normal((n_classes, d)))

    def loss(params):
        out = r_closed(params[0], labels, mu, tau=0.1, logit_norm=logit_norm)
        return out.value, [out.grads["z"]]

    return grad_check(loss, [H], epsilon)


def check_r_open(seed, epsilon=1e-5, n_out=6, n_id=7, d=4):
    """Check every head parameter and both input matrices."""
    rng = np.random.default_rng([seed, 11])
    while True:
        phi = init_mlp([d, PHI_HIDDEN, 1], rng)
        V = rng.standard_normal((n_out, d))
        Z = l2_normalize(rng.standard_normal((n_id, d)))
        if _min_preactivation(phi, np.vstack([V, Z])) > KINK_MARGIN:
            break
    params = [a for layer in phi for a in layer] + [V, Z]

    def loss(flat):
        layers = [[flat[2 * i], flat[2 * i + 1]] for i in range(len(phi))]
        out = r_open(layers, flat[-2], flat[-1])
        grads = [g for layer in out.grads["phi"] for g in layer]
        return out.value, grads + [out.grads["outliers"], out.grads["id"]]

    return grad_check(loss, params, epsilon)


def run_gradchecks(seed=0, epsilon=1e-5):
    """Max relative error per loss, keyed by name."""
    return {
        "r_closed": check_r_closed(seed, epsilon),
        "r_closed_plain": check_r_closed(seed, epsilon, logit_norm=False),
        "r_open": check_r_open(seed, epsilon),
    }
