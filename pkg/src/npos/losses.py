"""Level-set loss on the binary head and prototype cross-entropy, with exact gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimMismatch, EmptySet, LabelOutOfRange, ZeroLogitNorm, ZeroVector
from .model import Prototypes, mlp_backward, mlp_forward


@dataclass
class LossOutput:
    value: float
    grads: dict = field(default_factory=dict)


def softplus(a):
    return np.logaddexp(0.0, a)


def sigmoid(a):
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _sum_layers(a, b):
    return [[ga[0] + gb[0], ga[1] + gb[1]] for ga, gb in zip(a, b)]


def r_open(phi, outliers, id_embeddings):
    """Binary cross-entropy separating synthesized outliers from ID embeddings.

    The head output is an ID logit: outliers contribute ``softplus(phi(v))``
    and ID points ``softplus(-phi(z))``, each averaged over its own set.

    ``grads`` holds ``"phi"`` (per-layer ``[dW, db]``), ``"outliers"`` and
    ``"id"`` (gradients w.r.t. the two input matrices).
    """
    V = np.asarray(outliers, dtype=np.float64)
    Z = np.asarray(id_embeddings, dtype=np.float64)
    if V.ndim != 2 or Z.ndim != 2 or V.shape[0] == 0 or Z.shape[0] == 0:
        raise EmptySet("r_open needs non-empty outlier and ID matrices")
    d_in = phi[0][0].shape[0]
    if V.shape[1] != d_in or Z.shape[1] != d_in:
        raise DimMismatch(f"phi expects {d_in}-dim inputs, got {V.shape[1]} and {Z.shape[1]}")
    out_v, cache_v = mlp_forward(phi, V)
    out_z, cache_z = mlp_forward(phi, Z)
    a_v, a_z = out_v[:, 0], out_z[:, 0]
    value = float(np.mean(softplus(a_v)) + np.mean(softplus(-a_z)))
    g_v = (sigmoid(a_v) / V.shape[0])[:, None]
    g_z = (-sigmoid(-a_z) / Z.shape[0])[:, None]
    grads_v, d_v = mlp_backward(phi, cache_v, g_v)
    grads_z, d_z = mlp_backward(phi, cache_z, g_z)
    return LossOutput(value, {"phi": _sum_layers(grads_v, grads_z), "outliers": d_v, "id": d_z})


def r_closed(z_batch, labels, prototypes, tau=0.1, logit_norm=True):
    """Softmax cross-entropy over cosine logits scaled by ``1 / (tau * ||f||)``.

    With ``logit_norm=False`` the scale is ``1 / tau``. Prototypes are treated
    as constants; ``grads["z"]`` is the gradient w.r.t. the raw embeddings.
    """
    H = np.asarray(z_batch, dtype=np.float64)
    if H.ndim == 1:
        H = H[None, :]
    labels = np.asarray(labels)
    if H.shape[0] == 0:
        raise EmptySet("r_closed needs a non-empty batch")
    if tau <= 0:
        raise ValueError("tau must be positive")
    mu = prototypes.mu if isinstance(prototypes, Prototypes) else np.asarray(prototypes, dtype=np.float64)
    n, C = H.shape[0], mu.shape[0]
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= C:
        raise LabelOutOfRange(f"labels must be n={n} values in [0, {C})")
    hn = np.linalg.norm(H, axis=1, keepdims=True)
    if np.any(hn == 0):
        raise ZeroVector("zero embedding in r_closed")
    U = H / hn
    M = mu / np.linalg.norm(mu, axis=1, keepdims=True)
    F = U @ M.T
    if logit_norm:
        fn = np.linalg.norm(F, axis=1, keepdims=True)
        if np.any(fn == 0):
            raise ZeroLogitNorm("all cosine logits are zero")
        S = F / (tau * fn)
    else:
        S = F / tau
    S_max = S.max(axis=1, keepdims=True)
    E = np.exp(S - S_max)
    denom = E.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    losses = (np.log(denom[:, 0]) + S_max[:, 0]) - S[rows, labels]
    value = float(np.mean(np.maximum(losses, 0.0)))

    dS = E / denom
    dS[rows, labels] -= 1.0
    if logit_norm:
        dF = (dS / fn - F * np.sum(F * dS, axis=1, keepdims=True) / fn ** 3) / tau
    else:
        dF = dS / tau
    dU = dF @ M
    dH = (dU - U * np.sum(U * dU, axis=1, keepdims=True)) / hn
    return LossOutput(value, {"z": dH / n})


def total_objective(r_closed_val, r_open_val, alpha):
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return r_closed_val + alpha * r_open_val
