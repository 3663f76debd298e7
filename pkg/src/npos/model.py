"""Encoder, binary head, cosine prototypes and their checkpoint format.

All computation runs in float64. Networks are plain lists of ``(W, b)``
pairs with ``W`` shaped ``(fan_in, fan_out)``, ReLU between layers and a
linear output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FLAG_MODEL, FORMAT_VERSION, HEADER, MAGIC, read_header
from .exceptions import (
    BadMagic,
    DimMismatch,
    IoFailure,
    NonFiniteLoss,
    TruncatedFile,
    ZeroVector,
)

PHI_HIDDEN = 16


def init_mlp(sizes, rng):
    """Fan-in scaled uniform initialisation for layer widths ``sizes``."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append([W, b])
    return layers


def mlp_forward(params, x):
    """Forward pass; returns ``(output, cache)``.

    ``x`` may be a single vector or a batch of rows. The cache holds every
    layer input and is all :func:`mlp_backward` needs.
    """
    a = np.asarray(x, dtype=np.float64)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.shape[1] != params[0][0].shape[0]:
        raise DimMismatch(f"network expects {params[0][0].shape[0]} inputs, got {a.shape[1]}")
    inputs = []
    for li, (W, b) in enumerate(params):
        inputs.append(a)
        a = a @ W + b
        if li < len(params) - 1:
            a = np.maximum(a, 0.0)
    return (a[0] if single else a), inputs


def mlp_backward(params, cache, grad_out):
    """Backpropagate ``grad_out``; returns ``(layer_grads, grad_input)``."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    grads = [None] * len(params)
    for li in range(len(params) - 1, -1, -1):
        W, _ = params[li]
        a_in = cache[li]
        grads[li] = [a_in.T @ g, g.sum(axis=0)]
        g = g @ W.T
        if li > 0:
            # a_in is the ReLU output of the previous layer
            g = g * (a_in > 0)
    return grads, g


def cosine_logits(z, prototypes):
    """Cosine similarity of ``z`` (vector or rows) to every prototype row."""
    mu = prototypes.mu if isinstance(prototypes, Prototypes) else np.asarray(prototypes, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    zn = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(zn == 0):
        raise ZeroVector("cosine logits undefined for a zero embedding")
    mun = np.linalg.norm(mu, axis=1)
    if np.any(mun == 0):
        raise ZeroVector("zero prototype")
    f = (z / zn) @ (mu / mun[:, None]).T
    return np.clip(f, -1.0, 1.0)


@dataclass
class Prototypes:
    mu: np.ndarray
    gamma: float = 0.95
    mode: str = "ema"

    def __post_init__(self):
        self.mu = np.array(self.mu, dtype=np.float64)
        if self.mode not in ("ema", "fixed"):
            raise ValueError("prototype mode must be 'ema' or 'fixed'")

    @classmethod
    def random(cls, n_classes, d, rng, gamma=0.95, mode="ema"):
        mu = rng.standard_normal((n_classes, d))
        return cls(mu / np.linalg.norm(mu, axis=1, keepdims=True), gamma, mode)

    @property
    def n_classes(self):
        return self.mu.shape[0]


def prototype_ema_update(prototypes: Prototypes, z_batch, labels):
    """``mu_c <- normalize(gamma * mu_c + (1 - gamma) * z)`` for each sample in order."""
    if prototypes.mode == "fixed":
        return prototypes
    g = prototypes.gamma
    mu = prototypes.mu
    for z, c in zip(np.asarray(z_batch, dtype=np.float64), np.asarray(labels)):
        v = g * mu[c] + (1.0 - g) * z
        n = np.linalg.norm(v)
        if n == 0:
            raise ZeroVector(f"EMA update of prototype {int(c)} cancelled to zero")
        mu[c] = v / n
    return prototypes


@dataclass
class Model:
    encoder: list
    phi: list
    prototypes: Prototypes
    tau: float = 0.1
    logit_norm: bool = True

    @classmethod
    def init(cls, in_dim, n_classes, rng, hidden_dim=64, embed_dim=16, tau=0.1, gamma=0.95, logit_norm=True):
        """Fresh model: encoder ``in -> hidden -> embed``, head ``embed -> 16 -> 1``."""
        encoder = init_mlp([in_dim, hidden_dim, embed_dim], rng)
        phi = init_mlp([embed_dim, PHI_HIDDEN, 1], rng)
        protos = Prototypes.random(n_classes, embed_dim, rng, gamma)
        return cls(encoder, phi, protos, tau, logit_norm)

    @property
    def in_dim(self):
        return self.encoder[0][0].shape[0]

    @property
    def embed_dim(self):
        return self.encoder[-1][0].shape[1]

    @property
    def n_classes(self):
        return self.prototypes.n_classes

    def encode(self, X):
        return mlp_forward(self.encoder, X)[0]

    def embed(self, X):
        """L2-normalized embeddings."""
        h = self.encode(X)
        n = np.linalg.norm(h, axis=-1, keepdims=True)
        if np.any(n == 0):
            raise ZeroVector("encoder produced a zero embedding")
        return h / n

    def logits(self, X):
        return cosine_logits(self.encode(X), self.prototypes)

    def predict(self, X):
        return np.argmax(self.logits(X), axis=-1)

    def phi_logit(self, z):
        return mlp_forward(self.phi, z)[0][..., 0]

    def params(self):
        """Flat list of every SGD-trained array (encoder first, then phi)."""
        return [a for layer in self.encoder + self.phi for a in layer]

    def copy(self):
        clone = lambda layers: [[W.copy(), b.copy()] for W, b in layers]
        return Model(clone(self.encoder), clone(self.phi),
                     Prototypes(self.prototypes.mu.copy(), self.prototypes.gamma, self.prototypes.mode),
                     self.tau, self.logit_norm)


# -- gradient checking -------------------------------------------------------

def grad_check(loss_fn, params, epsilon=1e-5):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(value, grads)`` with ``grads`` shaped
    like ``params`` (a list of float64 arrays, perturbed in place and restored).
    The error per entry is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    value, analytic = loss_fn(params)
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss is {value}")
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn(params)[0]
            flat[i] = orig - epsilon
            down = loss_fn(params)[0]
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteLoss("loss became non-finite under perturbation")
            numeric = (up - down) / (2 * epsilon)
            err = abs(gflat[i] - numeric) / max(1e-8, abs(gflat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst


# -- checkpoint I/O --------------------------------------------------------------

_NAME_LEN = struct.Struct("<H")


def _record(name, arr):
    arr = np.asarray(arr, dtype="<f8")
    raw = name.encode("ascii")
    head = _NAME_LEN.pack(len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += b"".join(struct.pack("<I", s) for s in arr.shape)
    return head + arr.tobytes()


def model_records(model: Model):
    recs = []
    for prefix, layers in (("enc", model.encoder), ("phi", model.phi)):
        for i, (W, b) in enumerate(layers):
            recs.append((f"{prefix}.w{i}", W))
            recs.append((f"{prefix}.b{i}", b))
    recs.append(("proto", model.prototypes.mu))
    recs.append(("tau", np.float64(model.tau)))
    recs.append(("gamma", np.float64(model.prototypes.gamma)))
    recs.append(("logit_norm", np.float64(1.0 if model.logit_norm else 0.0)))
    recs.append(("proto_fixed", np.float64(1.0 if model.prototypes.mode == "fixed" else 0.0)))
    return recs


def encode_model(model: Model) -> bytes:
    recs = model_records(model)
    header = HEADER.pack(MAGIC, FORMAT_VERSION, 0, model.embed_dim, FLAG_MODEL)
    return header + struct.pack("<I", len(recs)) + b"".join(_record(n, a) for n, a in recs)


def decode_model(buf: bytes) -> Model:
    _, _, flags = read_header(buf)
    if not flags & FLAG_MODEL:
        raise BadMagic("file is an embedding set, not a model checkpoint")
    pos = HEADER.size

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise TruncatedFile("checkpoint ends inside a record")
        chunk = buf[pos:pos + nbytes]
        pos += nbytes
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = _NAME_LEN.unpack(take(2))
        name = take(nlen).decode("ascii")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)

    def layers(prefix):
        out, i = [], 0
        while f"{prefix}.w{i}" in tensors:
            out.append([tensors[f"{prefix}.w{i}"], tensors[f"{prefix}.b{i}"]])
            i += 1
        return out

    try:
        protos = Prototypes(tensors["proto"], float(tensors["gamma"]),
                            "fixed" if float(tensors.get("proto_fixed", 0.0)) else "ema")
        return Model(layers("enc"), layers("phi"), protos, float(tensors["tau"]), bool(tensors["logit_norm"]))
    except KeyError as exc:
        raise TruncatedFile(f"checkpoint missing record {exc}") from exc


def save_model(model: Model, path):
    try:
        Path(path).write_bytes(encode_model(model))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_model(path) -> Model:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_model(buf)
