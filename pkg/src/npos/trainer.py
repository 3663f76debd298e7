"""Training loop: prototype cross-entropy plus, after warmup, the outlier-synthesis loss."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .data import EmbeddingSet, make_queues, queue_update
from .exceptions import BadValue, NonFiniteGradient, NonFiniteLoss, NotEnoughNeighbors, UnknownKey
from .losses import r_closed, r_open
from .model import Model, mlp_backward, mlp_forward, prototype_ema_update
from .synth import OutlierBatch, SynthesisConfig, synthesize


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults are the CIFAR from-scratch setting."""

    epochs: int = 500
    batch_size: int = 256
    lr_closed: float = 0.5
    lr_open: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    alpha: float = 0.1
    warmup_epochs: int = 200
    tau: float = 0.1
    gamma: float = 0.95
    queue_capacity: int = 600
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    seed: int = 0
    logit_norm: bool = True
    hidden_dim: int = 64
    embed_dim: int = 16
    synth_every: int = 1
    holdout_fraction: float = 0.1

    def validate(self):
        if self.epochs < 0:
            raise BadValue("epochs must be >= 0")
        if self.epochs and not 0 <= self.warmup_epochs < self.epochs:
            raise BadValue("warmup_epochs must lie in [0, epochs)")
        for name in ("batch_size", "queue_capacity", "synth_every", "hidden_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise BadValue(f"{name} must be positive")
        for name in ("lr_closed", "lr_open", "tau"):
            if not getattr(self, name) > 0:
                raise BadValue(f"{name} must be > 0")
        if self.alpha < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise BadValue("alpha, momentum and weight_decay must be >= 0")
        if not 0 <= self.gamma <= 1:
            raise BadValue("gamma must lie in [0, 1]")
        if self.lr_schedule not in ("cosine", "constant"):
            raise BadValue("lr_schedule must be 'cosine' or 'constant'")
        if not 0 <= self.holdout_fraction < 1:
            raise BadValue("holdout_fraction must lie in [0, 1)")
        if self.synthesis.m > self.queue_capacity:
            raise BadValue("m cannot exceed queue_capacity")
        try:
            self.synthesis.validate()
        except ValueError as exc:
            raise BadValue(str(exc)) from exc
        return self


# -- configuration files ---------------------------------------------------------

_SYNTH_KEYS = [f.name for f in fields(SynthesisConfig)]
_TOP_KEYS = [f.name for f in fields(TrainConfig) if f.name != "synthesis"]


def _field_type(name):
    proto = SynthesisConfig() if name in _SYNTH_KEYS else TrainConfig()
    return type(getattr(proto, name))


def _convert(name, raw, lineno):
    kind = _field_type(name)
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
            return value
        return raw
    except ValueError:
        raise BadValue(f"line {lineno}: bad value {raw!r} for {name}", line=lineno) from None


def parse_config(text: str) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, missing keys keep defaults."""
    top, synth = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadValue(f"line {lineno}: expected 'key = value'", line=lineno)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _SYNTH_KEYS:
            synth[key] = _convert(key, raw, lineno)
        elif key in _TOP_KEYS:
            top[key] = _convert(key, raw, lineno)
        else:
            raise UnknownKey(f"line {lineno}: unknown key {key!r}")
    return TrainConfig(synthesis=SynthesisConfig(**synth), **top)


def format_config(cfg: TrainConfig) -> str:
    """Fully resolved configuration in the same ``key = value`` syntax."""
    out = io.StringIO()
    for name in _TOP_KEYS:
        out.write(f"{name} = {_fmt(getattr(cfg, name))}\n")
    for name in _SYNTH_KEYS:
        out.write(f"{name} = {_fmt(getattr(cfg.synthesis, name))}\n")
    return out.getvalue()


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


# -- optimisation ------------------------------------------------------------------

def cosine_lr(epoch, total_epochs, base_lr):
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def sgd_step(params, grads, lr, momentum, weight_decay, velocity):
    """In-place SGD with momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    """
    for p, g, v in zip(params, grads, velocity):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient in SGD step")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return params, velocity


def _flat(layers):
    return [a for layer in layers for a in layer]


# -- training ------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    r_closed: float
    r_open: float
    lr: float
    n_outliers: int
    id_acc: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        lines = ["epoch,r_closed,r_open,lr,n_outliers,id_acc"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.r_closed:.17g},{r.r_open:.17g},{r.lr:.17g},{r.n_outliers},{r.id_acc:.17g}")
        return "\n".join(lines) + "\n"


def holdout_split(n, fraction, seed):
    """Deterministic ``(train_idx, holdout_idx)`` split."""
    perm = np.random.default_rng([seed, 1]).permutation(n)
    n_hold = int(math.floor(fraction * n))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def train(X, y=None, cfg: TrainConfig | None = None, enable_synthesis=True, callback=None):
    """Train an encoder, binary head and prototypes on labeled inputs.

    Parameters
    ----------
    X : EmbeddingSet or array (n, d_in)
        Labeled inputs; labels must be ``0..C-1``.
    y : array (n,), optional
        Labels when ``X`` is a plain array.
    cfg : TrainConfig
    enable_synthesis : bool
        ``False`` disables outlier synthesis and the level-set loss outright.
    callback : callable, optional
        Called as ``callback(epoch, model, queues)`` after every epoch.

    Returns
    -------
    (Model, TrainHistory)
    """
    cfg = (cfg or TrainConfig()).validate()
    if isinstance(X, EmbeddingSet):
        X, y = X.data, X.labels
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_classes = int(y.max()) + 1
    model = Model.init(X.shape[1], n_classes, np.random.default_rng([cfg.seed, 0]),
                       hidden_dim=cfg.hidden_dim, embed_dim=cfg.embed_dim, tau=cfg.tau,
                       gamma=cfg.gamma, logit_norm=cfg.logit_norm)
    history = TrainHistory()
    if cfg.epochs == 0:
        return model, history

    tr_idx, ho_idx = holdout_split(X.shape[0], cfg.holdout_fraction, cfg.seed)
    X_tr, y_tr, X_ho, y_ho = X[tr_idx], y[tr_idx], X[ho_idx], y[ho_idx]
    queues = make_queues(n_classes, cfg.queue_capacity, model.embed_dim)
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    vel_enc = [np.zeros_like(a) for a in _flat(model.encoder)]
    vel_phi = [np.zeros_like(a) for a in _flat(model.phi)]
    outliers = None
    step = 0

    for epoch in range(cfg.epochs):
        if cfg.lr_schedule == "cosine":
            lr_c, lr_o = (cosine_lr(epoch, cfg.epochs, base) for base in (cfg.lr_closed, cfg.lr_open))
        else:
            lr_c, lr_o = cfg.lr_closed, cfg.lr_open
        open_phase = enable_synthesis and epoch >= cfg.warmup_epochs
        rc_sum = ro_sum = 0.0
        n_out = n_batches = 0
        perm = shuffle_rng.permutation(X_tr.shape[0])
        for start in range(0, perm.size, cfg.batch_size):
            b = perm[start:start + cfg.batch_size]
            xb, yb = X_tr[b], y_tr[b]
            H, cache = mlp_forward(model.encoder, xb)
            hn = np.linalg.norm(H, axis=1, keepdims=True)
            Z = H / hn
            queue_update(queues, Z, yb)

            rc = r_closed(H, yb, model.prototypes, cfg.tau, cfg.logit_norm)
            dH = rc.grads["z"]
            phi_grads = None
            ro_val = 0.0
            if open_phase:
                if outliers is None or step % cfg.synth_every == 0:
                    try:
                        outliers = synthesize(queues, cfg.synthesis, seed=cfg.seed, step=step)
                    except NotEnoughNeighbors:
                        outliers = OutlierBatch.empty(model.embed_dim)
                    n_out += len(outliers)
                if len(outliers):
                    ro = r_open(model.phi, outliers.vectors, Z)
                    ro_val = ro.value
                    if cfg.alpha > 0:
                        dZ = cfg.alpha * ro.grads["id"]
                        dH = dH + (dZ - Z * np.sum(Z * dZ, axis=1, keepdims=True)) / hn
                        phi_grads = _flat(ro.grads["phi"])
            if not (math.isfinite(rc.value) and math.isfinite(ro_val)):
                raise NonFiniteLoss(f"epoch {epoch}: loss is not finite")

            enc_grads, _ = mlp_backward(model.encoder, cache, dH)
            sgd_step(_flat(model.encoder), _flat(enc_grads), lr_c, cfg.momentum, cfg.weight_decay, vel_enc)
            if phi_grads is not None:
                sgd_step(_flat(model.phi), phi_grads, lr_o, cfg.momentum, cfg.weight_decay, vel_phi)
            prototype_ema_update(model.prototypes, Z, yb)

            rc_sum += rc.value
            ro_sum += ro_val
            n_batches += 1
            step += 1

        acc = float(np.mean(model.predict(X_ho) == y_ho)) if ho_idx.size else float("nan")
        history.records.append(EpochRecord(epoch, rc_sum / n_batches, ro_sum / n_batches, lr_c, n_out, acc))
        if callback is not None:
            callback(epoch, model, queues)
    return model, history
