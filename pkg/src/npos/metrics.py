"""Test-time scores, thresholding and OOD metrics.

Every score follows one convention: higher means more in-distribution.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import DataError, EmptySet, IoFailure
from .knn import CLASS_AGNOSTIC, KnnParams, knn_distances_batch
from .model import Model, cosine_logits

ID, OOD = "id", "ood"


def _softmax_max(S):
    S = S - S.max(axis=-1, keepdims=True)
    E = np.exp(S)
    return E.max(axis=-1) / E.sum(axis=-1)


def npos_score(model: Model, z, tau=None):
    """Maximum softmax probability over cosine logits scaled by ``1 / tau``.

    ``z`` is an embedding (or rows of embeddings); ``tau`` defaults to the
    model's training temperature.
    """
    tau = model.tau if tau is None else tau
    return _softmax_max(cosine_logits(z, model.prototypes) / tau)


def knn_score(z, train_embeddings, k, threads=None):
    """Negative k-NN distance to ``train_embeddings`` (KNN comparator)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    d = knn_distances_batch(z.reshape(-1, z.shape[-1]), train_embeddings, KnnParams(k, CLASS_AGNOSTIC), threads=threads)
    return -d[0] if single else -d


def _nonempty(*arrays):
    out = []
    for a in arrays:
        a = np.asarray(a, dtype=np.float64).ravel()
        if a.size == 0:
            raise EmptySet("score list is empty")
        out.append(a)
    return out


def choose_threshold(id_scores, tpr=0.95):
    """Element ``floor((1 - tpr) * n)`` of the ascending ID scores."""
    (s,) = _nonempty(id_scores)
    if not 0 < tpr <= 1:
        raise ValueError("tpr must lie in (0, 1]")
    s = np.sort(s)
    idx = min(int(math.floor((1.0 - tpr) * s.size)), s.size - 1)
    return float(s[idx])


def detect(score, lam):
    """``ID`` iff ``score >= lam``; vectorised over arrays."""
    if np.ndim(score) == 0:
        return ID if score >= lam else OOD
    return np.where(np.asarray(score) >= lam, ID, OOD)


def fpr_at_tpr(id_scores, ood_scores, tpr=0.95):
    """Fraction of OOD scores at or above the threshold that keeps ``tpr`` of ID."""
    _, o = _nonempty(id_scores, ood_scores)
    lam = choose_threshold(id_scores, tpr)
    return float(np.count_nonzero(o >= lam)) / o.size


def auroc(id_scores, ood_scores):
    """Mann-Whitney AUROC: P(id > ood) + 0.5 * P(id == ood)."""
    i, o = _nonempty(id_scores, ood_scores)
    o = np.sort(o)
    below = np.searchsorted(o, i, side="left")
    upto = np.searchsorted(o, i, side="right")
    twice = 2 * int(below.sum()) + int((upto - below).sum())
    return twice / (2 * i.size * o.size)


def aupr(id_scores, ood_scores):
    """Area under the precision-recall curve with ID as the positive class.

    Thresholds sweep the distinct scores from high to low; tied scores enter
    together and the area is the step sum ``sum (R_t - R_{t-1}) * P_t``.
    """
    i, o = _nonempty(id_scores, ood_scores)
    scores = np.concatenate([i, o])
    pos = np.concatenate([np.ones(i.size, dtype=np.int64), np.zeros(o.size, dtype=np.int64)])
    order = np.argsort(-scores, kind="stable")
    scores, pos = scores[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(scores) != 0), scores.size - 1]
    tp = np.cumsum(pos)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall_step = np.diff(np.r_[0, tp]) / i.size
    return float(np.sum(recall_step * precision))


def id_accuracy(model: Model, X, y):
    return float(np.mean(model.predict(X) == np.asarray(y)))


@dataclass
class MetricsReport:
    fpr95: float
    auroc: float
    aupr: float
    threshold: float
    id_acc: float | None = None

    HEADER = "fpr95,auroc,aupr,lambda,id_acc"

    def to_csv(self) -> str:
        acc = "" if self.id_acc is None else f"{self.id_acc:.17g}"
        row = f"{self.fpr95:.17g},{self.auroc:.17g},{self.aupr:.17g},{self.threshold:.17g},{acc}"
        return f"{self.HEADER}\n{row}\n"


def evaluate(id_scores, ood_scores, tpr=0.95, id_acc=None) -> MetricsReport:
    return MetricsReport(
        fpr95=fpr_at_tpr(id_scores, ood_scores, tpr),
        auroc=auroc(id_scores, ood_scores),
        aupr=aupr(id_scores, ood_scores),
        threshold=choose_threshold(id_scores, tpr),
        id_acc=id_acc,
    )


# -- score files -------------------------------------------------------------------------

def write_scores(path, id_scores=(), ood_scores=()):
    try:
        with open(path, "w", newline="") as fh:
            fh.write("score,label\n")
            for s in id_scores:
                fh.write(f"{float(s):.17g},{ID}\n")
            for s in ood_scores:
                fh.write(f"{float(s):.17g},{OOD}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_scores(path):
    """Return ``(scores, labels)`` from a ``score,label`` CSV."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not rows or rows[0] != ["score", "label"]:
        raise DataError(f"{path}: expected header 'score,label'")
    scores, labels = [], []
    for lineno, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        if len(r) != 2 or r[1] not in (ID, OOD):
            raise DataError(f"{path}:{lineno}: malformed row {r!r}")
        try:
            scores.append(float(r[0]))
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad score {r[0]!r}") from None
        labels.append(r[1])
    return np.array(scores), np.array(labels, dtype=object)
