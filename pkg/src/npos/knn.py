"""Exact brute-force k-NN distances used as an inverse-density surrogate.

Squared distances are accumulated one coordinate at a time in a fixed order
and the square root is taken once on the selected value, so results do not
depend on how queries are blocked or distributed across threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import EmbeddingSet
from .exceptions import DimMismatch, MissingLabels, MTooLarge, NotEnoughNeighbors

CLASS_CONDITIONAL = "class-conditional"
CLASS_AGNOSTIC = "class-agnostic"
MODES = (CLASS_CONDITIONAL, CLASS_AGNOSTIC)

_BLOCK = 512


@dataclass(frozen=True)
class KnnParams:
    k: int
    mode: str = CLASS_AGNOSTIC
    exclude_self: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def resolve_threads(threads=None):
    """Worker count from the argument, then ``NPOS_THREADS``, then 1."""
    if threads is None:
        threads = os.environ.get("NPOS_THREADS") or 1
    return max(1, int(threads))


def squared_distances(Q, R):
    """All pairwise squared Euclidean distances, shape ``(len(Q), len(R))``."""
    Q = np.asarray(Q, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if Q.shape[1] != R.shape[1]:
        raise DimMismatch(f"query dim {Q.shape[1]} != reference dim {R.shape[1]}")
    out = np.zeros((Q.shape[0], R.shape[0]))
    buf = np.empty_like(out)
    for j in range(Q.shape[1]):
        np.subtract(Q[:, j, None], R[None, :, j], out=buf)
        np.multiply(buf, buf, out=buf)
        out += buf
    return out


def _exact_pairs(Q, R, rows, cols):
    """Squared distances for selected (row, col) pairs, same order as :func:`squared_distances`."""
    out = np.zeros(rows.size)
    for j in range(Q.shape[1]):
        diff = Q[rows, j] - R[cols, j]
        out += diff * diff
    return out


def _kth(Q, R, k, self_idx=None):
    """Exact k-th smallest squared distance per query row, then its square root.

    A BLAS pass brackets the k-th value; only entries within a rigorous
    rounding bound of it are recomputed in fixed coordinate order, which
    makes the selected value bit-identical to a full fixed-order computation.
    """
    Q = np.asarray(Q, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    qn = np.einsum("ij,ij->i", Q, Q)
    rn = np.einsum("ij,ij->i", R, R)
    approx = Q @ R.T
    approx *= -2.0
    approx += qn[:, None]
    approx += rn[None, :]
    if self_idx is not None:
        rows = np.flatnonzero(self_idx >= 0)
        approx[rows, self_idx[rows]] = np.inf
    t = np.partition(approx, k - 1, axis=1)[:, k - 1]
    # |approx - exact| <= delta; generous multiple of d * eps * (|q|^2 + max |r|^2)
    delta = 2e-13 * (Q.shape[1] + 2) * (qn + (rn.max() if rn.size else 0.0))
    lo = (t - delta)[:, None]
    below_mask = approx < lo
    below = np.count_nonzero(below_mask, axis=1)
    amb = approx <= (t + delta)[:, None]
    amb &= ~below_mask
    amb_r, amb_c = np.nonzero(amb)
    exact = _exact_pairs(Q, R, amb_r, amb_c)
    order = np.lexsort((exact, amb_r))
    exact, amb_r = exact[order], amb_r[order]
    start = np.searchsorted(amb_r, np.arange(Q.shape[0]))
    return np.sqrt(exact[start + (k - 1 - below)])


def knn_distance(query, refset, k, exclude_self=False, self_index=None):
    """Distance from ``query`` to its k-th nearest row of ``refset``.

    With ``exclude_self`` the row at ``self_index`` is skipped; if no index is
    given, the first row bitwise equal to ``query`` is treated as self.
    """
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    R = np.asarray(refset.data if isinstance(refset, EmbeddingSet) else refset, dtype=np.float64)
    if R.ndim != 2 or R.shape[1] != q.shape[1]:
        raise DimMismatch(f"query dim {q.shape[1]} does not match reference shape {R.shape}")
    if exclude_self and self_index is None:
        hits = np.flatnonzero(np.all(R == q, axis=1))
        self_index = int(hits[0]) if hits.size else None
    skip = exclude_self and self_index is not None
    if R.shape[0] - int(skip) < k:
        raise NotEnoughNeighbors(f"need {k + int(skip)} reference rows, have {R.shape[0]}")
    idx = np.array([self_index if skip else -1])
    return float(_kth(q, R, k, idx)[0])


def _blocked_kth(Q, R, k, self_idx, threads):
    starts = range(0, Q.shape[0], _BLOCK)

    def work(s):
        sl = slice(s, s + _BLOCK)
        return _kth(Q[sl], R, k, None if self_idx is None else self_idx[sl])

    if threads > 1 and Q.shape[0] > _BLOCK:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    return np.concatenate(parts) if parts else np.zeros(0)


def knn_distances_batch(queries, refset, params: KnnParams, query_labels=None,
                        self_indices=None, ref_labels=None, threads=None):
    """k-NN distance of every query against ``refset``.

    Parameters
    ----------
    queries : array (n_q, d) or None
        ``None`` means the reference rows themselves, with row ``i`` as its
        own self for ``exclude_self``.
    refset : EmbeddingSet or array (n, d)
    params : KnnParams
    query_labels : array (n_q,), optional
        Required in class-conditional mode.
    self_indices : array (n_q,), optional
        Reference row to skip per query when ``params.exclude_self``; ``-1``
        means no self row.
    ref_labels : array (n,), optional
        Labels for a plain-array ``refset``.
    threads : int, optional
        Worker count; the output does not depend on it.
    """
    if isinstance(refset, EmbeddingSet):
        R, ref_labels = refset.data.astype(np.float64), refset.labels
    else:
        R = np.asarray(refset, dtype=np.float64)
    if queries is None:
        Q = R
        if self_indices is None:
            self_indices = np.arange(R.shape[0])
        if query_labels is None:
            query_labels = ref_labels
    else:
        Q = np.asarray(queries, dtype=np.float64)
    if Q.ndim == 1:
        Q = Q.reshape(1, -1)
    if R.ndim != 2 or Q.shape[1] != R.shape[1]:
        raise DimMismatch(f"query dim {Q.shape[1]} does not match reference shape {R.shape}")
    threads = resolve_threads(threads)
    k = params.k
    self_idx = None
    if params.exclude_self and self_indices is not None:
        self_idx = np.asarray(self_indices, dtype=np.int64).copy()

    if params.mode == CLASS_AGNOSTIC:
        need = k + (1 if self_idx is not None and np.any(self_idx >= 0) else 0)
        if R.shape[0] < need:
            raise NotEnoughNeighbors(f"need {need} reference rows, have {R.shape[0]}")
        return _blocked_kth(Q, R, k, self_idx, threads)

    if query_labels is None or ref_labels is None:
        raise MissingLabels("class-conditional mode needs query and reference labels")
    query_labels = np.asarray(query_labels)
    ref_labels = np.asarray(ref_labels)
    out = np.empty(Q.shape[0])
    for c in np.unique(query_labels):
        qi = np.flatnonzero(query_labels == c)
        ri = np.flatnonzero(ref_labels == c)
        local_self = None
        if self_idx is not None:
            # map global self rows onto positions inside this class's reference rows
            g = self_idx[qi]
            pos = np.searchsorted(ri, g)
            hit = (g >= 0) & (pos < ri.size) & (ri[np.minimum(pos, ri.size - 1)] == g)
            local_self = np.where(hit, pos, -1)
        need = k + (1 if local_self is not None and np.any(local_self >= 0) else 0)
        if ri.size < need:
            raise NotEnoughNeighbors(f"class {int(c)} has {ri.size} reference rows, need {need}", cls=int(c))
        out[qi] = _blocked_kth(Q[qi], R[ri], k, local_self, threads)
    return out


def top_m_indices(values, m):
    """Indices of the ``m`` largest values, descending, ties by ascending index."""
    values = np.asarray(values, dtype=np.float64)
    if m > values.shape[0]:
        raise MTooLarge(f"m={m} exceeds {values.shape[0]} values")
    if m < 0:
        raise ValueError("m must be non-negative")
    order = np.lexsort((np.arange(values.shape[0]), -values))
    return order[:m]
