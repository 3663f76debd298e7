"""Non-parametric outlier synthesis.

Boundary embeddings are the queue entries with the largest k-NN distances.
Around each one, ``p`` candidates are drawn from an isotropic Gaussian and the
candidates farthest from the ID reference set are kept.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import l2_normalize
from .exceptions import EmptyAcceptance, MTooLarge, NotEnoughNeighbors
from .knn import CLASS_AGNOSTIC, CLASS_CONDITIONAL, MODES, KnnParams, knn_distances_batch, top_m_indices

SELECT_TOP = "select-top"
THRESHOLD = "threshold"


@dataclass
class SynthesisConfig:
    k: int = 300
    m: int = 200
    p: int = 1000
    sigma2: float = 0.1
    accept_per_boundary: int = 1
    filter_mode: str = SELECT_TOP
    beta_quantile: float = 0.95
    density_mode: str = CLASS_CONDITIONAL
    renormalize_candidates: bool = False

    def validate(self):
        if self.k < 1 or self.m < 1 or self.p < 1:
            raise ValueError("k, m and p must be positive")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be >= 0")
        if not 1 <= self.accept_per_boundary <= self.p:
            raise ValueError("accept_per_boundary must lie in [1, p]")
        if self.filter_mode not in (SELECT_TOP, THRESHOLD):
            raise ValueError(f"filter_mode must be {SELECT_TOP!r} or {THRESHOLD!r}")
        if not 0 < self.beta_quantile <= 1:
            raise ValueError("beta_quantile must lie in (0, 1]")
        if self.density_mode not in MODES:
            raise ValueError(f"density_mode must be one of {MODES}")
        return self


@dataclass
class OutlierBatch:
    vectors: np.ndarray
    source_class: np.ndarray
    source_index: np.ndarray
    knn_dist: np.ndarray

    @classmethod
    def empty(cls, d):
        return cls(np.zeros((0, d)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))

    def __len__(self):
        return self.vectors.shape[0]


def _as_arrays(queues):
    return [q.as_array() if hasattr(q, "as_array") else np.asarray(q, dtype=np.float64) for q in queues]


def _reference(arrays, cfg, c):
    """Reference rows for class ``c`` plus the offset of class ``c`` inside them."""
    if cfg.density_mode == CLASS_CONDITIONAL:
        return arrays[c], 0
    offset = sum(len(a) for a in arrays[:c])
    return np.concatenate([a for a in arrays if len(a)], axis=0), offset


def _boundary_for_class(arrays, cfg, c):
    """Return ``(positions, distances)`` of class ``c``'s boundary entries."""
    own = arrays[c]
    ref, offset = _reference(arrays, cfg, c)
    if ref.shape[0] <= cfg.k:
        raise NotEnoughNeighbors(f"class {c}: {ref.shape[0]} reference entries, need more than {cfg.k}", cls=c)
    if cfg.m > own.shape[0]:
        raise MTooLarge(f"class {c}: m={cfg.m} exceeds queue length {own.shape[0]}")
    params = KnnParams(cfg.k, CLASS_AGNOSTIC, exclude_self=True)
    dists = knn_distances_batch(own, ref, params, self_indices=offset + np.arange(own.shape[0]))
    top = top_m_indices(dists, cfg.m)
    return top, dists


def select_boundary(queues, cfg: SynthesisConfig):
    """Per class, the ``m`` queue entries with the largest k-NN distance."""
    cfg.validate()
    arrays = _as_arrays(queues)
    out = []
    for c in range(len(arrays)):
        top, _ = _boundary_for_class(arrays, cfg, c)
        out.append(arrays[c][top])
    return out


def sample_candidates(center, sigma2, p, rng):
    """Draw ``p`` points from N(center, sigma2 * I)."""
    center = np.asarray(center, dtype=np.float64)
    if sigma2 == 0:
        return np.repeat(center[None, :], p, axis=0)
    return center + np.sqrt(sigma2) * rng.standard_normal((p, center.shape[0]))


def _pool_distances(candidates, refset, cfg):
    if refset.shape[0] <= cfg.k:
        raise NotEnoughNeighbors(f"{refset.shape[0]} reference rows, need more than {cfg.k}")
    return knn_distances_batch(candidates, refset, KnnParams(cfg.k, CLASS_AGNOSTIC, exclude_self=False))


def _accept(dists, cfg, level):
    """Accepted column indices for one pool of candidate distances."""
    if cfg.filter_mode == SELECT_TOP:
        return top_m_indices(dists, min(cfg.accept_per_boundary, dists.shape[0]))
    return np.flatnonzero(dists > level)


def _threshold_level(cfg, id_knn_dists):
    if cfg.filter_mode != THRESHOLD:
        return None
    if id_knn_dists is None or len(id_knn_dists) == 0:
        raise ValueError("threshold mode needs the ID k-NN distances")
    return np.quantile(np.asarray(id_knn_dists, dtype=np.float64), cfg.beta_quantile)


def reject_filter(candidates, refset, cfg: SynthesisConfig, id_knn_dists=None):
    """Keep the candidates lying in the low-density region of ``refset``.

    Returns ``(indices, distances)`` of accepted candidates. In select-top
    mode these are the ``accept_per_boundary`` largest k-NN distances; in
    threshold mode every candidate whose distance exceeds the
    ``beta_quantile`` quantile of ``id_knn_dists``.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    refset = np.asarray(refset, dtype=np.float64)
    level = _threshold_level(cfg, id_knn_dists)
    dists = _pool_distances(candidates, refset, cfg)
    idx = _accept(dists, cfg, level)
    if idx.size == 0 and cfg.filter_mode == THRESHOLD:
        warnings.warn("no candidate exceeded the ID k-NN distance quantile", EmptyAcceptance, stacklevel=2)
    return idx, dists[idx]


def boundary_rng(seed, step, c, i):
    """Independent stream for one boundary point; keyed so worker layout is irrelevant."""
    return np.random.default_rng([int(seed), int(step), int(c), int(i)])


def synthesize(queues, cfg: SynthesisConfig, seed=0, step=0):
    """Run boundary selection, candidate sampling and rejection for every ready class.

    Classes whose queue holds ``k`` entries or fewer, or fewer than ``m``,
    are skipped. Each
    boundary point's pool is filtered independently against the class's
    reference set.
    """
    cfg.validate()
    arrays = _as_arrays(queues)
    d = next((a.shape[1] for a in arrays if a.ndim == 2 and a.shape[0]), 0)
    batches = []
    for c, own in enumerate(arrays):
        if own.shape[0] <= cfg.k or own.shape[0] < cfg.m:
            continue
        top, own_dists = _boundary_for_class(arrays, cfg, c)
        ref, _ = _reference(arrays, cfg, c)
        level = _threshold_level(cfg, own_dists)
        pools = np.stack([sample_candidates(own[pos], cfg.sigma2, cfg.p, boundary_rng(seed, step, c, i))
                          for i, pos in enumerate(top)])
        if cfg.renormalize_candidates:
            pools = l2_normalize(pools)
        dists = _pool_distances(pools.reshape(-1, d), ref, cfg).reshape(len(top), cfg.p)
        for i, pos in enumerate(top):
            idx = _accept(dists[i], cfg, level)
            if idx.size:
                batches.append((pools[i, idx], np.full(idx.size, c), np.full(idx.size, pos), dists[i, idx]))
    if not batches:
        return OutlierBatch.empty(d)
    vecs, cls, src, dist = (np.concatenate(parts) for parts in zip(*batches))
    return OutlierBatch(vecs, cls.astype(np.int64), src.astype(np.int64), dist)
