"""Embedding containers, file I/O, synthetic datasets and class queues."""

from __future__ import annotations

import csv
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import (
    BadMagic,
    DimMismatch,
    InvalidSpec,
    IoFailure,
    LabelOutOfRange,
    TruncatedFile,
    VersionMismatch,
    ZeroVector,
)

MAGIC = b"NPOS"
FORMAT_VERSION = 1
FLAG_LABELS = 1
FLAG_NORMALIZED = 2
FLAG_MODEL = 4  # set only by model checkpoints
HEADER = struct.Struct("<4sIQII")

UNLABELED = -1
NORM_TOL = 1e-6

KINDS = ("gaussian-mixture", "two-moons", "rings")
OOD_KINDS = ("ring", "uniform-shell", "shifted-mixture")
MEAN_RADIUS = 2.0


def l2_normalize(v):
    """Scale ``v`` to unit Euclidean norm.

    Accepts a single vector or a 2-D array, in which case every row is
    normalized. Raises ``ZeroVector`` if any vector has zero norm.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ZeroVector("cannot normalize a zero vector")
    return v / norm


def _check_unit_rows(data, tol=NORM_TOL):
    if data.shape[0] == 0:
        return True
    norms = np.linalg.norm(np.asarray(data, dtype=np.float64), axis=1)
    return bool(np.all(np.abs(norms - 1.0) <= tol))


@dataclass(eq=False)
class EmbeddingSet:
    """An ``n x d`` float32 matrix of embeddings with optional labels.

    Labels are int32 with ``-1`` reserved for unlabeled rows.
    """

    data: np.ndarray
    labels: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[1] < 1:
            raise DimMismatch(f"embedding data must be n x d with d >= 1, got shape {data.shape}")
        self.data = np.ascontiguousarray(data)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (data.shape[0],):
                raise DimMismatch(f"expected {data.shape[0]} labels, got shape {labels.shape}")
            if labels.size and (labels.min() < UNLABELED or labels.max() > np.iinfo(np.int32).max):
                raise LabelOutOfRange(f"labels must be >= {UNLABELED} and fit in int32")
            self.labels = np.ascontiguousarray(labels.astype(np.int32))
        self.normalized = bool(self.normalized)
        if self.normalized and not _check_unit_rows(self.data):
            raise ZeroVector("set flagged normalized but contains rows that are not unit-norm")

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def d(self):
        return self.data.shape[1]

    @property
    def n_classes(self):
        if self.labels is None or self.labels.size == 0:
            return 0
        return int(self.labels.max()) + 1

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        if self.normalized != other.normalized or self.data.shape != other.data.shape:
            return False
        if not np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32)):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)


# -- file I/O ---------------------------------------------------------------

def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("binary", "csv"):
            raise InvalidSpec(f"unknown embedding format {fmt!r}")
        return fmt
    return "csv" if str(path).lower().endswith(".csv") else "binary"


def encode_embeddings(es: EmbeddingSet) -> bytes:
    flags = (FLAG_LABELS if es.labels is not None else 0) | (FLAG_NORMALIZED if es.normalized else 0)
    parts = [HEADER.pack(MAGIC, FORMAT_VERSION, es.n, es.d, flags), es.data.astype("<f4").tobytes()]
    if es.labels is not None:
        parts.append(es.labels.astype("<i4").tobytes())
    return b"".join(parts)


def read_header(buf: bytes):
    """Parse the fixed header; returns ``(n, d, flags)``."""
    if len(buf) < 4:
        raise TruncatedFile("file shorter than the magic bytes")
    if buf[:4] != MAGIC:
        raise BadMagic(f"bad magic bytes {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < HEADER.size:
        raise TruncatedFile("file shorter than the header")
    _, version, n, d, flags = HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported format version {version}")
    if d < 1:
        raise InvalidSpec("header declares d = 0")
    return n, d, flags


def decode_embeddings(buf: bytes) -> EmbeddingSet:
    n, d, flags = read_header(buf)
    offset = HEADER.size
    need = n * d * 4 + (n * 4 if flags & FLAG_LABELS else 0)
    if len(buf) - offset < need:
        raise TruncatedFile(f"header declares n={n}, d={d} but payload holds only {len(buf) - offset} bytes")
    data = np.frombuffer(buf, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    offset += n * d * 4
    labels = None
    if flags & FLAG_LABELS:
        labels = np.frombuffer(buf, dtype="<i4", count=n, offset=offset)
        if n and labels.min() < UNLABELED:
            raise LabelOutOfRange(f"label {int(labels.min())} below {UNLABELED}")
    return EmbeddingSet(data.astype(np.float32), None if labels is None else labels.astype(np.int32),
                        normalized=bool(flags & FLAG_NORMALIZED))


def save_embeddings(es: EmbeddingSet, path, fmt=None):
    """Write ``es`` to ``path`` in binary (default) or CSV format."""
    fmt = _infer_format(path, fmt)
    try:
        if fmt == "binary":
            Path(path).write_bytes(encode_embeddings(es))
            return
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            header = [f"dim{j}" for j in range(es.d)]
            if es.labels is not None:
                header.append("label")
            writer.writerow(header)
            for i in range(es.n):
                row = [f"{float(x):.9g}" for x in es.data[i]]
                if es.labels is not None:
                    row.append(str(int(es.labels[i])))
                writer.writerow(row)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_embeddings(path, fmt=None) -> EmbeddingSet:
    fmt = _infer_format(path, fmt)
    try:
        if fmt == "binary":
            return decode_embeddings(Path(path).read_bytes())
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise TruncatedFile(f"{path}: missing CSV header")
    header = rows[0]
    has_labels = bool(header) and header[-1] == "label"
    d = len(header) - has_labels
    if d < 1 or header[:d] != [f"dim{j}" for j in range(d)]:
        raise BadMagic(f"{path}: CSV header must be dim0..dim{{d-1}}[,label]")
    body = [r for r in rows[1:] if r]
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise TruncatedFile(f"{path}:{lineno}: expected {len(header)} fields, got {len(r)}")
    data = np.array([[float(x) for x in r[:d]] for r in body], dtype=np.float32).reshape(len(body), d)
    labels = np.array([int(r[d]) for r in body], dtype=np.int64) if has_labels else None
    return EmbeddingSet(data, labels)


# -- synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "gaussian-mixture"
    n_per_class: int = 500
    d: int = 2
    n_classes: int = 3
    ood_kind: str = "ring"
    noise: float = 0.5
    seed: int = 0

    def validate(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.ood_kind not in OOD_KINDS:
            raise InvalidSpec(f"ood_kind must be one of {OOD_KINDS}, got {self.ood_kind!r}")
        if self.d < 2:
            raise InvalidSpec("d must be >= 2")
        if self.n_classes < 1:
            raise InvalidSpec("n_classes must be >= 1")
        if self.n_per_class < 1:
            raise InvalidSpec("n_per_class must be >= 1")
        if not self.noise >= 0:
            raise InvalidSpec("noise must be >= 0")
        if self.kind == "two-moons" and self.n_classes != 2:
            raise InvalidSpec("two-moons requires exactly 2 classes")
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidSpec("seed must be a 64-bit unsigned integer")


def _circle_means(n_classes, d, radius, phase=0.0):
    angles = 2 * np.pi * np.arange(n_classes) / n_classes + phase
    means = np.zeros((n_classes, d))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def _clean_points(spec, rng):
    """Noise-free generating points, shape ``(C, n_per_class, d)``."""
    C, n, d = spec.n_classes, spec.n_per_class, spec.d
    pts = np.zeros((C, n, d))
    if spec.kind == "gaussian-mixture":
        pts[:] = _circle_means(C, d, MEAN_RADIUS)[:, None, :]
    elif spec.kind == "two-moons":
        t = rng.uniform(0.0, np.pi, size=(2, n))
        pts[0, :, 0], pts[0, :, 1] = np.cos(t[0]), np.sin(t[0])
        pts[1, :, 0], pts[1, :, 1] = 1.0 - np.cos(t[1]), 0.5 - np.sin(t[1])
    else:  # rings
        t = rng.uniform(0.0, 2 * np.pi, size=(C, n))
        radius = (np.arange(C) + 1.0)[:, None]
        pts[:, :, 0], pts[:, :, 1] = radius * np.cos(t), radius * np.sin(t)
    return pts


def _id_split(spec, rng):
    clean = _clean_points(spec, rng)
    pts = clean + spec.noise * rng.standard_normal(clean.shape)
    labels = np.repeat(np.arange(spec.n_classes), spec.n_per_class)
    return pts.reshape(-1, spec.d), labels, clean


def _random_directions(rng, n, d):
    u = rng.standard_normal((n, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def gen_synthetic(spec: SyntheticSpec):
    """Generate ``(id_train, id_test, ood_test)`` for ``spec``.

    Each ID split holds ``n_per_class`` points per class; the OOD split holds
    ``n_classes * n_per_class`` unlabeled points. The OOD radius ``R`` is three
    times the largest norm among the noise-free generating points (the class
    means for a Gaussian mixture).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    train, y_train, clean = _id_split(spec, rng)
    test, y_test, _ = _id_split(spec, rng)
    radius = 3.0 * float(np.linalg.norm(clean.reshape(-1, spec.d), axis=1).max())
    n_ood = spec.n_classes * spec.n_per_class
    if spec.ood_kind == "ring":
        r = radius + spec.noise * rng.uniform(-1.0, 1.0, size=n_ood)
        ood = r[:, None] * _random_directions(rng, n_ood, spec.d)
    elif spec.ood_kind == "uniform-shell":
        r = rng.uniform(radius, 1.5 * radius, size=n_ood)
        ood = r[:, None] * _random_directions(rng, n_ood, spec.d)
    else:  # shifted-mixture: same mixture rotated half a class spacing
        means = _circle_means(spec.n_classes, spec.d, MEAN_RADIUS, phase=np.pi / spec.n_classes)
        ood = np.repeat(means, spec.n_per_class, axis=0)
        ood = ood + spec.noise * rng.standard_normal(ood.shape)
    return (EmbeddingSet(train, y_train), EmbeddingSet(test, y_test), EmbeddingSet(ood))


# -- class-conditional queues --------------------------------------------------

class ClassQueue:
    """Fixed-capacity FIFO of unit-norm embeddings, oldest first."""

    def __init__(self, capacity, d=None):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = int(capacity)
        self.d = d
        self._entries = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self._entries)

    def append(self, z):
        z = np.array(z, dtype=np.float64)
        if self.d is None:
            self.d = z.shape[0]
        elif z.shape != (self.d,):
            raise DimMismatch(f"queue holds {self.d}-vectors, got shape {z.shape}")
        if abs(np.linalg.norm(z) - 1.0) > NORM_TOL:
            raise ZeroVector("queue entries must be unit-norm")
        self._entries.append(z)

    def as_array(self):
        if not self._entries:
            return np.zeros((0, self.d or 0))
        return np.stack(self._entries)

    @property
    def entries(self):
        return list(self._entries)


def make_queues(n_classes, capacity, d=None):
    return [ClassQueue(capacity, d) for _ in range(n_classes)]


def queue_update(queues, batch_z, batch_labels):
    """Append each row of ``batch_z`` to the queue of its label, in batch order."""
    batch_z = np.asarray(batch_z, dtype=np.float64)
    batch_labels = np.asarray(batch_labels)
    if batch_z.ndim != 2 or batch_labels.shape != (batch_z.shape[0],):
        raise DimMismatch("batch_z must be n x d with n labels")
    if batch_labels.size and (batch_labels.min() < 0 or batch_labels.max() >= len(queues)):
        raise LabelOutOfRange(f"labels must lie in [0, {len(queues)})")
    if not _check_unit_rows(batch_z):
        raise ZeroVector("queue_update expects unit-norm embeddings")
    for z, y in zip(batch_z, batch_labels):
        queues[int(y)].append(z)
    return queues
