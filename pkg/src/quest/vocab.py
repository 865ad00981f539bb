"""Visual-word vocabulary learning and feature-map quantization.

A vocabulary is a set of K centroid vectors learned by k-means over feature
vectors collected from a frozen teacher tap. Feature maps are quantized
into per-location probability distributions over the K words: squared
Euclidean distances to every word, then a temperature softmax (temperature
zero means hard one-hot assignment).

k-means is implemented here: k-means++ seeding, Lloyd iterations to an
assignment fixpoint, empty clusters reseeded to the point currently
farthest from its centroid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .errors import (ConfigurationError, DimensionError, FormatError,
                     UsageError, VocabularyError)
from .tensor import ensure_finite, softmax

_MAGIC = b"QVWV"
_VERSION = 1


@dataclass
class Vocabulary:
    centroids: np.ndarray  # (K, C_T) float32
    tap: str
    kmeans_objective: float
    seed: int | None = None
    objective_history: list[float] | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class AssignmentMap:
    """Per-location distributions over words: probs (N, K, H, W)."""

    probs: np.ndarray
    temperature: float

    @property
    def k(self) -> int:
        return self.probs.shape[1]


# ---------------------------------------------------------------------------
# feature collection

def collect_features(teacher: models.Model, dataset, tap: str, max_vectors: int,
                     seed: int, k: int | None = None,
                     batch_size: int = 128) -> np.ndarray:
    """Sample feature vectors from all spatial locations of the teacher tap.

    Vectors are drawn uniformly without replacement across the whole
    (image, location) grid; the sample is a pure function of the seed and
    is independent of batch_size. Returns an (M, C_T) float32 matrix.
    """
    if not teacher.frozen:
        raise UsageError("collect_features: teacher must be frozen (eval mode)")
    if max_vectors < 1:
        raise VocabularyError("collect_features: max_vectors must be >= 1")
    images = dataset.images
    n = images.shape[0]
    if n == 0:
        raise VocabularyError("collect_features: empty dataset")

    _, probe, _ = models.forward(teacher, images[:1], taps=(tap,))
    _, c, h, w = probe[tap].shape
    per_image = h * w
    total = n * per_image
    n_take = min(max_vectors, total)
    if k is not None and (max_vectors < k or n_take < k):
        raise VocabularyError(
            f"collect_features: need at least {k} vectors, "
            f"max_vectors={max_vectors}, available={total}")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x636F6C]))
    picks = np.sort(rng.choice(total, size=n_take, replace=False))

    out = np.empty((n_take, c), dtype=probe[tap].dtype)
    filled = 0
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        lo, hi = start * per_image, stop * per_image
        sel = picks[(picks >= lo) & (picks < hi)]
        if sel.size == 0:
            continue
        _, feats, _ = models.forward(teacher, images[start:stop], taps=(tap,))
        flat = feats[tap].transpose(0, 2, 3, 1).reshape(-1, c)
        out[filled:filled + sel.size] = flat[sel - lo]
        filled += sel.size
    return out


# ---------------------------------------------------------------------------
# k-means

def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances (M,C)x(K,C) -> (M,K), clipped at 0."""
    d = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=points.dtype)
    idx = int(rng.integers(m))
    centroids[0] = points[idx]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(m))
        else:
            idx = int(rng.choice(m, p=d2 / total))
        centroids[i] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iters: int):
    m, k = points.shape[0], centroids.shape[0]
    labels = None
    history: list[float] = []
    for _ in range(max_iters):
        d2 = _sqdist(points, centroids)
        new_labels = d2.argmin(axis=1)
        mind = d2[np.arange(m), new_labels]
        history.append(float(mind.sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            return centroids, labels, history
        labels = new_labels
        # means update; empty clusters grab the point farthest from its centroid
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points)
        counts = np.bincount(labels, minlength=k).astype(points.dtype)
        nonempty = counts > 0
        centroids = centroids.copy()
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            stealable = mind.copy()
            for j in np.flatnonzero(~nonempty):
                far = int(stealable.argmax())
                centroids[j] = points[far]
                stealable[far] = -1.0
    d2 = _sqdist(points, centroids)
    labels = d2.argmin(axis=1)
    history.append(float(d2[np.arange(m), labels].sum()))
    return centroids, labels, history


def kmeans_fit(points: np.ndarray, k: int, max_iters: int = 100, seed: int = 0,
               n_init: int = 4, tap: str = "") -> Vocabulary:
    """Cluster points (M,C) into a k-word Vocabulary.

    Runs n_init restarts of k-means++ and Lloyd, keeping the lowest final
    objective. Deterministic for fixed (points, k, seed).
    """
    points = np.asarray(points)
    if points.ndim != 2:
        raise DimensionError(f"kmeans_fit: points must be 2-d, got {points.shape}")
    m = points.shape[0]
    if m < k:
        raise VocabularyError(f"kmeans_fit: {m} points < {k} clusters")
    if k < 1:
        raise VocabularyError("kmeans_fit: k must be >= 1")
    ensure_finite(points, "kmeans_fit input")

    pts = points.astype(np.float64, copy=False)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6B6D]))
    best = None
    for _ in range(max(1, n_init)):
        init = _kmeans_pp_init(pts, k, rng)
        centroids, _, history = _lloyd(pts, init, max_iters)
        if best is None or history[-1] < best[1]:
            best = (centroids, history[-1], history)

    centroids = best[0].astype(np.float32)
    if len(np.unique(centroids, axis=0)) != k:
        raise VocabularyError("kmeans_fit: duplicate centroids; "
                              "need at least k distinct points")
    return Vocabulary(centroids=centroids, tap=tap, kmeans_objective=best[1],
                      seed=seed, objective_history=best[2])


# ---------------------------------------------------------------------------
# quantization

def distances(f: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """Squared Euclidean distances from one feature vector to every word.

    Computed in float64 so the result agrees with quantize_feature_map
    regardless of the feature dtype.
    """
    if f.ndim != 1 or f.shape[0] != vocab.dim:
        raise DimensionError(
            f"distances: feature shape {f.shape} vs vocabulary dim {vocab.dim}")
    diff = vocab.centroids.astype(np.float64) - f.astype(np.float64)[None, :]
    return (diff * diff).sum(axis=1)


def soft_assign(d: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax over negative distances; tau=0 means hard assignment."""
    if tau < 0:
        raise ConfigurationError("soft_assign: tau must be >= 0")
    if tau == 0:
        return hard_assign(d)
    return softmax(-np.asarray(d) / tau, axis=-1)


def hard_assign(d: np.ndarray) -> np.ndarray:
    """One-hot at the nearest word; ties break to the smallest index."""
    d = np.asarray(d)
    ensure_finite(d, "hard_assign")
    idx = d.argmin(axis=-1)
    out = np.zeros(d.shape, dtype=d.dtype)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def quantize_feature_map(fmap: np.ndarray, vocab: Vocabulary, tau: float) -> AssignmentMap:
    """Quantize a feature map (N,C,H,W) into an AssignmentMap (N,K,H,W).

    Equivalent to applying distances + soft_assign independently at every
    location; computed in float64 internally and cast back to the input
    dtype.
    """
    if fmap.ndim != 4:
        raise DimensionError(f"quantize_feature_map: expected 4-d map, got {fmap.shape}")
    n, c, h, w = fmap.shape
    if c != vocab.dim:
        raise DimensionError(
            f"quantize_feature_map: {c} channels vs vocabulary dim {vocab.dim}")
    if tau < 0:
        raise ConfigurationError("quantize_feature_map: tau must be >= 0")
    x = fmap.transpose(0, 2, 3, 1).reshape(-1, c).astype(np.float64)
    cents = vocab.centroids.astype(np.float64)
    d = _sqdist(x, cents)
    p = hard_assign(d) if tau == 0 else softmax(-d / tau, axis=-1)
    probs = p.reshape(n, h, w, vocab.k).transpose(0, 3, 1, 2)
    return AssignmentMap(probs=np.ascontiguousarray(probs).astype(fmap.dtype),
                         temperature=tau)


# ---------------------------------------------------------------------------
# QVWV file format

def save_vocabulary(path, vocab: Vocabulary) -> None:
    """Write the QVWV container; layout is fixed and bit-exact."""
    tap_bytes = vocab.tap.encode("utf-8")
    cents = np.ascontiguousarray(vocab.centroids.astype("<f4", copy=False))
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", _VERSION, vocab.k, vocab.dim))
        f.write(struct.pack("<I", len(tap_bytes)))
        f.write(tap_bytes)
        f.write(cents.tobytes())
        f.write(struct.pack("<d", float(vocab.kmeans_objective)))


def load_vocabulary(path) -> Vocabulary:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != _MAGIC:
        raise FormatError(f"{path}: not a QVWV vocabulary file")
    version, k, dim = struct.unpack("<III", data[4:16])
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported QVWV version {version}")
    (tap_len,) = struct.unpack("<I", data[16:20])
    pos = 20
    if len(data) < pos + tap_len + 4 * k * dim + 8:
        raise FormatError(f"{path}: truncated QVWV file")
    tap = data[pos:pos + tap_len].decode("utf-8")
    pos += tap_len
    cents = np.frombuffer(data[pos:pos + 4 * k * dim], dtype="<f4").reshape(k, dim)
    pos += 4 * k * dim
    (objective,) = struct.unpack("<d", data[pos:pos + 8])
    return Vocabulary(centroids=cents.astype(np.float32), tap=tap,
                      kmeans_objective=objective, seed=None)
