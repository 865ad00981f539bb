"""Datasets: a procedural synthetic benchmark plus binary CIFAR records.

The synthetic generator draws small RGB images whose class is determined by
texture (bar orientation, ring frequency, blob count) with jittered color,
phase, position and amplitude plus additive noise. Everything is a pure
function of the seed, so reruns are bit-identical.

CIFAR-style files are sequences of 3073-byte records: one label byte
followed by 3072 channel-major pixel bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError

RECORD_BYTES = 3073
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

# synthetic generator difficulty; noise keeps the weaker student short of
# the teacher so distillation has headroom
SYNTH_NOISE_STD = 0.10
SYNTH_SHADE = 0.06


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N,) int64
    split: str
    seed: int
    num_classes: int

    def __len__(self) -> int:
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# synthetic benchmark

def _render(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One (3, size, size) image for the given class, in [0, 1]."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    ys = (ys - size / 2) / size
    xs = (xs - size / 2) / size

    # labels 0..3: oriented bars; 4..5: rings at two frequencies; 6..7: blobs
    if label < 4:
        angle = label * np.pi / 4 + rng.uniform(-0.14, 0.14)
        freq = 5.0 * rng.uniform(0.85, 1.15)
        phase = rng.uniform(0, 2 * np.pi)
        t = xs * np.cos(angle) + ys * np.sin(angle)
        mask = 0.5 + 0.5 * np.sin(2 * np.pi * freq * t + phase)
    elif label < 6:
        freq = (3.0 if label == 4 else 5.2) * rng.uniform(0.88, 1.12)
        cy, cx = rng.uniform(-0.22, 0.22, size=2)
        r = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
        phase = rng.uniform(0, 2 * np.pi)
        mask = 0.5 + 0.5 * np.cos(2 * np.pi * freq * r + phase)
    else:
        n_blobs = 2 if label == 6 else 4
        mask = np.zeros_like(xs)
        for _ in range(n_blobs):
            cy, cx = rng.uniform(-0.32, 0.32, size=2)
            sig = rng.uniform(0.055, 0.085)
            mask += np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sig * sig))
        mask = np.clip(mask, 0.0, 1.0)

    # weak color cue: class base color heavily jittered, bright foreground
    # over a dark background so the texture carries most of the signal
    base = np.array([[0.9, 0.3, 0.3], [0.3, 0.9, 0.3], [0.3, 0.3, 0.9],
                     [0.9, 0.9, 0.3], [0.9, 0.3, 0.9], [0.3, 0.9, 0.9],
                     [0.8, 0.6, 0.4], [0.5, 0.5, 0.8]])[label % 8]
    color = 0.3 * base + 0.7 * rng.uniform(0.45, 0.95, size=3)
    bg = rng.uniform(0.05, 0.35, size=3)
    amp = rng.uniform(0.7, 1.1)

    img = bg[:, None, None] + amp * mask[None] * (color - bg)[:, None, None]
    # illumination gradient plus pixel noise keep color statistics unreliable
    gdir = rng.uniform(-1, 1, size=2)
    img = img + SYNTH_SHADE * (gdir[0] * ys + gdir[1] * xs)[None]
    img = img + rng.normal(0.0, SYNTH_NOISE_STD, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _make_split(seed: int, split: str, n: int, num_classes: int,
                size: int) -> Dataset:
    split_id = {"train": 1, "test": 2}[split]
    rng = np.random.default_rng(np.random.SeedSequence([seed, split_id]))
    labels = (np.arange(n) % num_classes).astype(np.int64)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        images[i] = _render(int(labels[i]), size, rng)
    return Dataset(images=images, labels=labels, split=split, seed=seed,
                   num_classes=num_classes)


def synth_generate(seed: int, num_classes: int = 8, n_train: int = 8000,
                   n_test: int = 2000, size: int = 32):
    """Deterministic (train, test) pair of synthetic Datasets."""
    if num_classes < 2 or num_classes > 8:
        raise ConfigurationError("synth_generate: num_classes must be in 2..8")
    if n_train < num_classes or n_test < 1:
        raise ConfigurationError("synth_generate: split sizes too small")
    train = _make_split(seed, "train", n_train, num_classes, size)
    test = _make_split(seed, "test", n_test, num_classes, size)
    return train, test


# ---------------------------------------------------------------------------
# binary records

def load_cifar_binary(path, split: str = "train", normalize: bool = True,
                      mean=CIFAR10_MEAN, std=CIFAR10_STD) -> Dataset:
    """Read 3073-byte records; labels 0..9, pixels scaled to [0,1] then
    normalized per channel unless normalize is False."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of {RECORD_BYTES}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} out of range 0..9")
    images = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    if normalize:
        m = np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
        s = np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)
        images = (images - m) / s
    return Dataset(images=images, labels=labels, split=split, seed=-1,
                   num_classes=10)


def save_records(dataset: Dataset, path) -> None:
    """Dump a dataset into the 3073-byte record format (labels must be < 256;
    images are clipped to [0,1] and quantized to bytes)."""
    n = len(dataset)
    if dataset.images.shape[1:] != (3, 32, 32):
        raise FormatError("save_records: images must be (N, 3, 32, 32)")
    if dataset.labels.max() > 255 or dataset.labels.min() < 0:
        raise FormatError("save_records: labels must fit one byte")
    out = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = dataset.labels.astype(np.uint8)
    pix = np.clip(dataset.images, 0.0, 1.0) * 255.0
    out[:, 1:] = np.rint(pix).astype(np.uint8).reshape(n, -1)
    Path(path).write_bytes(out.tobytes())


# ---------------------------------------------------------------------------
# batching

def hflip(images: np.ndarray) -> np.ndarray:
    """Horizontal flip along the width axis."""
    return np.ascontiguousarray(images[..., ::-1])


def batch_iter(dataset: Dataset, batch_size: int, shuffle_seed: int,
               augment: str = "none", epoch: int = 0,
               with_indices: bool = False):
    """Yield (images, labels) covering every sample exactly once per epoch.

    Order is a pure function of (shuffle_seed, epoch); augmentation draws
    come from an independent stream so order and flips decouple. The final
    batch may be short. with_indices switches to (indices, images, labels)
    triples.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_iter: batch_size must be >= 1")
    if augment not in ("none", "flip"):
        raise ConfigurationError(f"batch_iter: unknown augment '{augment}'")
    n = len(dataset)
    order = np.random.default_rng(
        np.random.SeedSequence([shuffle_seed, epoch, 0])).permutation(n)
    flips = None
    if augment == "flip":
        flips = np.random.default_rng(
            np.random.SeedSequence([shuffle_seed, epoch, 1])).random(n) < 0.5
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        images = dataset.images[idx]
        if flips is not None:
            f = flips[idx]
            if f.any():
                images = images.copy()
                images[f] = hflip(images[f])
        if with_indices:
            yield idx, images, dataset.labels[idx]
        else:
            yield images, dataset.labels[idx]
