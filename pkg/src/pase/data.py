"""Datasets: PASE1 binary files, synthetic three-modality data, label binning."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

MODALITIES = ("t", "a", "v")
SPLITS = {"train": 0, "val": 1, "test": 2}

MAGIC = b"PASE1\0"
_HEADER = struct.Struct("<6sIIIIIB")


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: Dict[str, np.ndarray]
    labels: np.ndarray
    k: int
    split: np.ndarray
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.labels)
        for m in MODALITIES:
            x = self.features[m]
            if x.ndim != 2 or x.shape[0] != n:
                raise ValueError(f"modality {m}: expected {n} rows, got shape {x.shape}")
        if self.k < 2:
            raise ValueError("K ≥ 2 required")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError("label out of range")
        if self.split.shape != (n,) or (n and self.split.max() > 2):
            raise ValueError("split tags must be one of 0/1/2 per sample")
        if self.scores is not None and self.scores.shape != (n,):
            raise ValueError("scores must have one entry per sample")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dims(self) -> Dict[str, int]:
        return {m: self.features[m].shape[1] for m in MODALITIES}

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLITS[split])

    def equals(self, other: "Dataset") -> bool:
        same = (
            self.k == other.k
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.split, other.split)
            and all(np.array_equal(self.features[m], other.features[m]) for m in MODALITIES)
        )
        if (self.scores is None) != (other.scores is None):
            return False
        return same and (self.scores is None or np.array_equal(self.scores, other.scores))


def save_features(ds: Dataset, path) -> None:
    d = ds.dims
    parts = [_HEADER.pack(MAGIC, ds.n, ds.k, d["t"], d["a"], d["v"], int(ds.scores is not None))]
    for m in MODALITIES:
        parts.append(np.ascontiguousarray(ds.features[m], dtype="<f8").tobytes())
    parts.append(np.asarray(ds.labels, dtype="<u4").tobytes())
    if ds.scores is not None:
        parts.append(np.asarray(ds.scores, dtype="<f8").tobytes())
    parts.append(np.asarray(ds.split, dtype="u1").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_features(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes at offset 0, need {_HEADER.size}")
    magic, n, k, dt, da, dv, has_scores = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if k < 2:
        raise FormatError(f"K={k} at offset 10; K ≥ 2 required")
    if has_scores not in (0, 1):
        raise FormatError(f"has_scores flag {has_scores} at offset 26 is not 0/1")
    off = _HEADER.size

    def take(count, dtype, what):
        nonlocal off
        size = count * np.dtype(dtype).itemsize
        if off + size > len(buf):
            raise FormatError(f"truncated payload reading {what} at offset {off}")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += size
        return arr

    feats = {}
    for m, d in zip(MODALITIES, (dt, da, dv)):
        feats[m] = take(n * d, "<f8", f"features[{m}]").astype(np.float64).reshape(n, d)
    label_off = off
    labels = take(n, "<u4", "labels").astype(np.int64)
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        raise FormatError(
            f"label out of range: {labels[bad[0]]} >= K={k} at offset {label_off + 4 * bad[0]}"
        )
    scores = take(n, "<f8", "scores").astype(np.float64) if has_scores else None
    split_off = off
    split = take(n, "u1", "split tags").astype(np.uint8)
    if n and split.max() > 2:
        i = int(np.argmax(split > 2))
        raise FormatError(f"split tag {split[i]} at offset {split_off + i} is not 0/1/2")
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes at offset {off}")
    return Dataset(features=feats, labels=labels, k=int(k), split=split, scores=scores)


def split_tags(n: int, seed: int, fractions=(0.7, 0.1, 0.2)) -> np.ndarray:
    """Shuffled 70/10/20 train/val/test assignment, a function of (seed, n) only."""
    order = np.random.default_rng([seed, n, 7]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    tags = np.empty(n, dtype=np.uint8)
    tags[order[:n_train]] = 0
    tags[order[n_train : n_train + n_val]] = 1
    tags[order[n_train + n_val :]] = 2
    return tags


def class_values(k: int) -> np.ndarray:
    """Centre of each class on the [-3, 3] sentiment scale."""
    return np.linspace(-3.0, 3.0, k)


@dataclass
class SynthSpec:
    n: int = 3000
    k: int = 3
    dims: Tuple[int, int, int] = (16, 12, 8)
    separation: Tuple[float, float, float] = (3.0, 0.8, 0.8)
    noise: float = 1.0
    score_noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.k < 2:
            raise ValueError("K ≥ 2 required")
        if self.n < self.k:
            raise ValueError("N >= K required")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three positive integers")
        if len(self.separation) != 3 or min(self.separation) < 0:
            raise ValueError("separations must be three nonnegative numbers")
        if self.noise <= 0:
            raise ValueError("noise must be positive")


def _centroids(rng, k: int, d: int, sep: float) -> np.ndarray:
    # orthonormal directions scaled so that every pair of centroids is `sep` apart
    if d >= k:
        q, _ = np.linalg.qr(rng.standard_normal((d, k)))
        dirs = q.T
    else:
        dirs = rng.standard_normal((k, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * (sep / np.sqrt(2.0))


def gen_synthetic(spec: SynthSpec) -> Dataset:
    """Class-conditional isotropic Gaussians; a modality's separation sets how informative it is."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = rng.permutation(np.arange(spec.n) % spec.k)
    feats = {}
    for m, d, sep in zip(MODALITIES, spec.dims, spec.separation):
        mu = _centroids(rng, spec.k, d, sep)
        feats[m] = mu[labels] + spec.noise * rng.standard_normal((spec.n, d))
    scores = class_values(spec.k)[labels]
    if spec.score_noise > 0:
        scores = scores + spec.score_noise * rng.standard_normal(spec.n)
    scores = np.clip(scores, -3.0, 3.0)
    return Dataset(feats, labels.astype(np.int64), spec.k, split_tags(spec.n, spec.seed), scores)


def bin_labels(scores, k: int):
    """Bin sentiment scores in [-3, 3].

    k=7 returns classes 0..6. k=2 returns ``(nonneg, pos)``: ``nonneg`` is
    negative (0) vs non-negative (1); ``pos`` is negative (0) vs positive (1)
    with zeros marked -1 (excluded).
    """
    s = np.asarray(scores, dtype=np.float64)
    if np.any(~np.isfinite(s)) or np.any(s < -3.0) or np.any(s > 3.0):
        raise ValueError("score outside [-3, 3]")
    if k == 7:
        return (np.clip(np.round(s), -3, 3) + 3).astype(np.int64)
    if k == 2:
        nonneg = (s >= 0).astype(np.int64)
        pos = np.where(s > 0, 1, 0).astype(np.int64)
        pos[s == 0] = -1
        return nonneg, pos
    raise ValueError(f"k must be 2 or 7, got {k}")


def class_mean_probe(x_train, y_train, x_test, k: int) -> np.ndarray:
    """Nearest class-mean classifier; returns predicted labels for x_test."""
    means = np.stack(
        [x_train[y_train == c].mean(axis=0) if np.any(y_train == c) else np.full(x_train.shape[1], np.inf) for c in range(k)]
    )
    d2 = ((x_test[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def probe_accuracy(ds: Dataset) -> Dict[str, float]:
    """Per-modality nearest-mean probe accuracy, fit on train and scored on test."""
    tr, te = ds.indices("train"), ds.indices("test")
    out = {}
    for m in MODALITIES:
        x = ds.features[m]
        pred = class_mean_probe(x[tr], ds.labels[tr], x[te], ds.k)
        out[m] = float(np.mean(pred == ds.labels[te]))
    return out
