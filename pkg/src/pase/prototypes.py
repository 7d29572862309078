"""Per-class, per-modality prototypes with momentum and the calibration loss."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Tuple

import numpy as np

from .diffcore import Graph


class PrototypeError(RuntimeError):
    pass


def class_means(x: np.ndarray, labels: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class means and a mask of which classes are present."""
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    present = counts > 0
    means = np.zeros_like(sums)
    means[present] = sums[present] / counts[present, None]
    return means, present


@dataclass
class PrototypeBank:
    k: int
    dims: Dict[str, int]
    gamma: float = 0.98
    tau: float = 0.07
    protos: Dict[str, np.ndarray] = field(default_factory=dict)
    initialized: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for m, d in self.dims.items():
            self.protos.setdefault(m, np.zeros((self.k, d)))
            self.initialized.setdefault(m, np.zeros(self.k, dtype=bool))

    @property
    def modalities(self):
        return list(self.dims)

    def ready(self, m: str) -> bool:
        return bool(self.initialized[m].all())

    def init_from(self, feats: Mapping[str, np.ndarray], labels: np.ndarray) -> None:
        """Set each seen class's prototype to its batch mean."""
        for m, x in feats.items():
            means, present = class_means(x, labels, self.k)
            self.protos[m][present] = means[present]
            self.initialized[m] |= present

    def ema_update(self, feats: Mapping[str, np.ndarray], labels: np.ndarray) -> None:
        """Momentum update toward batch means; first sight of a class initialises it."""
        g = self.gamma
        for m, x in feats.items():
            means, present = class_means(x, labels, self.k)
            fresh = present & ~self.initialized[m]
            old = present & self.initialized[m]
            self.protos[m][fresh] = means[fresh]
            self.protos[m][old] = g * self.protos[m][old] + (1.0 - g) * means[old]
            self.initialized[m] |= present

    def require(self, m: str, classes: Iterable[int] = None) -> None:
        ks = range(self.k) if classes is None else classes
        for k in ks:
            if not self.initialized[m][k]:
                raise PrototypeError(f"prototype ({m}, {k}) is not initialized")

    def select(self, m: str, classes: np.ndarray) -> np.ndarray:
        """Rows c_y for a vector of class indices."""
        self.require(m, np.unique(classes))
        return self.protos[m][classes]

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(
            self.k,
            dict(self.dims),
            self.gamma,
            self.tau,
            {m: p.copy() for m, p in self.protos.items()},
            {m: f.copy() for m, f in self.initialized.items()},
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["modality", "class", "dim", "value"])
            for m, p in self.protos.items():
                for k in range(self.k):
                    for j in range(p.shape[1]):
                        w.writerow([m, k, j, repr(float(p[k, j]))])


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def similarity_logits(g: Graph, h: int, protos: int, tau: float, kind: str = "cosine") -> int:
    """B x K matrix of phi(h_i, c_k) / tau."""
    if kind == "cosine":
        h, protos = g.l2_normalize_rows(h), g.l2_normalize_rows(protos)
    elif kind != "dot":
        raise ValueError(f"unknown similarity {kind!r}")
    return g.scale(g.matmul(h, g.transpose(protos)), 1.0 / tau)


def intra_loss(
    g: Graph, bank: PrototypeBank, m: str, h: int, labels: np.ndarray, similarity: str = "cosine"
) -> int:
    """Prototype calibration loss for modality ``m``; prototypes enter as constants."""
    bank.require(m)
    c = g.leaf(bank.protos[m])
    logp = g.log_softmax_rows(similarity_logits(g, h, c, bank.tau, similarity))
    picked = g.sum_all(g.mul(logp, g.leaf(one_hot(labels, bank.k))))
    return g.scale(picked, -1.0 / len(labels))
