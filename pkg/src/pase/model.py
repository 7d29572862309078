"""Encoders, unimodal probes and the fused classifier wired onto one ParamSet."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .diffcore import Graph, ParamSet
from .fusion import (
    FusionSpec,
    add_linear,
    baseline_fuse,
    glorot,
    init_fusion_params,
    linear,
    mlp,
    modality_score,
    modality_weights,
    pgf_fuse,
    predict_logits,
)
from .prototypes import PrototypeBank, class_means, one_hot


@dataclass
class Forward:
    """Node ids and side values from one forward pass."""

    h: Dict[str, int]
    probe_logp: Dict[str, int]
    alpha: Dict[str, float]
    scores: Dict[str, float]
    selected: Dict[str, np.ndarray]
    fused: int
    gates: Dict[str, int]
    logits: int
    logp: int


class PaSEModel:
    def __init__(
        self,
        modalities: Sequence[str],
        in_dims: Mapping[str, int],
        k: int,
        *,
        embed_dim=32,
        encoder_hidden: int = 64,
        fusion: str = "pgf",
        ffn_hidden: int = 128,
        fusion_dim: int = 64,
        head_hidden: int = 64,
        align_dim: int = 64,
        gamma: float = 0.98,
        tau: float = 0.07,
        invert_entropy_weighting: bool = False,
        seed: int = 0,
    ):
        self.modalities = list(modalities)
        self.k = k
        self.fusion = fusion
        self.invert = invert_entropy_weighting
        if isinstance(embed_dim, Mapping):
            self.embed = {m: int(embed_dim[m]) for m in self.modalities}
        else:
            self.embed = {m: int(embed_dim) for m in self.modalities}
        rng = np.random.default_rng([seed, 1])
        p = ParamSet()
        for m in self.modalities:
            add_linear(p, f"enc.{m}.1", in_dims[m], encoder_hidden, m, rng)
            add_linear(p, f"enc.{m}.2", encoder_hidden, self.embed[m], m, rng)
        self.projected = len(set(self.embed.values())) > 1
        if self.projected:
            for m in self.modalities:
                p.add(f"align.{m}.P", glorot(rng, self.embed[m], align_dim), m)
        for m in self.modalities:
            add_linear(p, f"probe.{m}", self.embed[m], k, "shared", rng)
        spec = FusionSpec(fusion, dict(self.embed), k, ffn_hidden, fusion_dim, head_hidden)
        init_fusion_params(p, spec, rng)
        self.params = p
        self.bank = PrototypeBank(k, dict(self.embed), gamma, tau)

    # -- pieces ---------------------------------------------------------------

    def encode(self, g: Graph, p: Mapping[str, int], x: Mapping[str, np.ndarray]) -> Dict[str, int]:
        return {m: mlp(g, p, f"enc.{m}", g.leaf(x[m])) for m in self.modalities}

    def probes(self, g: Graph, p: Mapping[str, int], h_values: Mapping[str, np.ndarray]) -> Dict[str, int]:
        """Per-modality linear probes on detached features."""
        return {
            m: g.log_softmax_rows(linear(g, p, f"probe.{m}", g.leaf(h_values[m])))
            for m in self.modalities
        }

    def weights(self, g: Graph, probe_logp: Mapping[str, int], labels: Optional[np.ndarray]):
        """Entropy-guided weights from true-class probe probabilities.

        Without labels (inference) each probe's own prediction stands in for y.
        """
        scores = {}
        for m, node in probe_logp.items():
            logp = g.value(node)
            y = np.argmax(logp, axis=1) if labels is None else labels
            scores[m] = modality_score(np.exp(logp[np.arange(len(y)), y]))
        return modality_weights(scores, invert=self.invert)

    def forward(
        self,
        g: Graph,
        p: Mapping[str, int],
        h: Mapping[str, int],
        labels: Optional[np.ndarray] = None,
        gate_override: Optional[float] = None,
    ) -> Forward:
        """Probes, weights, fusion and head on encoded features ``h``.

        Prototypes are selected by ``labels`` when given, else by each
        modality's probe prediction.
        """
        probe_logp = self.probes(g, p, {m: g.value(h[m]) for m in self.modalities})
        w = self.weights(g, probe_logp, labels)
        selected = {}
        for m in self.modalities:
            selected[m] = labels if labels is not None else np.argmax(g.value(probe_logp[m]), axis=1)
        gates: Dict[str, int] = {}
        if self.fusion == "pgf":
            rows = {m: self.bank.select(m, selected[m]) for m in self.modalities}
            fused, gates = pgf_fuse(g, p, h, rows, w.alpha, gate_override)
        else:
            fused = baseline_fuse(g, p, self.fusion, h)
        logits = predict_logits(g, p, fused)
        return Forward(h, probe_logp, w.alpha, w.scores, selected, fused, gates, logits, g.log_softmax_rows(logits))

    def batch_prototypes(self, g: Graph, h: int, m: str, labels: np.ndarray) -> int:
        """Graph-connected prototypes: batch class means, bank rows for absent classes."""
        counts = np.bincount(labels, minlength=self.k).astype(np.float64)
        avg = one_hot(labels, self.k).T
        present = counts > 0
        avg[present] /= counts[present, None]
        fill = np.where(present[:, None], 0.0, self.bank.protos[m])
        return g.add(g.matmul(g.leaf(avg), h), g.leaf(fill))

    def projections(self, p: Mapping[str, int]) -> Optional[Dict[str, int]]:
        if not self.projected:
            return None
        return {m: p[f"align.{m}.P"] for m in self.modalities}


def cross_entropy(g: Graph, logp: int, labels: np.ndarray, k: int) -> int:
    """Mean negative log-likelihood of the true classes."""
    picked = g.sum_all(g.mul(logp, g.leaf(one_hot(labels, k))))
    return g.scale(picked, -1.0 / len(labels))
