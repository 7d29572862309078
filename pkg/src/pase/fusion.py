"""Entropy-guided modality weights, prototype-gated fusion, head and baseline fusions."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .diffcore import Graph, ParamSet, ShapeError

log = logging.getLogger(__name__)

FUSION_KINDS = ("pgf", "sum", "concat", "attention")


def glorot(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-lim, lim, size=(d_in, d_out))


def add_linear(params: ParamSet, prefix: str, d_in: int, d_out: int, group: str, rng) -> None:
    params.add(f"{prefix}.W", glorot(rng, d_in, d_out), group)
    params.add(f"{prefix}.b", np.zeros((1, d_out)), group)


def linear(g: Graph, p: Mapping[str, int], prefix: str, x: int) -> int:
    return g.add(g.matmul(x, p[f"{prefix}.W"]), p[f"{prefix}.b"])


def mlp(g: Graph, p: Mapping[str, int], prefix: str, x: int) -> int:
    """Two linear layers with a ReLU between."""
    return linear(g, p, f"{prefix}.2", g.relu(linear(g, p, f"{prefix}.1", x)))


# -- entropy weighting -------------------------------------------------------


def modality_score(p_true) -> float:
    """1 - mean(p log p) over the true-class probabilities of one modality."""
    p = np.asarray(p_true, dtype=np.float64)
    if np.any(p <= 0):
        log.warning("modality_score: %d probabilities clamped to 1e-12", int(np.sum(p <= 0)))
        p = np.maximum(p, 1e-12)
    return float(1.0 - np.mean(p * np.log(p)))


@dataclass
class ModalityWeights:
    alpha: Dict[str, float]
    scores: Dict[str, float]


def modality_weights(scores: Mapping[str, float], invert: bool = False) -> ModalityWeights:
    """Softmax of the modality scores (of their negatives when ``invert``)."""
    names = list(scores)
    s = np.array([scores[m] for m in names], dtype=np.float64)
    if invert:
        s = -s
    e = np.exp(s - s.max())
    w = e / e.sum()
    return ModalityWeights({m: float(x) for m, x in zip(names, w)}, dict(scores))


# -- parameters --------------------------------------------------------------


@dataclass
class FusionSpec:
    kind: str
    dims: Dict[str, int]
    k: int
    ffn_hidden: int = 128
    fusion_dim: int = 64
    head_hidden: int = 64
    att_dim: Optional[int] = None

    @property
    def modalities(self):
        return list(self.dims)

    @property
    def out_dim(self) -> int:
        if self.kind in ("pgf", "concat"):
            return self.fusion_dim
        if self.kind == "attention":
            return self.att_dim or max(self.dims.values())
        return next(iter(self.dims.values()))


def init_fusion_params(params: ParamSet, spec: FusionSpec, rng: np.random.Generator) -> None:
    """Gates, FFN, attention projections and the prediction head; all in the shared group."""
    if spec.kind not in FUSION_KINDS:
        raise ValueError(f"unknown fusion kind {spec.kind!r}; expected one of {FUSION_KINDS}")
    dims = spec.dims
    if spec.kind == "pgf":
        for m, d in dims.items():
            add_linear(params, f"gate.{m}", 2 * d, d, "shared", rng)
    if spec.kind in ("pgf", "concat"):
        total = sum(dims.values())
        add_linear(params, "ffn.1", total, spec.ffn_hidden, "shared", rng)
        add_linear(params, "ffn.2", spec.ffn_hidden, spec.fusion_dim, "shared", rng)
    if spec.kind == "sum" and len(set(dims.values())) != 1:
        raise ShapeError(f"sum fusion needs equal modality dims, got {dims}")
    if spec.kind == "attention":
        da = spec.out_dim
        for m, d in dims.items():
            params.add(f"att.{m}.P", glorot(rng, d, da), "shared")
        params.add("att.w", glorot(rng, da, 1), "shared")
    add_linear(params, "head.1", spec.out_dim, spec.head_hidden, "shared", rng)
    add_linear(params, "head.2", spec.head_hidden, spec.k, "shared", rng)


# -- fusion ------------------------------------------------------------------


def gate(g: Graph, p: Mapping[str, int], m: str, h: int, proto_rows: np.ndarray, alpha: float) -> int:
    """sigmoid(W [alpha * h ; c_y] + b)."""
    x = g.concat_cols(g.scale(h, alpha), g.leaf(proto_rows))
    return g.sigmoid(linear(g, p, f"gate.{m}", x))


def pgf_fuse(
    g: Graph,
    p: Mapping[str, int],
    h: Mapping[str, int],
    proto_rows: Mapping[str, np.ndarray],
    alpha: Mapping[str, float],
    gate_override: Optional[float] = None,
):
    """Prototype-gated fusion. Returns ``(h_fusion, gates)``.

    ``proto_rows[m]`` holds the selected class prototype per sample (B x d).
    ``gate_override`` pins every gate entry to a constant, used for ablations.
    """
    gated, gates = [], {}
    for m in h:
        if gate_override is None:
            gm = gate(g, p, m, h[m], proto_rows[m], alpha[m])
        else:
            gm = g.leaf(np.full(g.value(h[m]).shape, float(gate_override)))
        gates[m] = gm
        gated.append(g.mul(gm, h[m]))
    return mlp(g, p, "ffn", g.concat_cols(*gated)), gates


def predict_logits(g: Graph, p: Mapping[str, int], fused: int) -> int:
    return mlp(g, p, "head", fused)


def predict(g: Graph, p: Mapping[str, int], fused: int) -> int:
    """Class distribution per sample."""
    return g.softmax_rows(predict_logits(g, p, fused))


def baseline_fuse(g: Graph, p: Mapping[str, int], kind: str, h: Mapping[str, int]) -> int:
    ms = list(h)
    if kind == "sum":
        shapes = {g.value(h[m]).shape for m in ms}
        if len(shapes) != 1:
            raise ShapeError(f"sum fusion: mismatched modality shapes {sorted(shapes)} and no projection")
        out = g.add_n(*[h[m] for m in ms])
        return g.scale(out, 1.0 / len(ms))
    if kind == "concat":
        return mlp(g, p, "ffn", g.concat_cols(*[h[m] for m in ms]))
    if kind == "attention":
        proj = {m: g.matmul(h[m], p[f"att.{m}.P"]) for m in ms}
        scores = g.concat_cols(*[g.matmul(proj[m], p["att.w"]) for m in ms])
        w = g.softmax_rows(scores)  # B x M
        da = g.value(proj[ms[0]]).shape[1]
        spread = g.leaf(np.ones((1, da)))
        parts = []
        for j, m in enumerate(ms):
            pick = np.zeros((len(ms), 1))
            pick[j] = 1.0
            wm = g.matmul(g.matmul(w, g.leaf(pick)), spread)  # B x da
            parts.append(g.mul(wm, proj[m]))
        return g.add_n(*parts)
    raise ValueError(f"unknown baseline fusion {kind!r}")
