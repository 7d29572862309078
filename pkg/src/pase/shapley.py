"""Shapley-value contribution of each modality and the resulting learning-rate modulation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from itertools import combinations
from math import factorial
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

Coalition = FrozenSet[str]


def utility(l_inter: float, l_intra: float, rho: float = 0.5) -> float:
    """rho / (1 + inter) + (1 - rho) / (1 + intra)."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if l_inter < 0 or l_intra < 0:
        raise ValueError(f"losses must be nonnegative, got inter={l_inter}, intra={l_intra}")
    return rho / (1.0 + l_inter) + (1.0 - rho) / (1.0 + l_intra)


def coalitions(players: Sequence[str]) -> List[Coalition]:
    return [frozenset(c) for r in range(len(players) + 1) for c in combinations(players, r)]


def subset_utilities(
    players: Sequence[str],
    intra: Mapping[str, float],
    inter: Mapping[tuple, float],
    rho: float = 0.5,
) -> Dict[Coalition, float]:
    """Utility of every coalition from per-modality and per-pair losses.

    A coalition's intra loss is the mean over its members; its inter loss is
    the sum over the pairs it contains (zero below two members). The empty
    coalition is worth 0.
    """
    table: Dict[Coalition, float] = {}
    for s in coalitions(players):
        if not s:
            table[s] = 0.0
            continue
        l_intra = float(np.mean([intra[m] for m in sorted(s, key=players.index)]))
        l_inter = sum(v for pair, v in inter.items() if set(pair) <= s)
        table[s] = utility(l_inter, l_intra, rho)
    return table


def shapley_values(table: Mapping[Coalition, float], players: Sequence[str]) -> Dict[str, float]:
    """Exact Shapley values by enumerating the coalitions without each player."""
    k = len(players)
    psi = {}
    for m in players:
        others = [p for p in players if p != m]
        total = 0.0
        for r in range(k):
            w = factorial(r) * factorial(k - r - 1) / factorial(k)
            for s in combinations(others, r):
                s = frozenset(s)
                try:
                    total += w * (table[s | {m}] - table[s])
                except KeyError as exc:
                    raise KeyError(f"missing utility for coalition {sorted(exc.args[0])}") from None
        psi[m] = total
    return psi


def modulation_factors(psi: Mapping[str, float]):
    """Normalised values and per-modality factors exp(min/psi_m - 1).

    Returns ``(psi_norm, phi, fallback)``. If any value is nonpositive the
    factors fall back to 1 and ``fallback`` is True.
    """
    names = list(psi)
    raw = np.array([psi[m] for m in names], dtype=np.float64)
    total = raw.sum()
    norm = raw / total if total != 0 else np.full_like(raw, np.nan)
    if np.any(raw <= 0):
        log.info("nonpositive Shapley value %s; modulation disabled for this epoch", dict(psi))
        return dict(zip(names, norm.tolist())), {m: 1.0 for m in names}, True
    phi = np.exp(norm.min() / norm - 1.0)
    return dict(zip(names, norm.tolist())), dict(zip(names, phi.tolist())), False


@dataclass
class ShapleyReport:
    epoch: int
    psi: Dict[str, float]
    psi_norm: Dict[str, float]
    phi: Dict[str, float]
    fallback: bool = False
    utilities: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_table(cls, epoch: int, table, players) -> "ShapleyReport":
        psi = shapley_values(table, players)
        norm, phi, fallback = modulation_factors(psi)
        utilities = {"".join(sorted(s, key=players.index)) or "-": u for s, u in table.items()}
        return cls(epoch, psi, norm, phi, fallback, utilities)


def modulate_update(params, optimizer, phi: Optional[Mapping[str, float]]) -> None:
    """One optimizer step with each modality group's learning rate scaled by its factor.

    Groups without an entry (the shared fusion/head group) keep factor 1.
    """
    optimizer.step(params, lr_scale=phi)


TRACE_COLUMNS = ["epoch", "modality", "psi", "psi_norm", "phi"]


def write_trace(reports: Iterable[ShapleyReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in reports:
            for m in r.psi:
                w.writerow([r.epoch, m, repr(r.psi[m]), repr(r.psi_norm[m]), repr(r.phi[m])])


def read_trace(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["epoch"] = int(row["epoch"])
        for key in ("psi", "psi_norm", "phi"):
            row[key] = float(row[key])
    return rows
