"""Multi-seed runs and the three comparison experiments (SGM, modality subsets, fusion kind)."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import replace
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import MODALITIES, Dataset
from .metrics import aggregate_runs, write_aggregate
from .shapley import read_trace
from .trainer import TrainConfig, run_training

log = logging.getLogger(__name__)

TABLE_METRICS = ("acc", "acc2_nonneg", "acc2_pos", "acc7", "f1_weighted", "f1_pos", "mae", "corr")


def run_seeds(
    config: TrainConfig,
    dataset: Dataset,
    out_root,
    seeds: Sequence[int],
    data_path: Optional[str] = None,
) -> List[dict]:
    """One run directory per seed plus aggregate.json / aggregate.csv over the checkpoint reports."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    finals = []
    for s in seeds:
        cfg = replace(config, seed=int(s), modalities=list(config.modalities))
        _, final = run_training(cfg, dataset, out_root / f"seed_{s}", data_path)
        final["seed"] = int(s)
        finals.append(final)
    agg = aggregate_runs([{k: f["best"][k] for k in TABLE_METRICS} for f in finals])
    write_aggregate(agg, out_root / "aggregate.json", out_root / "aggregate.csv")
    return finals


def _row(arm: str, seed: int, final: dict, extra: Optional[dict] = None) -> dict:
    row = {"arm": arm, "seed": seed}
    for which in ("best", "last"):
        for k in TABLE_METRICS:
            row[f"{which}_{k}"] = final[which][k]
    row["best_epoch"] = final["best_epoch"]
    row["transition_epoch"] = final["transition_epoch"]
    if extra:
        row.update(extra)
    return row


def _write_table(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def dominant_shift(trace_rows: List[dict], transition_epoch: Optional[int], modality: str):
    """Normalised Shapley value of ``modality`` at the transition epoch and at the last epoch."""
    rows = [r for r in trace_rows if r["modality"] == modality]
    if not rows or transition_epoch is None:
        return None, None
    at = [r["psi_norm"] for r in rows if r["epoch"] == transition_epoch]
    return (at[0] if at else None), rows[-1]["psi_norm"]


def sgm_ablation(
    config: TrainConfig,
    dataset: Dataset,
    out_root,
    seeds: Sequence[int],
    data_path: Optional[str] = None,
    dominant: str = "t",
    transition_epoch: int = 20,
) -> List[dict]:
    """Paired runs with and without Shapley modulation; SGM switches on after ``transition_epoch``."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    te = config.transition_epoch if config.transition_epoch is not None else transition_epoch
    rows = []
    for s in seeds:
        for arm, sgm in (("sgm_on", "on"), ("sgm_off", "off")):
            cfg = replace(config, seed=int(s), sgm=sgm, transition_epoch=te, modalities=list(config.modalities))
            run_dir = out_root / arm / f"seed_{s}"
            _, final = run_training(cfg, dataset, run_dir, data_path)
            extra = {"dominant_psi_at_transition": "", "dominant_psi_final": ""}
            if sgm == "on":
                at, end = dominant_shift(read_trace(run_dir / "shapley.csv"), final["transition_epoch"], dominant)
                extra = {"dominant_psi_at_transition": at, "dominant_psi_final": end}
            rows.append(_row(arm, int(s), final, extra))
    _write_table(rows, out_root / "comparison.csv")
    return rows


def modality_subsets(modalities: Sequence[str] = MODALITIES) -> List[List[str]]:
    return [list(c) for r in range(1, len(modalities) + 1) for c in combinations(modalities, r)]


def modality_sweep(
    config: TrainConfig,
    dataset: Dataset,
    out_root,
    seeds: Sequence[int],
    data_path: Optional[str] = None,
    subsets: Optional[Sequence[Sequence[str]]] = None,
) -> List[dict]:
    """Train on every nonempty modality subset with shared seeds."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for subset in subsets or modality_subsets():
        name = "+".join(m.upper() for m in subset)
        for s in seeds:
            cfg = replace(config, seed=int(s), modalities=list(subset))
            _, final = run_training(cfg, dataset, out_root / "".join(subset) / f"seed_{s}", data_path)
            rows.append(_row(name, int(s), final))
    _write_table(rows, out_root / "comparison.csv")
    return rows


def fusion_ablation(
    config: TrainConfig,
    dataset: Dataset,
    out_root,
    seeds: Sequence[int],
    data_path: Optional[str] = None,
    kinds: Sequence[str] = ("pgf", "sum", "concat", "attention"),
) -> List[dict]:
    """Same seeds and configuration; only the fusion kind changes."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for kind in kinds:
        for s in seeds:
            cfg = replace(config, seed=int(s), fusion=kind, modalities=list(config.modalities))
            _, final = run_training(cfg, dataset, out_root / kind / f"seed_{s}", data_path)
            rows.append(_row(kind, int(s), final))
    _write_table(rows, out_root / "comparison.csv")
    return rows


EXPERIMENTS = {
    "sgm-ablation": sgm_ablation,
    "modality-sweep": modality_sweep,
    "fusion-ablation": fusion_ablation,
}
