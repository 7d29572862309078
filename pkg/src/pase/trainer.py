"""Dual-phase training: warm-up on the full objective, then Shapley-modulated updates."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import MODALITIES, Dataset
from .diffcore import SGD, Adam, Graph, ParamSet
from .metrics import MetricsReport, compute_metrics
from .model import PaSEModel, cross_entropy
from .otalign import all_pairs, inter_loss
from .prototypes import PrototypeBank, intra_loss
from .shapley import ShapleyReport, modulate_update, subset_utilities, write_trace

log = logging.getLogger(__name__)

WARMUP, BALANCED = "warmup", "balanced"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    k: Optional[int] = None
    dims: Optional[Dict[str, int]] = None
    modalities: List[str] = field(default_factory=lambda: list(MODALITIES))
    embed_dim: int = 32
    encoder_hidden: int = 64
    ffn_hidden: int = 128
    fusion_dim: int = 64
    head_hidden: int = 64
    align_dim: int = 64
    lr: float = 1e-5
    batch_size: int = 64
    max_epochs: int = 200
    gamma: float = 0.98
    ot_reg: float = 0.01
    mu: float = 0.1
    alpha: float = 0.1
    beta: float = 0.05
    tau: float = 0.07
    rho: float = 0.5
    patience: int = 5
    min_delta: float = 1e-3
    transition_epoch: Optional[int] = None
    seed: int = 0
    fusion: str = "pgf"
    sgm: str = "on"
    inter_mode: str = "ema"
    similarity: str = "cosine"
    plateau_metric: str = "accuracy"
    invert_entropy_weighting: bool = False
    ema_in_phase2: bool = True
    optimizer: str = "adam"
    sinkhorn_max_iter: int = 500
    sinkhorn_tol: float = 1e-6

    def validate(self, n_train: Optional[int] = None) -> None:
        positive = ("embed_dim", "encoder_hidden", "ffn_hidden", "fusion_dim", "head_hidden",
                    "align_dim", "lr", "batch_size", "max_epochs", "ot_reg", "tau", "patience")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("mu", "alpha", "beta", "min_delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 <= self.gamma <= 1 or not 0 <= self.rho <= 1:
            raise ValueError("gamma and rho must lie in [0, 1]")
        if not self.modalities or any(m not in MODALITIES for m in self.modalities):
            raise ValueError(f"modalities must be a nonempty subset of {MODALITIES}")
        choices = {
            "fusion": ("pgf", "sum", "concat", "attention"),
            "sgm": ("on", "off"),
            "inter_mode": ("ema", "batch"),
            "similarity": ("cosine", "dot"),
            "plateau_metric": ("accuracy", "entropy"),
            "optimizer": ("adam", "sgd"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.transition_epoch is not None and self.transition_epoch < 1:
            raise ValueError("transition_epoch must be >= 1")
        if n_train is not None and self.batch_size > n_train:
            raise ValueError(f"batch_size {self.batch_size} exceeds training set size {n_train}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.modalities = list(cfg.modalities)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


# -- losses ------------------------------------------------------------------


def align_loss(g: Graph, intra: Mapping[str, int], alpha: Mapping[str, float], inter: int) -> int:
    """Weighted intra-modal calibration plus the cross-modal term."""
    terms = [g.scale(intra[m], alpha[m]) for m in intra]
    return g.add(g.add_n(*terms), inter)


def total_loss(g: Graph, task: int, align: int, mu: float) -> int:
    return g.add(task, g.scale(align, mu))


# -- state -------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    model: PaSEModel
    optimizer: object
    epoch: int = 0
    phase: str = WARMUP
    transition_epoch: Optional[int] = None
    plateau_best: float = -np.inf
    plateau_last: Optional[float] = None
    since_improve: int = 0
    best_val: float = -np.inf
    best_epoch: int = 0
    checkpoint: Optional[Tuple[Dict[str, np.ndarray], PrototypeBank]] = None
    shapley: List[ShapleyReport] = field(default_factory=list)
    phi: Optional[Dict[str, float]] = None
    history: List[dict] = field(default_factory=list)


def build_state(config: TrainConfig, dataset: Dataset) -> TrainState:
    config.validate(len(dataset.indices("train")))
    if config.k is not None and config.k != dataset.k:
        raise ValueError(f"config K={config.k} but dataset K={dataset.k}")
    if config.dims is not None and any(config.dims[m] != dataset.dims[m] for m in config.dims):
        raise ValueError(f"config dims {config.dims} do not match dataset dims {dataset.dims}")
    model = PaSEModel(
        config.modalities,
        dataset.dims,
        dataset.k,
        embed_dim=config.embed_dim,
        encoder_hidden=config.encoder_hidden,
        fusion=config.fusion,
        ffn_hidden=config.ffn_hidden,
        fusion_dim=config.fusion_dim,
        head_hidden=config.head_hidden,
        align_dim=config.align_dim,
        gamma=config.gamma,
        tau=config.tau,
        invert_entropy_weighting=config.invert_entropy_weighting,
        seed=config.seed,
    )
    opt = Adam(config.lr) if config.optimizer == "adam" else SGD(config.lr)
    return TrainState(config, model, opt)


def _subset(dataset: Dataset, idx: np.ndarray, modalities) -> Dict[str, np.ndarray]:
    return {m: dataset.features[m][idx] for m in modalities}


# -- one batch ---------------------------------------------------------------


@dataclass
class StepResult:
    total: float
    task: float
    align: float
    intra: Dict[str, float]
    inter: float
    alpha: Dict[str, float]
    correct: int
    unconverged: int


def train_step(state: TrainState, x: Mapping[str, np.ndarray], y: np.ndarray, update_bank: bool = True) -> StepResult:
    cfg, model = state.config, state.model
    g = Graph()
    p = model.params.bind(g)
    h = model.encode(g, p, x)
    if update_bank:
        model.bank.ema_update({m: g.value(h[m]) for m in model.modalities}, y)
    fwd = model.forward(g, p, h, y)
    task = cross_entropy(g, fwd.logp, y, model.k)
    if _bank_ready(model):
        intra = {m: intra_loss(g, model.bank, m, h[m], y, cfg.similarity) for m in model.modalities}
        if cfg.inter_mode == "batch":
            protos = {m: model.batch_prototypes(g, h[m], m, y) for m in model.modalities}
        else:
            protos = {m: g.leaf(model.bank.protos[m]) for m in model.modalities}
        inter, report = inter_loss(
            g, protos, all_pairs(model.modalities), cfg.alpha, cfg.beta, cfg.ot_reg,
            model.projections(p), cfg.sinkhorn_max_iter, cfg.sinkhorn_tol,
        )
    else:
        # some class has no prototype yet: alignment terms wait until every class was seen
        intra = {m: g.leaf(0.0) for m in model.modalities}
        inter, report = g.leaf(0.0), {}
    align = align_loss(g, intra, fwd.alpha, inter)
    total = total_loss(g, task, align, cfg.mu)
    probe = g.scale(
        g.add_n(*[cross_entropy(g, fwd.probe_logp[m], y, model.k) for m in model.modalities]),
        1.0 / len(model.modalities),
    )
    objective = g.add(total, probe)
    values = {"total": g.scalar(total), "task": g.scalar(task), "align": g.scalar(align)}
    if not all(np.isfinite(v) for v in values.values()):
        raise TrainingError(
            f"non-finite loss at epoch {state.epoch + 1}: "
            + ", ".join(f"{k}={v}" for k, v in values.items())
            + f", intra={ {m: g.scalar(n) for m, n in intra.items()} }, inter={g.scalar(inter)}"
        )
    g.backward(objective)
    model.params.collect_grads(g, p)
    phi = state.phi if (state.phase == BALANCED and cfg.sgm == "on") else None
    if phi is None:
        state.optimizer.step(model.params)
    else:
        modulate_update(model.params, state.optimizer, phi)
    unconverged = sum((not pa.fwd.converged) + (not pa.bwd.converged) for pa in report.values())
    return StepResult(
        values["total"], values["task"], values["align"],
        {m: g.scalar(n) for m, n in intra.items()}, g.scalar(inter), dict(fwd.alpha),
        int(np.sum(np.argmax(g.value(fwd.logp), axis=1) == y)), unconverged,
    )


# -- evaluation --------------------------------------------------------------


@dataclass
class EvalResult:
    report: MetricsReport
    probs: np.ndarray
    labels: np.ndarray
    fused: np.ndarray
    gates: Dict[str, np.ndarray]
    probe_acc: Dict[str, float]
    entropy: float


def evaluate_model(model: PaSEModel, dataset: Dataset, split: str = "test") -> EvalResult:
    """Inference over one split; prototypes are selected by the unimodal probes."""
    idx = dataset.indices(split)
    y = dataset.labels[idx]
    g = Graph()
    p = model.params.bind(g)
    h = model.encode(g, p, _subset(dataset, idx, model.modalities))
    fwd = model.forward(g, p, h)
    probs = np.exp(g.value(fwd.logp))
    report = compute_metrics(probs, y, "classification")
    if dataset.scores is not None:
        from .metrics import expected_scores, regression_metrics

        regression_metrics(expected_scores(probs), dataset.scores[idx], report)
    probe_acc = {
        m: float(np.mean(np.argmax(g.value(fwd.probe_logp[m]), axis=1) == y)) for m in model.modalities
    }
    ent = float(-np.mean(np.sum(probs * np.log(np.maximum(probs, 1e-300)), axis=1)))
    gates = {m: g.value(node) for m, node in fwd.gates.items()}
    return EvalResult(report, probs, y, g.value(fwd.fused), gates, probe_acc, ent)


def evaluate(state: TrainState, dataset: Dataset, split: str = "test", use_checkpoint: bool = True) -> MetricsReport:
    model = checkpoint_model(state) if use_checkpoint and state.checkpoint is not None else state.model
    return evaluate_model(model, dataset, split).report


def checkpoint_model(state: TrainState) -> PaSEModel:
    """A copy of the model with the best-validation parameters and prototypes loaded."""
    import copy

    model = copy.copy(state.model)
    model.params = state.model.params.copy()
    params, bank = state.checkpoint
    model.params.load_state(params)
    model.bank = bank.copy()
    return model


def val_batch(dataset: Dataset, config: TrainConfig) -> np.ndarray:
    """Fixed validation mini-batch used for the per-epoch Shapley utilities."""
    idx = dataset.indices("val")
    order = np.random.default_rng([config.seed, 2]).permutation(idx)
    return np.sort(order[: config.batch_size])


def coalition_losses(model: PaSEModel, config: TrainConfig, x, y):
    """Per-modality calibration losses and per-pair alignment losses on one batch."""
    g = Graph()
    p = model.params.bind(g)
    h = model.encode(g, p, x)
    intra = {m: g.scalar(intra_loss(g, model.bank, m, h[m], y, config.similarity)) for m in model.modalities}
    if config.inter_mode == "batch":
        protos = {m: model.batch_prototypes(g, h[m], m, y) for m in model.modalities}
    else:
        protos = {m: g.leaf(model.bank.protos[m]) for m in model.modalities}
    inter = {}
    for pair in all_pairs(model.modalities):
        node, _ = inter_loss(
            g, protos, [pair], config.alpha, config.beta, config.ot_reg,
            model.projections(p), config.sinkhorn_max_iter, config.sinkhorn_tol,
        )
        inter[pair] = max(g.scalar(node), 0.0)
    return intra, inter


def shapley_report(state: TrainState, dataset: Dataset) -> ShapleyReport:
    idx = val_batch(dataset, state.config)
    x, y = _subset(dataset, idx, state.model.modalities), dataset.labels[idx]
    intra, inter = coalition_losses(state.model, state.config, x, y)
    table = subset_utilities(state.model.modalities, intra, inter, state.config.rho)
    return ShapleyReport.from_table(state.epoch, table, state.model.modalities)


# -- phases ------------------------------------------------------------------


def phase_transition_check(state: TrainState, val_metric: float) -> bool:
    """Advance the plateau counter; switch to the balanced phase when due.

    With ``transition_epoch`` set the switch happens after exactly that epoch.
    Otherwise it happens once the validation metric has failed to move by
    ``min_delta`` for ``patience`` consecutive epochs (accuracy: no
    improvement; entropy: no change).
    """
    cfg = state.config
    if state.phase == BALANCED:
        return False
    if cfg.transition_epoch is not None:
        due = state.epoch >= cfg.transition_epoch
    else:
        if cfg.plateau_metric == "accuracy":
            if val_metric > state.plateau_best + cfg.min_delta:
                state.plateau_best = val_metric
                state.since_improve = 0
            else:
                state.since_improve += 1
        else:
            flat = state.plateau_last is not None and abs(val_metric - state.plateau_last) < cfg.min_delta
            state.since_improve = state.since_improve + 1 if flat else 0
            state.plateau_last = val_metric
        due = state.since_improve >= cfg.patience
    if due:
        state.phase = BALANCED
        state.transition_epoch = state.epoch
    return due


# -- epochs ------------------------------------------------------------------


def batch_order(dataset: Dataset, config: TrainConfig, epoch: int) -> List[np.ndarray]:
    idx = dataset.indices("train")
    order = np.random.default_rng([config.seed, epoch, 1]).permutation(idx)
    return [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]


def train_epoch(state: TrainState, dataset: Dataset) -> dict:
    cfg, model = state.config, state.model
    epoch = state.epoch + 1
    phase_used = state.phase
    phi_used = state.phi if (state.phase == BALANCED and cfg.sgm == "on") else None
    update_bank = state.phase == WARMUP or cfg.ema_in_phase2
    sums: Dict[str, float] = {}
    n_seen = correct = unconverged = 0
    for bi, idx in enumerate(batch_order(dataset, cfg, epoch)):
        x, y = _subset(dataset, idx, model.modalities), dataset.labels[idx]
        try:
            r = train_step(state, x, y, update_bank=update_bank or not _bank_ready(model))
        except TrainingError as exc:
            raise TrainingError(f"{exc} (batch {bi})") from None
        b = len(idx)
        for key, val in (("loss", r.total), ("task", r.task), ("align", r.align), ("inter", r.inter)):
            sums[key] = sums.get(key, 0.0) + b * val
        for m in model.modalities:
            sums[f"intra_{m}"] = sums.get(f"intra_{m}", 0.0) + b * r.intra[m]
            sums[f"alpha_{m}"] = sums.get(f"alpha_{m}", 0.0) + b * r.alpha[m]
        n_seen += b
        correct += r.correct
        unconverged += r.unconverged
    state.epoch = epoch

    val = evaluate_model(model, dataset, "val")
    row = {"epoch": epoch, "phase": phase_used}
    row.update({k: v / n_seen for k, v in sums.items()})
    row["train_acc"] = correct / n_seen
    row["val_acc"] = val.report.acc
    row["val_acc2_pos"] = val.report.acc2_pos
    row["val_entropy"] = val.entropy
    for m in model.modalities:
        row[f"probe_acc_{m}"] = val.probe_acc[m]
        row[f"phi_{m}"] = 1.0 if phi_used is None else phi_used.get(m, 1.0)
    row["sinkhorn_unconverged"] = unconverged

    if cfg.sgm == "on":
        report = shapley_report(state, dataset)
        state.shapley.append(report)
        state.phi = report.phi
    if val.report.acc > state.best_val:
        state.best_val = val.report.acc
        state.best_epoch = epoch
        state.checkpoint = (model.params.state(), model.bank.copy())
    metric = val.report.acc if cfg.plateau_metric == "accuracy" else val.entropy
    row["transition"] = int(phase_transition_check(state, metric))
    state.history.append(row)
    return row


def _bank_ready(model: PaSEModel) -> bool:
    return all(model.bank.ready(m) for m in model.modalities)


# -- checkpoint files --------------------------------------------------------

CKPT_MAGIC = b"PASECKPT"
CKPT_VERSION = 1
BANK_GROUP = "__bank__"


def write_checkpoint(path, params: Mapping[str, np.ndarray], groups: Mapping[str, str], bank: PrototypeBank) -> None:
    entries = [(name, groups[name], np.asarray(v, dtype=np.float64)) for name, v in params.items()]
    for m in bank.modalities:
        entries.append((f"bank.{m}", BANK_GROUP, bank.protos[m]))
        entries.append((f"bank_init.{m}", BANK_GROUP, bank.initialized[m].astype(np.float64)[None, :]))
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(entries))]
    for name, group, arr in entries:
        nb, gb = name.encode(), group.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<H", len(gb)) + gb)
        out.append(struct.pack("<II", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def read_checkpoint(path):
    """Returns ``(params, groups, bank_protos, bank_initialized)``."""
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    params, groups, protos, init = {}, {}, {}, {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2 : off + 2 + ln].decode()
        off += 2 + ln
        (lg,) = struct.unpack_from("<H", buf, off)
        group = buf[off + 2 : off + 2 + lg].decode()
        off += 2 + lg
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        arr = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off).astype(np.float64).reshape(rows, cols)
        off += 8 * rows * cols
        if group == BANK_GROUP:
            kind, m = name.split(".", 1)
            if kind == "bank":
                protos[m] = arr
            else:
                init[m] = arr[0] > 0.5
        else:
            params[name] = arr
            groups[name] = group
    return params, groups, protos, init


# -- full runs ---------------------------------------------------------------

INCOMPLETE = "INCOMPLETE"


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def run_training(
    config: TrainConfig,
    dataset: Dataset,
    out_dir=None,
    data_path: Optional[str] = None,
    progress=None,
) -> Tuple[TrainState, dict]:
    """Train for ``max_epochs`` and, with ``out_dir``, write the run artifacts.

    Returns the final state and the final report (test metrics at the best
    validation checkpoint and at the last epoch).
    """
    state = build_state(config, dataset)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / INCOMPLETE).write_text("run started; removed on completion\n")
        resolved = {"train": config.to_dict(), "data": data_path, "k": dataset.k, "dims": dataset.dims}
        (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
        for stale in ("shapley.csv", "final_report.json", "checkpoint.bin"):
            (out / stale).unlink(missing_ok=True)
        metrics_fh = open(out / "metrics.csv", "w", newline="")
    try:
        for _ in range(config.max_epochs):
            row = train_epoch(state, dataset)
            if metrics_fh is not None:
                if writer is None:
                    writer = csv.DictWriter(metrics_fh, fieldnames=list(row))
                    writer.writeheader()
                writer.writerow({k: _fmt(v) for k, v in row.items()})
                metrics_fh.flush()
            if progress is not None:
                progress(row)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    best = evaluate(state, dataset, "test", use_checkpoint=True)
    last = evaluate(state, dataset, "test", use_checkpoint=False)
    final = {
        "best": best.to_dict(),
        "last": last.to_dict(),
        "best_epoch": state.best_epoch,
        "best_val_acc": state.best_val,
        "transition_epoch": state.transition_epoch,
        "epochs": state.epoch,
    }
    if out is not None:
        if config.sgm == "on":
            write_trace(state.shapley, out / "shapley.csv")
        params, bank = state.checkpoint
        groups = {p.name: p.group for p in state.model.params}
        write_checkpoint(out / "checkpoint.bin", params, groups, bank)
        (out / "final_report.json").write_text(json.dumps(final, indent=2, sort_keys=True))
        (out / INCOMPLETE).unlink()
    return state, final


def load_run(run_dir, dataset: Optional[Dataset] = None):
    """Rebuild ``(config, model, dataset)`` from a run directory at its checkpoint."""
    from .data import load_features

    run = Path(run_dir)
    resolved = json.loads((run / "config.json").read_text())
    config = TrainConfig.from_dict(resolved["train"])
    if dataset is None:
        if not resolved.get("data"):
            raise ValueError(f"{run}: no data path recorded; pass the dataset explicitly")
        dataset = load_features(resolved["data"])
    state = build_state(config, dataset)
    params, groups, protos, init = read_checkpoint(run / "checkpoint.bin")
    state.model.params.load_state(params)
    for m in state.model.modalities:
        state.model.bank.protos[m] = protos[m]
        state.model.bank.initialized[m] = init[m]
    return config, state.model, dataset
