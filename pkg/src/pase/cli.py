"""Command-line driver: gen, train, eval, experiment, inspect."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .data import SynthSpec, gen_synthetic, load_features, probe_accuracy, save_features
from .metrics import write_report_json
from .trainer import INCOMPLETE, TrainConfig, evaluate_model, load_run

log = logging.getLogger("pase")

INSPECT_TARGETS = ("prototypes", "plans", "gates", "embeddings", "shapley")


class CliError(Exception):
    pass


# -- configuration -----------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: Optional[str], overrides: Sequence[str] = (), prefer: str = "train"):
    """Read ``{"synth": {...}, "train": {...}}`` and apply ``key=value`` overrides.

    Unqualified override keys resolve against the ``prefer`` section first,
    then the other one; ``synth.seed=3`` style keys are explicit.
    """
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}")
    unknown = set(raw) - {"synth", "train"}
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)} (expected 'synth', 'train')")
    synth = dict(raw.get("synth", {}))
    train = dict(raw.get("train", {}))
    synth_keys = {f.name for f in fields(SynthSpec)}
    train_keys = {f.name for f in fields(TrainConfig)}
    for item in overrides:
        if "=" not in item:
            raise CliError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        value = _parse_value(value)
        if key.startswith("synth."):
            section, key = synth, key[6:]
        elif key.startswith("train."):
            section, key = train, key[6:]
        elif key in (synth_keys if prefer == "synth" else train_keys):
            section = synth if prefer == "synth" else train
        elif key in train_keys:
            section = train
        elif key in synth_keys:
            section = synth
        else:
            raise CliError(f"unknown config key in override: {key!r}")
        section[key] = value
    bad = set(synth) - synth_keys
    if bad:
        raise CliError(f"unknown synth config keys: {sorted(bad)}")
    bad = set(train) - train_keys
    if bad:
        raise CliError(f"unknown train config keys: {sorted(bad)}")
    for key in ("dims", "separation"):
        if key in synth:
            synth[key] = tuple(synth[key])
    return SynthSpec(**synth), TrainConfig.from_dict(train)


def parse_seeds(text: Optional[str], default: int) -> List[int]:
    env = os.environ.get("PASE_SEED")
    if env:
        text = env
    if not text:
        return [default]
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CliError(f"bad seed list {text!r}")


def _claim_output(path: Path, force: bool) -> None:
    """Refuse to overwrite unless --force; incomplete runs are reported as such."""
    if not path.exists():
        return
    if path.is_dir():
        partial = [m.parent for m in path.rglob(INCOMPLETE)]
        if not any(path.iterdir()):
            return
        if not force:
            if partial:
                raise CliError(
                    f"{path} holds an incomplete run ({partial[0]}); rerun with --force to replace it"
                )
            raise CliError(f"{path} already exists; use --force to overwrite")
        shutil.rmtree(path)
    elif not force:
        raise CliError(f"{path} already exists; use --force to overwrite")


def _load_data(path: Optional[str]):
    if not path:
        raise CliError("--data is required")
    if not Path(path).exists():
        raise CliError(f"data file not found: {path}")
    return load_features(path)


# -- subcommands -------------------------------------------------------------


def cmd_gen(args) -> int:
    spec, _ = load_config(args.config, args.override, prefer="synth")
    if args.seeds:
        spec.seed = parse_seeds(args.seeds, spec.seed)[0]
    try:
        spec.validate()
    except ValueError as exc:
        raise CliError(str(exc))
    out = Path(args.out)
    _claim_output(out, args.force)
    ds = gen_synthetic(spec)
    save_features(ds, out)
    if not load_features(out).equals(ds):
        raise CliError(f"{out}: written file does not round-trip")
    acc = probe_accuracy(ds)
    print(f"wrote {out}: N={ds.n} K={ds.k} dims={ds.dims}")
    print("probe accuracy (nearest class mean, test split): " + ", ".join(f"{m}={a:.3f}" for m, a in acc.items()))
    return 0


def cmd_train(args) -> int:
    from .experiments import run_seeds

    _, config = load_config(args.config, args.override)
    ds = _load_data(args.data)
    seeds = parse_seeds(args.seeds, config.seed)
    out = Path(args.out)
    _claim_output(out, args.force)
    finals = run_seeds(config, ds, out, seeds, str(Path(args.data).resolve()))
    missing = []
    for s in seeds:
        run = out / f"seed_{s}"
        needed = ["config.json", "metrics.csv", "checkpoint.bin", "final_report.json"]
        if config.sgm == "on":
            needed.append("shapley.csv")
        missing += [str(run / n) for n in needed if not (run / n).exists()]
    if not (out / "aggregate.json").exists():
        missing.append(str(out / "aggregate.json"))
    if missing:
        raise CliError(f"missing artifacts: {missing}")
    for f in finals:
        b = f["best"]
        print(f"seed {f['seed']}: acc={b['acc']:.4f} acc2={b['acc2_nonneg']:.4f}/{b['acc2_pos']:.4f} "
              f"f1={b['f1_weighted']:.4f} best_epoch={f['best_epoch']} transition={f['transition_epoch']}")
    print(f"aggregate written to {out / 'aggregate.json'}")
    return 0


def cmd_eval(args) -> int:
    run = Path(args.out)
    if not (run / "checkpoint.bin").exists():
        raise CliError(f"{run} is not a completed run directory")
    ds = _load_data(args.data) if args.data else None
    _, model, ds = load_run(run, ds)
    res = evaluate_model(model, ds, args.split)
    path = run / f"eval_{args.split}.json"
    write_report_json(res.report, path)
    print(json.dumps(res.report.scalars(), indent=2))
    return 0


def cmd_experiment(args) -> int:
    from .experiments import EXPERIMENTS

    _, config = load_config(args.config, args.override)
    ds = _load_data(args.data)
    seeds = parse_seeds(args.seeds, config.seed)
    out = Path(args.out)
    _claim_output(out, args.force)
    rows = EXPERIMENTS[args.kind](config, ds, out, seeds, str(Path(args.data).resolve()))
    table = out / "comparison.csv"
    if not table.exists():
        raise CliError(f"missing artifact {table}")
    by_arm = {}
    for r in rows:
        by_arm.setdefault(r["arm"], []).append(r)
    for arm, rs in by_arm.items():
        print(f"{arm:10s} best acc2_pos={np.mean([r['best_acc2_pos'] for r in rs]):.4f} "
              f"last acc2_pos={np.mean([r['last_acc2_pos'] for r in rs]):.4f} "
              f"best acc={np.mean([r['best_acc'] for r in rs]):.4f}  (n={len(rs)})")
    print(f"table written to {table}")
    return 0


def cmd_inspect(args) -> int:
    from .otalign import all_pairs, inter_loss, write_plans_csv
    from .diffcore import Graph

    run = Path(args.run_dir)
    if not run.is_dir() or not (run / "config.json").exists():
        raise CliError(f"{run} is not a run directory")
    what = args.what
    out = Path(args.out) if args.out else run / f"inspect_{what}.csv"
    if what == "shapley":
        src = run / "shapley.csv"
        if not src.exists():
            raise CliError(f"{run} has no shapley.csv (trained with sgm=off?)")
        if out.resolve() != src.resolve():
            shutil.copyfile(src, out)
        print(f"wrote {out}")
        return 0
    ds = _load_data(args.data) if args.data else None
    config, model, ds = load_run(run, ds)
    if what == "prototypes":
        model.bank.write_csv(out)
    elif what == "plans":
        g = Graph()
        p = model.params.bind(g)
        protos = {m: g.leaf(model.bank.protos[m]) for m in model.modalities}
        _, report = inter_loss(
            g, protos, all_pairs(model.modalities), config.alpha, config.beta, config.ot_reg,
            model.projections(p), config.sinkhorn_max_iter, config.sinkhorn_tol,
        )
        write_plans_csv(report, out)
    elif what == "gates":
        if model.fusion != "pgf":
            raise CliError(f"run uses {model.fusion!r} fusion, which has no gates")
        res = evaluate_model(model, ds, args.split)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class"] + list(model.modalities))
            for k in range(ds.k):
                sel = res.labels == k
                w.writerow([k] + [repr(float(res.gates[m][sel].mean())) if sel.any() else "nan" for m in model.modalities])
    elif what == "embeddings":
        res = evaluate_model(model, ds, args.split)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label"] + [f"h{j}" for j in range(res.fused.shape[1])])
            for y, row in zip(res.labels, res.fused):
                w.writerow([int(y)] + [repr(float(v)) for v in row])
    print(f"wrote {out}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # unknown inspect targets etc. exit nonzero with the valid names
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pase", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config with optional 'synth' and 'train' sections")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", required=True)
        p.add_argument("--seeds", help="comma-separated seed list (PASE_SEED overrides)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if data:
            p.add_argument("--data", help="PASE1 feature file")

    p = sub.add_parser("gen", help="write a synthetic PASE1 dataset")
    common(p, data=False)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one run per seed and aggregate")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a run's checkpoint on a split")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="sgm-ablation | modality-sweep | fusion-ablation")
    p.add_argument("kind", choices=("sgm-ablation", "modality-sweep", "fusion-ablation"))
    common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("inspect", help="dump prototypes, plans, gates, embeddings or shapley as CSV")
    p.add_argument("run_dir")
    p.add_argument("what", choices=INSPECT_TARGETS)
    p.add_argument("--out")
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
