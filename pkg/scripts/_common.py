"""Shared argument handling for the experiment scripts."""

import argparse

from pase.data import SynthSpec, gen_synthetic
from pase.trainer import TrainConfig


def parser(description):
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--n", type=int, default=3000)
    ap.add_argument("--separation", default="3.0,0.8,0.8", help="t,a,v class separations")
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=1e-5)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--transition", type=int, default=20, help="fixed transition epoch")
    return ap


def setup(args):
    sep = tuple(float(s) for s in args.separation.split(","))
    ds = gen_synthetic(SynthSpec(n=args.n, k=3, separation=sep, seed=args.data_seed))
    cfg = TrainConfig(lr=args.lr, max_epochs=args.epochs, transition_epoch=args.transition)
    seeds = [int(s) for s in args.seeds.split(",")]
    return ds, cfg, seeds
