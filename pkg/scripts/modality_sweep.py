"""Train on every nonempty modality subset and compare trimodal against the best bimodal run per seed."""

from _common import parser, setup
from pase.experiments import modality_sweep


def main():
    args = parser(__doc__).parse_args()
    ds, cfg, seeds = setup(args)
    rows = modality_sweep(cfg, ds, args.out, seeds)
    by = {(r["arm"], r["seed"]): r for r in rows}
    wins = 0
    for s in seeds:
        tri = by[("T+A+V", s)]["best_acc"]
        bi = max(by[(a, s)]["best_acc"] for a in ("T+A", "T+V", "A+V"))
        wins += tri >= bi
        print(f"seed {s}: trimodal acc={tri:.4f} best bimodal acc={bi:.4f}")
    print(f"trimodal >= best bimodal in {wins}/{len(seeds)} seeds")


if __name__ == "__main__":
    main()
