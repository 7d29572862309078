"""Same seeds and settings for prototype-gated, sum, concat and attention fusion."""

import numpy as np

from _common import parser, setup
from pase.experiments import fusion_ablation


def main():
    args = parser(__doc__).parse_args()
    ds, cfg, seeds = setup(args)
    rows = fusion_ablation(cfg, ds, args.out, seeds)
    for kind in ("pgf", "sum", "concat", "attention"):
        rs = [r for r in rows if r["arm"] == kind]
        print(f"{kind:10s} acc={np.mean([r['best_acc'] for r in rs]):.4f} "
              f"acc2_pos={np.mean([r['best_acc2_pos'] for r in rs]):.4f}")


if __name__ == "__main__":
    main()
