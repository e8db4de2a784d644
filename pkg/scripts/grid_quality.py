"""Minimum pairwise distance of repulsion grids against i.i.d. Haar grids.

    python scripts/grid_quality.py --sizes 4 8 16 24 --seeds 5
"""
import argparse

import numpy as np

from se3gconv import grids


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[2, 4, 8, 16, 24])
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args()
    print(f"{'N':>4} {'repulsion':>10} {'iid':>10}")
    for n in args.sizes:
        rep = [grids.generate_uniform_grid(n, np.random.default_rng(s)).uniformity for s in range(args.seeds)]
        iid = [grids.iid_random_grid(n, np.random.default_rng(s)).uniformity for s in range(args.seeds)]
        print(f"{n:>4} {np.mean(rep):>10.4f} {np.mean(iid):>10.4f}")


if __name__ == "__main__":
    main()
