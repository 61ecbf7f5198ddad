"""Lagrangian vs entropic trajectories of merging_bumps_1d at eps = h^2 under joint refinement."""

import argparse
import math
import os
import time
import warnings
from dataclasses import replace

from chemojko.config import parse_config
from chemojko.diagnostics import cross_solver_agreement

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=os.path.join(HERE, os.pardir, "configs", "merging_bumps_1d.ini"))
    ap.add_argument("--levels", type=int, default=2, help="number of (eps, tau) halvings, starting at level 0")
    args = ap.parse_args()
    base = parse_config(args.config)
    warnings.simplefilter("ignore")
    print(f"{'cells':>6} {'tau':>9} {'eps':>10} {'max W2':>10} {'bound':>10} {'secs':>6}")
    for k in range(args.levels):
        cells = int(round(base.cells[0] * math.sqrt(2) ** k))
        cfg = replace(base, cells=(cells,), tau=base.tau / 2**k, steps=base.steps * 2**k)
        t0 = time.perf_counter()
        value, bound, _ = cross_solver_agreement(cfg)["cross_solver_w2"]
        h = cfg.lengths[0] / cells
        print(f"{cells:6d} {cfg.tau:9.2e} {h * h:10.3e} {value:10.3e} {bound:10.3e} {time.perf_counter() - t0:6.1f}")


if __name__ == "__main__":
    main()
