"""One step of merging_bumps_1d: left-block displacement (in cells) for the
Lagrangian engine and the entropic engine at several eps / h^2."""

import argparse
import os
import warnings
from dataclasses import replace

import numpy as np

from chemojko.config import parse_config
from chemojko.driver import initial_density
from chemojko.jko import SolverOptions, jko_step

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=os.path.join(HERE, os.pardir, "configs", "merging_bumps_1d.ini"))
    ap.add_argument("--factors", type=float, nargs="+", default=[1.0, 0.5, 0.25])
    ap.add_argument("--taus", type=float, nargs="+", default=[1e-2, 5e-3, 2.5e-3])
    args = ap.parse_args()
    warnings.simplefilter("ignore")
    cfg = parse_config(args.config)
    grid = cfg.build_grid()
    h = grid.spacing[0]
    x = grid.axis_centers(0)
    half = grid.cells[0] // 2
    rho = initial_density(cfg)

    def shift(r):
        return (np.sum((r.values[:half] - rho.values[:half]) * x[:half]) * h) / h

    print(f"{'tau':>9} {'quantile':>10} " + " ".join(f"{'eps=' + format(f, 'g') + 'h^2':>12}" for f in args.factors))
    for tau in args.taus:
        params = replace(cfg, tau=tau).energy_params()
        row = [shift(jko_step(rho, params, SolverOptions(engine="quantile")).rho_next)]
        for f in args.factors:
            row.append(shift(jko_step(rho, params, SolverOptions(engine="entropic", eps=f * h * h)).rho_next))
        print(f"{tau:9.2e} " + " ".join(f"{v:10.5f}" if i == 0 else f"{v:12.5f}" for i, v in enumerate(row)))


if __name__ == "__main__":
    main()
