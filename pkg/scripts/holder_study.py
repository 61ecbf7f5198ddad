"""Hoelder ratio of merging_bumps_1d under tau halving at a fixed final time."""

import argparse

from chemojko.config import RunConfig
from chemojko.diagnostics import check_holder
from chemojko.driver import simulate_trajectory


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cells", type=int, default=256)
    ap.add_argument("--final-time", type=float, default=0.3)
    ap.add_argument("--taus", type=float, nargs="+", default=[1e-2, 5e-3])
    args = ap.parse_args()
    print(f"{'tau':>9} {'steps':>6} {'max ratio':>10} {'bound':>8} {'geodesic excess':>16}")
    for tau in args.taus:
        steps = int(round(args.final_time / tau))
        cfg = RunConfig(cells=(args.cells,), tau=tau, steps=steps, scenario="merging_bumps_1d")
        rec = check_holder(simulate_trajectory(cfg))
        value, bound, _ = rec["holder_ratio"]
        print(f"{tau:9.2e} {steps:6d} {value:10.5f} {bound:8.4f} {rec['geodesic_speed_excess'][0]:16.2e}")


if __name__ == "__main__":
    main()
