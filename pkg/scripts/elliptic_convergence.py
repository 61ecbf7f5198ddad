"""Screened Poisson solve against the 1D Dirichlet closed form 1 - cosh(x - 1/2) / cosh(1/2)."""

import math

import numpy as np

from chemojko.elliptic import solve_potential
from chemojko.grid import DensityField, Grid


def error(n):
    g = Grid.box([n], [1.0], alpha=1.0, beta=0.0)
    phi = solve_potential(DensityField(g, np.ones(n))).phi.values
    x = g.axis_centers(0)
    return float(np.abs(phi - (1 - np.cosh(x - 0.5) / np.cosh(0.5))).max())


def main():
    prev = None
    print(f"{'cells':>6} {'max error':>11} {'order':>6}")
    for n in (64, 128, 256, 512, 1024):
        e = error(n)
        order = "" if prev is None else f"{math.log2(prev / e):6.3f}"
        print(f"{n:6d} {e:11.3e} {order:>6}")
        prev = e


if __name__ == "__main__":
    main()
