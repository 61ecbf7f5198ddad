"""Scenario library: initial densities in the admissible set and the checks each run registers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .elliptic import potential_of
from .grid import DensityField, Grid, project_to_admissible

# checks run on every scenario; per-step names are produced by the driver
BASE_CHECKS = ("mass", "density_bounds", "energy_step", "phi_estimates", "pressure_grad", "pressure_pairing",
               "pressure_complementarity", "energy_chain", "holder", "duality")


@dataclass(frozen=True)
class Scenario:
    name: str
    build: Callable  # (grid, params, config) -> cell values
    defaults: dict
    checks: tuple = BASE_CHECKS
    dims: tuple = (1, 2)
    requires: Callable | None = None  # config -> list of problems

    def validate(self, cfg) -> list[str]:
        problems = []
        if cfg.dim not in self.dims:
            problems.append(f"scenario {self.name} needs dim in {self.dims}")
        unknown = set(cfg.scenario_params) - set(self.defaults)
        if unknown:
            problems.append(f"unknown parameters for scenario {self.name}: {', '.join(sorted(unknown))}")
        if self.requires is not None and not problems:
            problems.extend(self.requires(cfg))
        return problems

    def params(self, cfg) -> dict:
        return {**self.defaults, **cfg.scenario_params}

    def initial_density(self, cfg, grid: Grid | None = None) -> DensityField:
        grid = cfg.build_grid() if grid is None else grid
        values = np.asarray(self.build(grid, self.params(cfg), cfg), float)
        values = project_to_admissible(grid, values)
        return DensityField(grid, values)


def fill_by_key(grid: Grid, key: np.ndarray, mass: float = 1.0) -> np.ndarray:
    """Saturate cells in increasing ``key`` order until ``mass`` is reached; the last cell is partial."""
    vol = grid.cell_volume
    if mass > grid.volume * (1 + 1e-12):
        raise ValueError("mass exceeds the domain volume")
    order = np.argsort(key.ravel(), kind="stable")
    out = np.zeros(grid.size)
    full = int(math.floor(mass / vol + 1e-9))
    full = min(full, grid.size)
    out[order[:full]] = 1.0
    rest = mass - full * vol
    if rest > 1e-15 and full < grid.size:
        out[order[full]] = rest / vol
    return out.reshape(grid.shape)


def _center(grid: Grid, params: dict) -> np.ndarray:
    c = params.get("center")
    if c is None or (isinstance(c, str) and c == "mid"):
        return np.array([L / 2 for L in grid.lengths])
    c = np.atleast_1d(np.asarray(c, float))
    if c.size != grid.dim:
        raise ValueError("center needs one coordinate per dimension")
    return c


def _radius2(grid: Grid, center) -> np.ndarray:
    return sum((X - c) ** 2 for X, c in zip(grid.centers(), center))


# --------------------------------------------------------------------------
# builders


def _stationary(grid: Grid, params: dict, cfg) -> np.ndarray:
    return np.full(grid.shape, 1.0 / grid.volume)


def _heat_only(grid: Grid, params: dict, cfg) -> np.ndarray:
    # box of side `width` around the center, height 1 / width^dim
    c = _center(grid, params)
    w = params["width"]
    inside = np.ones(grid.shape, bool)
    for X, ci in zip(grid.centers(), c):
        inside &= np.abs(X - ci) <= w / 2
    return np.where(inside, 1.0, 0.0) / (inside.sum() * grid.cell_volume)


def _merging_bumps(grid: Grid, params: dict, cfg) -> np.ndarray:
    x = grid.axis_centers(0)
    c = _center(grid, params)[0]
    w, gap = params["width"], params["gap"]
    out = np.zeros(grid.shape)
    for side in (-1, 1):
        mid = c + side * (gap / 2 + w / 2)
        out += fill_by_key(grid, np.abs(x - mid), 0.5)
    return np.minimum(out, 1.0)


def _patch(grid: Grid, params: dict, cfg) -> np.ndarray:
    X, Y = grid.centers()
    cx, cy = _center(grid, params)
    a = params["semi_axis"]
    b = 1.0 / (math.pi * a)
    return fill_by_key(grid, ((X - cx) / a) ** 2 + ((Y - cy) / b) ** 2)


def _ball(grid: Grid, params: dict, cfg) -> np.ndarray:
    """Discrete stationary ball: the cells with the largest potential, iterated to a fixed point."""
    c = _center(grid, params)
    rho = fill_by_key(grid, _radius2(grid, c))
    for _ in range(int(params["max_iter"])):
        phi = potential_of(rho, grid, cfg.sigma, cfg.eta)
        new = fill_by_key(grid, -phi)
        if np.array_equal(new, rho):
            break
        rho = new
    return rho


def _bump(grid: Grid, params: dict, cfg) -> np.ndarray:
    c = _center(grid, params)
    v = np.exp(-_radius2(grid, c) / params["width"])
    return v / (v.sum() * grid.cell_volume)


def _needs(**conds):
    def check(cfg):
        problems = []
        if "interaction" in conds and cfg.interaction != conds["interaction"]:
            problems.append(f"scenario {cfg.scenario} needs interaction = {str(conds['interaction']).lower()}")
        if conds.get("mu_positive") and not cfg.mu > 0:
            problems.append(f"scenario {cfg.scenario} needs mu > 0")
        if conds.get("mu_zero") and cfg.mu != 0:
            problems.append(f"scenario {cfg.scenario} needs mu = 0")
        return problems
    return check


def _heat_requires(cfg):
    problems = _needs(interaction=False, mu_positive=True)(cfg)
    p = {**SCENARIOS["heat_only"].defaults, **cfg.scenario_params}
    if p["width"] ** cfg.dim < 1:
        problems.append("heat_only: width^dim must be at least 1 so the box fits unit mass")
    return problems


SATURATED_CHECKS = BASE_CHECKS + ("obstacle", "free_boundary")

SCENARIOS: dict[str, Scenario] = {
    s.name: s
    for s in (
        Scenario("stationary", _stationary, {}, BASE_CHECKS),
        Scenario("heat_only", _heat_only, {"width": 1.2, "center": "mid"}, BASE_CHECKS,
                 requires=_heat_requires),
        Scenario("merging_bumps_1d", _merging_bumps, {"width": 0.5, "gap": 0.15, "center": "mid"},
                 SATURATED_CHECKS + ("patch",), dims=(1,), requires=_needs(mu_zero=True)),
        Scenario("patch_advect_2d", _patch, {"semi_axis": 0.8, "center": (0.9, 1.1)},
                 SATURATED_CHECKS + ("patch",), dims=(2,), requires=_needs(mu_zero=True)),
        Scenario("saturated_ball_2d", _ball, {"center": "mid", "max_iter": 50.0},
                 SATURATED_CHECKS + ("obstacle_match", "patch"), dims=(2,)),
        Scenario("noncharacteristic_init", _bump, {"width": 0.5, "center": "mid"},
                 BASE_CHECKS + ("patch",), requires=_needs(mu_zero=True)),
    )
}


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}") from None
