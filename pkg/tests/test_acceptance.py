"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Full-size runs; deselect with ``-m "not acceptance"``.
"""

import math
import os
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

from chemojko.config import parse_config
from chemojko.diagnostics import check_holder, cross_solver_agreement
from chemojko.driver import run
from chemojko.elliptic import check_potential_estimates, solve_potential
from chemojko.grid import DensityField, Grid, project_to_admissible
from chemojko.obstacle import solve_obstacle
from chemojko.transport import dual_slack, lp_oracle, w2_entropic, w2_exact_1d

pytestmark = pytest.mark.acceptance

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def config(name, **kw):
    return replace(parse_config(os.path.join(CONFIGS, name + ".ini")), **kw)


def quiet_run(cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run(cfg)


@pytest.fixture(scope="module")
def bumps():
    return quiet_run(config("merging_bumps_1d"))


@pytest.fixture(scope="module")
def ball():
    return quiet_run(config("saturated_ball_2d"))


@pytest.fixture(scope="module")
def ball_half():
    return quiet_run(config("saturated_ball_2d", tau=5e-3))


@pytest.fixture(scope="module")
def patch():
    return quiet_run(config("patch_advect_2d"))


@pytest.fixture(scope="module")
def nonchar():
    return quiet_run(config("noncharacteristic_init"))


@pytest.fixture(scope="module")
def small_runs():
    return [quiet_run(config(name)) for name in ("stationary", "heat_only")]


def worst(res, name):
    """(worst value / bound ratio, all passed) of a per-step check over a run."""
    vals = [rec[name] for rec in res.step_records]
    ok = all(p for _, _, p in vals) and len(vals) == len(res.trajectory) > 0
    ratio = max((v / b if b > 0 else (0.0 if v <= 0 else math.inf)) for v, b, _ in vals)
    return ratio, ok


def summarize(runs, names):
    parts, ok = [], True
    for label, res in runs:
        if res.status == "solver_failure":
            parts.append(f"{label}: solver failure at step {res.failed_step}")
            ok = False
            continue
        for name in names:
            ratio, passed = worst(res, name)
            ok &= passed
            parts.append(f"{label}.{name} {ratio:.3g}x bound{'' if passed else ' (FAIL)'}")
    return ok, "; ".join(parts)


def test_c1_constraint_and_mass(gate, bumps, ball, ball_half, patch, nonchar, small_runs):
    runs = [("bumps", bumps), ("ball", ball), ("ball_half", ball_half), ("patch", patch), ("nonchar", nonchar),
            ("stationary", small_runs[0]), ("heat", small_runs[1])]
    max_rho, mass_err, steps = 0.0, 0.0, 0
    for _, res in runs:
        vol = res.trajectory.grid.cell_volume
        for rho in res.trajectory.densities()[1:]:
            max_rho = max(max_rho, float(rho.values.max()))
            mass_err = max(mass_err, abs(float(rho.values.sum() * vol) - 1.0))
            steps += 1
    complete = all(len(res.trajectory) == res.config.steps for _, res in runs)
    ok = max_rho <= 1 + 1e-9 and mass_err <= 1e-12 and complete
    gate(1, ok, f"{steps} steps over {len(runs)} runs: max rho - 1 = {max_rho - 1:.2e}, max |mass - 1| = "
                f"{mass_err:.2e}, all runs complete: {complete}")
    assert ok


def test_c2_energy_dissipation(gate, bumps, ball):
    details, ok = [], True
    for label, res, budget in (("bumps 512x100", bumps, 60.0), ("ball 128^2x50", ball, 600.0)):
        ratio, passed = worst(res, "energy_step_slack")
        chain = res.final_record["energy_chain"]
        ok &= passed and chain[2] and res.wall_seconds < budget
        details.append(f"{label}: slack {ratio:.3g}x bound, chain {chain[0]:.3e}, {res.wall_seconds:.0f}s "
                       f"(budget {budget:.0f}s)")
    gate(2, ok, "; ".join(details))
    assert ok


def test_c3_pressure_estimates(gate, bumps, ball, patch):
    ok, detail = summarize([("bumps", bumps), ("ball", ball), ("patch", patch)],
                           ["grad_p_over_grad_phi", "grad_phi_norm", "pressure_complementarity",
                            "pressure_pairing"])
    gate(3, ok, detail)
    assert ok


def interval_case(n=512, L=2.0, a=0.6, b=1.4):
    g = Grid.box([n], [L])
    x = g.axis_centers(0)
    inside = (x > a) & (x < b)
    rest = 1.0 - inside.sum() * g.cell_volume
    rho = DensityField(g, np.where(inside, 1.0, rest / ((~inside).sum() * g.cell_volume)))
    return rho, inside


def test_c4_obstacle_cross_validation(gate, ball, ball_half):
    rho, inside = interval_case()
    t0 = time.perf_counter()
    phi = solve_potential(rho).phi
    q = solve_obstacle(rho, phi, tol_psor=1e-12).q.values
    seconds = time.perf_counter() - t0
    idx = np.flatnonzero(inside)
    i0, i1 = idx[0] - 1, idx[-1] + 1
    f = phi.values
    t = (np.arange(f.size) - i0) / (i1 - i0)
    exact = np.where(inside, f - ((1 - t) * f[i0] + t * f[i1]), 0.0)
    err = float(np.abs(q - exact).max())
    ok1 = err <= 1e-6 and seconds < 1.0
    ok2, detail = summarize([("ball", ball), ("ball_half", ball_half)], ["obstacle_order", "obstacle_l2_gap"])
    gap, gap_half = ball.step_records[-1]["obstacle_l2_gap"][0], ball_half.step_records[-1]["obstacle_l2_gap"][0]
    ok3 = gap_half <= gap * (1 + 1e-9)
    ok = ok1 and ok2 and ok3
    gate(4, ok, f"interval max error {err:.2e} in {seconds:.2f}s; {detail}; final L2 gap {gap:.4f} "
                f"-> {gap_half:.4f} at tau/2")
    assert ok


def test_c5_characteristic_preservation(gate, patch, nonchar):
    frac = patch.final_record["patch_intermediate_fraction"] if patch.status != "solver_failure" else None
    one = nonchar.final_record["patch_intermediate_fraction"]
    seconds = patch.wall_seconds + nonchar.wall_seconds
    ok = frac is not None and frac[0] <= 0.03 and one[0] <= 0.02 and seconds < 1200
    shown = "n/a" if frac is None else f"{frac[0]:.4f}"
    gate(5, ok, f"patch 256^2x50 worst fraction {shown} (<= 0.03); one step from non-characteristic data "
                f"{one[0]:.4f} (<= 0.02); {seconds:.0f}s (budget 1200s)")
    assert ok


def random_pair(grid, rng):
    return [DensityField(grid, project_to_admissible(grid, rng.uniform(0.0, 1.0, grid.shape) + 0.02))
            for _ in range(2)]


def test_c6_transport_oracles(gate):
    rng = np.random.default_rng(2024)
    g = Grid.box([16], [2.0])
    t0 = time.perf_counter()
    err, slack = 0.0, math.inf
    for _ in range(100):
        a, b = random_pair(g, rng)
        tr = w2_exact_1d(a, b)
        cost, _, psi, psi_c = lp_oracle(a, b)
        err = max(err, abs(tr.cost - cost))
        slack = min(slack, dual_slack(g, tr.psi, tr.psi_c), dual_slack(g, psi, psi_c))
    seconds = time.perf_counter() - t0
    g2 = Grid.box([8, 8], [2.0, 2.0])
    rel = 0.0
    for _ in range(5):
        a, b = random_pair(g2, rng)
        cost, _, psi, psi_c = lp_oracle(a, b)
        slack = min(slack, dual_slack(g2, psi, psi_c))
        rel = max(rel, abs(w2_entropic(a, b, 0.1 * g2.spacing[0] ** 2).cost - cost) / cost)
    ok = err <= 1e-8 and seconds < 10 and rel <= 0.01 and slack >= -1e-8
    gate(6, ok, f"1D exact vs LP max |diff| {err:.2e} over 100 pairs in {seconds:.1f}s; 2D 8x8 entropic vs LP "
                f"max rel {rel:.2e}; min dual slack {slack:.2e}")
    assert ok


def test_c7_holder(gate, bumps):
    nonchar5 = quiet_run(config("noncharacteristic_init", steps=5))
    details, ok = [], True
    for label, res in (("bumps", bumps), ("nonchar", nonchar5)):
        rec = check_holder(res.trajectory)
        value, bound, passed = rec["holder_ratio"]
        ok &= passed
        details.append(f"{label}: max ratio {value:.4g} <= {bound:.4g}")
    gate(7, ok, "; ".join(details))
    assert ok


def test_c8_uniqueness_proxy(gate):
    t0 = time.perf_counter()
    base = config("merging_bumps_1d")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        coarse = cross_solver_agreement(base)["cross_solver_w2"]
        # eps = h^2 throughout: halving eps refines h by sqrt(2)
        fine = cross_solver_agreement(replace(base, cells=(724,), tau=5e-3, steps=200))["cross_solver_w2"]
    seconds = time.perf_counter() - t0
    ratio = coarse[0] / fine[0]
    ok = coarse[2] and fine[2] and 1.0 <= ratio <= 4.0 and seconds < 300
    gate(8, ok, f"max W2 {coarse[0]:.3e} <= {coarse[1]:.3e} (512, tau 1e-2); {fine[0]:.3e} <= {fine[1]:.3e} "
                f"(724, tau 5e-3); ratio {ratio:.2f} in [1, 4]; {seconds:.0f}s")
    assert ok


def test_c9_free_boundary_measure(gate, bumps, ball, patch):
    ok, detail = summarize([("bumps", bumps), ("ball", ball), ("patch", patch)],
                           ["fb_negative_mass", "fb_interior_mass"])
    gate(9, ok, detail)
    assert ok


def dirichlet_error(n):
    g = Grid.box([n], [1.0], alpha=1.0, beta=0.0)
    phi = solve_potential(DensityField(g, np.ones(n))).phi.values
    x = g.axis_centers(0)
    return float(np.abs(phi - (1.0 - np.cosh(x - 0.5) / np.cosh(0.5))).max())


def test_c10_elliptic(gate):
    e256, e512 = dirichlet_error(256), dirichlet_error(512)
    order = math.log2(e256 / e512)
    rng = np.random.default_rng(10)
    bad = 0
    for k in range(100):
        dim = 1 + k % 2
        g = Grid.box([40, 24][:dim], [2.0, 1.5][:dim], rng.uniform(0, 3), rng.uniform(0.1, 2))
        rho = DensityField(g, project_to_admissible(g, rng.uniform(0.0, 1.0, g.shape) + 0.01))
        est = check_potential_estimates(solve_potential(rho).phi, rho)
        bad += not all(p for _, _, p in est.values())
    ok = e512 <= 1e-4 and abs(order - 2) <= 0.1 and bad == 0
    gate(10, ok, f"Dirichlet error {e512:.2e} at 512 cells, order {order:.3f}; estimates violated on {bad}/100 "
                 f"random densities")
    assert ok
