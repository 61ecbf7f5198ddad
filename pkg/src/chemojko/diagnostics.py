"""Trajectory-level checks: energy chain, Hoelder continuity in W2, patch
preservation, the H^-1 type duality bound and cross-solver agreement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .elliptic import check_potential_estimates
from .grid import CONSTRAINT_TOL, MASS_TOL, DensityField, Grid, ScalarField, l2_norm_grad
from .jko import EnergyParams, JkoStepResult, energy, energy_lower_bound
from .obstacle import (DELTA_SAT, check_subsolution_order, complementarity_residual, free_boundary_checks,
                       free_boundary_measure, laplacian_l1, relative_l2_gap)
from .transport import (Segments, _refine, lp_oracle, quantile_segments, segments_cost, segments_deposit,
                        w2_entropic, w2_quantile_1d)


@dataclass
class DiagnosticsRecord:
    """Named check -> (value, bound, passed)."""

    checks: dict = field(default_factory=dict)

    def add(self, name: str, value: float, bound: float, passed: bool | None = None) -> None:
        value, bound = float(value), float(bound)
        if passed is None:
            passed = bool(value <= bound)
        self.checks[name] = (value, bound, bool(passed))

    def merge(self, other: "DiagnosticsRecord") -> "DiagnosticsRecord":
        self.checks.update(other.checks)
        return self

    @property
    def passed(self) -> bool:
        return all(p for _, _, p in self.checks.values())

    def failures(self) -> list[str]:
        return [k for k, (_, _, p) in self.checks.items() if not p]

    def __getitem__(self, name):
        return self.checks[name]

    def __contains__(self, name):
        return name in self.checks

    def __len__(self):
        return len(self.checks)


@dataclass
class Trajectory:
    rho_in: DensityField
    params: EnergyParams
    steps: list = field(default_factory=list)
    records: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def append(self, step: JkoStepResult, record: DiagnosticsRecord | None = None) -> None:
        self.steps.append(step)
        self.records.append(record if record is not None else DiagnosticsRecord())

    @property
    def grid(self) -> Grid:
        return self.rho_in.grid

    @property
    def times(self) -> np.ndarray:
        return self.params.tau * np.arange(len(self.steps) + 1)

    def densities(self) -> list[DensityField]:
        return [self.rho_in] + [s.rho_next for s in self.steps]

    def __len__(self):
        return len(self.steps)


# --------------------------------------------------------------------------
# distances


def w2_distance(rho_a, rho_b) -> float:
    """W2 between two cell densities: exact quantile formula in 1D, LP on small
    2D grids, the entropic plan cost (an upper bound up to O(eps)) otherwise."""
    grid = rho_a.grid
    if grid.dim == 1:
        return math.sqrt(max(w2_quantile_1d(rho_a, rho_b), 0.0))
    if grid.size <= 256:
        return math.sqrt(max(lp_oracle(rho_a, rho_b, max_atoms=256)[0], 0.0))
    eps = 0.1 * min(grid.spacing) ** 2
    tr = w2_entropic(rho_a, rho_b, eps)
    return math.sqrt(max(tr.cost, 0.0))


def _common(sa: Segments, sb: Segments) -> tuple[Segments, Segments]:
    cuts = np.union1d(np.cumsum(sa.ds), np.cumsum(sb.ds))
    total = min(sa.ds.sum(), sb.ds.sum())
    cuts = np.minimum(cuts, total)
    ra, rb = _refine(sa, cuts), _refine(sb, cuts)
    n = min(len(ra.ds), len(rb.ds))
    return (Segments(ra.ds[:n], ra.xl[:n], ra.xr[:n]), Segments(rb.ds[:n], rb.xl[:n], rb.xr[:n]))


def geodesic_segments(rho_a: DensityField, rho_b: DensityField, s: float) -> tuple[Segments, Segments]:
    """Displacement interpolant at fraction ``s`` between two 1D densities.

    Returns (interpolant, start) on a common mass partition, so that
    ``segments_cost`` between them is the exact squared distance.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError("s must lie in [0, 1]")
    grid = rho_a.grid
    if grid.dim != 1:
        raise ValueError("geodesic sampling is implemented for 1D trajectories")
    a, b = _common(quantile_segments(grid, rho_a.values), quantile_segments(grid, rho_b.values))
    mid = a.with_positions((1 - s) * a.xl + s * b.xl, (1 - s) * a.xr + s * b.xr)
    return mid, a


def geodesic_sample(rho_a: DensityField, rho_b: DensityField, s: float) -> DensityField:
    mid, _ = geodesic_segments(rho_a, rho_b, s)
    return DensityField(rho_a.grid, segments_deposit(rho_a.grid, mid), validate=False)


# --------------------------------------------------------------------------
# checks


def check_energy_inequality(traj: Trajectory, tol_energy: float | None = None) -> DiagnosticsRecord:
    """Discrete chain, per-step slack, Riemann-sum form and the kinetic bound."""
    rec = DiagnosticsRecord()
    J_in = energy(traj.rho_in, traj.params)
    tol = 1e-6 * abs(J_in) if tol_energy is None else tol_energy
    tau = traj.params.tau
    N = len(traj)
    if N == 0:
        return rec
    w2s = np.array([s.w2_sq for s in traj.steps])
    J = np.array([s.energy_after for s in traj.steps])
    before = np.array([s.energy_before for s in traj.steps])
    slack = J + w2s / (2 * tau) - before
    chain = J[-1] + w2s.sum() / (2 * tau) - J_in
    kinetic = np.array([s.transport.kinetic.sum() * traj.grid.cell_volume / tau**2 for s in traj.steps])
    riemann = J[-1] + tau * kinetic.sum() - J_in
    rec.add("energy_chain", chain, N * tol)
    rec.add("energy_step_slack_max", slack.max(), tol)
    rec.add("energy_riemann", riemann, N * tol)
    rec.add("kinetic_total", tau * kinetic.sum(), 2 * (J_in - energy_lower_bound(traj.grid, traj.params)))
    return rec


def holder_ratios(traj: Trajectory, max_pairs: int = 6000, seed: int = 0,
                  method: str = "auto") -> tuple[np.ndarray, np.ndarray]:
    """W2(rho(t), rho(s)) / sqrt(t - s + tau) over sampled pairs s < t (all pairs when few).

    ``method`` "exact" measures every pair; "chain" bounds W2 by the sum of the
    per-step transport costs in between (an upper bound, so the check only
    gets stricter). "auto" is exact in 1D and chain in 2D.
    """
    rhos = traj.densities()
    tau = traj.params.tau
    n = len(rhos)
    if method == "auto":
        method = "exact" if traj.grid.dim == 1 else "chain"
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if len(pairs) > max_pairs:
        rng = np.random.default_rng(seed)
        keep = rng.choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[k] for k in sorted(keep)]
    if method == "chain":
        hops = np.concatenate(([0.0], np.cumsum([math.sqrt(max(s.w2_sq, 0.0)) for s in traj.steps])))
        dist = [hops[j] - hops[i] for i, j in pairs]
    elif method == "exact":
        dist = [w2_distance(rhos[i], rhos[j]) for i, j in pairs]
    else:
        raise ValueError(f"unknown method {method!r}")
    ratios = np.array([d / math.sqrt((j - i) * tau + tau) for d, (i, j) in zip(dist, pairs)])
    return np.array(pairs), ratios


def holder_constant(traj: Trajectory, safety: float = 1.5) -> float:
    J_in = energy(traj.rho_in, traj.params)
    return math.sqrt(2 * max(J_in - energy_lower_bound(traj.grid, traj.params), 0.0)) * safety


def check_holder(traj: Trajectory, safety: float = 1.5, max_pairs: int = 6000, seed: int = 0,
                 samples: int = 3, method: str = "auto") -> DiagnosticsRecord:
    if len(traj) < 3:
        raise ValueError("the Hoelder check needs at least 3 steps")
    rec = DiagnosticsRecord()
    _, ratios = holder_ratios(traj, max_pairs, seed, method)
    rec.add("holder_ratio", ratios.max(initial=0.0), holder_constant(traj, safety))
    if traj.grid.dim == 1:
        worst = -np.inf
        rhos = traj.densities()
        for n in range(len(traj)):
            base = math.sqrt(max(segments_cost(*_common(quantile_segments(traj.grid, rhos[n].values),
                                                        quantile_segments(traj.grid, rhos[n + 1].values))), 0.0))
            for k in range(1, samples + 1):
                s = k / (samples + 1)
                mid, start = geodesic_segments(rhos[n], rhos[n + 1], s)
                worst = max(worst, math.sqrt(max(segments_cost(mid, start), 0.0)) - s * base)
        rec.add("geodesic_speed_excess", worst, 1e-8)
    return rec


def intermediate_fraction(rho, delta: float = 0.05) -> float:
    v = np.asarray(rho.values)
    return float(np.count_nonzero((v > delta) & (v < 1 - delta)) / v.size)


def check_patch_preservation(traj: Trajectory, delta: float = 0.05, bound: float = 0.03) -> DiagnosticsRecord:
    """Worst intermediate-density fraction over the run; empty record when mu > 0."""
    rec = DiagnosticsRecord()
    if traj.params.mu > 0:
        return rec
    fractions = [intermediate_fraction(r, delta) for r in traj.densities()[1:]]
    rec.add("patch_intermediate_fraction", max(fractions, default=0.0), bound)
    return rec


def duality_battery(grid: Grid) -> list[tuple[str, ScalarField]]:
    """Test functions normalized to unit gradient norm."""
    X = grid.centers()
    L = grid.lengths
    fs = []
    for a in range(grid.dim):
        fs.append((f"x{a}", X[a]))
        fs.append((f"cos{a}", np.cos(np.pi * X[a] / L[a])))
        fs.append((f"sin2_{a}", np.sin(2 * np.pi * X[a] / L[a])))
    if grid.dim == 2:
        fs.append(("x0x1", X[0] * X[1]))
    out = []
    for name, v in fs:
        f = ScalarField(grid, v)
        g = l2_norm_grad(f)
        out.append((name, ScalarField(grid, v / g)))
    return out


def duality_sides(rho_a: DensityField, rho_b: DensityField, f: ScalarField, w2: float | None = None):
    """(|int f d(rho_a - rho_b)|, ||grad f|| W2).

    In 1D f is read as the piecewise-linear interpolant of its cell values
    (flat on the outer half cells), whose gradient norm is exactly the
    interior-face norm; integrating it against the piecewise-constant
    densities makes the bound exact on the grid. In 2D the midpoint rule is used.
    """
    vol = rho_a.grid.cell_volume
    v = np.asarray(f.values, dtype=float)
    if rho_a.grid.dim == 1:
        # int over cell i of the interpolant = h (f_i + (f_{i+1} - 2 f_i + f_{i-1}) / 8)
        v = v + np.diff(np.r_[v[0], v, v[-1]], 2) / 8
    lhs = abs(float(np.sum(v * (rho_a.values - rho_b.values)) * vol))
    w = w2_distance(rho_a, rho_b) if w2 is None else w2
    return lhs, l2_norm_grad(f) * w


def check_duality_bound(rho_a: DensityField, rho_b: DensityField, f: ScalarField | None = None,
                        rel_tol: float = 1e-6, w2: float | None = None, prefix: str = "duality") -> DiagnosticsRecord:
    """|int f d(rho_a - rho_b)| <= ||grad f|| W2 for ``f`` or the unit-gradient battery.

    ``w2`` may be the cost of any transport plan between the two densities
    (the bound holds with it as well); by default W2 is measured.
    """
    rec = DiagnosticsRecord()
    w = w2_distance(rho_a, rho_b) if w2 is None else w2
    battery = [("f", f)] if f is not None else duality_battery(rho_a.grid)
    for name, fn in battery:
        lhs, rhs = duality_sides(rho_a, rho_b, fn, w)
        rec.add(f"{prefix}_{name}", lhs, rhs * (1 + rel_tol) + 1e-15)
    return rec


def check_step(step: JkoStepResult, params: EnergyParams, J_in: float, *, energy_rtol: float = 1e-6,
               pressure_rtol: float = 1e-6, pairing_tol: float = 1e-6,
               delta_sat: float = DELTA_SAT) -> DiagnosticsRecord:
    """Invariants every accepted step must satisfy: mass, bounds, energy slack,
    potential estimates and the gradient and pairing estimates of the pressure.

    The complementarity residual of the F-based pressure is recorded without a
    bound: that pressure is only a subsolution of the obstacle problem (it
    differs where a step compresses partially filled cells). Complementarity
    is enforced on the obstacle solution in ``check_obstacle``.
    """
    rec = DiagnosticsRecord()
    grid = step.rho_next.grid
    vol = grid.cell_volume
    rho = np.asarray(step.rho_next.values)
    rec.add("mass_error", abs(float(rho.sum() * vol) - 1.0), MASS_TOL)
    rec.add("density_min_violation", max(0.0, -float(rho.min())), CONSTRAINT_TOL)
    rec.add("density_max_violation", max(float(rho.max()) - 1.0, 0.0), CONSTRAINT_TOL)
    slack = step.energy_after + step.w2_sq / (2 * params.tau) - step.energy_before
    rec.add("energy_step_slack", slack, energy_rtol * abs(J_in) + 1e-14)
    for name, (value, bound, ok) in check_potential_estimates(step.phi).items():
        if name == "phi_min":
            rec.add("phi_negative", max(-value, 0.0), -bound, ok)
        else:
            rec.add(name, value, bound, ok)
    gp = l2_norm_grad(step.pressure_F)
    gphi = l2_norm_grad(step.phi)
    rec.add("grad_p_over_grad_phi", gp, gphi * (1 + pressure_rtol) + 1e-14)
    rec.add("grad_phi_norm", gphi, 1 + pressure_rtol)
    rec.add("pressure_pairing", float(np.sum(step.pressure_F.values * (1 - rho)) * vol), pairing_tol)
    rec.add("pressure_F_complementarity",
            complementarity_residual(step.pressure_F, step.phi, step.rho_next, delta_sat), math.inf, True)
    return rec


def check_obstacle(step: JkoStepResult, sol, *, complementarity_rtol: float = 1e-4, match: bool = False,
                   order_rtol: float = 1e-3, gap: float = 0.05, free_boundary: bool = False,
                   fb_tol: float = 1e-6) -> DiagnosticsRecord:
    """Obstacle solution q: complementarity (the pressure check), ordering p_F <= q
    and the free-boundary measure."""
    rec = DiagnosticsRecord()
    scale = laplacian_l1(step.phi)
    rec.add("pressure_complementarity", sol.complementarity_residual, complementarity_rtol * scale + 1e-14)
    if match:
        qmax = float(np.max(sol.q.values))
        rec.add("obstacle_order", check_subsolution_order(step.pressure_F, sol.q), order_rtol * qmax)
        rec.add("obstacle_l2_gap", relative_l2_gap(step.pressure_F, sol.q), gap)
    if free_boundary:
        for name, (value, bound, ok) in free_boundary_checks(free_boundary_measure(sol.q, step.phi), sol.q,
                                                             fb_tol).items():
            rec.add(name, value, bound, ok)
    return rec


def trajectory_distance(rhos_a, rhos_b) -> np.ndarray:
    return np.array([w2_distance(a, b) for a, b in zip(rhos_a, rhos_b)])


def cross_solver_agreement(config, eps: float | None = None, constant: float = 5.0) -> DiagnosticsRecord:
    """Run a 1D scenario with the quantile engine and with the entropic engine
    (eps = h^2 unless given) and bound max_t W2 by constant * (eps + tau)."""
    from dataclasses import replace

    from .driver import simulate_trajectory

    grid = config.build_grid()
    if grid.dim != 1:
        raise ValueError("cross-solver agreement runs on 1D scenarios")
    h = grid.spacing[0]
    eps = h * h if eps is None else eps
    a = simulate_trajectory(replace(config, engine="quantile"))
    b = simulate_trajectory(replace(config, engine="entropic", eps=eps))
    d = trajectory_distance(a.densities(), b.densities())
    rec = DiagnosticsRecord()
    rec.add("cross_solver_w2", d.max(initial=0.0), constant * (eps + config.tau))
    return rec
