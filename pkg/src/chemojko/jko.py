"""One constrained minimizing-movement step and the pressure read off its duals.

The interaction energy -1/2 <rho, phi(rho)> is concave, so freezing phi at the
current iterate gives a convex majorant of the step objective. Minimizing the
majorant repeatedly (the outer "lag" loop) never increases the true objective.

Inner engines:

* ``quantile`` (1D): segment endpoints of the quantile function; each sweep is
  an isotonic regression (mu = 0) or a small conic program (mu > 0).
* ``lp``: banded capacitated transport between cell-center atoms (mu = 0), HiGHS.
* ``entropic``: damped Newton on the dual prices (1D) or log-domain Sinkhorn
  with a closed-form column prox.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import isotonic_regression, linprog
from scipy.special import expit

from .elliptic import potential_of
from .grid import (DensityField, Grid, ScalarField, VectorField, face_inner, gradient, project_to_admissible)
from .transport import (LogKernel, scaled, w2_exact_1d, Segments, TransportResult, _log, debiased_potential, plan_moments,
                        quantile_segments, result_from_plan, segments_cost, segments_deposit, segments_transport)

log = logging.getLogger(__name__)


class JkoError(RuntimeError):
    def __init__(self, message: str, telemetry: dict | None = None):
        super().__init__(message)
        self.telemetry = telemetry or {}


@dataclass(frozen=True)
class EnergyParams:
    mu: float = 0.0
    interaction_on: bool = True
    tau: float = 1e-2
    sigma: float = 1.0
    eta: float = 1.0

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


@dataclass(frozen=True)
class SolverOptions:
    engine: str = "auto"  # auto | quantile | lp | entropic
    subcells: int = 1  # quantile engine: segments per occupied cell
    trace: list | None = None  # entropic engine appends (stage, iteration, marginal error)
    eps: float | None = None  # entropic regularization, default eps_factor * h^2
    eps_factor: float = 0.1
    eps_stages: int = 4  # annealing stages (factor 2 each) before the target eps
    band: int | None = None  # transport radius in cells, None = automatic
    tol_lag: float = 1e-9
    max_outer: int = 40
    tol_sinkhorn: float = 1e-10
    max_sinkhorn: int = 50000
    entropic_solver: str = "auto"  # auto | newton | sinkhorn
    max_newton: int = 200
    barrier: float = 1e-4  # Newton solver at mu = 0: final barrier width relative to eps
    delta_sat: float = 1e-3
    rho_floor: float = 1e-12
    tie_break: str = "smallest"

    def __post_init__(self):
        if self.engine not in ("auto", "quantile", "lp", "entropic"):
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.tie_break not in ("smallest", "largest"):
            raise ValueError("tie_break must be 'smallest' or 'largest'")
        if self.entropic_solver not in ("auto", "newton", "sinkhorn"):
            raise ValueError(f"unknown entropic solver {self.entropic_solver!r}")


@dataclass(frozen=True)
class JkoStepResult:
    rho_prev: DensityField
    rho_next: DensityField
    phi: ScalarField
    psi: ScalarField
    velocity: VectorField
    pressure_F: ScalarField
    lagrange_level: float
    w2_sq: float
    energy_before: float
    energy_after: float
    inner_iterations: int
    outer_lag_iterations: int
    transport: TransportResult  # from rho_next back to rho_prev
    engine: str
    telemetry: dict = field(default_factory=dict)


def _phi(values: np.ndarray, grid: Grid, params: EnergyParams) -> np.ndarray:
    if not params.interaction_on:
        return np.zeros(grid.shape)
    return potential_of(values, grid, params.sigma, params.eta)


def entropy_sum(values: np.ndarray) -> float:
    v = values[values > 0]
    return float(np.sum(v * np.log(v)))


def energy_values(values: np.ndarray, grid: Grid, params: EnergyParams, phi: np.ndarray | None = None) -> float:
    vol = grid.cell_volume
    out = params.mu * entropy_sum(values) * vol if params.mu else 0.0
    if params.interaction_on:
        phi = _phi(values, grid, params) if phi is None else phi
        out -= 0.5 * float(np.sum(values * phi)) * vol
    return float(out)


def energy(rho: DensityField, params: EnergyParams) -> float:
    """J(rho) = mu int rho log rho - 1/2 int rho phi (0 log 0 = 0)."""
    return energy_values(np.asarray(rho.values), rho.grid, params)


def energy_lower_bound(grid: Grid, params: EnergyParams) -> float:
    """J >= -mu |Omega| / e - 1/2 on the admissible set."""
    return -params.mu * grid.volume / math.e - (0.5 if params.interaction_on else 0.0)


# --------------------------------------------------------------------------
# banded pair lists


def _offsets(dim: int, r: int) -> np.ndarray:
    ax = np.arange(-r, r + 1)
    if dim == 1:
        return ax[:, None]
    O = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    return O[(O ** 2).sum(1) <= r * r]


def _pairs(grid: Grid, src: np.ndarray, r: int):
    """All (source position k, destination cell, offset) with |offset| <= r cells."""
    idx = np.unravel_index(src, grid.shape)
    ks, dsts, offs = [], [], []
    for o in _offsets(grid.dim, r):
        moved = [i + d for i, d in zip(idx, o)]
        ok = np.ones(src.size, bool)
        for a, m in enumerate(moved):
            ok &= (m >= 0) & (m < grid.cells[a])
        ks.append(np.flatnonzero(ok))
        dsts.append(np.ravel_multi_index(tuple(m[ok] for m in moved), grid.shape))
        offs.append(np.repeat(o[None, :], ok.sum(), 0))
    return np.concatenate(ks), np.concatenate(dsts), np.concatenate(offs)


def _reference_log_weight(grid: Grid, eps: float, band: int | None) -> np.ndarray:
    """log w for the target reference measure of the entropic prox.

    Row-normalised Gibbs plans drain the cells next to a wall, whose kernel
    rows are short. w is the symmetric scaling with w_j sum_i K_ij w_i = 1 on
    each axis (K banded like the plan), so the uniform density is a fixed
    point; w is flat away from the walls.
    """
    out = np.zeros(grid.shape)
    for axis, n in enumerate(grid.cells):
        r = n - 1 if band is None else min(int(band), n - 1)
        off = np.arange(n)[:, None] - np.arange(n)[None, :]
        K = np.where(np.abs(off) <= r, np.exp(-((off * grid.spacing[axis]) ** 2) / eps), 0.0)
        w = np.ones(n)
        for _ in range(500):
            new = np.sqrt(w / (K @ w))
            if np.abs(new - w).max() <= 1e-15 * new.max():
                w = new
                break
            w = new
        lw = np.log(w / w[n // 2])
        shape = [1] * grid.dim
        shape[axis] = n
        out = out + lw.reshape(shape)
    return out


def _auto_band(grid: Grid, V: np.ndarray, params: EnergyParams, extra: float = 0.0) -> int:
    h = min(grid.spacing)
    speed = 0.0
    if V.any():
        speed = max(float(np.abs(np.diff(V, axis=a)).max()) / grid.spacing[a] for a in range(grid.dim))
    reach = 2.0 * params.tau * speed + 4.0 * math.sqrt(2 * params.mu * params.tau) + extra
    return int(math.ceil(reach / h)) + 2


@dataclass
class _Inner:
    rho: np.ndarray
    rows: np.ndarray | None  # sparse plan, prev cell -> next cell
    cols: np.ndarray | None
    masses: np.ndarray | None
    f: np.ndarray | None  # source duals (objective units per unit mass)
    iterations: int
    band: int
    extra: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# exact engines


def _lp_inner(rho_bar: np.ndarray, V: np.ndarray, grid: Grid, params: EnergyParams, band: int) -> _Inner:
    src = np.flatnonzero(rho_bar.ravel() > 0)
    h = np.asarray(grid.spacing)
    while True:
        k, dst, off = _pairs(grid, src, band)
        d2 = ((off * h) ** 2).sum(1)
        # variables are cell fractions x = pi / vol, so rows sum to rho_bar and columns to <= 1
        c = d2 / (2 * params.tau) - V.ravel()[dst]
        used, inv = np.unique(dst, return_inverse=True)
        nv = c.size
        A_eq = sp.csr_matrix((np.ones(nv), (k, np.arange(nv))), shape=(src.size, nv))
        A_ub = sp.csr_matrix((np.ones(nv), (inv, np.arange(nv))), shape=(used.size, nv))
        res = linprog(c, A_ub=A_ub, b_ub=np.ones(used.size), A_eq=A_eq, b_eq=rho_bar.ravel()[src],
                      bounds=(0, None), method="highs-ipm",
                      options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
        if res.status != 0:
            raise JkoError(f"LP engine failed: {res.message}", {"band": band})
        x = res.x
        moved = np.sqrt((off[x > 1e-13] ** 2).sum(1))
        if moved.size and moved.max() > band - 1 and band < max(grid.cells):
            band *= 2
            continue
        break
    keep = x > 0
    vol = grid.cell_volume
    rho = np.bincount(dst[keep], weights=x[keep], minlength=grid.size).reshape(grid.shape)
    return _Inner(rho, src[k[keep]], dst[keep], x[keep] * vol, res.eqlin.marginals.copy(), int(res.nit), band,
                  {"src": src, "capacity_dual": -res.ineqlin.marginals, "capacity_cells": used})


def _interleave(xl: np.ndarray, xr: np.ndarray) -> np.ndarray:
    y = np.empty(2 * xl.size)
    y[0::2] = xl
    y[1::2] = xr
    return y


def _slope_at(grid: Grid, V: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Derivative of the piecewise-linear interpolant of cell values (flat beyond the end centers)."""
    c = grid.axis_centers(0)
    slopes = np.diff(V) / grid.spacing[0]
    k = np.clip(np.searchsorted(c, x) - 1, -1, c.size - 1)
    return np.where((k >= 0) & (k < c.size - 1), slopes[np.clip(k, 0, c.size - 2)], 0.0)


def _quantile_objective(y: np.ndarray, base: Segments, grid: Grid, params: EnergyParams) -> tuple[float, np.ndarray]:
    seg = base.with_positions(y[0::2], y[1::2])
    rho = segments_deposit(grid, seg)
    return energy_values(rho, grid, params) + segments_cost(seg, base) / (2 * params.tau), rho


class _EntropyProx:
    """Lumped quadratic + segment entropy under the ordering constraints, as a
    parametrized cvxpy problem (compiled once per segment layout)."""

    def __init__(self, ds: np.ndarray, length: float, mu: float, quad: float):
        import cvxpy as cp

        M = ds.size
        self.y = cp.Variable(2 * M)
        self.target = cp.Parameter(2 * M)
        w = np.repeat(ds / 2, 2) * quad
        widths = self.y[1::2] - self.y[0::2]
        obj = 0.5 * cp.sum(cp.multiply(w, cp.square(self.y - self.target))) - mu * cp.sum(cp.multiply(ds, cp.log(widths)))
        cons = [widths >= ds, self.y[0] >= 0, self.y[-1] <= length]
        if M > 1:
            cons.append(self.y[2::2] >= self.y[1:-1:2])
        self.problem = cp.Problem(cp.Minimize(obj), cons)

    def solve(self, target: np.ndarray) -> np.ndarray:
        import cvxpy as cp

        self.target.value = target
        try:
            self.problem.solve(solver=cp.CLARABEL, tol_gap_abs=1e-13, tol_gap_rel=1e-13, tol_feas=1e-13)
        except cp.SolverError as exc:
            raise JkoError(f"entropy prox failed: {exc}") from exc
        if self.problem.status not in ("optimal", "optimal_inaccurate"):
            raise JkoError(f"entropy prox status {self.problem.status}")
        return np.asarray(self.y.value, dtype=float)


def _quantile_step(base: Segments, grid: Grid, params: EnergyParams, opts: SolverOptions):
    """Majorize-minimize on the segment endpoints; returns (segments, sweeps, lag history)."""
    tau = params.tau
    L = grid.lengths[0]
    kappa = 1.0 if params.interaction_on else 0.0
    yb = _interleave(base.xl, base.xr)
    w = np.repeat(base.ds / 2, 2)
    off = np.concatenate(([0.0], np.cumsum(_interleave(base.ds, np.zeros_like(base.ds)))[:-1]))
    quad = 1.0 / tau + kappa
    prox = _EntropyProx(base.ds, L, params.mu, quad) if params.mu > 0 else None
    y = yb.copy()
    start, rho = _quantile_objective(yb, base, grid, params)
    V = _phi(rho, grid, params)
    best, best_y = start, yb
    history = []
    stall = 0
    for sweep in range(1, opts.max_outer + 1):
        target = (yb / tau + kappa * y + _slope_at(grid, V, y)) / quad
        if prox is None:
            z = isotonic_regression(target - off, weights=w, increasing=True).x
            y = np.clip(z, 0.0, L - off[-1]) + off
        else:
            y = prox.solve(target)
        value, rho = _quantile_objective(y, base, grid, params)
        V_new = _phi(rho, grid, params)
        change = float(np.max(np.abs(V_new - V)))
        history.append(change)
        V = V_new
        # the interpolated slope jumps at cell centers, so the sweeps can end in a
        # short cycle; stop once the objective no longer improves
        if value < best - 1e-15 * max(1.0, abs(best)):
            best, best_y, stall = value, y, 0
        else:
            stall += 1
        if change <= opts.tol_lag or not params.interaction_on or stall >= 3:
            break
    # safeguard: the true grid objective must not exceed its value at the start
    y = best_y
    t = 1.0 if best <= start else 0.0
    return base.with_positions(y[0::2], y[1::2]), sweep, history, t


# --------------------------------------------------------------------------
# entropic engine


def _entropic_inner(rho_bar: np.ndarray, V: np.ndarray, grid: Grid, params: EnergyParams, opts: SolverOptions,
                    warm: tuple | None) -> _Inner:
    vol = grid.cell_volume
    h = min(grid.spacing)
    eps = opts.eps if opts.eps is not None else opts.eps_factor * h * h
    a = rho_bar * vol
    log_a = _log(a)
    tau, mu = params.tau, params.mu
    if warm is not None and warm[0] != "potentials":
        warm = None
    f = np.zeros(grid.shape) if warm is None else warm[1].copy()
    g = np.zeros(grid.shape) if warm is None else warm[2].copy()
    schedule = [eps * 2.0 ** s for s in range(opts.eps_stages, 0, -1)] + [eps]
    total = 0
    err = np.inf
    for stage, e in enumerate(schedule):
        last = stage == len(schedule) - 1
        band = opts.band if opts.band is not None else _auto_band(grid, V, params, 6.0 * math.sqrt(e))
        kernel = LogKernel(grid, band)
        lw = _reference_log_weight(grid, e, band)
        stage_tol = opts.tol_sinkhorn if last else max(opts.tol_sinkhorn, 1e-7)
        for it in range(opts.max_sinkhorn):
            f = -e * kernel.lse(g / e, e)
            log_q = kernel.lse(scaled(f, log_a, e), e)
            finite = np.isfinite(log_q)
            log_r = (log_q + lw - math.log(vol) + 2 * tau * (V - mu) / e) / (1 + 2 * tau * mu / e)
            log_r = np.minimum(log_r, 0.0)
            with np.errstate(invalid="ignore"):
                g = np.where(finite, e * (log_r + math.log(vol) - log_q), -np.inf)
            total += 1
            if it % 10 == 9 or it == opts.max_sinkhorn - 1:
                with np.errstate(invalid="ignore", over="ignore"):
                    row = np.exp(f / e + kernel.lse(g / e, e))
                err = float(np.sum(np.abs(np.nan_to_num(row[a > 0]) - 1.0) * a[a > 0]))
                if opts.trace is not None:
                    opts.trace.append((stage, it, err))
                if err <= stage_tol:
                    break
        else:
            if last:
                raise JkoError(f"Sinkhorn prox did not converge (marginal error {err:.3e})",
                               {"iterations": total, "eps": e})
    rho = np.where(finite, np.exp(log_r), 0.0)
    return _Inner(rho, None, None, None, None, total, band,
                  {"f": f, "g": g, "eps": eps, "kernel": kernel, "marginal_error": err})


class _DualProx:
    """Concave dual of the entropic prox over a fixed banded pair set.

    With u_j the price of cell j, the plan is
    pi_ij = a_i exp((2 tau V_j - u_j - C_ij)/eps) / Z_i (rows exact) and the dual reads
    Phi(u) = -eps sum_i a_i log Z_i - sum_j H(u_j),
    H(u) = sup_{0 <= nu <= vol} (u nu - kappa nu log(nu/vol)) with kappa = 2 tau mu.
    For mu = 0 the kink of H is smoothed by a binary-entropy barrier of width delta.
    """

    def __init__(self, grid: Grid, a: np.ndarray, V: np.ndarray, params: EnergyParams, eps: float, band: int):
        src = np.flatnonzero(a.ravel() > 0)
        k, dst, off = _pairs(grid, src, band)
        order = np.lexsort((dst, k))
        k, dst, off = k[order], dst[order], off[order]
        h = np.asarray(grid.spacing)
        self.grid, self.eps, self.band = grid, eps, band
        self.src, self.k, self.dst = src, k, dst
        self.a = a.ravel()[src]
        self.starts = np.concatenate(([0], np.cumsum(np.bincount(k, minlength=src.size))[:-1]))
        self.cols, self.inv = np.unique(dst, return_inverse=True)
        self.d2 = ((off * h) ** 2).sum(1)
        self.lw = _reference_log_weight(grid, eps, band).ravel()
        self.base = (2 * params.tau * V.ravel()[dst] - self.d2) / eps + self.lw[dst]
        self.vol = grid.cell_volume
        self.kappa = 2 * params.tau * params.mu
        self.delta = eps

    def _rows(self, u):
        z = self.base - u[self.inv] / self.eps
        zmax = np.maximum.reduceat(z, self.starts)
        e = np.exp(z - zmax[self.k])
        tot = np.add.reduceat(e, self.starts)
        lse = zmax + np.log(tot)
        return lse, e / tot[self.k]

    def _h(self, u):
        vol = self.vol
        if self.kappa > 0:
            kap = self.kappa
            low = u <= kap
            ex = np.exp(np.minimum(u, kap) / kap - 1.0)
            H = np.where(low, kap * vol * ex, vol * u)
            nu = np.where(low, vol * ex, vol)
            curv = np.where(low, vol * ex / kap, 0.0)
            return H, nu, curv
        # binary-entropy barrier: nu* = vol sigmoid(u/delta), strictly inside (0, vol)
        d = self.delta
        sig = expit(u / d)
        H = vol * d * np.logaddexp(0.0, u / d)
        return H, vol * sig, vol / d * sig * (1.0 - sig)

    def evaluate(self, u):
        lse, p = self._rows(u)
        pi = self.a[self.k] * p
        nu = np.bincount(self.inv, weights=pi, minlength=self.cols.size)
        H, nu_star, curv = self._h(u)
        phi = -self.eps * float(np.dot(self.a, lse)) - float(H.sum())
        return phi, nu - nu_star, pi, nu, curv, lse, p

    def newton_direction(self, p, nu, curv, grad):
        m = self.cols.size
        # sum_i pi_ij pi_ik / a_i = sum_i a_i p_ij p_ik with p the row-conditional plan
        w = np.sqrt(self.a)[self.k] * p
        P = sp.csr_matrix((w, (self.k, self.inv)), shape=(self.src.size, m))
        S = (sp.diags(nu) - (P.T @ P)) / self.eps + sp.diags(curv)
        scale = float(np.max(np.abs(S.diagonal()))) if m else 1.0
        S = S + sp.identity(m) * (1e-13 * scale)
        return spla.spsolve(S.tocsc(), grad)


def _newton_inner(rho_bar: np.ndarray, V: np.ndarray, grid: Grid, params: EnergyParams, opts: SolverOptions,
                  warm) -> _Inner:
    """Damped Newton on the dual of the entropic prox (sparse Hessian; banded in 1D)."""
    vol = grid.cell_volume
    h = min(grid.spacing)
    eps = opts.eps if opts.eps is not None else opts.eps_factor * h * h
    band = opts.band if opts.band is not None else _auto_band(grid, V, params, 6.0 * math.sqrt(eps))
    a = rho_bar * vol
    prox = _DualProx(grid, a, V, params, eps, band)
    u = np.zeros(prox.cols.size)
    if warm is not None and warm[0] == "price":
        prev = warm[1]
        u = np.nan_to_num(prev.ravel()[prox.cols], nan=0.0, posinf=0.0, neginf=0.0)
    deltas = [eps] if params.mu > 0 else list(eps * np.geomspace(1.0, opts.barrier, 3))
    if warm is not None and warm[0] == "price":
        deltas = deltas[-1:]
    total = 0
    err = np.inf
    for stage, d in enumerate(deltas):
        prox.delta = d
        last = stage == len(deltas) - 1
        tol = opts.tol_sinkhorn if last else max(opts.tol_sinkhorn, 1e-8)
        phi, grad, pi, nu, curv, lse, p = prox.evaluate(u)
        for it in range(opts.max_newton):
            err = float(np.abs(grad).sum())
            if opts.trace is not None:
                opts.trace.append((stage, it, err))
            if err <= tol:
                break
            step = prox.newton_direction(p, nu, curv, grad)
            slope = float(np.dot(grad, step))
            t = 1.0
            while True:
                cand = u + t * step
                res = prox.evaluate(cand)
                if res[0] >= phi + 1e-4 * t * slope or t < 1e-10:
                    break
                # near the optimum Phi stalls at round-off; fall back on the marginal error
                if abs(res[0] - phi) <= 1e-13 * abs(phi) and np.abs(res[1]).sum() < err:
                    break
                t *= 0.5
            u = cand
            phi, grad, pi, nu, curv, lse, p = res
            total += 1
        else:
            if last:
                raise JkoError(f"Newton prox did not converge (marginal error {err:.3e})",
                               {"iterations": total, "eps": eps})
    rho = np.zeros(grid.size)
    rho[prox.cols] = nu / vol
    rho = rho.reshape(grid.shape)
    price = np.full(grid.size, np.nan)
    price[prox.cols] = u
    g = np.full(grid.size, -np.inf)
    g[prox.cols] = 2 * params.tau * V.ravel()[prox.cols] - u + eps * prox.lw[prox.cols]
    f = np.zeros(grid.size)
    f[prox.src] = -eps * lse
    return _Inner(rho, prox.src[prox.k], prox.dst, pi, f, total, band,
                  {"f": f.reshape(grid.shape), "g": g.reshape(grid.shape), "eps": eps, "marginal_error": err,
                   "price": price.reshape(grid.shape), "solver": "newton"})


def _newton_wanted(grid: Grid, opts: SolverOptions) -> bool:
    if opts.entropic_solver != "auto":
        return opts.entropic_solver == "newton"
    # the direct sparse solve is cheap only for banded 1D Hessians
    return grid.dim == 1


def _entropic_transport(inner: _Inner, rho_bar: np.ndarray, rho_next: np.ndarray, grid: Grid) -> TransportResult:
    """TransportResult from rho_next back to rho_bar, read off the entropic plan."""
    f, g, eps = (inner.extra[k] for k in ("f", "g", "eps"))
    vol = grid.cell_volume
    log_a = _log(rho_bar * vol)
    if inner.rows is not None:
        # explicit banded plan (Newton solver)
        psi = 0.5 * g
        if not np.all(np.isfinite(psi)):
            soft = -0.5 * eps * LogKernel(grid, None).lse(scaled(f, log_a, eps), eps)
            psi = np.where(np.isfinite(psi), psi, soft)
        anchor = psi.ravel()[0]
        tr = result_from_plan(grid, inner.cols, inner.rows, inner.masses, psi.ravel() - anchor,
                              (0.5 * f).ravel() + anchor, f"entropic({eps:g})",
                              {"marginal_error": inner.extra["marginal_error"]})
        return tr
    kernel = inner.extra["kernel"]
    # plan pi_ij = exp(f_i/eps + log a_i + g_j/eps - C_ij/eps); rows here are the next-step cells j
    row, bary, second = plan_moments(kernel, g, f, np.zeros(grid.shape), log_a, eps)
    X = grid.centers()
    disp = np.zeros((grid.dim,) + grid.shape)
    pos = row > 0
    for ax in range(grid.dim):
        disp[ax][pos] = X[ax][pos] - bary[ax][pos] / row[pos]
    psi = 0.5 * g
    if not np.all(np.isfinite(psi)):
        full = LogKernel(grid, None)
        soft = -0.5 * eps * full.lse(scaled(f, log_a, eps), eps)
        psi = np.where(np.isfinite(psi), psi, soft)
    anchor = psi.ravel()[0]
    psi = psi - anchor
    psi_c = 0.5 * f + anchor
    psi_c = np.where(np.isfinite(psi_c), psi_c, 0.0)
    cost = float(second.sum())
    return TransportResult(cost, psi, psi_c, disp, second / vol, rho_next, rho_bar, grid, f"entropic({eps:g})",
                           {"marginal_error": inner.extra["marginal_error"]})


# --------------------------------------------------------------------------
# the step


def _choose_engine(grid: Grid, params: EnergyParams, opts: SolverOptions) -> str:
    if opts.engine != "auto":
        return opts.engine
    if grid.dim == 1:
        return "quantile"
    return "lp" if params.mu == 0 else "entropic"


def jko_step(rho_prev: DensityField, params: EnergyParams, opts: SolverOptions | None = None,
             state=None) -> JkoStepResult:
    """Minimize W2^2(rho_prev, .)/(2 tau) + J over the admissible set.

    ``state`` carries engine memory between steps: the segment list of the
    1D quantile engine (whose cell averages must equal ``rho_prev``) or the
    Sinkhorn potentials of the entropic engine used as a warm start.
    """
    opts = opts or SolverOptions()
    grid = rho_prev.grid
    rho_bar = np.asarray(rho_prev.values, dtype=float)
    engine = _choose_engine(grid, params, opts)
    if engine == "quantile" and grid.dim != 1:
        raise JkoError("the quantile engine is 1D only")
    if engine == "lp" and params.mu > 0:
        raise JkoError("the LP engine needs mu = 0")
    t0 = time.perf_counter()
    phi_bar = _phi(rho_bar, grid, params)
    J0 = energy_values(rho_bar, grid, params, phi_bar)
    telemetry: dict = {}

    if engine == "quantile":
        base = state if isinstance(state, Segments) else None
        if base is None or np.max(np.abs(segments_deposit(grid, base) - rho_bar)) > 1e-12:
            base = quantile_segments(grid, rho_bar, opts.subcells)
        moved, sweeps, history, t = _quantile_step(base, grid, params, opts)
        inner_total = sweeps
        rho_raw = segments_deposit(grid, moved)
        telemetry.update(backtrack=t)
        next_state = moved
    else:
        warm = state if isinstance(state, tuple) else None
        V = phi_bar
        band = opts.band if opts.band is not None else _auto_band(grid, V, params)
        inner_total = 0
        history = []
        for outer in range(1, opts.max_outer + 1):
            if engine == "lp":
                inner = _lp_inner(rho_bar, V, grid, params, band)
                band = max(band, inner.band)
            elif _newton_wanted(grid, opts):
                inner = _newton_inner(rho_bar, V, grid, params, opts, warm)
                warm = ("price", inner.extra["price"])
            else:
                inner = _entropic_inner(rho_bar, V, grid, params, opts, warm)
                warm = ("potentials", inner.extra["f"], inner.extra["g"])
            inner_total += inner.iterations
            phi_new = _phi(inner.rho, grid, params)
            change = float(np.max(np.abs(phi_new - V)))
            history.append(change)
            if change <= opts.tol_lag or not params.interaction_on:
                break
            V = phi_new
        else:
            raise JkoError(f"lagged potential did not settle after {opts.max_outer} sweeps",
                           {"lag_history": history, "inner_iterations": inner_total})
        rho_raw = inner.rho
        telemetry.update(band=inner.band)
        telemetry.update({k: v for k, v in inner.extra.items() if k in ("marginal_error", "eps")})
        next_state = warm

    rho_next_vals = project_to_admissible(grid, rho_raw)
    rho_next = DensityField(grid, rho_next_vals)
    phi_next = _phi(rho_next_vals, grid, params)
    J1 = energy_values(rho_next_vals, grid, params, phi_next)

    if engine == "quantile":
        tr = segments_transport(grid, next_state, base)
    else:
        tr = _step_transport(engine, inner, rho_bar, rho_next_vals, grid, params, opts)
    velocity = VectorField.from_cells(grid, np.where(tr.source > 0, tr.displacement, 0.0) / params.tau)
    telemetry.update(lag_history=history, seconds=time.perf_counter() - t0, state=next_state)
    provisional = JkoStepResult(rho_prev, rho_next, ScalarField(grid, phi_next, "robin"),
                                ScalarField(grid, tr.psi, "free"), velocity,
                                ScalarField(grid, np.zeros(grid.shape)), 0.0, tr.cost, J0, J1, inner_total,
                                len(history), tr, engine, telemetry)
    p, ell = extract_pressure_from_potential(provisional, params, opts)
    return replace(provisional, pressure_F=p, lagrange_level=ell)


def _step_transport(engine: str, inner: _Inner, rho_bar, rho_next, grid: Grid, params: EnergyParams,
                    opts: SolverOptions) -> TransportResult:
    if engine == "entropic":
        return _entropic_transport(inner, rho_bar, rho_next, grid)
    nxt = DensityField(grid, rho_next, validate=False)
    prev = DensityField(grid, rho_bar, validate=False)
    if grid.dim == 1:
        # exact monotone transport between the two states; its cost never exceeds the engine plan's
        return w2_exact_1d(nxt, prev)
    tr = result_from_plan(grid, inner.cols, inner.rows, inner.masses, np.zeros(grid.size), np.zeros(grid.size),
                          engine)
    if np.array_equal(rho_next, rho_bar):
        # nothing moved: the potential is constant on the support
        psi = np.zeros(grid.shape)
    else:
        psi = _lp_potential(inner, grid, params)
    return replace(tr, psi=psi, source=rho_next, target=rho_bar)


def _lp_potential(inner: _Inner, grid: Grid, params: EnergyParams) -> np.ndarray:
    """Kantorovich potential on the new cells from the LP row duals f:
    psi(y) = min_x |x - y|^2/2 - tau f(x) over the band pairs."""
    src, f = inner.extra["src"], inner.f
    k, dst, off = _pairs(grid, src, inner.band)
    d2 = ((off * np.asarray(grid.spacing)) ** 2).sum(1)
    vals = 0.5 * d2 - params.tau * f[k]
    psi = np.full(grid.size, np.inf)
    np.minimum.at(psi, dst, vals)
    covered = np.isfinite(psi)
    psi[~covered] = psi[covered].max() if covered.any() else 0.0
    return (psi - psi[0]).reshape(grid.shape)


# --------------------------------------------------------------------------
# pressure from the first-order conditions


def _violation_curve(F: np.ndarray, w_low: np.ndarray, w_high: np.ndarray):
    """v(l) = sum w_low (l - F)_+ + sum w_high (F - l)_+ at every breakpoint l = F_k."""
    order = np.argsort(F, kind="stable")
    Fs, wl, wh = F[order], w_low[order], w_high[order]
    cl = np.cumsum(wl)
    sl = np.cumsum(wl * Fs)
    ch = np.cumsum(wh[::-1])[::-1]
    shf = np.cumsum((wh * Fs)[::-1])[::-1]
    # (l - F)_+ over entries strictly left, (F - l)_+ over entries strictly right; ties contribute 0
    low = np.concatenate(([0.0], Fs[1:] * cl[:-1] - sl[:-1]))
    high = np.concatenate((shf[1:] - Fs[:-1] * ch[1:], [0.0]))
    return Fs, low + high


def _component_level(F: np.ndarray, rho: np.ndarray, sat: np.ndarray, vol: float, tie_break: str) -> float:
    w_low = (1.0 - rho) * vol
    w_high = sat * vol
    Fs, viol = _violation_curve(F, w_low, w_high)
    vmin = viol.min()
    ok = np.flatnonzero(viol <= vmin + 1e-14 * max(1.0, abs(vmin)))
    return float(Fs[ok[0]] if tie_break == "smallest" else Fs[ok[-1]])


def extract_pressure_from_potential(step: JkoStepResult, params: EnergyParams,
                                    opts: SolverOptions | None = None) -> tuple[ScalarField, float]:
    """p = (l - F)_+ with F = mu log rho - phi + psi/tau and l from a scan of the violation functional.

    The Kantorovich potential is only fixed up to a constant on each connected
    component of the support, so the level is scanned per component. The
    pressure is kept on the saturated cells only: in partially filled cells the
    cell-centered potential misplaces sub-cell mass. The returned level belongs
    to the heaviest component.
    """
    from scipy.ndimage import label

    opts = opts or SolverOptions()
    grid = step.rho_next.grid
    vol = grid.cell_volume
    rho = np.asarray(step.rho_next.values)
    live = rho > opts.rho_floor
    with np.errstate(divide="ignore"):
        F = params.mu * np.log(np.where(live, rho, 1.0)) - step.phi.values + step.psi.values / params.tau
    sat = rho >= 1.0 - opts.delta_sat
    p = np.zeros(grid.shape)
    labels, count = label(live)
    best_mass, level = -1.0, float(F[live].min()) if live.any() else 0.0
    for c in range(1, count + 1):
        comp = labels == c
        m = float(rho[comp].sum())
        if not sat[comp].any():
            ell = float(F[comp].min())
        else:
            ell = _component_level(F[comp], rho[comp], sat[comp], vol, opts.tie_break)
            p[comp] = np.where(sat[comp], np.maximum(ell - F[comp], 0.0), 0.0)
        if m > best_mass:
            best_mass, level = m, ell
    return ScalarField(grid, p, "zero_flux"), level


def momentum_balance_residual(step: JkoStepResult, params: EnergyParams, interior_only: bool = False) -> float:
    """||rho v - (-mu grad rho + rho grad phi - grad p)|| / max(||rho v||, 1) on faces."""
    grid = step.rho_next.grid
    rho = ScalarField(grid, step.rho_next.values, "zero_flux")
    rho_faces = []
    for a in range(grid.dim):
        r = np.moveaxis(rho.values, a, 0)
        f = np.zeros((r.shape[0] + 1,) + r.shape[1:])
        f[1:-1] = 0.5 * (r[1:] + r[:-1])
        rho_faces.append(np.moveaxis(f, 0, a))
    g_rho = gradient(rho).faces
    g_phi = gradient(step.phi).faces
    g_p = gradient(step.pressure_F).faces
    lhs, res = [], []
    for a in range(grid.dim):
        m = rho_faces[a] * step.velocity.faces[a]
        rhs = -params.mu * g_rho[a] + rho_faces[a] * g_phi[a] - g_p[a]
        lhs.append(m)
        res.append(m - rhs)
    if interior_only:
        sat = np.asarray(step.rho_next.values) >= 1.0 - 1e-3
        for a in range(grid.dim):
            s = np.moveaxis(sat, a, 0)
            both = np.zeros((s.shape[0] + 1,) + s.shape[1:], bool)
            both[1:-1] = s[1:] & s[:-1]
            res[a] = np.where(np.moveaxis(both, 0, a), res[a], 0.0)
    R = VectorField(grid, tuple(res))
    M = VectorField(grid, tuple(lhs))
    return float(np.sqrt(face_inner(R, R)) / max(np.sqrt(face_inner(M, M)), 1.0))
