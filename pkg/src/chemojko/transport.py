"""Quadratic optimal transport between grid densities.

Densities are treated as atoms of mass ``rho * cell_volume`` at cell centers,
so every method here approximates the same discrete problem and the dense LP
is a true oracle for it.

Conventions: ``cost`` is W2^2 = min <|x-y|^2, pi>. Potentials use the
half-squared cost, ``psi(x) + psi_c(y) <= |x-y|^2 / 2``, so the displacement
``x - T(x)`` approximates ``grad psi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .grid import DensityField, Grid, GridMismatchError, VectorField


class TransportError(RuntimeError):
    pass


@dataclass(frozen=True)
class TransportResult:
    cost: float
    psi: np.ndarray  # potential on the source cells, anchored at cell 0
    psi_c: np.ndarray  # conjugate potential on the target cells
    displacement: np.ndarray  # (dim,)+shape, x - T(x), zero where source vanishes
    kinetic: np.ndarray  # per cell sum_j pi_ij |x_i - y_j|^2 / cell_volume
    source: np.ndarray
    target: np.ndarray
    grid: Grid
    method: str
    info: dict = field(default_factory=dict)

    @property
    def potential_psi(self):
        from .grid import ScalarField
        return ScalarField(self.grid, self.psi, "free")


def _check_pair(rho_from, rho_to) -> Grid:
    if rho_from.grid != rho_to.grid:
        raise GridMismatchError("densities live on different grids")
    grid = rho_from.grid
    vol = grid.cell_volume
    m0 = rho_from.values.sum() * vol
    m1 = rho_to.values.sum() * vol
    if m0 <= 0 or m1 <= 0:
        raise TransportError("zero-mass input")
    if abs(m0 - m1) > 1e-12 * max(1.0, m0):
        raise TransportError(f"mass mismatch {m0!r} vs {m1!r}")
    return grid


def _values(r) -> np.ndarray:
    return np.asarray(getattr(r, "values", r), dtype=float)


# --------------------------------------------------------------------------
# exact 1D: monotone (north-west corner) coupling of sorted atoms


def monotone_plan(a: np.ndarray, b: np.ndarray):
    """North-west corner coupling of two 1D mass vectors (atoms in order).

    Returns (rows, cols, masses). Zero-mass atoms are skipped.
    """
    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    # Cumulative-mass merge: every breakpoint of either CDF starts a new block.
    ca = np.cumsum(a[ia])
    cb = np.cumsum(b[ib])
    total = min(ca[-1], cb[-1])
    # round-off can push the larger side's partial sums past the common total
    np.minimum(ca, total, out=ca)
    np.minimum(cb, total, out=cb)
    ca[-1] = cb[-1] = total
    cuts = np.union1d(ca, cb)
    starts = np.concatenate(([0.0], cuts[:-1]))
    masses = cuts - starts
    keep = masses > 0
    mids = 0.5 * (starts + cuts)[keep]
    rows = ia[np.searchsorted(ca, mids)]
    cols = ib[np.searchsorted(cb, mids)]
    return rows, cols, masses[keep]


def _tree_duals(rows, cols, x, y, prefer: str):
    """Duals u, v with u_i + v_j = |x_i - y_j|^2 / 2 along the staircase basis.

    Where both CDFs break together the staircase is disconnected; ``prefer``
    decides which degenerate edge reconnects it.
    """
    u = {}
    v = {}
    i0, j0 = rows[0], cols[0]
    u[i0] = 0.0
    v[j0] = 0.5 * (x[i0] - y[j0]) ** 2
    for i, j in zip(rows[1:], cols[1:]):
        if i in u and j not in v:
            v[j] = 0.5 * (x[i] - y[j]) ** 2 - u[i]
        elif j in v and i not in u:
            u[i] = 0.5 * (x[i] - y[j]) ** 2 - v[j]
        elif i not in u and j not in v:
            pi, pj = max(u), max(v)
            if prefer == "source":
                u[i] = 0.5 * (x[i] - y[pj]) ** 2 - v[pj]
                v[j] = 0.5 * (x[i] - y[j]) ** 2 - u[i]
            else:
                v[j] = 0.5 * (x[pi] - y[j]) ** 2 - u[pi]
                u[i] = 0.5 * (x[i] - y[j]) ** 2 - v[j]
    return u, v


def w2_exact_1d(rho_from, rho_to) -> TransportResult:
    """Exact W2 between 1D grid densities by monotone rearrangement.

    The potential on the source support averages the two degenerate tree
    bases (both are optimal duals, so their mean is too) and is extended
    to empty cells by the c-transform.
    """
    grid = _check_pair(rho_from, rho_to)
    if grid.dim != 1:
        raise TransportError("w2_exact_1d needs a 1D grid")
    vol = grid.cell_volume
    a = _values(rho_from) * vol
    b = _values(rho_to) * vol
    x = grid.axis_centers(0)
    rows, cols, m = monotone_plan(a, b)
    d = x[rows] - x[cols]
    cost = float(np.sum(m * d * d))

    duals = [_tree_duals(rows, cols, x, x, p) for p in ("source", "target")]
    supp_b = np.flatnonzero(b > 0)
    v = np.array([0.5 * (duals[0][1][j] + duals[1][1][j]) for j in supp_b])
    # c-transform of v gives psi everywhere (equals the tree dual on the support)
    C = 0.5 * (x[:, None] - x[None, supp_b]) ** 2
    psi = np.min(C - v[None, :], axis=1)
    shift = psi[0]
    psi = psi - shift
    Cfull = 0.5 * (x[:, None] - x[None, :]) ** 2
    psi_c = np.min(Cfull - psi[:, None], axis=0)

    n = grid.size
    bary = np.bincount(rows, weights=m * x[cols], minlength=n)
    kin = np.bincount(rows, weights=m * d * d, minlength=n) / vol
    disp = np.zeros(n)
    pos = a > 0
    disp[pos] = x[pos] - bary[pos] / a[pos]
    return TransportResult(cost, psi, psi_c, disp[None, :], kin, _values(rho_from), _values(rho_to), grid,
                           "exact1d", {"plan": (rows, cols, m)})


# --------------------------------------------------------------------------
# dense LP oracle (small instances only)


def lp_oracle(rho_from, rho_to, max_atoms: int = 64):
    """Dense transportation LP solved by HiGHS; returns (cost, plan, psi, psi_c)."""
    grid = _check_pair(rho_from, rho_to)
    if grid.size > max_atoms:
        raise TransportError(f"LP oracle limited to {max_atoms} atoms")
    vol = grid.cell_volume
    a = _values(rho_from).ravel() * vol
    b = _values(rho_to).ravel() * vol
    b = b * (a.sum() / b.sum())
    P = grid.points()
    C = 0.5 * ((P[:, None, :] - P[None, :, :]) ** 2).sum(-1)
    n = grid.size
    rows = np.kron(np.eye(n), np.ones((1, n)))
    cols = np.kron(np.ones((1, n)), np.eye(n))
    res = linprog(C.ravel(), A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([a, b]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise TransportError(f"LP oracle failed: {res.message}")
    plan = res.x.reshape(n, n)
    duals = res.eqlin.marginals
    psi, psi_c = duals[:n].copy(), duals[n:].copy()
    psi_c += psi[0]
    psi -= psi[0]
    return 2.0 * float(np.sum(plan * C)), plan, psi.reshape(grid.shape), psi_c.reshape(grid.shape)


def dual_slack(grid: Grid, psi: np.ndarray, psi_c: np.ndarray) -> float:
    """min over all cell pairs of |x-y|^2/2 - psi(x) - psi_c(y) (>= 0 if feasible)."""
    P = grid.points()
    C = 0.5 * ((P[:, None, :] - P[None, :, :]) ** 2).sum(-1)
    return float(np.min(C - psi.ravel()[:, None] - psi_c.ravel()[None, :]))


# --------------------------------------------------------------------------
# separable Gibbs kernel in the log domain


class LogKernel:
    """log-sum-exp against exp(-|x-y|^2 / eps) on a grid, axis by axis.

    ``band`` limits the kernel to |i - j| <= band cells per axis (a banded
    kernel is exact OT restricted to short moves; use None for the full kernel).
    """

    def __init__(self, grid: Grid, band: int | None = None):
        self.grid = grid
        self.bands = [n - 1 if band is None else min(int(band), n - 1) for n in grid.cells]
        self._x = [grid.axis_centers(a) for a in range(grid.dim)]

    def _axis_pass(self, L: np.ndarray, axis: int, eps: float, moment: bool = False) -> np.ndarray:
        """out[i] = LSE_j (L[j] - (x_i - x_j)^2/eps [+ log (x_i - x_j)^2])."""
        r = self.bands[axis]
        h = self.grid.spacing[axis]
        Lm = np.moveaxis(L, axis, 0)
        n = Lm.shape[0]
        pad = np.full((n + 2 * r,) + Lm.shape[1:], -np.inf)
        pad[r:r + n] = Lm
        offs = np.arange(-r, r + 1)
        w = -((offs * h) ** 2) / eps
        if moment:
            with np.errstate(divide="ignore"):
                w = w + np.log((offs * h) ** 2)
        best = np.full(Lm.shape, -np.inf)
        for k, wk in zip(range(2 * r + 1), w):
            np.maximum(best, pad[k:k + n] + wk, out=best)
        safe = np.where(np.isfinite(best), best, 0.0)
        acc = np.zeros(Lm.shape)
        for k, wk in zip(range(2 * r + 1), w):
            acc += np.exp(pad[k:k + n] + wk - safe)
        with np.errstate(divide="ignore"):
            out = np.where(np.isfinite(best), safe + np.log(acc), -np.inf)
        return np.moveaxis(out, 0, axis)

    def lse(self, L: np.ndarray, eps: float, moment_axis: int | None = None,
            position_axis: int | None = None) -> np.ndarray:
        """LSE_j (L_j - |x_i - y_j|^2 / eps) for every cell i.

        ``moment_axis`` weights by (x_i - y_j)_a^2, ``position_axis`` by y_{j,a}.
        """
        out = np.asarray(L, dtype=float)
        if position_axis is not None:
            shape = [1] * self.grid.dim
            shape[position_axis] = -1
            out = out + np.log(self._x[position_axis]).reshape(shape)
        for a in range(self.grid.dim):
            out = self._axis_pass(out, a, eps, moment=(a == moment_axis))
        return out


def _log(a: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(a)


def scaled(f: np.ndarray, log_a: np.ndarray, eps: float) -> np.ndarray:
    """f/eps + log a, with -inf wherever the weight vanishes (f may be infinite there)."""
    with np.errstate(invalid="ignore"):
        return np.where(np.isfinite(log_a), f / eps + log_a, -np.inf)


def plan_moments(kernel: LogKernel, f: np.ndarray, g: np.ndarray, log_a: np.ndarray, log_b: np.ndarray,
                 eps: float):
    """Row marginal, barycentric target and per-row second moment of the plan
    pi_ij = a_i b_j exp((f_i + g_j - C_ij)/eps)."""
    grid = kernel.grid
    Lg = scaled(g, log_b, eps)
    base = scaled(f, log_a, eps)
    with np.errstate(invalid="ignore"):
        row = np.exp(base + kernel.lse(Lg, eps))
        bary = np.stack([np.exp(base + kernel.lse(Lg, eps, position_axis=a)) for a in range(grid.dim)])
        second = sum(np.exp(base + kernel.lse(Lg, eps, moment_axis=a)) for a in range(grid.dim))
    return np.nan_to_num(row), np.nan_to_num(bary), np.nan_to_num(second)


def sinkhorn_log(a: np.ndarray, b: np.ndarray, kernel: LogKernel, eps: float, *, eps0: float | None = None,
                 decay: float = 0.5, tol: float = 1e-10, max_iter: int = 20000, f=None, g=None,
                 eps_floor: float = 1e-12):
    """Stabilized log-domain Sinkhorn with geometric eps annealing.

    Cost is |x-y|^2 (no 1/2). Returns (f, g, info); potentials are defined on
    every cell via the soft c-transform, which also covers empty cells.
    """
    if eps < eps_floor:
        raise TransportError(f"eps={eps:.3e} below stability floor {eps_floor:.1e}")
    log_a, log_b = _log(a), _log(b)
    f = np.zeros(a.shape) if f is None else f.copy()
    g = np.zeros(b.shape) if g is None else g.copy()
    schedule = []
    e = max(eps, eps0 or eps)
    while e > eps:
        schedule.append(e)
        e *= decay
    schedule.append(eps)
    total = 0
    history = []
    err = np.inf
    for k, e in enumerate(schedule):
        last = k == len(schedule) - 1
        stage_tol = tol if last else max(tol, 1e-4)
        for it in range(max_iter):
            f = -e * kernel.lse(g / e + log_b, e)
            g = -e * kernel.lse(f / e + log_a, e)
            total += 1
            if it % 5 == 4 or last:
                row = np.exp(f / e + log_a + kernel.lse(g / e + log_b, e))
                err = float(np.abs(np.nan_to_num(row) - a).sum())
                if err <= stage_tol:
                    break
        else:
            if last:
                raise TransportError(f"Sinkhorn did not converge (marginal error {err:.3e})")
        row, bary, second = plan_moments(kernel, f, g, log_a, log_b, e)
        history.append((e, float(second.sum())))
    return f, g, {"iterations": total, "marginal_error": err, "schedule": history}


def sinkhorn_symmetric(a: np.ndarray, kernel: LogKernel, eps: float, *, eps0: float, decay: float = 0.5,
                       tol: float = 1e-10, max_iter: int = 20000) -> np.ndarray:
    """Self-transport potential via the averaged symmetric update (converges fast)."""
    log_a = _log(a)
    f = np.zeros(a.shape)
    e = max(eps, eps0)
    while True:
        for it in range(max_iter):
            t = -e * kernel.lse(f / e + log_a, e)
            step = np.max(np.abs(t - f)[a > 0])
            f = 0.5 * (f + t)
            if step <= tol * e:
                break
        else:
            raise TransportError(f"symmetric Sinkhorn did not converge (update {step:.3e})")
        if e <= eps:
            return f
        e = max(eps, e * decay)


def w2_entropic(rho_from, rho_to, eps: float, *, band: int | None = None, eps0: float | None = None,
                tol: float = 1e-10, max_iter: int = 20000, debias: bool = False) -> TransportResult:
    """Entropic W2 estimate; ``cost`` is the transport cost of the entropic plan.

    The plan is feasible, so the cost overestimates W2^2 by O(eps). ``info``
    carries the raw dual value, the duality gap, the annealing history and,
    with ``debias``, the Sinkhorn divergence.
    """
    grid = _check_pair(rho_from, rho_to)
    if eps <= 0:
        raise TransportError("eps must be positive")
    vol = grid.cell_volume
    a = _values(rho_from) * vol
    b = _values(rho_to) * vol
    b = b * (a.sum() / b.sum())
    kernel = LogKernel(grid, band)
    diam2 = sum(L * L for L in grid.lengths)
    eps0 = diam2 if eps0 is None else eps0
    f, g, info = sinkhorn_log(a, b, kernel, eps, eps0=eps0, tol=tol, max_iter=max_iter)
    raw = float(np.sum(f * a) + np.sum(g * b))
    row, bary, second = plan_moments(kernel, f, g, _log(a), _log(b), eps)
    primal = float(second.sum())
    # primal entropic objective <C,pi> + eps KL(pi | a x b) from the dual identity
    col = np.nan_to_num(np.exp(g / eps + _log(b) + kernel.lse(f / eps + _log(a), eps)))
    kl = (np.sum(f * row) + np.sum(g * col) - primal) / eps - row.sum() + 1.0
    gap = abs(primal + eps * kl - raw)
    if debias:
        self_terms = []
        for m in (a, b):
            fs = sinkhorn_symmetric(m, kernel, eps, eps0=eps0, tol=tol, max_iter=max_iter)
            self_terms.append(float(2.0 * np.sum(fs * m)))
        info.update(debiased_cost=raw - 0.5 * (self_terms[0] + self_terms[1]))
    disp = np.zeros((grid.dim,) + grid.shape)
    pos = a > 0
    X = grid.centers()
    for ax in range(grid.dim):
        disp[ax][pos] = X[ax][pos] - bary[ax][pos] / a[pos]
    psi = 0.5 * f
    psi_c = 0.5 * g + psi.ravel()[0]
    psi = psi - psi.ravel()[0]
    info.update(raw_cost=raw, primal_cost=primal, duality_gap=float(gap), eps=eps)
    return TransportResult(primal, psi, psi_c, disp, second / vol, _values(rho_from),
                           _values(rho_to), grid, f"entropic({eps:g})", info)


# --------------------------------------------------------------------------
# velocity and weak continuity checks


def displacement_velocity(tr: TransportResult, tau: float) -> VectorField:
    if tau <= 0:
        raise ValueError("tau must be positive")
    disp = np.where(tr.source > 0, tr.displacement, 0.0)
    return VectorField.from_cells(tr.grid, disp / tau)


def kinetic_energy(tr: TransportResult, tau: float) -> float:
    """int rho |v|^2 with the per-cell speed taken from the plan itself."""
    return float(tr.kinetic.sum() * tr.grid.cell_volume / tau**2)


def smooth_test_functions(grid: Grid):
    """Fixed battery of smooth test functions: (name, zeta, grad zeta, ||D^2 zeta||_inf)."""
    X = grid.centers()
    L = grid.lengths
    out = []
    for a in range(grid.dim):
        zero = [np.zeros(grid.shape) for _ in range(grid.dim)]
        g1 = list(zero)
        g1[a] = np.ones(grid.shape)
        out.append((f"x{a}", X[a], np.stack(g1), 0.0))
        g2 = list(zero)
        g2[a] = 2 * X[a] / L[a] ** 2
        out.append((f"x{a}^2", X[a] ** 2 / L[a] ** 2, np.stack(g2), 2.0 / L[a] ** 2))
        k = np.pi / L[a]
        g3 = list(zero)
        g3[a] = -k * np.sin(k * X[a])
        out.append((f"cos{a}", np.cos(k * X[a]), np.stack(g3), k * k))
    if grid.dim == 2:
        out.append(("x0x1", X[0] * X[1] / (L[0] * L[1]),
                    np.stack([X[1], X[0]]) / (L[0] * L[1]), 1.0 / (L[0] * L[1])))
    return out


def continuity_residuals(rho_from, rho_to, v: VectorField, tau: float) -> list[tuple[str, float, float]]:
    """Per test function: (name, |tau <rho v, grad zeta> - <rho_from - rho_to, zeta>|, ||D^2 zeta||)."""
    grid = rho_from.grid
    vol = grid.cell_volume
    r0, r1 = _values(rho_from), _values(rho_to)
    vc = v.cells
    out = []
    for name, z, gz, d2 in smooth_test_functions(grid):
        lhs = tau * np.sum(r0 * (vc * gz).sum(0)) * vol
        rhs = np.sum((r0 - r1) * z) * vol
        out.append((name, float(abs(lhs - rhs)), d2))
    return out


def continuity_residual(rho_from, rho_to, v: VectorField, tau: float) -> float:
    return max(r for _, r, _ in continuity_residuals(rho_from, rho_to, v, tau))


def w2(rho_a, rho_b) -> float:
    """W2 distance with the exact method in 1D and the entropic one otherwise."""
    if rho_a.grid.dim == 1:
        return float(np.sqrt(w2_exact_1d(rho_a, rho_b).cost))
    h2 = min(rho_a.grid.spacing) ** 2
    return float(np.sqrt(w2_entropic(rho_a, rho_b, 0.1 * h2).cost))


def c_transform(grid: Grid, src: np.ndarray, f_src: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """psi(y) = min_i (|x_i - y|^2 / 2 - f_i) over source cells ``src`` (flat indices), for every cell y."""
    P = grid.points()
    Xs = P[src]
    out = np.empty(grid.size)
    for s in range(0, grid.size, chunk):
        Y = P[s:s + chunk]
        C = 0.5 * ((Y[:, None, :] - Xs[None, :, :]) ** 2).sum(-1)
        out[s:s + chunk] = np.min(C - f_src[None, :], axis=1)
    return out.reshape(grid.shape)


def result_from_plan(grid: Grid, rows: np.ndarray, cols: np.ndarray, masses: np.ndarray, psi: np.ndarray,
                     psi_c: np.ndarray, method: str, info: dict | None = None) -> TransportResult:
    """Assemble a TransportResult from a sparse plan sending cell ``rows`` to cell ``cols``."""
    vol = grid.cell_volume
    P = grid.points()
    n = grid.size
    a = np.bincount(rows, weights=masses, minlength=n)
    b = np.bincount(cols, weights=masses, minlength=n)
    d2 = ((P[rows] - P[cols]) ** 2).sum(-1)
    kin = np.bincount(rows, weights=masses * d2, minlength=n) / vol
    disp = np.zeros((grid.dim, n))
    pos = a > 0
    for ax in range(grid.dim):
        bary = np.bincount(rows, weights=masses * P[cols, ax], minlength=n)
        disp[ax, pos] = P[pos, ax] - bary[pos] / a[pos]
    shape = grid.shape
    return TransportResult(float(np.sum(masses * d2)), psi.reshape(shape), psi_c.reshape(shape),
                           disp.reshape((grid.dim,) + shape), kin.reshape(shape), (a / vol).reshape(shape),
                           (b / vol).reshape(shape), grid, method, dict(info or {}))


def debiased_potential(rho_from, rho_to, eps: float, band: int | None = None, tol: float = 1e-10) -> np.ndarray:
    """Gradient of the Sinkhorn divergence in its first argument, as a potential
    in the half-squared convention: (f_{from,to} - f_{from,from}) / 2, anchored at cell 0.

    Vanishes identically when the two densities coincide.
    """
    grid = _check_pair(rho_from, rho_to)
    vol = grid.cell_volume
    a = _values(rho_from) * vol
    b = _values(rho_to) * vol
    b = b * (a.sum() / b.sum())
    kernel = LogKernel(grid, band)
    eps0 = 16 * eps
    f, g, _ = sinkhorn_log(a, b, kernel, eps, eps0=eps0, tol=tol)
    fs = sinkhorn_symmetric(a, kernel, eps, eps0=eps0, tol=tol)
    fs_all = -eps * kernel.lse(fs / eps + _log(a), eps)
    psi = 0.5 * (f - fs_all)
    psi = np.where(np.isfinite(psi), psi, 0.0)
    return psi - psi.ravel()[0]


# --------------------------------------------------------------------------
# 1D quantile (Lagrangian) representation of piecewise-constant densities


@dataclass(frozen=True)
class Segments:
    """Monotone quantile function in pieces: segment m carries mass ``ds[m]``
    spread uniformly over ``[xl[m], xr[m]]``; segments are ordered and disjoint."""

    ds: np.ndarray
    xl: np.ndarray
    xr: np.ndarray

    @property
    def s(self) -> np.ndarray:
        """Cumulative mass at the left end of every segment."""
        return np.concatenate(([0.0], np.cumsum(self.ds)[:-1]))

    def with_positions(self, xl, xr) -> "Segments":
        return Segments(self.ds, np.asarray(xl, float), np.asarray(xr, float))


def quantile_segments(grid: Grid, values: np.ndarray, subcells: int = 1) -> Segments:
    """Exact quantile representation of a piecewise-constant 1D grid density."""
    if grid.dim != 1:
        raise TransportError("quantile representation needs a 1D grid")
    rho = np.asarray(values, dtype=float).ravel()
    h = grid.spacing[0]
    occ = np.flatnonzero(rho > 0)
    k = np.arange(subcells)
    left = (occ[:, None] + k[None, :] / subcells) * h
    ds = np.repeat(rho[occ] * h / subcells, subcells)
    return Segments(ds, left.ravel(), (left + h / subcells).ravel())


def segments_deposit(grid: Grid, seg: Segments) -> np.ndarray:
    """Cell averages of the segment density."""
    faces = np.arange(grid.cells[0] + 1) * grid.spacing[0]
    width = seg.xr - seg.xl
    # cumulative mass at every face; segments are sorted so this is a sum of clipped ramps
    frac = np.clip((faces[:, None] - seg.xl[None, :]) / width[None, :], 0.0, 1.0)
    cum = frac @ seg.ds
    return np.diff(cum) / grid.spacing[0]


def segments_cost(a: Segments, b: Segments) -> float:
    """int_0^1 |X_a(s) - X_b(s)|^2 ds for two segment lists on the same mass partition."""
    el = a.xl - b.xl
    er = a.xr - b.xr
    return float(np.sum(a.ds * (el * el + el * er + er * er) / 3.0))


def _refine(seg: Segments, s_new: np.ndarray) -> Segments:
    """Split segments at the cumulative masses ``s_new`` (linear interpolation inside)."""
    s0 = seg.s
    s1 = s0 + seg.ds
    cuts = np.union1d(np.concatenate((s0, s1[-1:])), s_new)
    cuts = cuts[(cuts >= 0) & (cuts <= s1[-1])]
    lo, hi = cuts[:-1], cuts[1:]
    keep = hi - lo > 0
    lo, hi = lo[keep], hi[keep]
    m = np.clip(np.searchsorted(s0, 0.5 * (lo + hi), side="right") - 1, 0, len(s0) - 1)
    # cumulative sums lose the tail of denormal-size segments; clip to stay inside segment m
    t0 = np.clip((lo - s0[m]) / seg.ds[m], 0.0, 1.0)
    t1 = np.clip((hi - s0[m]) / seg.ds[m], 0.0, 1.0)
    w = seg.xr[m] - seg.xl[m]
    return Segments(hi - lo, seg.xl[m] + t0 * w, seg.xl[m] + t1 * w)


def w2_quantile_1d(rho_a, rho_b) -> float:
    """Exact W2^2 between two 1D densities taken as piecewise constant on the cells."""
    grid = _check_pair(rho_a, rho_b)
    sa = quantile_segments(grid, _values(rho_a))
    sb = quantile_segments(grid, _values(rho_b))
    total = min(sa.ds.sum(), sb.ds.sum())
    cuts = np.union1d(np.cumsum(sa.ds), np.cumsum(sb.ds))
    cuts = np.minimum(cuts, total)
    ra, rb = _refine(sa, cuts), _refine(sb, cuts)
    n = min(len(ra.ds), len(rb.ds))
    return segments_cost(Segments(ra.ds[:n], ra.xl[:n], ra.xr[:n]), Segments(rb.ds[:n], rb.xl[:n], rb.xr[:n]))


def segments_transport(grid: Grid, moved: Segments, base: Segments, method: str = "quantile") -> TransportResult:
    """Transport from the density of ``moved`` back to that of ``base`` (segment m to segment m).

    Displacement and kinetic density are integrated exactly over the pieces
    cut by cell faces; psi integrates x - T(x) with T constant across gaps.
    """
    h = grid.spacing[0]
    n = grid.cells[0]
    L = n * h
    faces = np.arange(n + 1) * h
    centers = grid.axis_centers(0)
    pts = np.unique(np.concatenate((faces, centers, moved.xl, moved.xr)))
    pts = pts[(pts >= 0) & (pts <= L)]
    a, b = pts[:-1], pts[1:]
    mid = 0.5 * (a + b)
    m = np.searchsorted(moved.xl, mid, side="right") - 1
    inside = (m >= 0) & (mid < moved.xr[np.clip(m, 0, None)])
    mc = np.clip(m, 0, len(moved.ds) - 1)

    def T(x, seg_idx, inseg):
        w = moved.xr[seg_idx] - moved.xl[seg_idx]
        t = np.clip((x - moved.xl[seg_idx]) / w, 0.0, 1.0)
        inner = base.xl[seg_idx] + t * (base.xr[seg_idx] - base.xl[seg_idx])
        # outside the support T is the base quantile at the gap's mass level
        before = m < 0
        gap_val = np.where(before, base.xl[0], base.xr[seg_idx])
        return np.where(inseg, inner, gap_val)

    da = a - T(a, mc, inside)
    db = b - T(b, mc, inside)
    dens = np.where(inside, moved.ds[mc] / (moved.xr[mc] - moved.xl[mc]), 0.0)
    length = b - a
    cell = np.clip((mid / h).astype(int), 0, n - 1)
    mass = np.bincount(cell, weights=dens * length, minlength=n)
    first = np.bincount(cell, weights=dens * length * 0.5 * (da + db), minlength=n)
    second = np.bincount(cell, weights=dens * length * (da * da + da * db + db * db) / 3.0, minlength=n)
    disp = np.where(mass > 0, first / np.where(mass > 0, mass, 1.0), 0.0)
    # psi(x) = int_0^x (t - T(t)) dt, sampled at cell centers
    cum = np.concatenate(([0.0], np.cumsum(length * 0.5 * (da + db))))
    psi = np.interp(centers, pts, cum)
    psi = psi - psi[0]
    P = centers
    psi_c = np.min(0.5 * (P[:, None] - P[None, :]) ** 2 - psi[:, None], axis=0)
    cost = float(second.sum())
    return TransportResult(cost, psi, psi_c, disp[None, :], second / h, mass / h,
                           segments_deposit(grid, base), grid, method,
                           {"segment_cost": segments_cost(moved, base)})
