"""Pressure obstacle problem on the discrete saturated set.

Find q >= 0 on S = {rho >= 1 - delta_sat}, q = 0 off S, with

    -Lap q + Lap phi >= 0,   q * (-Lap q + Lap phi) = 0   on S,

where both Laplacians use zero-flux closure at the domain boundary and q is
held at zero in the first non-saturated cell (Dirichlet data for the interior
boundary of S).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import DensityField, Grid, GridMismatchError, ScalarField, gradient, face_inner, laplacian

DELTA_SAT = 1e-3


class ObstacleError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (last update {residual:.3e} after {iterations} sweeps)")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class ObstacleSolve:
    q: ScalarField
    active_set: np.ndarray
    saturated_set: np.ndarray
    complementarity_residual: float
    psor_iterations: int
    energy_history: tuple = ()


def saturated_set(rho, delta_sat: float = DELTA_SAT) -> np.ndarray:
    return np.asarray(rho.values) >= 1.0 - delta_sat


def neumann_laplacian(values: np.ndarray, grid: Grid) -> np.ndarray:
    return laplacian(ScalarField(grid, values, "zero_flux")).values


def _shift(u: np.ndarray, axis: int, step: int) -> np.ndarray:
    """Neighbour values along ``axis`` (``step`` = +1 or -1), zero beyond the edge."""
    out = np.zeros_like(u)
    src = [slice(None)] * u.ndim
    dst = [slice(None)] * u.ndim
    if step > 0:
        src[axis], dst[axis] = slice(1, None), slice(None, -1)
    else:
        src[axis], dst[axis] = slice(None, -1), slice(1, None)
    out[tuple(dst)] = u[tuple(src)]
    return out


def _stencil(grid: Grid) -> np.ndarray:
    """Diagonal of -Lap with zero-flux closure: boundary cells lose the outside neighbour."""
    diag = np.zeros(grid.shape)
    for a in range(grid.dim):
        h2 = grid.spacing[a] ** 2
        count = np.full(grid.cells[a], 2.0)
        count[0] -= 1
        count[-1] -= 1
        shape = [1] * grid.dim
        shape[a] = grid.cells[a]
        diag += count.reshape(shape) / h2
    return diag


def _neighbour_sum(q: np.ndarray, grid: Grid) -> np.ndarray:
    acc = np.zeros_like(q)
    for a in range(grid.dim):
        h2 = grid.spacing[a] ** 2
        acc += (_shift(q, a, 1) + _shift(q, a, -1)) / h2
    return acc


def _restricted_operator(grid: Grid, sat: np.ndarray) -> sp.csr_matrix:
    """-Lap (zero flux) restricted to the saturated cells, Dirichlet zero elsewhere."""
    idx = np.flatnonzero(sat.ravel())
    A = -_neumann_matrix(grid)
    return A[idx][:, idx].tocsc()


def _neumann_matrix(grid: Grid) -> sp.csr_matrix:
    mats = []
    for a in range(grid.dim):
        n, h = grid.cells[a], grid.spacing[a]
        main = -2.0 * np.ones(n)
        main[0] += 1
        main[-1] += 1
        if n == 1:
            main[:] = 0.0
        mats.append(sp.diags([np.ones(n - 1), main, np.ones(n - 1)], [-1, 0, 1]) / h**2)
    if grid.dim == 1:
        return mats[0].tocsr()
    return (sp.kron(mats[0], sp.identity(grid.cells[1])) + sp.kron(sp.identity(grid.cells[0]), mats[1])).tocsr()


def _direct_guess(grid: Grid, sat: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Unconstrained solve on S, clipped at zero; exact whenever that solve is already nonnegative."""
    q = np.zeros(grid.shape)
    if not sat.any():
        return q
    A = _restricted_operator(grid, sat)
    # a saturated component that touches no unsaturated cell makes A singular
    # (q is then fixed only up to a constant); PSOR starts from zero instead
    with warnings.catch_warnings(), np.errstate(all="ignore"):
        warnings.simplefilter("ignore", spla.MatrixRankWarning)
        sol = spla.spsolve(A, b[sat]) if A.shape[0] > 1 else b[sat] / A.toarray().ravel()
    if not np.all(np.isfinite(sol)) or np.abs(A @ sol - b[sat]).max() > 1e-8 * max(1.0, np.abs(b).max()):
        return q
    q[sat] = np.maximum(sol, 0.0)
    return q


def obstacle_energy(q: np.ndarray, phi: np.ndarray, grid: Grid) -> float:
    """1/2 <grad q, grad q> - <grad phi, grad q> over interior faces."""
    gq = gradient(ScalarField(grid, q))
    gp = gradient(ScalarField(grid, phi))
    return 0.5 * face_inner(gq, gq) - face_inner(gp, gq)


def solve_obstacle(rho: DensityField, phi: ScalarField, *, omega: float = 1.7, tol_psor: float = 1e-9,
                   max_sweeps: int = 200_000, delta_sat: float = DELTA_SAT, init="direct",
                   track_energy: bool = False) -> ObstacleSolve:
    """Red-black projected SOR for the discrete obstacle problem.

    ``init`` is "direct" (clipped unconstrained solve on S), "zero", or an array.
    """
    grid = rho.grid
    if phi.grid != grid:
        raise GridMismatchError("density and potential live on different grids")
    if not 0.0 < omega < 2.0:
        raise ValueError("omega must lie in (0, 2)")
    sat = saturated_set(rho, delta_sat)
    b = -neumann_laplacian(np.asarray(phi.values, float), grid)
    if isinstance(init, str):
        q = _direct_guess(grid, sat, b) if init == "direct" else np.zeros(grid.shape)
    else:
        q = np.where(sat, np.maximum(np.asarray(init, float), 0.0), 0.0)
    diag = _stencil(grid)
    parity = np.indices(grid.shape).sum(axis=0) % 2
    colors = [sat & (parity == 0), sat & (parity == 1)]
    history = []
    sweeps = 0
    update = 0.0
    if sat.any():
        for sweeps in range(1, max_sweeps + 1):
            update = 0.0
            for mask in colors:
                gs = (_neighbour_sum(q, grid) + b) / diag
                new = np.maximum((1 - omega) * q + omega * gs, 0.0)
                delta = np.abs(new - q)[mask]
                if delta.size:
                    update = max(update, float(delta.max()))
                q = np.where(mask, new, q)
            if track_energy:
                history.append(obstacle_energy(q, phi.values, grid))
            if update <= tol_psor:
                break
        else:
            raise ObstacleError("projected SOR hit the sweep cap", update, sweeps)
    qf = ScalarField(grid, q, "zero_flux")
    return ObstacleSolve(qf, q > 0, sat, complementarity_residual(qf, phi, rho, delta_sat), sweeps,
                         tuple(history))


def interior_saturated(rho, delta_sat: float = DELTA_SAT) -> np.ndarray:
    """Saturated cells whose in-domain neighbours are all saturated."""
    sat = saturated_set(rho, delta_sat)
    out = sat.copy()
    for a in range(sat.ndim):
        for step in (1, -1):
            nb = _shift(sat.astype(float), a, step) > 0
            edge = np.zeros(sat.shape, bool)
            idx = [slice(None)] * sat.ndim
            idx[a] = -1 if step > 0 else 0
            edge[tuple(idx)] = True
            out &= nb | edge
    return out


def complementarity_residual(p: ScalarField, phi: ScalarField, rho: DensityField,
                             delta_sat: float = DELTA_SAT) -> float:
    """Sum over interior saturated cells of |p (Lap p - Lap phi)| vol."""
    grid = p.grid
    inner = interior_saturated(rho, delta_sat)
    r = p.values * (neumann_laplacian(p.values, grid) - neumann_laplacian(phi.values, grid))
    return float(np.sum(np.abs(r[inner])) * grid.cell_volume)


def laplacian_l1(phi: ScalarField, rho: DensityField | None = None, delta_sat: float = DELTA_SAT) -> float:
    """||Lap phi||_1, over interior saturated cells when rho is given (scale for the residual)."""
    lap = np.abs(neumann_laplacian(phi.values, phi.grid))
    if rho is not None:
        lap = lap[interior_saturated(rho, delta_sat)]
    return float(np.sum(lap) * phi.grid.cell_volume)


def check_subsolution_order(p_F: ScalarField, q: ScalarField) -> float:
    """max(p_F - q) over cells; nonpositive when the pressure sits below the obstacle solution."""
    return float(np.max(p_F.values - q.values))


def relative_l2_gap(p: ScalarField, q: ScalarField) -> float:
    nq = float(np.sqrt(np.sum(q.values ** 2)))
    diff = float(np.sqrt(np.sum((p.values - q.values) ** 2)))
    return diff / nq if nq > 0 else diff


def _distance_mask(active: np.ndarray, grid: Grid, cells: float) -> np.ndarray:
    """Cells of ``active`` farther than ``cells`` grid steps from its complement."""
    from scipy.ndimage import distance_transform_edt

    padded = np.pad(active, 1, constant_values=True)
    dist = distance_transform_edt(padded)[tuple(slice(1, -1) for _ in range(active.ndim))]
    # the domain edge is not part of the free boundary, hence the padding with True
    return dist > cells


def free_boundary_measure(q: ScalarField, phi: ScalarField) -> ScalarField:
    """Cellwise measure (Lap q - Lap phi chi_{q>0}) vol."""
    grid = q.grid
    active = q.values > 0
    mu = (neumann_laplacian(q.values, grid) - neumann_laplacian(phi.values, grid) * active) * grid.cell_volume
    return ScalarField(grid, mu, "free")


def free_boundary_checks(measure: ScalarField, q: ScalarField, tol: float = 1e-6) -> dict:
    """Negative mass and mass deeper than two cells inside or outside {q > 0}.

    Returns check name -> (value, bound, passed).
    """
    m = measure.values
    active = q.values > 0
    far = _distance_mask(active, q.grid, 2.0) | _distance_mask(~active, q.grid, 2.0)
    negative = float(np.sum(np.maximum(-m, 0.0)))
    interior = float(np.sum(np.abs(m[far])))
    return {
        "fb_negative_mass": (negative, tol, negative <= tol),
        "fb_interior_mass": (interior, tol, interior <= tol),
    }
