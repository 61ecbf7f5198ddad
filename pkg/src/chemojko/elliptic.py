"""Chemical potential: solve ``sigma*phi - eta*Lap(phi) = rho`` with the Robin
closure of the grid, and check the a-priori bounds the potential must obey."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import DensityField, Grid, GridMismatchError, ScalarField, l2_norm, l2_norm_grad


class EllipticSolveError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class PotentialSolve:
    phi: ScalarField
    residual_norm: float
    iterations: int


def _axis_laplacian(n: int, h: float, ghost_ratio: float) -> sp.csr_matrix:
    main = -2.0 * np.ones(n)
    main[0] += ghost_ratio
    main[-1] += ghost_ratio
    if n == 1:
        main[0] = 2 * (ghost_ratio - 1.0)
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h**2


def laplacian_matrix(grid: Grid, bc: str = "robin") -> sp.csr_matrix:
    """Sparse matrix of the grid Laplacian in C order (matches ``grid.laplacian``)."""
    mats = []
    for a in range(grid.dim):
        ratio = grid.robin_ghost_ratio(a) if bc == "robin" else 1.0
        mats.append(_axis_laplacian(grid.cells[a], grid.spacing[a], ratio))
    if grid.dim == 1:
        return mats[0].tocsr()
    I0 = sp.identity(grid.cells[0], format="csr")
    I1 = sp.identity(grid.cells[1], format="csr")
    return (sp.kron(mats[0], I1) + sp.kron(I0, mats[1])).tocsr()


_factor_lock = threading.Lock()


@lru_cache(maxsize=16)
def _factorized(grid: Grid, sigma: float, eta: float):
    A = (sigma * sp.identity(grid.size) - eta * laplacian_matrix(grid)).tocsc()
    return A.tocsr(), spla.factorized(A)


def _operator(grid: Grid, sigma: float, eta: float):
    with _factor_lock:
        return _factorized(grid, sigma, eta)


def solve_potential(rho: DensityField, grid: Grid | None = None, *, sigma: float = 1.0, eta: float = 1.0,
                    tol: float = 1e-10) -> PotentialSolve:
    """Solve for phi with a cached sparse LU factorization.

    One refinement step is taken if the first residual misses ``tol``.
    """
    grid = grid or rho.grid
    if rho.grid != grid:
        raise GridMismatchError("density and grid differ")
    A, solve = _operator(grid, float(sigma), float(eta))
    b = np.asarray(rho.values, dtype=float).ravel()
    phi = solve(b)
    bnorm = np.linalg.norm(b)
    iterations = 1
    res = _rel_residual(A, phi, b, bnorm)
    if res > tol:
        phi = phi + solve(b - A @ phi)
        iterations += 1
        res = _rel_residual(A, phi, b, bnorm)
    if not np.isfinite(res) or res > tol:
        raise EllipticSolveError("potential solve did not reach tolerance", res)
    return PotentialSolve(ScalarField(grid, phi.reshape(grid.shape), "robin"), res, iterations)


def _rel_residual(A, x, b, bnorm) -> float:
    if bnorm == 0:
        return float(np.linalg.norm(A @ x))
    return float(np.linalg.norm(A @ x - b) / bnorm)


def green_apply(rho, **kwargs) -> ScalarField:
    """Apply the Green operator of the potential equation to any cell field."""
    if isinstance(rho, DensityField):
        return solve_potential(rho, **kwargs).phi
    grid = rho.grid
    A, solve = _operator(grid, float(kwargs.get("sigma", 1.0)), float(kwargs.get("eta", 1.0)))
    return ScalarField(grid, solve(np.asarray(rho.values, float).ravel()).reshape(grid.shape), "robin")


def potential_of(values: np.ndarray, grid: Grid, sigma: float = 1.0, eta: float = 1.0) -> np.ndarray:
    """Raw-array version used inside the time stepper (no validation)."""
    _, solve = _operator(grid, float(sigma), float(eta))
    return solve(np.asarray(values, float).ravel()).reshape(grid.shape)


def check_potential_estimates(phi: ScalarField, rho: DensityField | None = None, tol: float = 1e-8) -> dict:
    """Maximum principle ``0 <= phi <= 1`` and ``||phi||^2 + ||grad phi||^2 <= 1``.

    Returns check name -> (value, bound, passed).
    """
    lo = float(phi.values.min())
    hi = float(phi.values.max())
    energy = l2_norm(phi) ** 2 + l2_norm_grad(phi) ** 2
    return {
        "phi_min": (lo, -tol, lo >= -tol),
        "phi_max": (hi, 1.0 + tol, hi <= 1.0 + tol),
        "phi_h1": (energy, 1.0 + tol, energy <= 1.0 + tol),
    }
