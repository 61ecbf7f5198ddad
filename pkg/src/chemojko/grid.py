"""Uniform cell-centered grids and the discrete calculus shared by every solver.

Values live at cell centers of the box [0, L_1] x ... x [0, L_d]. Gradients
live on faces (staggered), which is what makes summation by parts exact:
``<grad f, v> + <f, div v> = 0`` whenever the boundary-face values of ``v``
vanish.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

BCRole = Literal["robin", "zero_flux", "free"]

CONSTRAINT_TOL = 1e-9
MASS_TOL = 1e-12


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Box domain split into ``cells`` cells per axis of width ``spacing``.

    ``robin_alpha`` and ``robin_beta`` are the boundary parameters of the
    chemical potential, ``alpha * phi + beta * dphi/dn = 0``.
    """

    cells: tuple[int, ...]
    spacing: tuple[float, ...]
    robin_alpha: float = 0.0
    robin_beta: float = 1.0

    def __post_init__(self):
        cells = tuple(int(n) for n in self.cells)
        spacing = tuple(float(h) for h in self.spacing)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "spacing", spacing)
        if len(cells) not in (1, 2) or len(spacing) != len(cells):
            raise ValueError("grid must be 1D or 2D with one spacing per axis")
        if any(n < 1 for n in cells):
            raise ValueError("cells_per_axis must be positive")
        if any(not np.isfinite(h) or h <= 0 for h in spacing):
            raise ValueError("spacings must be strictly positive")
        if self.robin_alpha < 0 or self.robin_beta < 0:
            raise ValueError("robin parameters must be non-negative")
        if self.robin_alpha + self.robin_beta <= 0:
            raise ValueError("need alpha + beta > 0")

    @classmethod
    def box(cls, cells: Sequence[int], lengths: Sequence[float], alpha: float = 0.0, beta: float = 1.0) -> "Grid":
        cells = tuple(int(n) for n in cells)
        return cls(cells, tuple(L / n for L, n in zip(lengths, cells)), alpha, beta)

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.cells

    @property
    def lengths(self) -> tuple[float, ...]:
        return tuple(n * h for n, h in zip(self.cells, self.spacing))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    @property
    def size(self) -> int:
        return int(np.prod(self.cells))

    def axis_centers(self, axis: int) -> np.ndarray:
        h = self.spacing[axis]
        return (np.arange(self.cells[axis]) + 0.5) * h

    def centers(self) -> tuple[np.ndarray, ...]:
        """Meshgrid of cell-center coordinates, one array per axis."""
        return tuple(np.meshgrid(*[self.axis_centers(a) for a in range(self.dim)], indexing="ij"))

    def points(self) -> np.ndarray:
        """Cell centers as an ``(size, dim)`` array in C order."""
        return np.stack([c.ravel() for c in self.centers()], axis=1)

    def robin_ghost_ratio(self, axis: int) -> float:
        """Ghost value is this ratio times the adjacent cell value.

        Eliminates the ghost from ``alpha * mean + beta * (ghost - inner) / h = 0``.
        """
        h = self.spacing[axis]
        a, b = self.robin_alpha, self.robin_beta
        return (2 * b - a * h) / (2 * b + a * h)


def _check_values(grid: Grid, values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.shape != grid.shape:
        if arr.size == grid.size:
            arr = arr.reshape(grid.shape)
        else:
            raise ValueError(f"expected {grid.size} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field values must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    values: np.ndarray
    bc_role: BCRole = "zero_flux"

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.grid, self.values))
        if self.bc_role not in ("robin", "zero_flux", "free"):
            raise ValueError(f"unknown bc_role {self.bc_role!r}")

    def with_values(self, values, bc_role: BCRole | None = None) -> "ScalarField":
        return ScalarField(self.grid, values, bc_role or self.bc_role)

    def __add__(self, other: "ScalarField") -> "ScalarField":
        _same_grid(self, other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        _same_grid(self, other)
        return self.with_values(self.values - other.values)

    def __mul__(self, c: float) -> "ScalarField":
        return self.with_values(self.values * c)

    __rmul__ = __mul__


@dataclass(frozen=True)
class DensityField:
    """Cell-average density in the admissible set: ``0 <= rho <= 1``, unit mass."""

    grid: Grid
    values: np.ndarray
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.grid, self.values))
        if self.validate:
            problems = density_violations(self.grid, self.values)
            if problems:
                raise ValueError("; ".join(problems))

    @property
    def mass(self) -> float:
        return mass(self)

    def as_scalar(self, bc_role: BCRole = "zero_flux") -> ScalarField:
        return ScalarField(self.grid, self.values, bc_role)


def density_violations(grid: Grid, values: np.ndarray, tol: float = CONSTRAINT_TOL) -> list[str]:
    out = []
    if values.min() < -tol:
        out.append(f"negative density {values.min():.3e}")
    if values.max() > 1 + tol:
        out.append(f"density above 1 by {values.max() - 1:.3e}")
    m = float(values.sum() * grid.cell_volume)
    if abs(m - 1) > MASS_TOL:
        out.append(f"mass {m!r} differs from 1")
    return out


def project_to_admissible(grid: Grid, values: np.ndarray, sat_tol: float = 1e-12) -> np.ndarray:
    """Clip to [0, 1] and restore unit mass by rescaling the unsaturated cells.

    Raises if no unsaturated mass is available to absorb the correction.
    """
    rho = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    vol = grid.cell_volume
    if grid.volume < 1.0 - 1e-12:
        raise ValueError("domain volume below 1: no admissible density exists")
    total = rho.sum() * vol
    if total <= 0:
        raise ValueError("cannot restore unit mass: no mass after clipping")
    if total > 1.0:
        # uniform downscaling keeps every cell in [0, 1]
        rho *= 1.0 / total
    for _ in range(50):
        total = rho.sum() * vol
        if abs(total - 1.0) <= 1e-15:
            break
        free = rho < 1.0 - sat_tol
        free_mass = rho[free].sum() * vol
        fixed_mass = total - free_mass
        if free_mass <= 0:
            if abs(total - 1.0) <= 1e-12:
                break
            raise ValueError("cannot restore unit mass: every occupied cell is saturated")
        rho[free] *= max(1.0 - fixed_mass, 0.0) / free_mass
        np.minimum(rho, 1.0, out=rho)
    # last ulp-level fix on the largest unsaturated cell
    err = 1.0 - rho.sum() * vol
    if err != 0.0:
        free = np.flatnonzero((rho < 1.0 - sat_tol).ravel())
        if free.size:
            k = free[np.argmax(rho.ravel()[free])]
            rho.ravel()[k] = min(1.0, max(0.0, rho.ravel()[k] + err / vol))
    return rho


@dataclass(frozen=True)
class VectorField:
    """Staggered vector field: ``faces[a]`` holds the axis-``a`` component on
    the faces normal to axis ``a`` (length ``n_a + 1`` along that axis)."""

    grid: Grid
    faces: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.faces) != self.grid.dim:
            raise ValueError("one face array per axis required")
        fixed = []
        for a, f in enumerate(self.faces):
            f = np.asarray(f, dtype=float)
            shape = list(self.grid.shape)
            shape[a] += 1
            if f.shape != tuple(shape):
                raise ValueError(f"axis {a} faces must have shape {tuple(shape)}")
            if not np.all(np.isfinite(f)):
                raise ValueError("vector field values must be finite")
            fixed.append(f)
        object.__setattr__(self, "faces", tuple(fixed))

    @classmethod
    def from_cells(cls, grid: Grid, components) -> "VectorField":
        """Build from cell-centered components; interior faces take the
        average of the two neighbours, boundary faces are set to zero."""
        comps = np.asarray(components, dtype=float).reshape((grid.dim,) + grid.shape)
        faces = []
        for a in range(grid.dim):
            c = np.moveaxis(comps[a], a, 0)
            f = np.zeros((c.shape[0] + 1,) + c.shape[1:])
            f[1:-1] = 0.5 * (c[1:] + c[:-1])
            faces.append(np.moveaxis(f, 0, a))
        out = cls(grid, tuple(faces))
        object.__setattr__(out, "_cells", comps)
        return out

    @property
    def cells(self) -> np.ndarray:
        """Cell-centered components, shape ``(dim,) + grid.shape``."""
        cached = getattr(self, "_cells", None)
        if cached is not None:
            return cached
        comps = []
        for a, f in enumerate(self.faces):
            f = np.moveaxis(f, a, 0)
            comps.append(np.moveaxis(0.5 * (f[1:] + f[:-1]), 0, a))
        return np.stack(comps)

    def normal_boundary_max(self) -> float:
        out = 0.0
        for a, f in enumerate(self.faces):
            f = np.moveaxis(f, a, 0)
            out = max(out, float(np.abs(f[0]).max()), float(np.abs(f[-1]).max()))
        return out


def _same_grid(*fields) -> Grid:
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise GridMismatchError("fields live on different grids")
    return grid


def _ghost_ratio(f: ScalarField, axis: int) -> float | None:
    """Ghost = ratio * inner value, or None for a 'free' field (one-sided)."""
    if f.bc_role == "zero_flux":
        return 1.0
    if f.bc_role == "robin":
        return f.grid.robin_ghost_ratio(axis)
    return None


def laplacian(f: ScalarField) -> ScalarField:
    """Five-point (three-point in 1D) Laplacian with ghost-cell closure.

    zero_flux reflects, robin eliminates the ghost through the boundary
    relation, free extrapolates linearly (no boundary flux term is implied).
    """
    grid = f.grid
    u = f.values
    out = np.zeros(grid.shape)
    for a in range(grid.dim):
        h2 = grid.spacing[a] ** 2
        v = np.moveaxis(u, a, 0)
        acc = np.moveaxis(out, a, 0)
        n = v.shape[0]
        ratio = _ghost_ratio(f, a)
        if n == 1:
            if ratio is not None:
                acc += 2 * (ratio - 1.0) * v / h2
            continue
        acc[1:-1] += (v[2:] - 2 * v[1:-1] + v[:-2]) / h2
        if ratio is None:
            lo_ghost = 2 * v[0] - v[1]
            hi_ghost = 2 * v[-1] - v[-2]
        else:
            lo_ghost = ratio * v[0]
            hi_ghost = ratio * v[-1]
        acc[0] += (v[1] - 2 * v[0] + lo_ghost) / h2
        acc[-1] += (hi_ghost - 2 * v[-1] + v[-2]) / h2
    return ScalarField(grid, out, f.bc_role)


def gradient(f: ScalarField) -> VectorField:
    """Face differences; boundary faces carry zero normal component."""
    grid = f.grid
    faces = []
    for a in range(grid.dim):
        v = np.moveaxis(f.values, a, 0)
        g = np.zeros((v.shape[0] + 1,) + v.shape[1:])
        g[1:-1] = (v[1:] - v[:-1]) / grid.spacing[a]
        faces.append(np.moveaxis(g, 0, a))
    return VectorField(grid, tuple(faces))


def divergence(v: VectorField) -> ScalarField:
    grid = v.grid
    out = np.zeros(grid.shape)
    for a in range(grid.dim):
        f = np.moveaxis(v.faces[a], a, 0)
        acc = np.moveaxis(out, a, 0)
        acc += (f[1:] - f[:-1]) / grid.spacing[a]
    return ScalarField(grid, out, "zero_flux")


def cell_gradient(f: ScalarField) -> np.ndarray:
    """Cell-centered gradient (average of the two adjacent face differences)."""
    return gradient(f).cells


def inner(f, g) -> float:
    """L2 inner product of two cell fields (scalar or density)."""
    grid = _same_grid(f, g)
    return float(np.sum(f.values * g.values) * grid.cell_volume)


def face_inner(u: VectorField, w: VectorField) -> float:
    """L2 inner product of staggered fields; each face carries one cell volume."""
    grid = _same_grid(u, w)
    return float(sum(np.sum(a * b) for a, b in zip(u.faces, w.faces)) * grid.cell_volume)


def mass(rho) -> float:
    return float(rho.values.sum() * rho.grid.cell_volume)


def l2_norm_grad(f: ScalarField) -> float:
    """||grad f||_{L2} from interior face differences."""
    g = gradient(f)
    return float(np.sqrt(face_inner(g, g)))


def l2_norm(f) -> float:
    return float(np.sqrt(np.sum(f.values ** 2) * f.grid.cell_volume))
