"""2D plane-stress finite element analysis on a regular grid of unit square elements.

Grid conventions (used everywhere in this package):

* Elements form an ``nely`` x ``nelx`` grid; a 2D field ``a[row, col]`` maps to
  the element at ``ex = col`` (rightward) and ``ey = row`` (downward).
* Nodes form an ``(nely+1)`` x ``(nelx+1)`` grid, numbered column-major:
  ``node_id(ix, iy) = ix * (nely + 1) + iy``.
* Each node carries 2 DOFs: ``2 * node_id`` is the x-displacement and
  ``2 * node_id + 1`` the y-displacement (y points down, same as the row axis).
* Element corner nodes are visited in the order upper-left, upper-right,
  lower-right, lower-left; the element stiffness matrix rows/columns follow
  that order with (x, y) DOF pairs.

The fixed boundary used throughout is the full left node column. Dirichlet
conditions are applied by system reduction, so fixed DOFs are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import solveh_banded
from scipy.linalg.blas import dsbmv


class FemParameterError(ValueError):
    """Inconsistent shapes or out-of-range parameters."""


class FemNumericalError(RuntimeError):
    """The linear solve failed or did not reach the residual tolerance."""


@dataclass(frozen=True)
class GridShape:
    """Element grid dimensions."""

    nelx: int = 32
    nely: int = 32

    def __post_init__(self):
        if self.nelx < 1 or self.nely < 1:
            raise FemParameterError(f"grid must be at least 1x1, got {self.nelx}x{self.nely}")

    @property
    def n_elements(self) -> int:
        return self.nelx * self.nely

    @property
    def n_nodes(self) -> int:
        return (self.nelx + 1) * (self.nely + 1)

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    def node_id(self, ix: int, iy: int) -> int:
        return ix * (self.nely + 1) + iy


@dataclass(frozen=True)
class MaterialModel:
    """SIMP material interpolation E(x) = emin + x^penal * (e0 - emin)."""

    e0: float = 1.0
    emin: float = 1e-9
    nu: float = 0.3
    penal: float = 3.0

    def __post_init__(self):
        if not (0.0 < self.emin < self.e0):
            raise FemParameterError(f"need 0 < emin < e0, got emin={self.emin}, e0={self.e0}")
        if not (0.0 < self.nu < 0.5):
            raise FemParameterError(f"Poisson ratio must lie in (0, 0.5), got {self.nu}")
        if self.penal < 1.0:
            raise FemParameterError(f"penalization exponent must be >= 1, got {self.penal}")

    def youngs(self, density: np.ndarray) -> np.ndarray:
        return self.emin + density ** self.penal * (self.e0 - self.emin)


@dataclass
class FemSolution:
    """Displacements (full DOF vector, zeros at fixed DOFs) and compliance f.u."""

    u: np.ndarray
    compliance: float


def element_stiffness(nu: float) -> np.ndarray:
    """Unit-Young's-modulus stiffness of a unit square bilinear quad, plane stress.

    Closed-form coefficients; node order UL, UR, LR, LL with (x, y) DOF pairs.
    """
    if not (0.0 < nu < 0.5):
        raise FemParameterError(f"Poisson ratio must lie in (0, 0.5), got {nu}")
    k = np.array([
        1 / 2 - nu / 6, 1 / 8 + nu / 8, -1 / 4 - nu / 12, -1 / 8 + 3 * nu / 8,
        -1 / 4 + nu / 12, -1 / 8 - nu / 8, nu / 6, 1 / 8 - 3 * nu / 8,
    ])
    idx = np.array([
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ])
    return k[idx] / (1 - nu ** 2)


@lru_cache(maxsize=8)
def element_dof_map(shape: GridShape) -> np.ndarray:
    """(n_elements, 8) DOF indices per element, elements flattened column-major
    (element e = ex * nely + ey, matching ``field.ravel(order='F')``)."""
    ex, ey = np.meshgrid(np.arange(shape.nelx), np.arange(shape.nely), indexing="ij")
    ex = ex.ravel()
    ey = ey.ravel()
    n_ul = ex * (shape.nely + 1) + ey
    n_ur = (ex + 1) * (shape.nely + 1) + ey
    n_lr = n_ur + 1
    n_ll = n_ul + 1
    dofs = np.empty((shape.n_elements, 8), dtype=np.int32)
    for i, n in enumerate((n_ul, n_ur, n_lr, n_ll)):
        dofs[:, 2 * i] = 2 * n
        dofs[:, 2 * i + 1] = 2 * n + 1
    return dofs


def left_edge_fixed_dofs(shape: GridShape) -> np.ndarray:
    """All DOFs of the left node column (the canonical fixed boundary)."""
    return np.arange(2 * (shape.nely + 1), dtype=np.int32)


@lru_cache(maxsize=32)
def _reduced_assembly(shape: GridShape, fixed: tuple) -> tuple:
    """Precomputed scatter structure for assembling the free-DOF system in
    symmetric banded storage (lower form, as LAPACK pbsv expects).

    Returns (keep, band_flat, bandwidth, free, n_free): ``keep`` indexes the
    n_elements*64 element-stiffness triplets that land in the lower triangle
    of the reduced system; ``band_flat`` are their positions in the flattened
    (bandwidth+1, n_free) banded array.
    """
    dofs = element_dof_map(shape)
    fixed_arr = np.asarray(fixed, dtype=np.int64)
    free = np.setdiff1d(np.arange(shape.n_dofs, dtype=np.int64), fixed_arr)
    remap = np.full(shape.n_dofs, -1, dtype=np.int64)
    remap[free] = np.arange(free.size, dtype=np.int64)
    i_full = remap[np.repeat(dofs, 8, axis=1).ravel()]
    j_full = remap[np.tile(dofs, (1, 8)).ravel()]
    keep = np.flatnonzero((i_full >= 0) & (j_full >= 0) & (i_full >= j_full))
    rows = i_full[keep]
    cols = j_full[keep]
    bandwidth = int(np.max(rows - cols)) if rows.size else 0
    band_flat = (rows - cols) * free.size + cols
    return keep, band_flat, bandwidth, free, free.size


def assemble_and_solve(
    shape: GridShape,
    density: np.ndarray,
    material: MaterialModel,
    loads: np.ndarray,
    fixed: np.ndarray,
) -> FemSolution:
    """Solve K(density) u = loads with the given fixed DOFs eliminated.

    ``density`` is an (nely, nelx) array in [0, 1]; ``loads`` a full DOF vector.
    Raises FemNumericalError if the free-DOF relative residual exceeds 1e-8.
    """
    density = np.asarray(density, dtype=np.float64)
    loads = np.asarray(loads, dtype=np.float64)
    if density.shape != (shape.nely, shape.nelx):
        raise FemParameterError(
            f"density shape {density.shape} does not match grid {(shape.nely, shape.nelx)}")
    if loads.shape != (shape.n_dofs,):
        raise FemParameterError(f"load vector must have length {shape.n_dofs}, got {loads.shape}")
    if not np.all(np.isfinite(loads)):
        raise FemParameterError("load vector contains non-finite entries")
    if density.min() < -1e-12 or density.max() > 1 + 1e-12:
        raise FemParameterError("density entries must lie in [0, 1]")
    fixed = np.asarray(fixed, dtype=np.int32)
    if fixed.size == 0:
        raise FemParameterError("fixed DOF set must be non-empty")

    ke = element_stiffness(material.nu)
    e_young = material.youngs(density.ravel(order="F"))
    triplet_vals = (ke.ravel()[None, :] * e_young[:, None]).ravel()

    keep, band_flat, bandwidth, free, n_free = _reduced_assembly(shape, tuple(fixed.tolist()))
    band = np.bincount(band_flat, weights=triplet_vals[keep],
                       minlength=(bandwidth + 1) * n_free).reshape(bandwidth + 1, n_free)

    f_free = loads[free]
    u = np.zeros(shape.n_dofs)
    if np.any(f_free):
        try:
            u_free = solveh_banded(band, f_free, lower=True)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - precluded by emin > 0
            raise FemNumericalError(f"banded Cholesky failed: {exc}") from exc
        if not np.all(np.isfinite(u_free)):
            raise FemNumericalError("solve produced non-finite displacements")
        res_vec = dsbmv(bandwidth, 1.0, band, u_free, lower=1) - f_free
        res = np.linalg.norm(res_vec) / np.linalg.norm(f_free)
        if res > 1e-8:
            raise FemNumericalError(f"relative residual {res:.3e} exceeds 1e-8")
        u[free] = u_free

    compliance = float(loads @ u)
    return FemSolution(u=u, compliance=compliance)


def compliance_per_element(
    shape: GridShape,
    density: np.ndarray,
    material: MaterialModel,
    u: np.ndarray,
) -> np.ndarray:
    """Element strain energies u_e^T k0 u_e (unit-modulus), as an (nely, nelx) array.

    Multiplying by E(density) elementwise and summing recovers f.u.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (shape.n_dofs,):
        raise FemParameterError(f"displacement vector must have length {shape.n_dofs}")
    ke = element_stiffness(material.nu)
    ue = u[element_dof_map(shape)]
    ce = np.einsum("ni,ij,nj->n", ue, ke, ue)
    return ce.reshape(shape.nely, shape.nelx, order="F")
