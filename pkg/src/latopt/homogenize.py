"""Periodic numerical homogenization of a density grid.

The cell is an ``N x N`` grid of unit-size bilinear elements (``|Y| = N^2``).
Three Kelvin unit strains are imposed; the periodic fluctuation ``chi`` solves
``K chi = f`` and the superimposed field ``chi_A = u0 - chi`` gives the
homogenized tensor through element mutual energies.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .core_fe import (QuadMesh, SQRT2, PeriodicMap, assemble_elements, base_material,
                      element_stiffness, scatter_vectors, _factorize)
from .exceptions import ParameterError

E_MIN_STATIC = 1e-3
PENAL = 3.0


def stiffness_factor(rho, penal: float, E_min: float):
    """Modified-SIMP factor for K and f, relative to the solid base tensor."""
    rho = np.asarray(rho, dtype=float)
    return E_min + rho ** penal * (1.0 - E_min)


def stiffness_factor_derivative(rho, penal: float, E_min: float):
    rho = np.asarray(rho, dtype=float)
    return penal * (1.0 - E_min) * rho ** (penal - 1.0)


@dataclass
class MicroCell:
    grid: np.ndarray
    base: np.ndarray = field(default_factory=lambda: base_material(1.0, 0.3))
    penal: float = PENAL
    E_min: float = E_MIN_STATIC

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.ndim != 2 or self.grid.shape[0] != self.grid.shape[1]:
            raise ParameterError(f"density grid must be square, got {self.grid.shape}")
        if self.grid.min() < 0 or self.grid.max() > 1:
            raise ParameterError("densities must lie in [0, 1]")
        if self.penal < 1:
            raise ParameterError("SIMP exponent must be >= 1")
        if not 0 <= self.E_min < 1:
            raise ParameterError("E_min must lie in [0, 1)")

    @property
    def N(self) -> int:
        return self.grid.shape[0]

    @property
    def volume(self) -> float:
        return float(self.N * self.N)

    @cached_property
    def mesh(self) -> QuadMesh:
        return QuadMesh(self.N, self.N, 1.0)

    @cached_property
    def periodic(self) -> PeriodicMap:
        return PeriodicMap(self.mesh)

    @cached_property
    def edof(self) -> np.ndarray:
        return self.mesh.edof

    @cached_property
    def k0(self) -> np.ndarray:
        return element_stiffness(self.base, 1.0)

    @property
    def rho(self) -> np.ndarray:
        return self.grid.ravel()

    @property
    def E(self) -> np.ndarray:
        return stiffness_factor(self.rho, self.penal, self.E_min)

    @property
    def dE(self) -> np.ndarray:
        return stiffness_factor_derivative(self.rho, self.penal, self.E_min)

    def with_E_min(self, E_min: float) -> "MicroCell":
        return MicroCell(self.grid, self.base, self.penal, E_min)


@dataclass
class CellSolution:
    chi: np.ndarray          # (3, n_dofs) periodic fluctuation fields
    chiA: np.ndarray         # (3, n_dofs) superimposed fields u0 - chi
    DH: np.ndarray
    K_reduced: sp.csr_matrix = field(repr=False)
    factor: object = field(repr=False)
    free: np.ndarray = field(repr=False)


def unit_strain_displacements(mesh: QuadMesh) -> np.ndarray:
    """Affine displacement fields of the three Kelvin unit strains, (3, n_dofs)."""
    xy = mesh.node_coords
    out = np.zeros((3, mesh.n_dofs))
    out[0, 0::2] = xy[:, 0]
    out[1, 1::2] = xy[:, 1]
    # Kelvin shear component 1 means e12 = 1/sqrt(2)
    out[2, 0::2] = xy[:, 1] / SQRT2
    out[2, 1::2] = xy[:, 0] / SQRT2
    return out


def test_strain_loads(cell: MicroCell) -> np.ndarray:
    """Consistent nodal loads ``sum_e B^T D_e eps0`` of the unit strains, (3, n_dofs)."""
    u0 = unit_strain_displacements(cell.mesh)
    ue = u0[:, cell.edof]                                  # (3, M, 8)
    fe = np.einsum("ab,kmb->kma", cell.k0, ue) * cell.E[None, :, None]
    return np.array([scatter_vectors(cell.mesh, fe[k]) for k in range(3)])


def _pinned_free(n_reduced: int) -> np.ndarray:
    # reduced dofs 0 and 1 belong to node (0, 0)
    return np.arange(2, n_reduced)


def cell_stiffness(cell: MicroCell) -> sp.csr_matrix:
    Ke = cell.k0[None, :, :] * cell.E[:, None, None]
    return assemble_elements(cell.mesh, Ke)


def solve_cell(cell: MicroCell) -> CellSolution:
    pm = cell.periodic
    Kr = pm.reduce_matrix(cell_stiffness(cell))
    free = _pinned_free(pm.n_reduced)
    Kff = Kr[free][:, free]
    lu = _factorize(Kff, "cell problem (all-void grid with E_min = 0?)")
    f = test_strain_loads(cell)
    chi_r = np.zeros((3, pm.n_reduced))
    for k in range(3):
        chi_r[k, free] = lu.solve(pm.sum_to_reduced(f[k])[free])
    chi = np.array([pm.expand(c) for c in chi_r])
    chiA = unit_strain_displacements(cell.mesh) - chi
    DH = homogenized_tensor(cell, chiA)
    return CellSolution(chi=chi, chiA=chiA, DH=DH, K_reduced=Kr, factor=lu, free=free)


def element_mutual_energies(cell: MicroCell, chiA: np.ndarray) -> np.ndarray:
    """``(chiA_e^i)^T k0 chiA_e^j`` per element, shape (M, 3, 3)."""
    X = chiA[:, cell.edof]
    return np.einsum("ima,ab,jmb->mij", X, cell.k0, X)


def homogenized_tensor(cell: MicroCell, chiA: np.ndarray) -> np.ndarray:
    Q = element_mutual_energies(cell, chiA)
    DH = np.einsum("m,mij->ij", cell.E, Q) / cell.volume
    return 0.5 * (DH + DH.T)


def homogenize(grid, base=None, penal: float = PENAL, E_min: float = E_MIN_STATIC) -> np.ndarray:
    """Convenience wrapper returning only ``D^H``."""
    cell = MicroCell(grid, base if base is not None else base_material(1.0, 0.3), penal, E_min)
    return solve_cell(cell).DH


def dh_sensitivity(cell: MicroCell, solution: CellSolution) -> np.ndarray:
    """``d D^H / d rho_e`` for every voxel, shape (N, N, 3, 3)."""
    Q = element_mutual_energies(cell, solution.chiA)
    dDH = cell.dE[:, None, None] * Q / cell.volume
    return dDH.reshape(cell.N, cell.N, 3, 3)
