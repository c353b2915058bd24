"""Plane-stress bilinear quadrilaterals in Kelvin notation.

Conventions used throughout the package:

* strain / stress vectors are ``(e11, e22, sqrt(2) e12)`` and
  ``(s11, s22, sqrt(2) s12)``; elasticity tensors are the matching 3x3
  Kelvin matrices, so ``|D|_F`` is the tensor norm;
* node ``(ix, iy)`` has index ``iy * (nx + 1) + ix`` and dofs ``2n, 2n + 1``;
* element ``(ex, ey)`` has index ``ey * nx + ex``, i.e. a density grid stored
  as ``rho[iy, ix]`` flattens to element order with ``rho.ravel()``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import ParameterError, SolverError

SQRT2 = np.sqrt(2.0)

_GAUSS_1 = (np.array([0.0]), np.array([2.0]))
_GAUSS_2 = (np.array([-1.0, 1.0]) / np.sqrt(3.0), np.array([1.0, 1.0]))

# local node order: counter-clockwise from the lower-left corner
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])


def base_material(E: float, nu: float) -> np.ndarray:
    """Isotropic plane-stress elasticity tensor in Kelvin form."""
    if not E > 0:
        raise ParameterError(f"Young's modulus must be positive, got {E}")
    if not -1.0 < nu < 0.5:
        raise ParameterError(f"Poisson's ratio must lie in (-1, 0.5), got {nu}")
    c = E / (1.0 - nu * nu)
    return np.array([[c, nu * c, 0.0],
                     [nu * c, c, 0.0],
                     [0.0, 0.0, E / (1.0 + nu)]])


def engineering_constants(D: np.ndarray) -> tuple[float, float]:
    """Recover ``(E, nu)`` from an isotropic plane-stress Kelvin matrix."""
    D = np.asarray(D, dtype=float)
    nu = D[0, 1] / D[0, 0]
    return float(D[0, 0] * (1.0 - nu * nu)), float(nu)


def is_symmetric(D: np.ndarray, tol: float = 1e-12) -> bool:
    D = np.asarray(D)
    return bool(np.max(np.abs(D - D.T), initial=0.0) <= tol * max(1.0, np.max(np.abs(D), initial=0.0)))


def min_eigenvalue(D: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (D + np.swapaxes(D, -1, -2))).min())


def tensor_to_vector(D: np.ndarray) -> np.ndarray:
    """Six independent entries ``(D11, D12, D13, D22, D23, D33)``, batched."""
    D = np.asarray(D)
    iu = np.triu_indices(3)
    return D[..., iu[0], iu[1]]


def vector_to_tensor(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    iu = np.triu_indices(3)
    out[..., iu[0], iu[1]] = v
    out[..., iu[1], iu[0]] = v
    return out


def von_mises(stress: np.ndarray) -> np.ndarray:
    """Plane-stress von Mises value of Kelvin stress vectors (last axis)."""
    s = np.asarray(stress, dtype=float)
    s11, s22, s12 = s[..., 0], s[..., 1], s[..., 2] / SQRT2
    return np.sqrt(np.maximum(s11 * s11 - s11 * s22 + s22 * s22 + 3.0 * s12 * s12, 0.0))


def shape_gradients(xi: float, eta: float, elem_size: float = 1.0) -> np.ndarray:
    """Physical gradients of the four shape functions, shape (2, 4)."""
    dxi = 0.25 * _XI * (1.0 + eta * _ETA)
    deta = 0.25 * _ETA * (1.0 + xi * _XI)
    return np.vstack([dxi, deta]) * (2.0 / elem_size)


def strain_displacement(xi: float, eta: float, elem_size: float = 1.0) -> np.ndarray:
    """Kelvin strain-displacement matrix B (3x8) at natural coordinates."""
    dN = shape_gradients(xi, eta, elem_size)
    B = np.zeros((3, 8))
    B[0, 0::2] = dN[0]
    B[1, 1::2] = dN[1]
    B[2, 0::2] = dN[1] / SQRT2
    B[2, 1::2] = dN[0] / SQRT2
    return B


@lru_cache(maxsize=None)
def gauss_points(n_gauss: int = 2, elem_size: float = 1.0):
    """B matrices and weights (including the Jacobian) at the tensor Gauss points."""
    if n_gauss == 1:
        pts, wts = _GAUSS_1
    elif n_gauss == 2:
        pts, wts = _GAUSS_2
    else:
        raise ParameterError(f"n_gauss must be 1 or 2, got {n_gauss}")
    detJ = (elem_size / 2.0) ** 2
    Bs, ws = [], []
    for j, eta in enumerate(pts):
        for i, xi in enumerate(pts):
            Bs.append(strain_displacement(xi, eta, elem_size))
            ws.append(wts[i] * wts[j] * detJ)
    return np.array(Bs), np.array(ws)


def centroid_B(elem_size: float = 1.0) -> np.ndarray:
    return strain_displacement(0.0, 0.0, elem_size)


def element_stiffness(D: np.ndarray, elem_size: float = 1.0, n_gauss: int = 2) -> np.ndarray:
    """8x8 element stiffness ``sum_g w_g B_g^T D B_g``; ``D`` may be batched (..., 3, 3)."""
    D = np.asarray(D, dtype=float)
    if D.ndim == 2 and min_eigenvalue(D) < -1e-10 * max(1.0, np.abs(D).max()):
        warnings.warn("element tensor is not positive semidefinite", RuntimeWarning, stacklevel=2)
    Bs, ws = gauss_points(n_gauss, float(elem_size))
    return np.einsum("g,gia,...ij,gjb->...ab", ws, Bs, D, Bs)


@dataclass
class QuadMesh:
    """Structured ``nx`` x ``ny`` grid of square elements."""

    nx: int
    ny: int
    elem_size: float = 1.0
    fixed_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    loads: np.ndarray | None = None

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ParameterError(f"mesh needs nx, ny >= 1, got {self.nx}x{self.ny}")
        self.fixed_dofs = np.unique(np.asarray(self.fixed_dofs, dtype=int))
        if self.fixed_dofs.size and (self.fixed_dofs.min() < 0 or self.fixed_dofs.max() >= self.n_dofs):
            raise ParameterError("fixed dof index out of range")
        if self.loads is None:
            self.loads = np.zeros(self.n_dofs)
        else:
            self.loads = np.asarray(self.loads, dtype=float)
            if self.loads.shape != (self.n_dofs,):
                raise ParameterError(f"load vector must have {self.n_dofs} entries")

    @property
    def n_elems(self) -> int:
        return self.nx * self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    def node(self, ix, iy):
        return np.asarray(iy) * (self.nx + 1) + np.asarray(ix)

    @property
    def node_coords(self) -> np.ndarray:
        iy, ix = np.divmod(np.arange(self.n_nodes), self.nx + 1)
        return np.column_stack([ix, iy]) * self.elem_size

    @property
    def elem_nodes(self) -> np.ndarray:
        ey, ex = np.divmod(np.arange(self.n_elems), self.nx)
        n0 = self.node(ex, ey)
        return np.column_stack([n0, n0 + 1, n0 + self.nx + 2, n0 + self.nx + 1])

    @property
    def edof(self) -> np.ndarray:
        n = self.elem_nodes
        return np.stack([2 * n, 2 * n + 1], axis=-1).reshape(self.n_elems, 8)

    @property
    def free_dofs(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_dofs), self.fixed_dofs)


def assemble_elements(mesh: QuadMesh, Ke: np.ndarray) -> sp.csr_matrix:
    """Scatter a stack of 8x8 element matrices into a sparse global matrix."""
    Ke = np.asarray(Ke, dtype=float)
    if Ke.ndim == 2:
        Ke = np.broadcast_to(Ke, (mesh.n_elems, 8, 8))
    if Ke.shape != (mesh.n_elems, 8, 8):
        raise ParameterError(f"expected {mesh.n_elems} element matrices, got {Ke.shape[0]}")
    edof = mesh.edof
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()
    K.sum_duplicates()
    return K


def assemble(mesh: QuadMesh, field: np.ndarray, n_gauss: int = 2) -> sp.csr_matrix:
    """Global stiffness for a per-element Kelvin tensor field of shape (M, 3, 3)."""
    field = np.asarray(field, dtype=float)
    if field.shape != (mesh.n_elems, 3, 3):
        raise ParameterError(f"field must have shape ({mesh.n_elems}, 3, 3), got {field.shape}")
    return assemble_elements(mesh, element_stiffness(field, mesh.elem_size, n_gauss))


def scatter_vectors(mesh: QuadMesh, fe: np.ndarray) -> np.ndarray:
    """Assemble element vectors (M, 8) into a global vector."""
    out = np.zeros(mesh.n_dofs)
    np.add.at(out, mesh.edof, fe)
    return out


def _rigid_modes(mesh: QuadMesh) -> dict[str, np.ndarray]:
    xy = mesh.node_coords
    tx = np.zeros(mesh.n_dofs)
    tx[0::2] = 1.0
    ty = np.zeros(mesh.n_dofs)
    ty[1::2] = 1.0
    rot = np.zeros(mesh.n_dofs)
    rot[0::2] = -xy[:, 1]
    rot[1::2] = xy[:, 0]
    return {"x-translation": tx, "y-translation": ty, "in-plane rotation": rot}


def _factorize(A: sp.spmatrix, what: str = "system"):
    A = sp.csc_matrix(A)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            lu = spla.splu(A)
    except (RuntimeError, spla.MatrixRankWarning) as exc:
        raise SolverError(f"singular {what}: {exc}") from exc
    diag = np.abs(lu.U.diagonal())
    if diag.size and diag.min() <= 1e-13 * diag.max():
        raise SolverError(f"singular {what}: pivot ratio {diag.min() / diag.max():.2e}")
    return lu


def solve_dirichlet(K: sp.spmatrix, f: np.ndarray, fixed, mesh: QuadMesh | None = None) -> np.ndarray:
    """Solve ``K u = f`` with ``u[fixed] = 0``.

    The mesh is optional and only used to name the zero-energy mode when the
    reduced system is singular.
    """
    f = np.asarray(f, dtype=float)
    n = f.size
    fixed = np.unique(np.asarray(fixed, dtype=int))
    free = np.setdiff1d(np.arange(n), fixed)
    u = np.zeros(n)
    if not np.any(f[free]):
        return u
    K = sp.csr_matrix(K)
    Kff = K[free][:, free]
    try:
        lu = _factorize(Kff, "equilibrium system")
    except SolverError as exc:
        raise SolverError(f"{exc}; zero-energy mode: {_name_mode(K, free, mesh)}") from None
    u[free] = lu.solve(f[free])
    res = np.linalg.norm(Kff @ u[free] - f[free])
    if not np.isfinite(res) or res > 1e-9 * np.linalg.norm(f[free]):
        raise SolverError(
            f"equilibrium residual {res:.3e} too large; zero-energy mode: {_name_mode(K, free, mesh)}")
    return u


def _name_mode(K, free, mesh) -> str:
    if mesh is None:
        return "unidentified mechanism"
    for name, r in _rigid_modes(mesh).items():
        rf = r[free]
        if np.linalg.norm(rf) > 0 and np.linalg.norm(K[free][:, free] @ rf) <= 1e-10 * np.linalg.norm(rf):
            return name
    return "internal mechanism"


class PeriodicMap:
    """Identification of opposite-edge dofs of a micro-cell grid.

    Node ``(ix, iy)`` is a slave of ``(ix mod nx, iy mod ny)``; the reduced
    dof space is ordered like the ``nx * ny`` master nodes.
    """

    def __init__(self, mesh: QuadMesh):
        self.mesh = mesh
        nx, ny = mesh.nx, mesh.ny
        iy, ix = np.divmod(np.arange(mesh.n_nodes), nx + 1)
        master = (iy % ny) * nx + (ix % nx)
        self.node_map = master
        self.dof_map = np.column_stack([2 * master, 2 * master + 1]).ravel()
        self.n_full = mesh.n_dofs
        self.n_reduced = 2 * nx * ny
        self.is_master = (ix < nx) & (iy < ny)
        self.P = sp.csr_matrix(
            (np.ones(self.n_full), (np.arange(self.n_full), self.dof_map)),
            shape=(self.n_full, self.n_reduced))
        mnodes = np.flatnonzero(self.is_master)
        self.master_dofs = np.column_stack([2 * mnodes, 2 * mnodes + 1]).ravel()

    def expand(self, u_reduced: np.ndarray) -> np.ndarray:
        return np.asarray(u_reduced)[self.dof_map]

    def restrict(self, u_full: np.ndarray) -> np.ndarray:
        """Pick master values (left inverse of :meth:`expand`)."""
        return np.asarray(u_full)[self.master_dofs]

    def sum_to_reduced(self, f_full: np.ndarray) -> np.ndarray:
        """Accumulate a force-like full vector onto the reduced dofs (``P^T f``)."""
        return self.P.T @ f_full

    def reduce_matrix(self, A: sp.spmatrix) -> sp.csr_matrix:
        return sp.csr_matrix(self.P.T @ A @ self.P)


def periodic_reduce(grid: QuadMesh) -> PeriodicMap:
    return PeriodicMap(grid)
