"""Cell-level linear buckling under a prescribed macroscopic strain.

The pencil is solved as ``G phi = kappa K phi`` for the largest positive
``kappa``; load factors are ``P = 1 / kappa``.  Stresses entering ``G`` use
the ``rho^p`` interpolation without a stiffness floor so that void regions
carry no geometric stiffness.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core_fe import SQRT2, QuadMesh, PeriodicMap, assemble_elements, centroid_B, gauss_points, shape_gradients
from .exceptions import ParameterError, SolverError
from .homogenize import CellSolution, MicroCell, solve_cell, stiffness_factor

log = logging.getLogger(__name__)

E_MIN_BUCKLING = 1e-4
N_MODES = 6
KS_MU_FACTOR = 100.0
DENSE_FALLBACK = 5000


def simp_interpolate(rho, penal: float, E_min: float):
    """Factors ``(E_min + rho^p (1 - E_min), rho^p)`` for K/f and for G."""
    rho = np.asarray(rho, dtype=float)
    if rho.size and (rho.min() < 0 or rho.max() > 1):
        raise ParameterError("densities must lie in [0, 1]")
    return stiffness_factor(rho, penal, E_min), rho ** penal


def _gauss_gradients(elem_size: float = 1.0):
    pts = np.array([-1.0, 1.0]) / np.sqrt(3.0)
    detJ = (elem_size / 2.0) ** 2
    return [(shape_gradients(xi, eta, elem_size), detJ) for eta in pts for xi in pts]


@lru_cache(maxsize=None)
def geometric_basis(elem_size: float = 1.0) -> np.ndarray:
    """Element geometric stiffness for each unit Kelvin stress component, (3, 8, 8)."""
    units = [np.array([[1.0, 0.0], [0.0, 0.0]]),
             np.array([[0.0, 0.0], [0.0, 1.0]]),
             np.array([[0.0, 1.0], [1.0, 0.0]]) / SQRT2]
    out = np.zeros((3, 8, 8))
    for c, S in enumerate(units):
        H = sum(w * dN.T @ S @ dN for dN, w in _gauss_gradients(elem_size))
        out[c, 0::2, 0::2] = -H
        out[c, 1::2, 1::2] = -H
    return out


def element_geometric_stiffness(stress: np.ndarray, elem_size: float = 1.0) -> np.ndarray:
    """``-int dN^T S dN`` for constant Kelvin stress, batched over leading axes."""
    return np.einsum("...c,cab->...ab", np.asarray(stress, dtype=float), geometric_basis(elem_size))


@dataclass
class StressField:
    stress: np.ndarray        # (M, 3) Kelvin stresses with rho^p interpolation
    local_strain: np.ndarray  # (M, 3) centroid strains
    eps_bar: np.ndarray


def local_strains(cell: MicroCell, solution: CellSolution, eps_bar) -> np.ndarray:
    """Centroid strains ``(I - B_e X_e) eps_bar`` per element, (M, 3)."""
    eps_bar = np.asarray(eps_bar, dtype=float)
    Bc = centroid_B(1.0)
    X = solution.chiA[:, cell.edof]                  # (3, M, 8)
    return np.einsum("ia,kma,k->mi", Bc, X, eps_bar)


def stress_recovery(cell: MicroCell, solution: CellSolution, eps_bar) -> StressField:
    eps_bar = np.asarray(eps_bar, dtype=float)
    if eps_bar.shape != (3,) or not np.all(np.isfinite(eps_bar)):
        raise ParameterError("strain load must be a finite Kelvin 3-vector")
    eps = local_strains(cell, solution, eps_bar)
    _, EG = simp_interpolate(cell.rho, cell.penal, cell.E_min)
    sigma = EG[:, None] * (eps @ cell.base.T)
    return StressField(stress=sigma, local_strain=eps, eps_bar=eps_bar)


def geometric_stiffness(stress: StressField | np.ndarray, grid: QuadMesh) -> sp.csr_matrix:
    s = stress.stress if isinstance(stress, StressField) else np.asarray(stress)
    return assemble_elements(grid, element_geometric_stiffness(s, grid.elem_size))


@dataclass
class BucklingSpectrum:
    kappas: np.ndarray                 # descending, positive
    modes: np.ndarray                  # (n_modes, n) on the solve space, K-normalized
    mu_kappa: float = 0.0
    kappa_ks: float = 0.0
    c_b: float = 1.0
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def load_factors(self) -> np.ndarray:
        return 1.0 / self.kappas

    @property
    def buckles(self) -> bool:
        return self.kappas.size > 0

    @property
    def ks_weights(self) -> np.ndarray:
        return ks_eigen_weights(self.kappas, self.mu_kappa) if self.buckles else np.zeros(0)

    def relative_gaps(self) -> np.ndarray:
        k = self.kappas
        if k.size < 2:
            return np.full(1, np.inf)
        return np.abs(np.diff(k)) / np.abs(k[0])


def default_mu(kappa_1: float) -> float:
    return KS_MU_FACTOR / kappa_1


def ks_eigen_aggregate(kappas, mu_kappa: float | None = None) -> tuple[float, float]:
    """``kappa_1 + (1/mu) ln sum exp(mu (kappa_j - kappa_1))`` and ``c_b``."""
    k = np.asarray(kappas, dtype=float)
    if k.size == 0:
        raise ParameterError("empty eigenvalue list")
    k1 = k.max()
    mu = default_mu(k1) if mu_kappa is None else float(mu_kappa)
    if not mu > 0:
        raise ParameterError("aggregation parameter must be positive")
    ks = k1 + np.log(np.exp(mu * (k - k1)).sum()) / mu
    return float(ks), float(k1 / ks)


def ks_eigen_weights(kappas, mu_kappa: float) -> np.ndarray:
    k = np.asarray(kappas, dtype=float)
    w = np.exp(mu_kappa * (k - k.max()))
    return w / w.sum()


def buckling_constraint(kappa_ks: float, P_lower: float) -> float:
    if not P_lower > 0:
        raise ParameterError("P_lower must be positive")
    return P_lower * kappa_ks - 1.0


def _dense_pencil(Kd, Gd, n_b):
    vals, vecs = sla.eigh(Gd, Kd)
    order = np.argsort(vals)[::-1][:n_b]
    return vals[order], vecs[:, order]


def solve_pencil(K: sp.spmatrix, G: sp.spmatrix, n_b: int = N_MODES, factor=None,
                 dense_below: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Largest ``n_b`` eigenpairs of ``G phi = kappa K phi`` with ``K`` SPD.

    Lanczos (ARPACK) on ``K^-1 G`` in the K inner product; ``factor`` may be a
    prepared sparse LU of ``K``.
    """
    n = K.shape[0]
    n_b = int(min(n_b, n - 1))
    if n <= dense_below:
        return _dense_pencil(K.toarray(), G.toarray(), n_b)
    lu = factor if factor is not None else spla.splu(sp.csc_matrix(K))
    Minv = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
    v0 = np.ones(n) / np.sqrt(n)
    ncv = int(min(n, max(2 * n_b + 4, 20)))
    # clustered spectra (symmetric cells) may need a wider Krylov space
    for attempt in range(3):
        try:
            vals, vecs = spla.eigsh(sp.csr_matrix(G), k=n_b, M=sp.csr_matrix(K), Minv=Minv,
                                    which="LA", ncv=ncv, tol=0, v0=v0, maxiter=20 * n)
            order = np.argsort(vals)[::-1]
            return vals[order], vecs[:, order]
        except spla.ArpackNoConvergence as exc:
            last = exc
            ncv = int(min(n, 2 * ncv))
    if n <= DENSE_FALLBACK:
        log.info("Lanczos did not converge; dense fallback on %d dofs", n)
        return _dense_pencil(K.toarray(), G.toarray(), n_b)
    raise SolverError(f"buckling eigensolver did not converge: {last}")


def buckling_eigens(K: sp.spmatrix, G: sp.spmatrix, n_b: int = N_MODES,
                    periodic_map: PeriodicMap | None = None, mu_kappa: float | None = None,
                    factor=None) -> BucklingSpectrum:
    """Buckling spectrum of the pencil ``(K, G)``.

    With a periodic map the full-grid matrices are condensed onto the periodic
    dofs and node (0, 0) is pinned; modes are then returned on that space.
    Only positive ``kappa`` (finite positive load factors) are kept.
    """
    if periodic_map is not None:
        K = periodic_map.reduce_matrix(K)
        G = periodic_map.reduce_matrix(G)
        free = np.arange(2, K.shape[0])
        K = sp.csr_matrix(K)[free][:, free]
        G = sp.csr_matrix(G)[free][:, free]
    kap, phi = solve_pencil(sp.csr_matrix(K), sp.csr_matrix(G), n_b, factor)
    scale = np.max(np.abs(kap), initial=0.0)
    keep = kap > 1e-12 * max(scale, 1e-300)
    kap, phi = kap[keep], phi[:, keep]
    if kap.size == 0:
        return BucklingSpectrum(kappas=np.zeros(0), modes=np.zeros((0, K.shape[0])))
    # K-normalize and fix the sign for reproducibility
    Kphi = K @ phi
    norms = np.sqrt(np.einsum("ij,ij->j", phi, Kphi))
    phi = phi / norms
    Kphi = Kphi / norms
    idx = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[idx, np.arange(phi.shape[1])])
    phi = phi * signs
    Kphi = Kphi * signs
    res = np.linalg.norm(G @ phi - Kphi * kap, axis=0) / (kap * np.linalg.norm(Kphi, axis=0))
    if np.any(res > 1e-8):
        raise SolverError(f"buckling eigenpair residual {res.max():.2e} exceeds 1e-8")
    mu = default_mu(kap[0]) if mu_kappa is None else float(mu_kappa)
    ks, cb = ks_eigen_aggregate(kap, mu)
    gaps = np.abs(np.diff(kap)) / kap[0]
    if gaps.size and gaps.min() < 1e-6:
        warnings.warn("near-multiple buckling eigenvalues; individual mode sensitivities are not "
                      "differentiable, only the KS aggregate is meaningful", RuntimeWarning, stacklevel=2)
    return BucklingSpectrum(kappas=kap, modes=phi.T, mu_kappa=mu, kappa_ks=ks, c_b=cb, residuals=res)


@dataclass
class BucklingState:
    """Everything a buckling evaluation produced, kept for sensitivities."""

    cell: MicroCell
    solution: CellSolution
    stress: StressField
    G: sp.csr_matrix = field(repr=False)
    spectrum: BucklingSpectrum = None


def analyze(grid, eps_bar, base=None, penal: float = 3.0, E_min: float = E_MIN_BUCKLING,
            n_b: int = N_MODES, mu_kappa: float | None = None) -> BucklingState:
    """Cell solve, stress recovery, geometric stiffness and eigen-analysis in one call."""
    cell = MicroCell(grid, penal=penal, E_min=E_min) if base is None else MicroCell(grid, base, penal, E_min)
    return analyze_cell(cell, eps_bar, n_b, mu_kappa)


def analyze_cell(cell: MicroCell, eps_bar, n_b: int = N_MODES, mu_kappa: float | None = None,
                 solution: CellSolution | None = None) -> BucklingState:
    sol = solution or solve_cell(cell)
    stress = stress_recovery(cell, sol, eps_bar)
    G = geometric_stiffness(stress, cell.mesh)
    pm = cell.periodic
    Gr = pm.reduce_matrix(G)[sol.free][:, sol.free]
    Kr = sol.K_reduced[sol.free][:, sol.free]
    if not np.any(stress.stress):
        spectrum = BucklingSpectrum(kappas=np.zeros(0), modes=np.zeros((0, sol.free.size)))
    else:
        spectrum = buckling_eigens(Kr, Gr, n_b, mu_kappa=mu_kappa, factor=sol.factor)
    return BucklingState(cell=cell, solution=sol, stress=stress, G=G, spectrum=spectrum)


def expand_modes(cell: MicroCell, free: np.ndarray, modes: np.ndarray) -> np.ndarray:
    """Lift modes from the pinned periodic space to full grid dofs."""
    pm = cell.periodic
    red = np.zeros((modes.shape[0], pm.n_reduced))
    red[:, free] = modes
    return red[:, pm.dof_map]


def mode_energy_fraction(cell: MicroCell, state: BucklingState, j: int = 0, rho_cut: float = 0.1) -> float:
    """Share of ``phi_j^T K phi_j`` carried by elements with ``rho > rho_cut``."""
    phi = expand_modes(cell, state.solution.free, state.spectrum.modes[j:j + 1])[0]
    pe = phi[cell.edof]
    energies = cell.E * np.einsum("ma,ab,mb->m", pe, cell.k0, pe)
    return float(energies[cell.rho > rho_cut].sum() / energies.sum())
