"""Buckling-aware inverse homogenization over bar widths.

Objective ``J = (1 - lambda_B) ||D^H - D^0||_F + lambda_B kappa_KS`` with the
volume fraction bounded by ``V_star``; optionally ``f_P <= 0`` as a hard
constraint.  All gradients are analytic: voxel sensitivities (including the
adjoint for the stress dependence of the geometric stiffness) chained to bar
widths through the rasterization.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .buckling import (E_MIN_BUCKLING, N_MODES, BucklingState, analyze_cell, buckling_constraint,
                       expand_modes, geometric_basis, ks_eigen_weights, simp_interpolate)
from .core_fe import base_material, centroid_B, scatter_vectors
from .exceptions import ParameterError
from .gcmma import GCMMA
from .homogenize import (E_MIN_STATIC, PENAL, CellSolution, MicroCell, dh_sensitivity, solve_cell)
from .lattice import LatticeUnit, VoxelGeometry, density_gradient, rasterize, voxel_geometry

log = logging.getLogger(__name__)

P_MIN = 0.01
P_MAX = 0.5
LOG_COLUMNS = ("iter", "J", "frob_term", "kappa_ks", "c_b", "volume", "f_P", "max_width_change")


@dataclass
class InvHomProblem:
    target: np.ndarray
    strain_load: np.ndarray
    unit_template: LatticeUnit
    V_star: float = 0.35
    lambda_B: float = 0.0
    P_lower: float = 1.0
    n_b: int = N_MODES
    p_min: float = P_MIN
    p_max: float = P_MAX
    N: int = 40
    base: np.ndarray = field(default_factory=lambda: base_material(1.0, 0.3))
    penal: float = PENAL
    E_min_static: float = E_MIN_STATIC
    E_min_buckling: float = E_MIN_BUCKLING
    max_iter: int = 150
    tol: float = 1e-4
    enforce_buckling: bool = False
    initial_widths: np.ndarray | None = None

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float)
        self.strain_load = np.asarray(self.strain_load, dtype=float)
        if self.target.shape != (3, 3) or not np.allclose(self.target, self.target.T, atol=1e-12):
            raise ParameterError("target must be a symmetric 3x3 Kelvin matrix")
        if self.strain_load.shape != (3,) or not np.all(np.isfinite(self.strain_load)):
            raise ParameterError("strain_load must be a finite Kelvin 3-vector")
        if not 0.0 <= self.lambda_B <= 1.0:
            raise ParameterError("lambda_B must lie in [0, 1]")
        if not 0.0 < self.V_star < 1.0:
            raise ParameterError("V_star must lie in (0, 1)")
        if not 0.0 < self.p_min < self.p_max <= 1.0:
            raise ParameterError("width bounds must satisfy 0 < p_min < p_max <= 1")
        if self.n_b < 1:
            raise ParameterError("n_b must be at least 1")
        if self.initial_widths is not None:
            self.initial_widths = np.asarray(self.initial_widths, dtype=float)

    @property
    def n_vars(self) -> int:
        return self.unit_template.n_bars


@dataclass
class EvalCache:
    p: np.ndarray
    unit: LatticeUnit
    geometry: VoxelGeometry
    grid: np.ndarray
    cell: MicroCell
    solution: CellSolution
    DH: np.ndarray
    mismatch: float
    buckling: BucklingState | None
    kappa_ks: float
    c_b: float
    mu_kappa: float
    J: float
    volume: float
    f_P: float
    lambda_B: float
    P_lower: float
    target: np.ndarray


def evaluate(p, problem: InvHomProblem, mu_kappa: float | None = None,
             geometry: VoxelGeometry | None = None, with_buckling: bool = True):
    """Forward analysis of a width vector; returns ``(J, volume, f_P, cache)``."""
    p = np.asarray(p, dtype=float)
    if p.shape != (problem.n_vars,):
        raise ParameterError(f"expected {problem.n_vars} widths, got shape {p.shape}")
    slack = 1e-12
    if p.min() < problem.p_min - slack or p.max() > problem.p_max + slack:
        raise ParameterError("widths outside [p_min, p_max]")
    unit = problem.unit_template.with_widths(p)
    geom = geometry or voxel_geometry(unit, problem.N)
    grid = rasterize(unit, problem.N, geom)
    cell = MicroCell(grid, problem.base, problem.penal, problem.E_min_static)
    sol = solve_cell(cell)
    DH = sol.DH
    mismatch = float(np.linalg.norm(DH - problem.target))

    state = None
    kappa_ks, c_b, mu = 0.0, 1.0, float(mu_kappa or 0.0)
    if with_buckling:
        bcell = cell.with_E_min(problem.E_min_buckling)
        state = analyze_cell(bcell, problem.strain_load, problem.n_b, mu_kappa)
        spectrum = state.spectrum
        if spectrum.buckles:
            kappa_ks, c_b, mu = spectrum.kappa_ks, spectrum.c_b, spectrum.mu_kappa
    lam = problem.lambda_B
    J = (1.0 - lam) * mismatch + lam * kappa_ks
    volume = float(grid.mean())
    f_P = buckling_constraint(kappa_ks, problem.P_lower)
    cache = EvalCache(p=p.copy(), unit=unit, geometry=geom, grid=grid, cell=cell, solution=sol, DH=DH,
                      mismatch=mismatch, buckling=state, kappa_ks=kappa_ks, c_b=c_b, mu_kappa=mu, J=J,
                      volume=volume, f_P=f_P, lambda_B=lam, P_lower=problem.P_lower,
                      target=problem.target)
    return J, volume, f_P, cache


def frobenius_sensitivity(cache: EvalCache) -> np.ndarray:
    """Per-voxel derivative of ``||D^H - D^0||_F``, shape (N, N)."""
    diff = cache.DH - cache.target
    norm = np.linalg.norm(diff)
    N = cache.cell.N
    if norm <= 1e-12:
        return np.zeros((N, N))
    dDH = dh_sensitivity(cache.cell, cache.solution)
    return np.einsum("yxij,ij->yx", dDH, diff / norm)


def volume_sensitivity(cache: EvalCache) -> np.ndarray:
    N = cache.cell.N
    return np.full((N, N), 1.0 / (N * N))


def _mode_terms(state: BucklingState, weights: np.ndarray, include_adjoint: bool = True) -> np.ndarray:
    """``sum_j w_j d kappa_j / d rho`` as a flat (M,) array.

    The adjoint right-hand sides of the three strain cases differ only by the
    factor ``-eps_bar_k``, so one solve against the combined load replaces the
    three per-case solves.
    """
    cell, sol, spectrum = state.cell, state.solution, state.spectrum
    M = cell.mesh.n_elems
    if not spectrum.buckles:
        return np.zeros(M)
    rho = cell.rho
    EK, EG = simp_interpolate(rho, cell.penal, cell.E_min)
    dE = cell.dE
    dEG = cell.penal * rho ** (cell.penal - 1.0)
    g = geometric_basis(1.0)
    sigma0 = state.stress.local_strain @ cell.base.T          # unit-modulus stresses
    phis = expand_modes(cell, sol.free, spectrum.modes)
    edof = cell.edof
    out = np.zeros(M)
    w_adj = np.zeros((M, 3))
    for wj, kap, phi in zip(weights, spectrum.kappas, phis):
        if wj == 0.0:
            continue
        pe = phi[edof]                                           # (M, 8)
        s = np.einsum("ma,cab,mb->mc", pe, g, pe)                # phi_e^T g_c phi_e
        direct = dEG * np.einsum("mc,mc->m", sigma0, s)
        direct -= kap * dE * np.einsum("ma,ab,mb->m", pe, cell.k0, pe)
        out += wj * direct
        w_adj += wj * s
    if include_adjoint:
        Bc = centroid_B(1.0)
        eps_bar = state.stress.eps_bar
        # d kappa / d chi^k = -eps_bar_k * sum_e rho^p B_c^T C0 s_e
        ve = EG[:, None] * (w_adj @ cell.base.T @ Bc)           # (M, 8)
        a_full = scatter_vectors(cell.mesh, ve)
        pm = cell.periodic
        a_red = pm.sum_to_reduced(a_full)
        v_red = np.zeros(pm.n_reduced)
        v_red[sol.free] = sol.factor.solve(a_red[sol.free])
        v = pm.expand(v_red)[edof]                               # (M, 8)
        chi_mix = np.einsum("k,kma->ma", eps_bar, sol.chiA[:, edof])
        out -= dE * np.einsum("ma,ab,mb->m", v, cell.k0, chi_mix)
    return out


def eigen_sensitivity(cache_or_state, j: int = 0, include_adjoint: bool = True) -> np.ndarray:
    """``d kappa_j / d rho`` per voxel, shape (N, N).

    ``include_adjoint=False`` keeps only the explicit term, i.e. the
    derivative with the cell fluctuation fields held fixed.
    """
    state = cache_or_state.buckling if isinstance(cache_or_state, EvalCache) else cache_or_state
    N = state.cell.N
    if state is None or not state.spectrum.buckles:
        return np.zeros((N, N))
    n = state.spectrum.kappas.size
    if not 0 <= j < n:
        raise ParameterError(f"mode index {j} out of range for {n} modes")
    w = np.zeros(n)
    w[j] = 1.0
    return _mode_terms(state, w, include_adjoint).reshape(N, N)


def kappa_ks_sensitivity(cache: EvalCache) -> np.ndarray:
    """``d kappa_KS / d rho`` at the cache's frozen aggregation parameter."""
    state = cache.buckling
    N = cache.cell.N
    if state is None or not state.spectrum.buckles:
        return np.zeros((N, N))
    w = ks_eigen_weights(state.spectrum.kappas, cache.mu_kappa)
    return _mode_terms(state, w).reshape(N, N)


def ks_sensitivity(cache: EvalCache) -> np.ndarray:
    """``d f_P / d rho = P_lower d kappa_KS / d rho``."""
    return cache.P_lower * kappa_ks_sensitivity(cache)


def objective_sensitivity(cache: EvalCache) -> np.ndarray:
    lam = cache.lambda_B
    out = (1.0 - lam) * frobenius_sensitivity(cache)
    if lam > 0:
        out = out + lam * kappa_ks_sensitivity(cache)
    return out


def chain_to_widths(sensitivity, unit: LatticeUnit, N: int,
                    geometry: VoxelGeometry | None = None) -> np.ndarray:
    """Contract a per-voxel sensitivity with ``d rho / d p`` (all mirror images included)."""
    s = np.asarray(sensitivity, dtype=float)
    if s.shape != (N, N):
        raise ParameterError(f"sensitivity must have shape ({N}, {N})")
    return np.einsum("yx,yxm->m", s, density_gradient(unit, N, geometry))


def width_gradients(cache: EvalCache, problem: InvHomProblem) -> dict:
    """``dJ/dp``, ``dV/dp`` and ``df_P/dp`` from one evaluation."""
    N = problem.N
    drho = density_gradient(cache.unit, N, cache.geometry)
    out = {"J": np.einsum("yx,yxm->m", objective_sensitivity(cache), drho),
           "volume": drho.sum(axis=(0, 1)) / (N * N)}
    if cache.buckling is not None:
        out["f_P"] = np.einsum("yx,yxm->m", ks_sensitivity(cache), drho)
    return out


@dataclass
class InvHomResult:
    widths: np.ndarray
    grid: np.ndarray
    DH: np.ndarray
    unit: LatticeUnit
    J_history: list
    kappa_ks_history: list
    volume_history: list
    converged: bool
    iterations: int
    log_rows: list = field(default_factory=list, repr=False)
    best_iteration: int = 0
    runtime: float = 0.0

    @property
    def J(self) -> float:
        return float(self.J_history[self.best_iteration])

    @property
    def kappa_ks(self) -> float:
        return float(self.kappa_ks_history[self.best_iteration])

    def log_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in self.log_rows:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def initial_widths(problem: InvHomProblem, geometry: VoxelGeometry | None = None) -> np.ndarray:
    """Uniform width whose rasterized volume is closest to ``V_star`` (bisection)."""
    if problem.initial_widths is not None:
        p = problem.initial_widths
        if p.shape != (problem.n_vars,):
            raise ParameterError("initial_widths has the wrong length")
        return np.clip(p, problem.p_min, problem.p_max)
    unit = problem.unit_template
    geom = geometry or voxel_geometry(unit, problem.N)
    m = problem.n_vars

    def vol(w):
        return rasterize(unit.with_widths(np.full(m, w)), problem.N, geom).mean()

    lo, hi = problem.p_min, problem.p_max
    if vol(lo) >= problem.V_star:
        return np.full(m, lo)
    if vol(hi) <= problem.V_star:
        return np.full(m, hi)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if vol(mid) > problem.V_star:
            hi = mid
        else:
            lo = mid
    return np.full(m, lo)


def solve_invhom(problem: InvHomProblem, callback=None) -> InvHomResult:
    t0 = time.perf_counter()
    geom = voxel_geometry(problem.unit_template, problem.N)
    n = problem.n_vars
    xmin = np.full(n, problem.p_min)
    xmax = np.full(n, problem.p_max)
    m = 2 if problem.enforce_buckling else 1
    opt = GCMMA(xmin, xmax, m)
    need_buckling_inner = problem.lambda_B > 0 or problem.enforce_buckling

    p = initial_widths(problem, geom)
    J, V, fP, cache = evaluate(p, problem, None, geom)
    J_hist, K_hist, V_hist, rows = [], [], [], []
    best_idx, best_key = 0, None
    converged = False
    change = np.nan
    it = 0
    for it in range(problem.max_iter + 1):
        J_hist.append(J)
        K_hist.append(cache.kappa_ks)
        V_hist.append(V)
        rows.append((it, J, cache.mismatch, cache.kappa_ks, cache.c_b, V, fP,
                     0.0 if it == 0 else change))
        feasible = V <= problem.V_star + 1e-3
        key = (not feasible, J if feasible else V)
        if best_key is None or key < best_key:
            best_key, best_idx, best_cache = key, it, cache
        if callback is not None:
            callback(it, cache)
        if converged or it == problem.max_iter:
            break

        grads = width_gradients(cache, problem)
        mu = cache.mu_kappa if cache.mu_kappa > 0 else None
        fval = [V / problem.V_star - 1.0]
        dfdx = [grads["volume"] / problem.V_star]
        if problem.enforce_buckling:
            fval.append(fP)
            dfdx.append(grads["f_P"])

        def values(x, mu=mu):
            Jx, Vx, fPx, _ = evaluate(np.clip(x, xmin, xmax), problem, mu, geom,
                                      with_buckling=need_buckling_inner)
            f = [Vx / problem.V_star - 1.0]
            if problem.enforce_buckling:
                f.append(fPx)
            return Jx, np.array(f)

        p_new, _, _ = opt.step(p, J, grads["J"], np.array(fval), np.array(dfdx), values)
        p_new = np.clip(p_new, xmin, xmax)
        change = float(np.max(np.abs(p_new - p)))
        p = p_new
        J, V, fP, cache = evaluate(p, problem, None, geom)
        converged = change < problem.tol
        log.debug("invhom it=%d J=%.6g V=%.4f kappa_ks=%.6g", it + 1, J, V, cache.kappa_ks)

    return InvHomResult(widths=best_cache.p, grid=best_cache.grid, DH=best_cache.DH, unit=best_cache.unit,
                        J_history=J_hist, kappa_ks_history=K_hist, volume_history=V_hist,
                        converged=converged, iterations=it, log_rows=rows, best_iteration=best_idx,
                        runtime=time.perf_counter() - t0)
