"""Free material optimization on a structured macro mesh.

Each iteration solves equilibrium for the current tensor field and then
replaces every tensor by the minimizer of the complementary energy of the
resulting Gauss-point stresses, ``tr(D^-1 S_e)``, under the trace budget,
element trace bounds, eigenvalue floor and material class.  Since the stress
field stays statically admissible, compliance never increases.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core_fe import QuadMesh, assemble, gauss_points, solve_dirichlet
from .exceptions import InfeasibleError, ParameterError, SolverError

log = logging.getLogger(__name__)

MATERIAL_CLASSES = ("free", "orthotropic", "isotropic")

# Kelvin projectors onto the hydrostatic and deviatoric subspaces
P_HYD = 0.5 * np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
P_DEV = np.eye(3) - P_HYD

_FLOOR_REL = 1e-6      # eigenvalue floor used when delta == 0, relative to T_high


@dataclass
class FmoProblem:
    mesh: QuadMesh
    T0: float
    T_low: float
    T_high: float
    delta: float = 0.0
    material_class: str = "free"
    max_iter: int = 200
    tol: float = 1e-6

    def __post_init__(self):
        if self.material_class not in MATERIAL_CLASSES:
            raise ParameterError(f"unknown material class {self.material_class!r}")
        if not 0 <= self.T_low <= self.T_high or self.T_high <= 0:
            raise ParameterError("trace bounds must satisfy 0 <= T_low <= T_high, T_high > 0")
        if self.delta < 0:
            raise ParameterError("delta must be non-negative")
        M = self.mesh.n_elems
        if self.T0 > M * self.T_high * (1 + 1e-12):
            raise ParameterError("T0 exceeds M * T_high")
        if 3 * self.delta > self.T_high * (1 + 1e-12):
            raise InfeasibleError("3 delta > T_high: no element tensor is feasible")
        if 3 * self.delta > self.T_low * (1 + 1e-12):
            raise InfeasibleError("3 delta > T_low: element feasible set is empty (trace bound below the eigenvalue floor)")
        if self.T0 < M * max(self.T_low, 3 * self.delta) * (1 - 1e-12):
            raise InfeasibleError("T0 is below the sum of minimal element traces")

    @property
    def floor(self) -> float:
        return self.delta if self.delta > 0 else _FLOOR_REL * self.T_high


@dataclass
class FmoSolution:
    field: np.ndarray            # (M, 3, 3)
    displacement: np.ndarray
    compliance: float
    history: list
    iterations: int = 0
    converged: bool = False
    labels: np.ndarray | None = None
    representatives: np.ndarray | None = None


def project_to_class(D, material_class: str) -> np.ndarray:
    """Frobenius-nearest tensor of the class; batched over leading axes."""
    D = np.asarray(D, dtype=float)
    if material_class == "free":
        return D.copy()
    if material_class == "orthotropic":
        out = D.copy()
        out[..., 0, 2] = out[..., 2, 0] = 0.0
        out[..., 1, 2] = out[..., 2, 1] = 0.0
        return out
    if material_class == "isotropic":
        a = np.einsum("ij,...ij->...", P_HYD, D)
        b = np.einsum("ij,...ij->...", P_DEV, D) / 2.0
        return a[..., None, None] * P_HYD + b[..., None, None] * P_DEV
    raise ParameterError(f"unknown material class {material_class!r}")


def element_update(strain, T_low: float, T_high: float, delta: float, material_class: str = "free"):
    """Maximizer of ``eps^T D eps`` over one element's feasible set at trace ``T_high``.

    This is the strain-driven update of a single element with the global
    budget ignored; zero strain returns the minimal-trace isotropic tensor.
    """
    eps = np.asarray(strain, dtype=float)
    if not 0 <= T_low <= T_high or delta < 0 or 3 * delta > T_low + 1e-15:
        raise ParameterError("inconsistent element bounds")
    if not np.any(eps):
        return (T_low / 3.0) * np.eye(3)
    spare = T_high - 3.0 * delta
    if material_class == "free":
        e = eps / np.linalg.norm(eps)
        return delta * np.eye(3) + spare * np.outer(e, e)
    if material_class == "isotropic":
        # D = a P_hyd + b P_dev with a, b >= delta and a + 2b = T_high
        gain_a = eps @ P_HYD @ eps
        gain_b = eps @ P_DEV @ eps / 2.0
        if gain_a >= gain_b:
            a, b = T_high - 2 * delta, delta
        else:
            a, b = delta, (T_high - delta) / 2.0
        return a * P_HYD + b * P_DEV
    if material_class == "orthotropic":
        D = delta * np.eye(3)
        e2 = eps[:2]
        if e2 @ e2 >= eps[2] ** 2:
            e = e2 / np.linalg.norm(e2)
            D[:2, :2] += spare * np.outer(e, e)
        else:
            D[2, 2] += spare
        return D
    raise ParameterError(f"unknown material class {material_class!r}")


def compliance(field, mesh: QuadMesh, return_displacement: bool = False):
    """``f^T u``, cross-checked against ``u^T K u``."""
    K = assemble(mesh, field)
    f = mesh.loads
    u = solve_dirichlet(K, f, mesh.fixed_dofs, mesh)
    c = float(f @ u)
    c2 = float(u @ (K @ u))
    if abs(c - c2) > 1e-9 * max(abs(c), 1e-300):
        raise SolverError(f"compliance cross-check failed: f.u={c:.12g}, u.Ku={c2:.12g}")
    return (c, u) if return_displacement else c


def strain_moments(mesh: QuadMesh, u: np.ndarray) -> np.ndarray:
    """``E_e = sum_g w_g eps_g eps_g^T`` per element, shape (M, 3, 3)."""
    Bs, ws = gauss_points(2, float(mesh.elem_size))
    ue = u[mesh.edof]
    eps = np.einsum("gia,ma->mgi", Bs, ue)
    return np.einsum("g,mgi,mgj->mij", ws, eps, eps)


# ---------------------------------------------------------------------------
# per-class minimizers of tr(D^-1 S) + mu tr(D) with D - floor I >= 0


class _ClassSolver:
    """Vectorized closed forms for a stack of stress moments ``S`` (n, 3, 3)."""

    def __init__(self, S: np.ndarray, material_class: str, floor: float):
        self.cls = material_class
        self.floor = floor
        S = 0.5 * (S + np.swapaxes(S, -1, -2))
        if material_class == "free":
            s, V = np.linalg.eigh(S)
            self.s = np.maximum(s, 0.0)            # (n, 3)
            self.V = V
            self.mult = np.ones(3)
        elif material_class == "isotropic":
            sh = np.einsum("ij,nij->n", P_HYD, S)
            sd = np.einsum("ij,nij->n", P_DEV, S)
            # trace a + 2b; a from s_h, b from s_d / 2 counted twice
            self.s = np.maximum(np.column_stack([sh, sd / 2.0]), 0.0)
            self.mult = np.array([1.0, 2.0])
        else:
            s, V = np.linalg.eigh(S[:, :2, :2])
            self.s = np.maximum(np.column_stack([s, S[:, 2, 2]]), 0.0)
            self.V = V
            self.mult = np.ones(3)
        self.zero = self.s.max(axis=1) <= 1e-300

    def values(self, mu: np.ndarray) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)[:, None]
        return np.maximum(self.floor, np.sqrt(self.s / mu))

    def trace(self, mu) -> np.ndarray:
        return self.values(mu) @ self.mult

    def tensors(self, mu, T_low: float) -> np.ndarray:
        d = self.values(mu)
        n = d.shape[0]
        if self.cls == "free":
            D = np.einsum("nij,nj,nkj->nik", self.V, d, self.V)
        elif self.cls == "isotropic":
            D = d[:, 0, None, None] * P_HYD + d[:, 1, None, None] * P_DEV
        else:
            D = np.zeros((n, 3, 3))
            D[:, :2, :2] = np.einsum("nij,nj,nkj->nik", self.V, d[:, :2], self.V)
            D[:, 2, 2] = d[:, 2]
        if self.zero.any():
            D[self.zero] = (T_low / 3.0) * np.eye(3)
        return 0.5 * (D + np.swapaxes(D, -1, -2))


def _mu_for_trace(solver: _ClassSolver, target: float, lo=1e-30, hi=1e30, iters: int = 200) -> np.ndarray:
    """Per-row ``mu`` with ``trace(mu) = target`` (trace is non-increasing in mu)."""
    n = solver.s.shape[0]
    a = np.full(n, np.log(lo))
    b = np.full(n, np.log(hi))
    for _ in range(iters):
        m = 0.5 * (a + b)
        big = solver.trace(np.exp(m)) > target
        a = np.where(big, m, a)
        b = np.where(big, b, m)
        if np.max(b - a) < 1e-13:
            break
    return np.exp(0.5 * (a + b))


def class_update(S: np.ndarray, counts: np.ndarray, T0: float, T_low: float, T_high: float,
                 floor: float, material_class: str) -> np.ndarray:
    """Minimize ``sum_k counts_k tr(D_k^-1 S_k)`` subject to the trace constraints.

    ``S_k`` is the mean stress moment of group k; each group's tensor is
    counted ``counts_k`` times in the budget.
    """
    solver = _ClassSolver(S, material_class, floor)
    mu_hi = _mu_for_trace(solver, T_high)              # smallest mu allowed (trace = T_high)
    mu_lo = _mu_for_trace(solver, max(T_low, floor * 3.0))

    def mus(lam):
        return np.clip(lam, mu_hi, mu_lo)

    def total(lam):
        tr = np.clip(solver.trace(mus(lam)), T_low, T_high)
        tr = np.where(solver.zero, T_low, tr)
        return float(counts @ tr)

    if total(1e-300) <= T0:
        lam = 1e-300
    else:
        a, b = np.log(1e-30), np.log(1e30)
        for _ in range(300):
            m = 0.5 * (a + b)
            if total(np.exp(m)) > T0:
                a = m
            else:
                b = m
            if b - a < 1e-15:
                break
        lam = np.exp(b)
    D = solver.tensors(mus(lam), T_low)
    # rescale trace-bound rounding from the bisection
    tr = np.trace(D, axis1=1, axis2=2)
    over = tr > T_high
    if over.any():
        D[over] *= (T_high / tr[over])[:, None, None]
    return D


def _uniform_start(problem: FmoProblem, n: int) -> np.ndarray:
    t = problem.T0 / problem.mesh.n_elems
    t = min(max(t, problem.T_low), problem.T_high)
    return np.broadcast_to((t / 3.0) * np.eye(3), (n, 3, 3)).copy()


def _run(problem: FmoProblem, groups: np.ndarray, n_groups: int, D_init: np.ndarray):
    mesh = problem.mesh
    counts = np.bincount(groups, minlength=n_groups).astype(float)
    Dg = D_init
    history = []
    converged = False
    it = 0
    stall = 0
    for it in range(1, problem.max_iter + 1):
        field = Dg[groups]
        c, u = compliance(field, mesh, return_displacement=True)
        history.append(c)
        if len(history) > 1:
            rel = abs(history[-2] - c) / max(abs(c), 1e-300)
            stall = stall + 1 if rel < problem.tol else 0
            if stall >= 5:
                converged = True
                break
        E = strain_moments(mesh, u)
        Se = np.einsum("mij,mjk,mkl->mil", field, E, field)
        S = np.zeros((n_groups, 3, 3))
        np.add.at(S, groups, Se)
        S /= counts[:, None, None]
        Dg = class_update(S, counts, problem.T0, problem.T_low, problem.T_high, problem.floor,
                          problem.material_class)
    field = Dg[groups]
    if not converged:
        c, u = compliance(field, mesh, return_displacement=True)
        history.append(c)
    log.debug("fmo finished after %d iterations, c=%.6g", it, history[-1])
    return FmoSolution(field=field, displacement=u, compliance=history[-1], history=history,
                       iterations=it, converged=converged)


def solve_fmo(problem: FmoProblem, D_init: np.ndarray | None = None) -> FmoSolution:
    M = problem.mesh.n_elems
    if D_init is None:
        D_init = _uniform_start(problem, M)
    return _run(problem, np.arange(M), M, np.asarray(D_init, dtype=float))


def solve_grouped(problem: FmoProblem, labels: np.ndarray, D_init: np.ndarray | None = None) -> FmoSolution:
    """FMO with one shared tensor per label; the budget counts every member."""
    labels = np.asarray(labels, dtype=int)
    K = int(labels.max()) + 1
    if labels.shape != (problem.mesh.n_elems,) or np.bincount(labels, minlength=K).min() == 0:
        raise ParameterError("labels must cover every element and leave no group empty")
    if D_init is None:
        D_init = _uniform_start(problem, K)
    sol = _run(problem, labels, K, np.asarray(D_init, dtype=float))
    sol.labels = labels
    sol.representatives = sol.field[np.array([np.flatnonzero(labels == k)[0] for k in range(K)])]
    return sol


def check_feasible(field, problem: FmoProblem, tol: float = 1e-8) -> bool:
    D = np.asarray(field)
    tr = np.trace(D, axis1=1, axis2=2)
    lam_min = np.linalg.eigvalsh(D)[:, 0]
    return bool(np.all(tr >= problem.T_low - tol) and np.all(tr <= problem.T_high + tol)
                and np.all(lam_min >= problem.delta - tol) and tr.sum() <= problem.T0 + 1e-6)
