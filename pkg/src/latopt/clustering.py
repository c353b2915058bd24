"""Agglomerative (Ward) clustering of a tensor field and per-cluster strain loads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import linkage

from .core_fe import QuadMesh, centroid_B, tensor_to_vector, von_mises
from .exceptions import ParameterError, SolverError
from .fmo import FmoProblem, FmoSolution, project_to_class, solve_grouped


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    K: int
    representatives: np.ndarray      # (K, 3, 3)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        counts = np.bincount(self.labels, minlength=self.K)
        if counts.size != self.K or counts.min() == 0:
            raise ParameterError("every cluster must be non-empty and labels must lie in [0, K)")

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)


@dataclass
class ClusterStrainLoads:
    strains: np.ndarray      # (K, 3) Kelvin strain per cluster
    stresses: np.ndarray     # (K, 3)
    elements: np.ndarray     # (K,) source element of each entry
    von_mises: np.ndarray    # (K,)


def field_vectors(field) -> np.ndarray:
    """Six upper-triangle Kelvin entries per tensor, shape (M, 6)."""
    return tensor_to_vector(np.asarray(field, dtype=float))


def _cut(Z: np.ndarray, n: int, K: int) -> np.ndarray:
    """Apply the first ``n - K`` merges of a linkage and relabel by first appearance."""
    parent = np.arange(2 * n - 1)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for step in range(n - K):
        a, b = int(Z[step, 0]), int(Z[step, 1])
        new = n + step
        parent[find(a)] = new
        parent[find(b)] = new
    roots = np.array([find(i) for i in range(n)])
    _, first, inv = np.unique(roots, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv]


def hierarchical_cluster(field, K: int) -> ClusterAssignment:
    """Ward clustering on the Kelvin 6-vectors, cut at ``K`` clusters.

    Cluster indices follow the first element of each cluster in input order.
    """
    X = field_vectors(field)
    n = X.shape[0]
    if not 1 <= K <= n:
        raise ParameterError(f"K must lie in [1, {n}], got {K}")
    if n == 1:
        labels = np.zeros(1, dtype=int)
    else:
        Z = linkage(X, method="ward", metric="euclidean")
        labels = _cut(Z, n, K)
    reps = np.array([np.asarray(field)[labels == k].mean(axis=0) for k in range(K)])
    return ClusterAssignment(labels=labels, K=K, representatives=reps)


def clustered_fmo(problem: FmoProblem, assignment: ClusterAssignment,
                  warm_start: bool = True) -> FmoSolution:
    """FMO with one tensor per cluster; starts from the cluster means of the input field."""
    init = None
    if warm_start:
        init = np.array([_feasible_start(R, problem) for R in assignment.representatives])
    sol = solve_grouped(problem, assignment.labels, init)
    return sol


def _feasible_start(D, problem: FmoProblem) -> np.ndarray:
    D = project_to_class(0.5 * (D + D.T), problem.material_class)
    w, V = np.linalg.eigh(D)
    w = np.maximum(w, problem.floor)
    t = w.sum()
    if t > problem.T_high:
        w = problem.floor + (w - problem.floor) * (problem.T_high - 3 * problem.floor) / max(t - 3 * problem.floor, 1e-300)
    elif t < problem.T_low:
        w = w + (problem.T_low - t) / 3.0
    return (V * w) @ V.T


def element_centroid_stresses(field, mesh: QuadMesh, u) -> tuple[np.ndarray, np.ndarray]:
    """Centroid strains and stresses ``D_e eps_e`` per element."""
    Bc = centroid_B(float(mesh.elem_size))
    eps = np.asarray(u)[mesh.edof] @ Bc.T
    sig = np.einsum("mij,mj->mi", np.asarray(field), eps)
    return eps, sig


def select_cluster_strains(solution: FmoSolution, assignment: ClusterAssignment, mesh: QuadMesh,
                           representatives=None) -> ClusterStrainLoads:
    """Worst von Mises element of each cluster and its strain under the representative tensor."""
    reps = assignment.representatives if representatives is None else np.asarray(representatives)
    _, sig = element_centroid_stresses(solution.field, mesh, solution.displacement)
    vm = von_mises(sig)
    K = assignment.K
    strains = np.zeros((K, 3))
    stresses = np.zeros((K, 3))
    elems = np.zeros(K, dtype=int)
    vms = np.zeros(K)
    for k in range(K):
        members = np.flatnonzero(assignment.labels == k)
        e = members[np.argmax(vm[members])]          # argmax keeps the lowest index on ties
        Dk = reps[k]
        if np.linalg.eigvalsh(Dk)[0] <= 1e-14 * max(1.0, np.abs(Dk).max()):
            raise SolverError(f"representative tensor of cluster {k} is singular")
        elems[k] = e
        stresses[k] = sig[e]
        vms[k] = vm[e]
        strains[k] = np.linalg.solve(Dk, sig[e])
    return ClusterStrainLoads(strains=strains, stresses=stresses, elements=elems, von_mises=vms)
