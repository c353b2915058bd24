import numpy as np
import pytest
from hypothesis import given, strategies as st

from latopt.clustering import (ClusterAssignment, clustered_fmo, field_vectors, hierarchical_cluster,
                               select_cluster_strains)
from latopt.core_fe import QuadMesh, von_mises
from latopt.exceptions import ParameterError
from latopt.fmo import FmoProblem, FmoSolution, solve_fmo

from _helpers import brute_ward, random_spd, same_partition


def _cantilever(nx=6, ny=3):
    mesh0 = QuadMesh(nx, ny)
    left = mesh0.node(0, np.arange(ny + 1))
    f = np.zeros(mesh0.n_dofs)
    f[2 * mesh0.node(nx, 0) + 1] = -1.0
    return QuadMesh(nx, ny, 1.0, np.concatenate([2 * left, 2 * left + 1]), f)


def _problem(**kw):
    mesh = _cantilever()
    return FmoProblem(mesh, T0=0.5 * mesh.n_elems, T_low=0.0, T_high=1.0, **kw)


@pytest.fixture(scope="module")
def free_solution():
    prob = _problem(max_iter=300, tol=1e-9)
    return prob, solve_fmo(prob)


class TestHierarchical:
    def test_single_cluster(self, rng):
        field = np.stack([random_spd(rng) for _ in range(7)])
        a = hierarchical_cluster(field, 1)
        assert not a.labels.any()
        assert np.allclose(a.representatives[0], field.mean(axis=0))

    def test_separated_blocks(self, rng):
        A, B = random_spd(rng), 10 * random_spd(rng)
        field = np.stack([B, A, A, B, A, B, B])
        field = field + 1e-6 * rng.standard_normal(field.shape)
        a = hierarchical_cluster(field, 2)
        assert a.labels.tolist() == [0, 1, 1, 0, 1, 0, 0]

    def test_matches_brute_force_ward(self, rng):
        field = np.stack([random_spd(rng) for _ in range(20)])
        a = hierarchical_cluster(field, 4)
        assert same_partition(a.labels, brute_ward(field_vectors(field), 4))

    def test_first_appearance_labels(self, rng):
        field = np.stack([random_spd(rng) for _ in range(15)])
        labels = hierarchical_cluster(field, 5).labels
        _, first = np.unique(labels, return_index=True)
        assert np.all(np.diff(first) > 0)
        assert labels[0] == 0

    def test_each_element_own_cluster(self, rng):
        field = np.stack([random_spd(rng) for _ in range(6)])
        assert hierarchical_cluster(field, 6).labels.tolist() == list(range(6))

    def test_bad_K(self, rng):
        field = np.stack([random_spd(rng) for _ in range(4)])
        for K in (0, 5):
            with pytest.raises(ParameterError):
                hierarchical_cluster(field, K)


class TestClusteredFmo:
    def test_all_singletons_equal_free(self):
        prob = _problem(max_iter=40)
        free = solve_fmo(prob)
        M = prob.mesh.n_elems
        a = hierarchical_cluster(np.stack([np.eye(3) * (1 + i) for i in range(M)]), M)
        grouped = clustered_fmo(prob, a, warm_start=False)
        assert grouped.compliance == pytest.approx(free.compliance, rel=1e-10)

    def test_nesting_and_refinement(self, free_solution):
        prob, free = free_solution
        comps = []
        for K in (1, 2, 4, 8):
            a = hierarchical_cluster(free.field, K)
            sol = clustered_fmo(prob, a)
            assert sol.compliance >= free.compliance * (1 - 1e-6)
            # one shared tensor per cluster
            for k in range(K):
                members = sol.field[a.labels == k]
                assert np.allclose(members, members[0])
            comps.append(sol.compliance)
        assert np.all(np.diff(comps) <= 1e-3 * np.array(comps[:-1]))

    def test_representatives_exposed(self, free_solution):
        prob, free = free_solution
        a = hierarchical_cluster(free.field, 3)
        sol = clustered_fmo(prob, a)
        assert sol.representatives.shape == (3, 3, 3)
        assert np.array_equal(sol.labels, a.labels)


def _affine_solution(mesh, field, a=0.5, b=-0.25, g=0.125):
    xy = mesh.node_coords
    u = np.zeros(mesh.n_dofs)
    u[0::2] = a * xy[:, 0] + g * xy[:, 1]
    u[1::2] = b * xy[:, 1] + g * xy[:, 0]
    return FmoSolution(field=np.asarray(field), displacement=u, compliance=0.0, history=[])


class TestStrainSelection:
    def test_uniform_tie_lowest_index(self, C0):
        mesh = QuadMesh(4, 3)
        field = np.broadcast_to(C0, (12, 3, 3)).copy()
        sol = _affine_solution(mesh, field)
        labels = np.array([0, 1, 1, 0, 2, 2, 1, 0, 2, 0, 1, 2])
        a = ClusterAssignment(labels, 3, np.broadcast_to(C0, (3, 3, 3)))
        out = select_cluster_strains(sol, a, mesh)
        assert out.elements.tolist() == [0, 1, 4]
        eps = np.array([0.5, -0.25, np.sqrt(2) * 0.125])
        assert np.allclose(out.strains, eps, atol=1e-14)

    def test_dominant_element(self, C0):
        mesh = QuadMesh(4, 3)
        field = np.broadcast_to(C0, (12, 3, 3)).copy()
        field[7] *= 10
        sol = _affine_solution(mesh, field)
        a = hierarchical_cluster(np.broadcast_to(C0, (12, 3, 3)), 1)
        out = select_cluster_strains(sol, a, mesh)
        assert out.elements.tolist() == [7]
        assert np.allclose(out.stresses[0], 10 * C0 @ [0.5, -0.25, np.sqrt(2) * 0.125])
        # strain seen by the representative tensor, not the element's own
        assert np.allclose(out.strains[0], 10 * np.array([0.5, -0.25, np.sqrt(2) * 0.125]))

    def test_exhaustive_scan(self, free_solution):
        prob, free = free_solution
        mesh = prob.mesh
        a = hierarchical_cluster(free.field, 4)
        out = select_cluster_strains(free, a, mesh)
        B = _centroid_B()
        for k in range(4):
            best, best_e = -1.0, -1
            for e in np.flatnonzero(a.labels == k):
                sig = free.field[e] @ (B @ free.displacement[mesh.edof[e]])
                s11, s22, s12 = sig[0], sig[1], sig[2] / np.sqrt(2)
                vm = np.sqrt(s11 ** 2 - s11 * s22 + s22 ** 2 + 3 * s12 ** 2)
                if vm > best:
                    best, best_e = vm, e
            assert out.elements[k] == best_e
            assert out.von_mises[k] == pytest.approx(best, rel=1e-12)
            assert np.allclose(a.representatives[k] @ out.strains[k], out.stresses[k], atol=1e-12)


def _centroid_B():
    # shape-function gradients at the element center, nodes counter-clockwise from (0, 0)
    dx = np.array([-0.5, 0.5, 0.5, -0.5])
    dy = np.array([-0.5, -0.5, 0.5, 0.5])
    B = np.zeros((3, 8))
    B[0, 0::2] = dx
    B[1, 1::2] = dy
    B[2, 0::2] = dy / np.sqrt(2)
    B[2, 1::2] = dx / np.sqrt(2)
    return B


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(0, np.pi))
def test_von_mises_rotation_invariant(s11, s22, s12, theta):
    S = np.array([[s11, s12], [s12, s22]])
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s], [s, c]])
    T = R @ S @ R.T
    k1 = np.array([s11, s22, np.sqrt(2) * s12])
    k2 = np.array([T[0, 0], T[1, 1], np.sqrt(2) * T[0, 1]])
    assert von_mises(k2) == pytest.approx(von_mises(k1), abs=1e-10)
