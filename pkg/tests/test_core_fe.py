import numpy as np
import pytest
from hypothesis import given, strategies as st

from latopt.core_fe import (QuadMesh, assemble, base_material, centroid_B, element_stiffness,
                            engineering_constants, periodic_reduce, solve_dirichlet,
                            tensor_to_vector, vector_to_tensor, von_mises)
from latopt.exceptions import ParameterError, SolverError

from _helpers import dense_assembly, random_spd, voigt_element_stiffness


class TestBaseMaterial:
    def test_zero_poisson_is_identity(self):
        assert np.allclose(base_material(1.0, 0.0), np.eye(3), atol=1e-15)

    def test_closed_form_entries(self):
        D = base_material(1.0, 0.3)
        assert D[0, 0] == pytest.approx(1 / 0.91, abs=1e-6)
        assert D[0, 1] == pytest.approx(0.3 / 0.91, abs=1e-6)
        assert D[2, 2] == pytest.approx(2 / 2.6, abs=1e-6)
        assert D[0, 0] == pytest.approx(1.098901, abs=1e-6)
        assert D[0, 1] == pytest.approx(0.329670, abs=1e-6)
        assert D[2, 2] == pytest.approx(0.769231, abs=1e-6)

    @pytest.mark.parametrize("E, nu", [(1.0, 0.6), (1.0, 0.5), (0.0, 0.3), (-2.0, 0.1), (1.0, -1.0)])
    def test_bad_parameters(self, E, nu):
        with pytest.raises(ParameterError):
            base_material(E, nu)

    @given(st.floats(0.01, 100.0), st.floats(-0.95, 0.49))
    def test_engineering_round_trip(self, E, nu):
        E2, nu2 = engineering_constants(base_material(E, nu))
        assert E2 == pytest.approx(E, rel=1e-12)
        assert nu2 == pytest.approx(nu, abs=1e-12)

    def test_symmetric_psd(self):
        D = base_material(2.0, 0.25)
        assert np.array_equal(D, D.T)
        assert np.linalg.eigvalsh(D).min() > 0


def test_kelvin_vector_round_trip(rng):
    D = np.array([random_spd(rng) for _ in range(5)])
    assert np.array_equal(vector_to_tensor(tensor_to_vector(D)), D)


def test_von_mises_uniaxial_and_shear():
    assert von_mises(np.array([2.0, 0.0, 0.0])) == pytest.approx(2.0)
    # pure shear tau: Kelvin entry sqrt(2) tau, von Mises sqrt(3) tau
    assert von_mises(np.array([0.0, 0.0, np.sqrt(2.0) * 1.5])) == pytest.approx(np.sqrt(3) * 1.5)


class TestElementStiffness:
    def test_zero_tensor(self):
        assert np.array_equal(element_stiffness(np.zeros((3, 3))), np.zeros((8, 8)))

    def test_rigid_body_nullspace(self, rng):
        for _ in range(5):
            ev = np.linalg.eigvalsh(element_stiffness(random_spd(rng)))
            assert np.sum(np.abs(ev) < 1e-10 * ev.max()) == 3

    def test_matches_engineering_notation_oracle(self, C0):
        assert np.allclose(element_stiffness(C0, 1.0), voigt_element_stiffness(C0, 1.0), rtol=0, atol=1e-12)

    def test_matches_oracle_other_size(self, rng):
        D = random_spd(rng)
        assert np.allclose(element_stiffness(D, 0.37), voigt_element_stiffness(D, 0.37), atol=1e-12)

    @given(st.floats(0.0, 50.0))
    def test_linear_in_tensor(self, alpha):
        D = base_material(1.0, 0.3)
        K1 = element_stiffness(alpha * D)
        K2 = alpha * element_stiffness(D)
        assert np.max(np.abs(K1 - K2)) <= 1e-14 * max(1.0, alpha) * 4

    def test_indefinite_tensor_warns(self):
        with pytest.warns(RuntimeWarning):
            element_stiffness(-np.eye(3))

    def test_one_point_rule_has_hourglass_modes(self, C0):
        ev = np.linalg.eigvalsh(element_stiffness(C0, n_gauss=1))
        assert np.sum(np.abs(ev) < 1e-10) == 5

    def test_bad_gauss_order(self, C0):
        with pytest.raises(ParameterError):
            element_stiffness(C0, n_gauss=3)


class TestAssembly:
    def test_single_element_equals_element_matrix(self, C0):
        mesh = QuadMesh(1, 1)
        K = assemble(mesh, C0[None]).toarray()
        e = mesh.edof[0]
        assert np.allclose(K[np.ix_(e, e)], element_stiffness(C0), atol=1e-15)

    def test_shared_edge_accumulates(self, C0):
        mesh = QuadMesh(2, 1)
        K = assemble(mesh, np.array([C0, C0])).toarray()
        Ke = element_stiffness(C0)
        # node 1 is local node 1 of element 0 and local node 0 of element 1
        assert K[2, 2] == pytest.approx(Ke[2, 2] + Ke[0, 0])
        # corner node 0 only sees element 0
        assert K[0, 0] == pytest.approx(Ke[0, 0])

    def test_random_mesh_matches_dense_oracle(self, rng):
        field = np.array([random_spd(rng) for _ in range(9)])
        mesh = QuadMesh(3, 3, 0.5)
        K = assemble(mesh, field)
        Kd = dense_assembly(3, 3, field, 0.5)
        v = rng.standard_normal(mesh.n_dofs)
        assert np.allclose(K @ v, Kd @ v, atol=1e-12 * np.abs(Kd).max() * 10)
        assert np.allclose(K.toarray(), Kd, atol=1e-12)

    def test_psd(self, rng):
        field = np.array([random_spd(rng) for _ in range(12)])
        K = assemble(QuadMesh(4, 3), field)
        for _ in range(20):
            v = rng.standard_normal(K.shape[0])
            assert v @ (K @ v) >= -1e-10 * (v @ v)
        assert abs(K - K.T).max() < 1e-14

    def test_length_mismatch(self, C0):
        with pytest.raises(ParameterError):
            assemble(QuadMesh(2, 2), np.array([C0] * 3))

    def test_mesh_validation(self):
        with pytest.raises(ParameterError):
            QuadMesh(0, 2)
        with pytest.raises(ParameterError):
            QuadMesh(1, 1, fixed_dofs=[8])
        with pytest.raises(ParameterError):
            QuadMesh(1, 1, loads=np.zeros(3))


def _cantilever(nx=4, ny=4):
    mesh0 = QuadMesh(nx, ny)
    left = mesh0.node(0, np.arange(ny + 1))
    fixed = np.concatenate([2 * left, 2 * left + 1])
    f = np.zeros(mesh0.n_dofs)
    f[2 * mesh0.node(nx, ny // 2) + 1] = -1.0
    return QuadMesh(nx, ny, 1.0, fixed, f)


class TestSolve:
    def test_zero_load(self, C0):
        mesh = _cantilever()
        K = assemble(mesh, np.broadcast_to(C0, (16, 3, 3)))
        u = solve_dirichlet(K, np.zeros(mesh.n_dofs), mesh.fixed_dofs)
        assert not np.any(u)

    def test_single_element_tension(self, C0):
        # global nodes are row-major: 0 (0,0), 1 (1,0), 2 (0,1), 3 (1,1)
        f = np.zeros(8)
        f[[2, 6]] = 0.5
        mesh = QuadMesh(1, 1, 1.0, [0, 1, 4], f)
        u = solve_dirichlet(assemble(mesh, C0[None]), f, mesh.fixed_dofs)
        eps = centroid_B() @ u[mesh.edof[0]]
        assert np.allclose(eps, np.linalg.solve(C0, [1.0, 0.0, 0.0]), atol=1e-12)

    def test_cantilever_residual(self, C0):
        mesh = _cantilever()
        K = assemble(mesh, np.broadcast_to(C0, (16, 3, 3)))
        u = solve_dirichlet(K, mesh.loads, mesh.fixed_dofs)
        free = mesh.free_dofs
        r = K[free][:, free] @ u[free] - mesh.loads[free]
        assert np.linalg.norm(r) <= 1e-9 * np.linalg.norm(mesh.loads[free])
        assert not np.any(u[mesh.fixed_dofs])

    def test_singular_names_mode(self, C0):
        f = np.zeros(8)
        f[2] = 1.0
        mesh = QuadMesh(1, 1, 1.0, [1], f)
        with pytest.raises(SolverError, match="x-translation"):
            solve_dirichlet(assemble(mesh, C0[None]), f, mesh.fixed_dofs, mesh)


class TestPeriodic:
    def test_one_by_one(self):
        pm = periodic_reduce(QuadMesh(1, 1))
        assert pm.n_reduced == 2
        assert len(set(pm.node_map)) == 1

    @pytest.mark.parametrize("n", [2, 3, 7, 16])
    def test_reduced_count(self, n):
        pm = periodic_reduce(QuadMesh(n, n))
        assert pm.n_reduced == 2 * n * n
        assert len(np.unique(pm.dof_map)) == 2 * n * n

    def test_expand_restrict_identity(self, rng):
        pm = periodic_reduce(QuadMesh(5, 5))
        v = rng.standard_normal(pm.n_reduced)
        assert np.array_equal(pm.restrict(pm.expand(v)), v)

    def test_opposite_edges_identified(self, rng):
        mesh = QuadMesh(4, 4)
        pm = periodic_reduce(mesh)
        u = pm.expand(rng.standard_normal(pm.n_reduced)).reshape(5, 5, 2)
        assert np.array_equal(u[:, 0], u[:, 4])
        assert np.array_equal(u[0, :], u[4, :])

    def test_reduce_matrix_is_galerkin(self, rng, C0):
        mesh = QuadMesh(3, 3)
        pm = periodic_reduce(mesh)
        K = assemble(mesh, np.broadcast_to(C0, (9, 3, 3)))
        a, b = rng.standard_normal((2, pm.n_reduced))
        lhs = a @ (pm.reduce_matrix(K) @ b)
        rhs = pm.expand(a) @ (K @ pm.expand(b))
        assert lhs == pytest.approx(rhs, rel=1e-12)
