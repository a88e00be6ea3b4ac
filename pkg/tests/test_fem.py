"""FEM kernel tests: element stiffness against the quadrature oracle, the
grid solver against dense direct solves, and the physical invariants."""

import numpy as np
import pytest

import oracles
from topoforge import fem
from topoforge.fem import (
    FemNumericalError,
    FemParameterError,
    GridShape,
    MaterialModel,
    assemble_and_solve,
    compliance_per_element,
    element_stiffness,
    left_edge_fixed_dofs,
)


class TestElementStiffness:
    @pytest.mark.parametrize("nu", [0.05, 0.2, 0.3, 0.4, 0.45])
    def test_matches_quadrature_oracle(self, nu):
        k0 = element_stiffness(nu)
        np.testing.assert_allclose(k0, oracles.quad_element_stiffness(nu), atol=1e-12)

    def test_symmetric_exactly(self):
        k0 = element_stiffness(0.3)
        assert np.array_equal(k0, k0.T)

    @pytest.mark.parametrize("mode", [
        np.array([1, 0, 1, 0, 1, 0, 1, 0], dtype=float),   # x translation
        np.array([0, 1, 0, 1, 0, 1, 0, 1], dtype=float),   # y translation
    ])
    def test_rigid_translations_produce_no_force(self, mode):
        assert np.abs(element_stiffness(0.3) @ mode).max() <= 1e-12

    def test_three_zero_eigenvalues(self):
        eig = np.linalg.eigvalsh(element_stiffness(0.25))
        assert np.sum(np.abs(eig) < 1e-10) == 3
        assert np.all(eig > -1e-10)

    @pytest.mark.parametrize("nu", [-0.1, 0.0, 0.5, 0.7])
    def test_invalid_poisson_rejected(self, nu):
        with pytest.raises(FemParameterError):
            element_stiffness(nu)


class TestAssembleAndSolve:
    def test_zero_loads_zero_solution(self):
        shape = GridShape(4, 3)
        sol = assemble_and_solve(shape, np.full((3, 4), 0.7), MaterialModel(),
                                 np.zeros(shape.n_dofs), left_edge_fixed_dofs(shape))
        assert np.all(sol.u == 0)
        assert sol.compliance == 0.0

    def test_single_element_matches_dense_oracle(self):
        shape = GridShape(1, 1)
        density = np.array([[0.8]])
        loads = np.zeros(shape.n_dofs)
        loads[2 * shape.node_id(1, 0) + 1] = 1.0
        fixed = left_edge_fixed_dofs(shape)
        sol = assemble_and_solve(shape, density, MaterialModel(), loads, fixed)
        u_ref, c_ref = oracles.dense_grid_solve(1, 1, density, loads, fixed)
        np.testing.assert_allclose(sol.u, u_ref, atol=1e-10)
        assert sol.compliance == pytest.approx(c_ref, rel=1e-10)

    def test_random_small_grids_match_dense_oracle(self, rng):
        for _ in range(5):
            nelx, nely = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            shape = GridShape(nelx, nely)
            density = rng.uniform(0.05, 1.0, (nely, nelx))
            loads = np.zeros(shape.n_dofs)
            free = np.setdiff1d(np.arange(shape.n_dofs), left_edge_fixed_dofs(shape))
            loads[rng.choice(free, size=min(3, free.size), replace=False)] = \
                rng.uniform(-2, 2, min(3, free.size))
            fixed = left_edge_fixed_dofs(shape)
            sol = assemble_and_solve(shape, density, MaterialModel(), loads, fixed)
            u_ref, c_ref = oracles.dense_grid_solve(nelx, nely, density, loads, fixed)
            np.testing.assert_allclose(sol.u, u_ref, atol=1e-10)
            assert sol.compliance == pytest.approx(c_ref, abs=1e-12, rel=1e-9)

    def test_doubling_loads_quadruples_compliance(self, rng):
        shape = GridShape(8, 8)
        density = rng.uniform(0.2, 1.0, (8, 8))
        loads = np.zeros(shape.n_dofs)
        loads[-3] = 1.5
        fixed = left_edge_fixed_dofs(shape)
        c1 = assemble_and_solve(shape, density, MaterialModel(), loads, fixed).compliance
        c2 = assemble_and_solve(shape, density, MaterialModel(), 2 * loads, fixed).compliance
        assert c2 == pytest.approx(4 * c1, rel=1e-9)

    def test_shape_mismatch_rejected(self):
        shape = GridShape(4, 4)
        with pytest.raises(FemParameterError):
            assemble_and_solve(shape, np.ones((3, 4)), MaterialModel(),
                               np.zeros(shape.n_dofs), left_edge_fixed_dofs(shape))
        with pytest.raises(FemParameterError):
            assemble_and_solve(shape, np.ones((4, 4)), MaterialModel(),
                               np.zeros(7), left_edge_fixed_dofs(shape))

    def test_density_out_of_range_rejected(self):
        shape = GridShape(2, 2)
        with pytest.raises(FemParameterError):
            assemble_and_solve(shape, np.full((2, 2), 1.2), MaterialModel(),
                               np.zeros(shape.n_dofs), left_edge_fixed_dofs(shape))

    def test_empty_fixed_set_rejected(self):
        shape = GridShape(2, 2)
        with pytest.raises(FemParameterError):
            assemble_and_solve(shape, np.ones((2, 2)), MaterialModel(),
                               np.zeros(shape.n_dofs), np.array([], dtype=int))

    def test_nonfinite_loads_rejected(self):
        shape = GridShape(2, 2)
        loads = np.zeros(shape.n_dofs)
        loads[5] = np.nan
        with pytest.raises(FemParameterError):
            assemble_and_solve(shape, np.ones((2, 2)), MaterialModel(), loads,
                               left_edge_fixed_dofs(shape))


class TestCompliancePerElement:
    def test_zero_displacement_zero_energy(self):
        shape = GridShape(3, 3)
        ce = compliance_per_element(shape, np.ones((3, 3)), MaterialModel(),
                                    np.zeros(shape.n_dofs))
        assert np.all(ce == 0)

    def test_energy_identity(self, rng):
        shape = GridShape(6, 5)
        density = rng.uniform(0.1, 1.0, (5, 6))
        loads = np.zeros(shape.n_dofs)
        loads[-4:] = rng.uniform(-1, 1, 4)
        mat = MaterialModel()
        sol = assemble_and_solve(shape, density, mat, loads, left_edge_fixed_dofs(shape))
        ce = compliance_per_element(shape, density, mat, sol.u)
        total = float(np.sum(mat.youngs(density) * ce))
        assert total == pytest.approx(sol.compliance, rel=1e-8)
        assert np.all(ce >= 0)

    def test_single_element_energy_matches_oracle(self, rng):
        shape = GridShape(1, 1)
        density = np.array([[0.6]])
        loads = np.zeros(shape.n_dofs)
        loads[2 * shape.node_id(1, 1)] = -1.0
        sol = assemble_and_solve(shape, density, MaterialModel(), loads,
                                 left_edge_fixed_dofs(shape))
        ce = compliance_per_element(shape, density, MaterialModel(), sol.u)
        assert ce[0, 0] == pytest.approx(
            oracles.element_energy(1, 1, 0, 0, sol.u), abs=1e-10)


def mirror_u(shape: GridShape, u: np.ndarray) -> np.ndarray:
    """Displacements of the problem reflected about the horizontal midline:
    x components copy to the mirrored node, y components negate."""
    out = np.zeros_like(u)
    for ix in range(shape.nelx + 1):
        for iy in range(shape.nely + 1):
            src = shape.node_id(ix, iy)
            dst = shape.node_id(ix, shape.nely - iy)
            out[2 * dst] = u[2 * src]
            out[2 * dst + 1] = -u[2 * src + 1]
    return out


class TestPhysicalInvariants:
    def test_stiffness_positive_definite_on_free_dofs(self, rng):
        # v^T K v == sum_e E(x_e) * (v_e^T k0 v_e), evaluated per element
        shape = GridShape(32, 32)
        mat = MaterialModel()
        for _ in range(5):
            density = rng.uniform(0.0, 1.0, (32, 32))
            v = rng.standard_normal(shape.n_dofs)
            v[left_edge_fixed_dofs(shape)] = 0.0
            quad_form = float(np.sum(mat.youngs(density)
                                     * compliance_per_element(shape, density, mat, v)))
            assert quad_form > 0

    def test_solution_linearity(self, rng):
        shape = GridShape(8, 6)
        density = rng.uniform(0.1, 1.0, (6, 8))
        loads = np.zeros(shape.n_dofs)
        loads[-5] = 1.0
        fixed = left_edge_fixed_dofs(shape)
        base = assemble_and_solve(shape, density, MaterialModel(), loads, fixed).u
        for alpha in (-1.0, 2.0, 10.0):
            scaled = assemble_and_solve(shape, density, MaterialModel(),
                                        alpha * loads, fixed).u
            np.testing.assert_allclose(scaled, alpha * base, rtol=1e-9, atol=1e-15)

    def test_mirror_symmetry(self, rng):
        shape = GridShape(7, 6)
        density = rng.uniform(0.1, 1.0, (6, 7))
        loads = np.zeros(shape.n_dofs)
        node = shape.node_id(7, 2)
        loads[2 * node] = 1.0
        loads[2 * node + 1] = -2.0
        fixed = left_edge_fixed_dofs(shape)
        sol = assemble_and_solve(shape, density, MaterialModel(), loads, fixed)

        density_m = density[::-1].copy()
        loads_m = np.zeros_like(loads)
        for ix in range(shape.nelx + 1):
            for iy in range(shape.nely + 1):
                src = shape.node_id(ix, iy)
                dst = shape.node_id(ix, shape.nely - iy)
                loads_m[2 * dst] = loads[2 * src]
                loads_m[2 * dst + 1] = -loads[2 * src + 1]
        sol_m = assemble_and_solve(shape, density_m, MaterialModel(), loads_m, fixed)

        np.testing.assert_allclose(sol_m.u, mirror_u(shape, sol.u), atol=1e-10)
        assert sol_m.compliance == pytest.approx(sol.compliance, rel=1e-8)

    def test_compliance_monotone_in_density(self, rng):
        for _ in range(5):
            nelx, nely = 4, 3
            shape = GridShape(nelx, nely)
            density = rng.uniform(0.1, 0.9, (nely, nelx))
            loads = np.zeros(shape.n_dofs)
            loads[-2] = 1.0
            fixed = left_edge_fixed_dofs(shape)
            c0 = assemble_and_solve(shape, density, MaterialModel(), loads, fixed).compliance
            bumped = density.copy()
            ey, ex = int(rng.integers(nely)), int(rng.integers(nelx))
            bumped[ey, ex] = min(1.0, bumped[ey, ex] + 0.1)
            c1 = assemble_and_solve(shape, bumped, MaterialModel(), loads, fixed).compliance
            assert c1 <= c0 + 1e-10
