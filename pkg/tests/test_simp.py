"""Optimizer tests: force conversion, filtering, the OC update's volume
constraint, and end-to-end optimization invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import cantilever_spec, circle_spec
from topoforge import fem, simp
from topoforge.fem import FemParameterError
from topoforge.simp import (
    DesignSpec,
    SimpConfig,
    SimpNumericalError,
    density_filter,
    element_forces_to_nodal,
    oc_update,
    optimize,
    uniform_feasible_compliance,
)


class TestElementForcesToNodal:
    def test_single_element_quarter_split(self):
        fx = np.zeros((32, 32))
        fy = np.zeros((32, 32))
        fx[3, 5] = 2.0
        f = element_forces_to_nodal(fx, fy)
        shape = fem.GridShape()
        corner_nodes = [shape.node_id(5, 3), shape.node_id(6, 3),
                        shape.node_id(6, 4), shape.node_id(5, 4)]
        for n in corner_nodes:
            assert f[2 * n] == 0.5
            assert f[2 * n + 1] == 0.0
        assert np.count_nonzero(f) == 4

    def test_all_zero(self):
        f = element_forces_to_nodal(np.zeros((8, 8)), np.zeros((8, 8)))
        assert np.all(f == 0)

    def test_adjacent_elements_accumulate(self):
        # elements (ex=5, ey=3) and (ex=6, ey=3): two shared corner nodes
        fx = np.zeros((32, 32))
        fx[3, 5] = 1.0
        fx[3, 6] = 1.0
        f = element_forces_to_nodal(fx, np.zeros((32, 32)))
        shape = fem.GridShape()
        shared = [shape.node_id(6, 3), shape.node_id(6, 4)]
        outer = [shape.node_id(5, 3), shape.node_id(5, 4),
                 shape.node_id(7, 3), shape.node_id(7, 4)]
        for n in shared:
            assert f[2 * n] == 0.5
        for n in outer:
            assert f[2 * n] == 0.25
        assert f.sum() == 2.0

    def test_totals_conserved_exactly(self, rng):
        fx = rng.integers(-2, 3, (32, 32)).astype(float)
        fy = rng.integers(-2, 3, (32, 32)).astype(float)
        f = element_forces_to_nodal(fx, fy)
        assert f[0::2].sum() == fx.sum()
        assert f[1::2].sum() == fy.sum()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(FemParameterError):
            element_forces_to_nodal(np.zeros((4, 4)), np.zeros((4, 5)))


class TestDensityFilter:
    @given(c=st.floats(0.0, 1.0), rmin=st.floats(1.0, 4.0))
    @settings(max_examples=25, deadline=None)
    def test_constant_field_preserved(self, c, rmin):
        out = density_filter(np.full((6, 6), c), rmin)
        np.testing.assert_allclose(out, c, atol=1e-12)

    def test_rmin_one_is_identity(self, rng):
        field = rng.uniform(0, 1, (5, 7))
        np.testing.assert_allclose(density_filter(field, 1.0), field, atol=1e-15)

    def test_three_by_three_impulse_matches_oracle(self):
        # Frozen from the scalar-loop cone_filter oracle: with rmin = 1.5 the
        # diagonal neighbors (distance sqrt(2)) carry weight 1.5 - sqrt(2).
        field = np.zeros((3, 3))
        field[1, 1] = 1.0
        out = density_filter(field, 1.5)
        ref = oracles.cone_filter(field, 1.5)
        np.testing.assert_allclose(out, ref, atol=1e-12)
        assert out[1, 1] == pytest.approx(0.3903, abs=2e-4)
        assert out[0, 1] == pytest.approx(0.1576, abs=2e-4)
        assert out[0, 0] == pytest.approx(0.0332, abs=2e-4)

    def test_random_fields_match_oracle(self, rng):
        field = rng.uniform(0, 1, (6, 9))
        for rmin in (1.2, 1.5, 2.5):
            np.testing.assert_allclose(density_filter(field, rmin),
                                       oracles.cone_filter(field, rmin), atol=1e-12)


class TestOcUpdate:
    def _inputs(self, rng, n=4):
        rho = rng.uniform(0.2, 0.8, (n, n))
        dc = -rng.uniform(0.1, 2.0, (n, n))
        dv = np.full((n, n), 1.0 / (n * n))
        mask = np.ones((n, n), dtype=np.uint8)
        return rho, dc, dv, mask

    def test_move_limit_respected(self, rng):
        rho, dc, dv, mask = self._inputs(rng)
        config = SimpConfig(move=0.2)
        new = oc_update(rho, dc, dv, 0.5, mask, config)
        assert np.all(new <= rho + 0.2 + 1e-12)
        assert np.all(new >= rho - 0.2 - 1e-12)

    def test_passive_elements_forced_to_zero(self, rng):
        rho, dc, dv, mask = self._inputs(rng)
        mask[1, 2] = 0
        mask[3, 0] = 0
        new = oc_update(rho, dc, dv, 0.5, mask, SimpConfig())
        assert new[1, 2] == 0.0
        assert new[3, 0] == 0.0

    @given(seed=st.integers(0, 2 ** 31), volfrac=st.floats(0.25, 0.75))
    @settings(max_examples=30, deadline=None)
    def test_volume_constraint_satisfied(self, seed, volfrac):
        rng = np.random.default_rng(seed)
        rho = rng.uniform(max(0.0, volfrac - 0.15), min(1.0, volfrac + 0.15), (4, 4))
        dc = -rng.uniform(0.01, 5.0, (4, 4))
        dv = np.full((4, 4), 1.0 / 16)
        mask = np.ones((4, 4), dtype=np.uint8)
        new = oc_update(rho, dc, dv, volfrac, mask, SimpConfig())
        assert abs(new.mean() - volfrac) <= 1e-3

    def test_positive_sensitivity_rejected(self, rng):
        rho, dc, dv, mask = self._inputs(rng)
        dc[0, 0] = 0.5
        with pytest.raises(FemParameterError):
            oc_update(rho, dc, dv, 0.5, mask, SimpConfig())

    def test_unbracketable_volume_raises(self, rng):
        rho, dc, dv, mask = self._inputs(rng)
        # target far above what the move limit can reach in one update
        with pytest.raises(SimpNumericalError):
            oc_update(rho, dc, dv, 0.999, mask, SimpConfig(move=0.01))


class TestOptimize:
    def test_zero_loads_immediate_feasible(self):
        spec = DesignSpec(mask=np.ones((32, 32), dtype=np.uint8),
                          fx=np.zeros((32, 32), dtype=np.int8),
                          fy=np.zeros((32, 32), dtype=np.int8), volfrac=0.5)
        res = optimize(spec)
        assert res.compliance == 0.0
        assert res.converged
        assert res.iterations == 0
        assert abs(res.rho.mean() - 0.5) < 1e-12

    def test_cantilever_beats_uniform_density(self):
        spec = cantilever_spec(volfrac=0.5)
        res = optimize(spec)
        assert res.compliance < uniform_feasible_compliance(spec)
        assert res.converged

    def test_result_invariants_with_void(self):
        spec = circle_spec(volfrac=0.4)
        res = optimize(spec)
        mask_on = spec.mask.astype(bool)
        assert abs(res.rho[mask_on].mean() - spec.volfrac) <= 1e-3
        assert np.all(res.rho[~mask_on] == 0.0)
        assert res.rho.min() >= 0.0 and res.rho.max() <= 1.0
        assert res.iterations <= SimpConfig().max_iter
        assert res.elapsed > 0

    def test_deterministic_bit_identical(self):
        spec = circle_spec(volfrac=0.45, cx=10, cy=20, radius=4)
        r1 = optimize(spec)
        r2 = optimize(spec)
        assert np.array_equal(r1.rho, r2.rho)
        assert r1.compliance == r2.compliance

    def test_mirror_equivariance(self):
        spec = circle_spec(volfrac=0.45, cx=12, cy=9, radius=5)
        spec.fx[25, 15] = 1
        spec.validate()
        r = optimize(spec)
        r_m = optimize(spec.mirrored())
        np.testing.assert_allclose(r_m.rho[::-1], r.rho, atol=1e-9)
        assert r_m.compliance == pytest.approx(r.compliance, rel=1e-8)

    def test_iteration_cap_returns_unconverged(self):
        spec = cantilever_spec(volfrac=0.5)
        res = optimize(spec, SimpConfig(max_iter=3))
        assert not res.converged
        assert res.iterations == 3

    def test_invalid_spec_rejected(self):
        spec = cantilever_spec(volfrac=0.5)
        spec.fx[0, 0] = 3
        with pytest.raises(FemParameterError):
            optimize(spec)
