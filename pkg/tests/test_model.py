"""Core types and the tridiagonal coupling structure."""

import numpy as np
import pytest

from sppsbl.model import (
    CouplingScheme,
    CouplingVector,
    HyperPriors,
    PrecisionField,
    SensingProblem,
    SolverState,
    build_coupling_matrix,
    prior_precisions,
)


class TestPriorPrecisions:
    def test_zero_coupling_reduces_to_alpha(self):
        """beta = 0 decouples to classical SBL: lambda equals alpha."""
        lam = prior_precisions([1.0, 1.0, 1.0], [0.0, 0.0])
        np.testing.assert_array_equal(lam, [1.0, 1.0, 1.0])
        alpha = np.random.default_rng(0).uniform(0.1, 5, 12)
        np.testing.assert_array_equal(prior_precisions(alpha, np.zeros(11)), alpha)

    def test_direct_substitution(self):
        lam = prior_precisions([1.0, 2.0, 3.0], [1.0, 1.0])
        np.testing.assert_allclose(lam, [3.0, 6.0, 5.0])

    def test_matches_dense_matrix_product(self):
        """lambda computed by the recurrence equals T @ alpha built densely."""
        rng = np.random.default_rng(42)
        alpha = rng.uniform(0.1, 10, 8)
        beta = rng.uniform(0, 5, 7)
        t = build_coupling_matrix(CouplingScheme.spp(), beta, 8)
        np.testing.assert_allclose(prior_precisions(alpha, beta), t @ alpha,
                                   rtol=1e-12)

    def test_recurrence_vs_matrix_200_draws(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(2, 24))
            alpha = rng.uniform(1e-3, 1e3, n)
            beta = rng.uniform(0, 10, n - 1)
            t = build_coupling_matrix(CouplingScheme.spp(), beta, n)
            np.testing.assert_allclose(prior_precisions(alpha, beta),
                                       t @ alpha, rtol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            prior_precisions([1.0, 2.0, 3.0], [1.0])
        with pytest.raises(ValueError):
            prior_precisions([1.0], [])

    def test_accepts_wrapper_types(self):
        field = PrecisionField(np.array([1.0, 2.0, 3.0]))
        coupling = CouplingVector(np.array([1.0, 1.0]))
        np.testing.assert_allclose(prior_precisions(field, coupling), [3.0, 6.0, 5.0])


class TestBuildCouplingMatrix:
    def test_none_is_identity(self):
        np.testing.assert_array_equal(
            build_coupling_matrix(CouplingScheme.none(), None, 4), np.eye(4))

    def test_pc_fixed_shared_offdiagonal(self):
        t = build_coupling_matrix(CouplingScheme.pc_fixed(1.0), None, 3)
        np.testing.assert_array_equal(t, [[1, 1, 0], [1, 1, 1], [0, 1, 1]])

    def test_spp_offdiagonals(self):
        t = build_coupling_matrix(CouplingScheme.spp(), [0.5, 2.0], 3)
        np.testing.assert_array_equal(t, [[1, 0.5, 0], [0.5, 1, 2], [0, 2, 1]])

    def test_exact_symmetry_all_schemes(self):
        """Transposed entries are bitwise equal for every scheme."""
        rng = np.random.default_rng(3)
        for scheme in (CouplingScheme.none(), CouplingScheme.pc_fixed(0.7),
                       CouplingScheme.spp()):
            beta = rng.uniform(0, 3, 9)
            t = build_coupling_matrix(scheme, beta, 10)
            assert np.array_equal(t, t.T)

    def test_dimension_checks(self):
        with pytest.raises(ValueError):
            build_coupling_matrix(CouplingScheme.spp(), [1.0], 4)
        with pytest.raises(ValueError):
            build_coupling_matrix(CouplingScheme.none(), None, 1)


class TestCouplingScheme:
    def test_kinds(self):
        assert CouplingScheme.spp().kind == "spp"
        assert CouplingScheme.none().kind == "none"
        assert CouplingScheme.pc_fixed(2.0).fixed_beta == 2.0

    def test_validation(self):
        with pytest.raises(ValueError):
            CouplingScheme("bogus")
        with pytest.raises(ValueError):
            CouplingScheme.pc_fixed(-1.0)
        with pytest.raises(ValueError):
            CouplingScheme("spp", fixed_beta=1.0)
        with pytest.raises(ValueError):
            CouplingScheme("pc_fixed")


class TestHyperPriors:
    def test_defaults(self):
        h = HyperPriors()
        assert (h.a, h.b, h.g, h.h) == (1e-4, 1e-4, 1e-4, 1e-4)
        assert (h.c, h.d) == (10.0, 1.0)

    def test_c_must_exceed_one(self):
        with pytest.raises(ValueError):
            HyperPriors(c=1.0)
        with pytest.raises(ValueError):
            HyperPriors(c=0.5)
        HyperPriors(c=1.0 + 1e-9)  # strictly greater is fine

    def test_positivity(self):
        for name in "abdgh":
            with pytest.raises(ValueError):
                HyperPriors(**{name: 0.0})
        with pytest.raises(ValueError):
            HyperPriors(a=float("inf"))


class TestPrecisionField:
    def test_bounds(self):
        field = PrecisionField(np.array([1.0, 1e10]), cap=1e10)
        assert len(field) == 2
        with pytest.raises(ValueError):
            PrecisionField(np.array([0.0, 1.0]))
        with pytest.raises(ValueError):
            PrecisionField(np.array([1.0, 2e10]), cap=1e10)

    def test_immutable(self):
        field = PrecisionField(np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            field.alpha[0] = 5.0


class TestCouplingVector:
    def test_nonnegative(self):
        CouplingVector(np.array([0.0, 1.0]))
        with pytest.raises(ValueError):
            CouplingVector(np.array([-0.1]))
        with pytest.raises(ValueError):
            CouplingVector(np.array([np.nan]))


class TestSensingProblem:
    def _mk(self, m=4, n=6):
        rng = np.random.default_rng(1)
        return rng.standard_normal((m, n)), rng.standard_normal(m)

    def test_basic(self):
        phi, y = self._mk()
        prob = SensingProblem(phi=phi, y=y)
        assert prob.m == 4 and prob.n == 6
        assert prob.true_support is None

    def test_support_derived_from_x(self):
        phi, y = self._mk()
        x = np.array([0.0, 1.0, 0.0, -2.0, 0.0, 0.0])
        prob = SensingProblem(phi=phi, y=y, x_true=x)
        assert prob.true_support == frozenset({1, 3})

    def test_support_mismatch_rejected(self):
        phi, y = self._mk()
        x = np.array([0.0, 1.0, 0.0, -2.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            SensingProblem(phi=phi, y=y, x_true=x, true_support=frozenset({1}))

    def test_dimension_and_finiteness(self):
        phi, y = self._mk()
        with pytest.raises(ValueError):
            SensingProblem(phi=phi, y=y[:-1])
        with pytest.raises(ValueError):
            SensingProblem(phi=phi * np.nan, y=y)
        with pytest.raises(ValueError):
            SensingProblem(phi=np.ones((3, 1)), y=np.ones(3))
        with pytest.raises(ValueError):
            SensingProblem(phi=phi, y=y, x_true=np.ones(5))

    def test_arrays_read_only(self):
        phi, y = self._mk()
        prob = SensingProblem(phi=phi, y=y)
        with pytest.raises(ValueError):
            prob.phi[0, 0] = 9.0


class TestSolverState:
    def test_symmetry_enforced(self):
        n = 3
        sigma = np.eye(n)
        sigma[0, 1] = 0.5  # asymmetric
        with pytest.raises(ValueError):
            SolverState(
                alpha=PrecisionField(np.ones(n)),
                beta=CouplingVector(np.ones(n - 1)),
                gamma=1.0, mu=np.zeros(n), sigma=sigma, iteration=0)

    def test_valid_state(self):
        n = 3
        state = SolverState(
            alpha=PrecisionField(np.ones(n)),
            beta=CouplingVector(np.ones(n - 1)),
            gamma=2.0, mu=np.zeros(n), sigma=0.5 * np.eye(n), iteration=7)
        assert state.iteration == 7

    def test_gamma_positive(self):
        n = 2
        with pytest.raises(ValueError):
            SolverState(alpha=PrecisionField(np.ones(n)),
                        beta=CouplingVector(np.ones(n - 1)),
                        gamma=0.0, mu=np.zeros(n), sigma=np.eye(n), iteration=0)
