import itertools
import math

import numpy as np
import pytest

from sympca import theory
from sympca.cli import gen_matrix
from sympca.linalg import eig_all
from sympca.sampler import RngStream
from sympca.sgd import ones_unit

from conftest import random_symmetric


def naive_ebt(a, eps, eta, T):
    # Independent oracle: explicit products over every sample sequence, summed in a loop.
    d = a.shape[0]
    B0 = (1 - eps) * np.eye(d) - a
    total = np.zeros((d, d))
    cells = list(itertools.product(range(d), range(d)))
    for seq in itertools.product(cells, repeat=T):
        F = np.eye(d)
        for i, j in seq:
            At = np.zeros((d, d))
            At[i, j] = d * d * a[i, j]
            F = F @ (np.eye(d) + eta * At)
        total += F.T @ B0 @ F
    return total / len(cells) ** T


class TestTheoremParams:
    def test_frozen_values(self):
        tp = theory.theorem_params(0.1, 2.0, 10)
        assert tp.eta == pytest.approx(1.25e-4, rel=1e-15)
        first, second = tp.thresholds
        assert first == pytest.approx(16000.0, rel=1e-15)
        assert second == pytest.approx(math.log(80) / math.log(1.0005), rel=1e-12)
        assert round(second) == 8766
        assert tp.T == 16001

    def test_bound_frozen(self):
        tp = theory.theorem_params(0.1, 2.0, 10)
        assert tp.T == 16001
        assert theory.theorem_bound(tp) == pytest.approx(-0.0125 * 1.00025**16001, rel=1e-12)
        assert theory.theorem_bound(tp) == pytest.approx(-0.683, abs=1e-3)

    def test_zero_rate_bound(self):
        tp = theory.TheoremParams(0.1, 2.0, 10, 0.0, 100)
        assert theory.theorem_bound(tp) == -0.0125

    def test_monotone_in_eps(self):
        a, b = theory.theorem_params(0.1, 2.0, 10), theory.theorem_params(0.05, 2.0, 10)
        assert b.eta < a.eta and b.T > a.T

    def test_bound_decreases_in_T(self):
        tp = theory.theorem_params(0.1, 2.0, 10)
        later = theory.TheoremParams(tp.eps, tp.p, tp.d, tp.eta, tp.T + 1)
        assert theory.theorem_bound(later) < theory.theorem_bound(tp)

    def test_C_knob(self):
        tp = theory.theorem_params(0.1, 2.0, 10, C=2.0)
        assert tp.eta == pytest.approx(0.1 / (4 * 2 * 2 * 100))

    @pytest.mark.parametrize("args", [(0.0, 2, 10), (1.0, 2, 10), (0.1, 0.5, 10), (0.1, 2, 0)])
    def test_rejects(self, args):
        with pytest.raises(ValueError):
            theory.theorem_params(*args)

    def test_log_space_no_overflow(self):
        tp = theory.TheoremParams(0.1, 2.0, 10, 0.5, 10**6)
        assert theory.theorem_bound(tp) == -math.inf
        assert theory.log_growth(0.5, 10**6) == pytest.approx(10**6 * math.log(2.0))


class TestPropagate:
    def test_T0(self, gaussian10):
        m = theory.propagate_ebt(gaussian10, 0.1, 1e-3, 0)
        np.testing.assert_array_equal(m.value, 0.9 * np.eye(10) - gaussian10.dense)

    @pytest.mark.parametrize("method", ["step", "power"])
    def test_frozen_dynamics(self, gaussian10, method):
        m = theory.propagate_ebt(gaussian10, 0.1, 0.0, 37, method=method)
        np.testing.assert_allclose(m.value, 0.9 * np.eye(10) - gaussian10.dense, atol=1e-15)

    def test_d1_closed_form(self):
        a = np.array([[0.7]])
        for T in range(5):
            expected = (1 + 0.2 * 0.7) ** (2 * T) * (0.9 - 0.7)
            assert theory.propagate_ebt(a, 0.1, 0.2, T).value[0, 0] == pytest.approx(expected, rel=1e-14)
            assert theory.brute_force_ebt(a, 0.1, 0.2, T)[0, 0] == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("d,T", [(2, 1), (2, 3), (3, 2)])
    def test_against_naive_enumeration(self, d, T):
        a = gen_matrix(d, 7).dense
        ref = naive_ebt(a, 0.1, 0.07, T)
        np.testing.assert_allclose(theory.brute_force_ebt(a, 0.1, 0.07, T), ref, atol=1e-13)
        np.testing.assert_allclose(theory.propagate_ebt(a, 0.1, 0.07, T).value, ref, atol=1e-13)

    def test_step_vs_power(self, gaussian10):
        s = theory.propagate_ebt(gaussian10, 0.1, 1e-3, 3000, method="step")
        p = theory.propagate_ebt(gaussian10, 0.1, 1e-3, 3000, method="power")
        np.testing.assert_allclose(p.value, s.value, rtol=1e-10, atol=1e-12 * np.max(np.abs(s.value)))

    def test_symmetric(self, gaussian10):
        for m in theory.iterate_ebt(gaussian10, 0.1, 0.01, 50):
            assert np.array_equal(m.scaled, m.scaled.T)

    def test_long_horizon_stays_finite(self):
        a = gen_matrix(3, 0).dense
        m = theory.propagate_ebt(a, 0.1, 0.5, 4000, method="step")
        assert np.all(np.isfinite(m.scaled)) and m.log_scale > 700
        p = theory.propagate_ebt(a, 0.1, 0.5, 4000, method="power")
        q = m.quadratic_scaled(ones_unit(3)) * math.exp(m.log_scale - p.log_scale)
        assert q == pytest.approx(p.quadratic_scaled(ones_unit(3)), rel=1e-9)

    def test_brute_force_refuses_large(self):
        with pytest.raises(ValueError, match="sequences"):
            theory.brute_force_ebt(np.eye(4), 0.1, 0.1, 6)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            theory.propagate_ebt(np.eye(2), 0.1, 0.1, 1, method="magic")


class TestMonteCarlo:
    def test_zero_rate_exact(self, gaussian10):
        w0 = ones_unit(10)
        mean, se = theory.estimate_evt(gaussian10, w0, 0.1, 0.0, 50, M=100, rng=RngStream(0))
        expected = 0.9 - float(w0 @ gaussian10.dense @ w0)
        assert mean == pytest.approx(expected, abs=1e-14) and se == pytest.approx(0.0, abs=1e-14)

    def test_brackets_brute_force(self):
        a = gen_matrix(2, 1).dense
        w0 = ones_unit(2)
        mean, se = theory.estimate_evt(a, w0, 0.1, 0.05, 3, M=5000, rng=RngStream(2))
        exact = float(w0 @ theory.brute_force_ebt(a, 0.1, 0.05, 3) @ w0)
        assert abs(mean - exact) <= 4 * se

    def test_batch_independent(self):
        a = gen_matrix(4, 1).dense
        w0 = ones_unit(4)
        r1 = theory.estimate_evt(a, w0, 0.1, 0.01, 200, M=120, rng=RngStream(3), batch=7)
        r2 = theory.estimate_evt(a, w0, 0.1, 0.01, 200, M=120, rng=RngStream(3), batch=120)
        assert r1 == r2

    def test_theorem_regime_bound(self):
        A = gen_matrix(10, 3)
        w0 = ones_unit(10)
        p = 2.0 / abs(float(w0 @ eig_all(A).leading))
        tp = theory.theorem_params(0.1, p, 10)
        mean, se = theory.estimate_evt(A, w0, 0.1, tp.eta, tp.T, M=2000, rng=RngStream(0))
        assert mean + 4 * se <= theory.theorem_bound(tp)


class TestEsd:
    def test_scalar(self):
        rep = theory.check_esd(np.array([[0.3]]), np.array([[2.0]]))
        assert rep.satisfied
        np.testing.assert_allclose(theory.esd_enumerate(np.array([[0.3]]), np.array([[2.0]])), [[0.09 * 2.0]])

    def test_diag_example(self):
        out = theory.esd_enumerate(np.diag([1.0, 0.5]), np.eye(2))
        np.testing.assert_allclose(out, np.diag([4.0, 1.0]), atol=1e-15)

    def test_random_7(self, rng):
        assert theory.check_esd(random_symmetric(rng, 7), rng.standard_normal((7, 7))).satisfied


class TestLk:
    def test_frozen_example(self):
        rep = theory.check_lk(0.1, 0.1, 1)
        assert rep.params["s_c"] == pytest.approx(-2.05)
        assert rep.lhs == pytest.approx(0.9, abs=1e-15)
        assert rep.rhs == pytest.approx(6.9, abs=1e-12)
        assert rep.satisfied

    def test_endpoint_negative(self):
        for eta, eps, T in [(0.1, 0.1, 3), (0.01, 0.3, 100)]:
            assert -eps * (1 + 2 * eta) ** T < 0

    def test_mid_example(self):
        assert theory.check_lk(0.01, 0.05, 500).satisfied

    def test_huge_T_scaled(self):
        rep = theory.check_lk(0.5, 0.1, 5000)
        assert rep.satisfied and rep.rhs == math.inf

    def test_rejects(self):
        with pytest.raises(ValueError):
            theory.check_lk(0.0, 0.1, 1)


class TestNormDiag:
    def test_small_rate_limit(self):
        al, be, ga, _ = theory.norm_diag_coefficients(1e-12, 10, 50)
        assert abs(al) < 1e-10 and abs(be) < 1e-10 and ga == pytest.approx(1.0, abs=1e-15)

    def test_theorem_regime_uniform_bound(self):
        tp = theory.theorem_params(0.1, 2.0, 10)
        assert theory.norm_diag_coefficients(tp.eta, 10, tp.T)[3] <= 2.0

    @pytest.mark.parametrize("T", [0, 1, 2, 3, 100])
    def test_gamma_at_least_one(self, T):
        assert theory.norm_diag_coefficients(1e-3, 10, T)[2] >= 1.0

    def test_short_horizons_are_empty_sums(self):
        for T in (0, 1, 2):
            assert theory.norm_diag_coefficients(1e-3, 10, T)[:3] == (0.0, 0.0, 1.0)

    def test_divergent_regime(self):
        with pytest.raises(ValueError, match="diverges"):
            theory.norm_diag_coefficients(0.1, 10, 5)
        with pytest.raises(ValueError):
            theory.uniform_diag_bound(0.1, 10)


class TestNormSystem:
    def test_first_step_holds(self):
        A = gen_matrix(5, 0, "wishart")
        reps = theory.check_norm_system(A, 0.1, 1e-3, 1)
        assert {r.name for r in reps} >= {"dyn_diag", "dyn_1to2", "dyn_op"}
        assert all(r.satisfied for r in reps)

    def test_frozen_equalities(self):
        A = gen_matrix(5, 1, "wishart")
        for r in theory.check_norm_system(A, 0.1, 0.0, 3):
            if r.name.startswith(("dyn", "system")):
                assert r.lhs == pytest.approx(r.rhs, abs=1e-15)

    def test_theorem_regime_200(self):
        A = gen_matrix(5, 2, "wishart")
        w0 = ones_unit(5)
        tp = theory.theorem_params(0.1, 2.0 / abs(float(w0 @ eig_all(A).leading)), 5)
        reps = theory.check_norm_system(A, 0.1, tp.eta, 200)
        assert len(reps) > 200 * 7 and all(r.satisfied for r in reps)

    def test_uniform_diag_bound_needs_nonnegative_spectrum(self):
        # With an indefinite matrix, A_jj < 0 makes ||diag(B_0)|| = 1 - eps - A_jj exceed the
        # uniform bound already at t = 0: the bound implicitly assumes s_j, A_jj in [0, 1].
        A = gen_matrix(5, 0, "gaussian")
        assert np.min(np.diag(A.dense)) < -0.1
        first = [r for r in theory.check_norm_system(A, 0.1, 1e-4, 0) if r.name == "diag_uniform"][0]
        assert first.params["t"] == 0 and not first.satisfied

    def test_diag_coefficients_fail_outside_theorem_regime(self):
        # At larger rates the true diagonal grows like (1 + 2 eta)^t while the coefficients stay
        # bounded, so the combination stops dominating.
        A = gen_matrix(5, 0, "wishart")
        reps = [r for r in theory.check_norm_system(A, 0.1, 0.03, 200, uniform=False) if r.name == "norm_diag"]
        assert not all(r.satisfied for r in reps)


class TestCertify:
    def test_zero_rate_flagged(self, gaussian10):
        w0 = ones_unit(10)
        al = abs(float(w0 @ eig_all(gaussian10).leading))
        rep = theory.certify_theorem(gaussian10, w0, 0.1, 2 / al, eta=0.0, T=10)
        assert rep.params["in_regime"] is False
        assert rep.lhs == pytest.approx(0.9 - float(w0 @ gaussian10.dense @ w0), abs=1e-14)
        assert rep.rhs == pytest.approx(-0.1 / (4 * 2 / al))

    def test_precondition_names_alignment(self, gaussian10):
        with pytest.raises(theory.PreconditionError, match="alignment"):
            theory.certify_theorem(gaussian10, ones_unit(10), 0.1, 1.0)

    def test_requires_normalized(self):
        with pytest.raises(theory.PreconditionError, match="normalized"):
            theory.certify_theorem(np.diag([2.0, 1.0]), np.array([1.0, 0.0]), 0.1, 2.0)

    def test_tiny_instance_cross_check(self):
        a = gen_matrix(2, 3).dense
        for T in range(1, 6):
            np.testing.assert_allclose(theory.propagate_ebt(a, 0.1, 0.01, T).value,
                                       theory.brute_force_ebt(a, 0.1, 0.01, T), atol=1e-13)

    def test_high_alignment_instance(self):
        A = gen_matrix(10, 3)
        w0 = ones_unit(10)
        al = abs(float(w0 @ eig_all(A).leading))
        assert al > 0.6
        rep = theory.certify_theorem(A, w0, 0.1, 2 / al)
        assert rep.satisfied and rep.params["in_regime"] is True


def test_report_slack():
    assert theory.BoundReport.check("x", 1.0 + 1e-13, 1.0).satisfied
    assert not theory.BoundReport.check("x", 1.0 + 1e-11, 1.0).satisfied
    assert theory.BoundReport.check("x", 1.0, 2.0, {"a": 1, "b": 0.5}).params_str() == "a=1;b=0.5"
