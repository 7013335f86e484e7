import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from kinising.em import (EmConfig, LinearSystem, assemble_system, em_fit, expectation_pass,
                         smoothed_l1, solve_row)
from kinising.errors import NumericalError, ValidationError
from kinising.model import IsingModel, build_interval_table, log_likelihood
from kinising.moments import compute_em_moments, pg_mean

from conftest import analytic_gradient, brute_fields, brute_states, sample_instance


def naive_system(traj, model):
    """Normal equations accumulated one flip / interval at a time."""
    n = traj.n_spins
    states = brute_states(traj)
    fields = brute_fields(traj, model)
    dur = np.diff(traj.boundaries)
    A = np.zeros((n, n + 1, n + 1))
    b = np.zeros((n, n + 1))
    for k, i in enumerate(traj.flip_spins):
        x = np.r_[1.0, states[k]]
        A[i] += 4 * pg_mean(1.0, 2 * fields[k, i]) * np.outer(x, x)
        b[i] -= states[k, i] * x
    for k in range(len(states)):
        x = np.r_[1.0, states[k]]
        for i in range(n):
            h, s = fields[k, i], states[k, i]
            rho = dur[k] * model.gamma * np.exp(s * h) / (2 * np.cosh(h))
            A[i] += 4 * pg_mean(rho, 2 * h) * np.outer(x, x)
            b[i] += rho * s * x
    return A, b


class TestAssembly:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_naive_loops(self, seed):
        model, traj = sample_instance(seed, n=4, t_end=10.0, g=0.8)
        table = build_interval_table(traj, model)
        sys_ = assemble_system(table, compute_em_moments(table, model))
        A, b = naive_system(traj, model)
        np.testing.assert_allclose(sys_.A, A, rtol=1e-11, atol=1e-12)
        np.testing.assert_allclose(sys_.b, b, rtol=1e-11, atol=1e-12)

    def test_chunking_invariant(self, small_instance):
        model, traj = small_instance
        ll1, s1 = expectation_pass(traj, model, chunk=7)
        ll2, s2 = expectation_pass(traj, model, chunk=10**6)
        assert ll1 == pytest.approx(ll2, rel=1e-13)
        np.testing.assert_allclose(s1.A, s2.A, rtol=1e-12)
        np.testing.assert_allclose(s1.b, s2.b, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_residual_is_likelihood_gradient(self, seed):
        # the augmentation makes b - A J equal to d lnL / dJ at the expansion point
        model, traj = sample_instance(seed + 5, n=4, t_end=15.0, g=0.8)
        _, system = expectation_pass(traj, model)
        rows = model.rows
        resid = system.b - np.einsum("nij,nj->ni", system.A, rows)
        np.testing.assert_allclose(resid, analytic_gradient(traj, model), rtol=1e-9,
                                   atol=1e-9 * np.abs(system.b).max())

    def test_symmetric_psd(self, small_instance):
        model, traj = small_instance
        _, system = expectation_pass(traj, model)
        np.testing.assert_array_equal(system.A, system.A.transpose(0, 2, 1))
        assert np.all(np.linalg.eigvalsh(system.A) > 0)


class TestSolveRow:
    def test_residual(self, small_instance):
        model, traj = small_instance
        _, system = expectation_pass(traj, model)
        for i in range(traj.n_spins):
            x = solve_row(system, i)
            assert np.linalg.norm(system.A[i] @ x - system.b[i]) <= 1e-8 * np.linalg.norm(
                system.b[i]) + 1e-12

    def test_jitter_rescues_singular(self):
        A = np.zeros((1, 3, 3))
        A[0, :2, :2] = [[2.0, 1.0], [1.0, 2.0]]
        sys_ = LinearSystem(A, np.array([[1.0, 1.0, 0.0]]))
        x = solve_row(sys_, 0, jitter=0.0)
        np.testing.assert_allclose(x[:2], [1 / 3, 1 / 3], rtol=1e-6)
        assert x[2] == 0.0

    def test_indefinite_raises(self):
        A = -np.eye(3)[None]
        with pytest.raises(NumericalError):
            solve_row(LinearSystem(A, np.ones((1, 3))), 0)

    def test_nonfinite_raises(self):
        A = np.eye(3)[None].copy()
        A[0, 1, 1] = np.nan
        with pytest.raises(NumericalError):
            solve_row(LinearSystem(A, np.ones((1, 3))), 0)

    def test_system_add(self):
        a = LinearSystem(np.ones((2, 3, 3)), np.ones((2, 3)))
        s = a + a
        assert np.all(s.A == 2) and np.all(s.b == 2)


class TestEmFit:
    @settings(max_examples=8, deadline=None,
              suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.integers(0, 10**6), st.sampled_from([2, 3, 5]))
    def test_monotone(self, seed, n):
        model, traj = sample_instance(seed, n=n, t_end=200.0 / n, gamma=10.0, g=1.0)
        rep = em_fit(traj, 10.0, EmConfig(max_iters=40))
        assert np.all(np.diff(rep.loglik) >= -1e-9 * abs(rep.loglik[-1]))

    def test_stationary_at_convergence(self):
        model, traj = sample_instance(31, n=3, t_end=200.0, gamma=5.0, g=1.0)
        rep = em_fit(traj, 5.0, EmConfig(tol=1e-13, max_iters=500))
        grad = analytic_gradient(traj, rep.model)
        _, system = expectation_pass(traj, rep.model)
        assert np.abs(grad).max() < 1e-5 * np.abs(system.b).max()

    def test_recovers_couplings(self):
        model, traj = sample_instance(4, n=4, t_end=400.0, gamma=10.0, g=1.0)
        rep = em_fit(traj, 10.0)
        assert rep.converged
        assert np.abs(rep.model.J - model.J).max() < 0.15
        assert rep.loglik[-1] >= log_likelihood(traj, model)

    def test_trace_bookkeeping(self, small_instance):
        _, traj = small_instance
        rep = em_fit(traj, 1.0, EmConfig(max_iters=3, tol=1e-300))
        assert rep.iterations == 3 and not rep.converged
        assert len(rep.loglik) == 4
        assert rep.loglik[-1] == pytest.approx(log_likelihood(traj, rep.model), rel=1e-13)
        assert rep.loglik[0] == pytest.approx(
            log_likelihood(traj, IsingModel.zeros(traj.n_spins, 1.0)))

    def test_warm_start(self, small_instance):
        model, traj = small_instance
        rep = em_fit(traj, 1.0, EmConfig(init=model, max_iters=1))
        assert rep.loglik[0] == pytest.approx(log_likelihood(traj, model))
        with pytest.raises(ValidationError):
            em_fit(traj, 1.0, EmConfig(init=IsingModel.zeros(2)))

    def test_permutation_equivariance(self, small_instance):
        _, traj = small_instance
        perm = np.array([3, 1, 0, 2])
        a = em_fit(traj, 1.0).model
        b = em_fit(traj.relabel(perm), 1.0).model
        np.testing.assert_allclose(b.J, a.relabel(perm).J, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(b.theta, a.theta[perm], rtol=1e-6, atol=1e-9)

    @pytest.mark.parametrize("kw", [dict(max_iters=0), dict(tol=0.0), dict(lam=-1.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValidationError):
            EmConfig(**kw)


class TestL1:
    def test_smoothed_l1(self):
        J = np.array([0.5, -2.0, 1e-9, 0.0])
        expected = 2.5 + (1e-18 / 2e-8 + 0.5e-8) + 0.5e-8
        assert smoothed_l1(J) == pytest.approx(expected, rel=1e-12)
        assert smoothed_l1(J[:2]) == 2.5

    @pytest.mark.parametrize("lam", [1.0, 10.0, 100.0])
    def test_penalized_objective_monotone(self, lam):
        _, traj = sample_instance(6, n=5, t_end=20.0, gamma=10.0, g=1.0)
        rep = em_fit(traj, 10.0, EmConfig(lam=lam, max_iters=60))
        obj = np.array(rep.objective)
        assert np.all(np.diff(obj) >= -1e-9 * abs(obj[-1]))
        pen = np.array(rep.loglik) - obj
        assert np.all(pen >= 0)

    def test_strong_penalty_zeroes_couplings(self):
        _, traj = sample_instance(6, n=4, t_end=20.0, gamma=10.0, g=1.0)
        weak = em_fit(traj, 10.0).model
        strong = em_fit(traj, 10.0, EmConfig(lam=1e4)).model
        assert np.abs(strong.J).max() < 1e-4 * np.abs(weak.J).max()
        # fields are not penalised
        assert np.abs(strong.theta).max() > 0 or np.abs(weak.theta).max() == 0

    def test_shrinkage_grows_with_lambda(self):
        _, traj = sample_instance(8, n=4, t_end=20.0, gamma=10.0, g=1.0)
        norms = [np.abs(em_fit(traj, 10.0, EmConfig(lam=lam)).model.J).sum()
                 for lam in (0.0, 3.0, 30.0)]
        assert norms[0] > norms[1] > norms[2]
