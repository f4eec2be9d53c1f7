"""Control updates, descent monitoring, the solver loop, certificates."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msacontrol import (
    AdjointEnsemble,
    ControlEnsemble,
    DescentFailureError,
    MsaConfig,
    StateEnsemble,
    TimeGrid,
    compute_mu,
    constant_control,
    get_benchmark,
    run_msa,
    scalar_quadratic_problem,
    update_control,
    verify_extended_pontryagin,
)

from test_problem import quadratic_drift_problem


def flat_artifacts(m, n, y=2.0, z=7.0, x=0.0):
    """State and adjoint ensembles with constant entries."""
    states = StateEnsemble(values=np.full((m, n + 1, 1), float(x)))
    adjoint = AdjointEnsemble(
        y_values=np.full((m, n + 1, 1), float(y)),
        z_values=np.full((m, n, 1, 1), float(z)),
    )
    return states, adjoint


def control_free_problem():
    """Costs and dynamics that ignore the action entirely."""
    sp = scalar_quadratic_problem(
        name="control_free",
        horizon=1.0,
        x0=1.0,
        beta=0.3,
        drift_gain=0.0,
        sigma_const=0.5,
        sigma_gain=0.0,
        q=1.0,
        r=0.0,
        q_t=0.5,
        action_points=np.array([-1.0, 0.0, 1.0]),
    )
    return sp.assemble()


class TestControlEnsemble:
    def test_validation(self):
        with pytest.raises(ValueError):
            ControlEnsemble(action_indices=np.zeros(4, dtype=np.int64))
        with pytest.raises(ValueError):
            ControlEnsemble(action_indices=np.zeros((2, 2)))  # floats
        with pytest.raises(ValueError):
            ControlEnsemble(action_indices=np.zeros((2, 2), dtype=np.int64), mode="x")

    def test_deterministic_requires_identical_rows(self):
        idx = np.array([[0, 1], [1, 1]])
        with pytest.raises(ValueError):
            ControlEnsemble(action_indices=idx, mode="deterministic")

    def test_constant_control_defaults_to_centroid(self):
        p = quadratic_drift_problem()
        ctrl = constant_control(p, 3, 4)
        assert np.all(ctrl.action_indices == 1)  # action 0.0 of {-1, 0, 1}


class TestUpdateControl:
    def test_three_action_argmin(self):
        # minimize 2a + a^2/2 over {-1, 0, 1}: the -1 branch wins
        p = quadratic_drift_problem()
        m, n = 4, 2
        grid = TimeGrid(n_steps=n, horizon=1.0)
        states, adjoint = flat_artifacts(m, n, y=2.0, z=7.0)
        prev = constant_control(p, m, n, action_index=1)
        new = update_control(p, grid, states, adjoint, prev, rho=0.0)
        assert np.all(new.action_indices == 0)

    def test_action_free_coefficients_keep_prev(self):
        p = control_free_problem()
        m, n = 5, 3
        grid = TimeGrid(n_steps=n, horizon=1.0)
        states, adjoint = flat_artifacts(m, n, x=1.0)
        prev = constant_control(p, m, n, action_index=2)
        new = update_control(p, grid, states, adjoint, prev, rho=0.0)
        assert np.array_equal(new.action_indices, prev.action_indices)

    def test_large_rho_keeps_prev(self):
        p = quadratic_drift_problem()
        m, n = 4, 2
        grid = TimeGrid(n_steps=n, horizon=1.0)
        states, adjoint = flat_artifacts(m, n, y=2.0)
        prev = constant_control(p, m, n, action_index=2)
        new = update_control(p, grid, states, adjoint, prev, rho=1e12)
        assert np.array_equal(new.action_indices, prev.action_indices)

    def test_negative_rho_rejected(self):
        p = quadratic_drift_problem()
        grid = TimeGrid(n_steps=2, horizon=1.0)
        states, adjoint = flat_artifacts(3, 2)
        prev = constant_control(p, 3, 2)
        with pytest.raises(ValueError):
            update_control(p, grid, states, adjoint, prev, rho=-1.0)

    def test_deterministic_mode_shares_action_per_step(self, rng):
        p = quadratic_drift_problem()
        m, n = 50, 4
        grid = TimeGrid(n_steps=n, horizon=1.0)
        states = StateEnsemble(values=rng.normal(size=(m, n + 1, 1)))
        adjoint = AdjointEnsemble(
            y_values=rng.normal(size=(m, n + 1, 1)),
            z_values=rng.normal(size=(m, n, 1, 1)),
        )
        prev = constant_control(p, m, n, mode="deterministic")
        new = update_control(p, grid, states, adjoint, prev, rho=0.5)
        assert new.mode == "deterministic"
        assert np.all(new.action_indices == new.action_indices[0])

    def test_worker_invariance(self, rng):
        p = quadratic_drift_problem()
        m, n = 101, 5
        grid = TimeGrid(n_steps=n, horizon=1.0)
        states = StateEnsemble(values=rng.normal(size=(m, n + 1, 1)))
        adjoint = AdjointEnsemble(
            y_values=rng.normal(size=(m, n + 1, 1)),
            z_values=rng.normal(size=(m, n, 1, 1)),
        )
        prev = constant_control(p, m, n)
        lone = update_control(p, grid, states, adjoint, prev, rho=0.7, workers=1)
        multi = update_control(p, grid, states, adjoint, prev, rho=0.7, workers=4)
        assert np.array_equal(lone.action_indices, multi.action_indices)
        mu1 = compute_mu(p, grid, states, adjoint, lone, prev, workers=1)
        mu4 = compute_mu(p, grid, states, adjoint, lone, prev, workers=4)
        assert mu1 == mu4


class TestComputeMu:
    def test_identical_controls_zero(self):
        p = quadratic_drift_problem()
        m, n = 6, 3
        grid = TimeGrid(n_steps=n, horizon=1.0)
        states, adjoint = flat_artifacts(m, n)
        ctrl = constant_control(p, m, n)
        assert compute_mu(p, grid, states, adjoint, ctrl, ctrl) == (0.0, 0.0)

    @given(seed=st.integers(0, 10_000), rho=st.sampled_from([0.0, 0.3, 1.0, 16.0]))
    @settings(max_examples=40, deadline=None)
    def test_nonpositive_after_update(self, seed, rho):
        p = quadratic_drift_problem()
        m, n = 40, 4
        grid = TimeGrid(n_steps=n, horizon=1.0)
        rng = np.random.default_rng(seed)
        states = StateEnsemble(values=rng.normal(size=(m, n + 1, 1)))
        adjoint = AdjointEnsemble(
            y_values=rng.normal(size=(m, n + 1, 1)),
            z_values=rng.normal(size=(m, n, 1, 1)),
        )
        prev = ControlEnsemble(
            action_indices=rng.integers(0, 3, size=(m, n)), mode="per_path"
        )
        new = update_control(p, grid, states, adjoint, prev, rho=rho)
        mu, se = compute_mu(p, grid, states, adjoint, new, prev)
        if rho == 0.0:
            # pointwise argmin of H itself: nonpositive without slack
            assert mu <= 0.0
        else:
            assert mu <= max(3.0 * se, 1e-12)


class TestRunMsa:
    def test_control_free_problem_is_one_iteration_fixed_point(self):
        p = control_free_problem()
        cfg = MsaConfig(n_paths=200, n_steps=8)
        control, trace = run_msa(p, cfg)
        assert trace.status == "fixed_point"
        assert trace.n_rows == 1
        assert trace.mus == [0.0]
        assert trace.accepted == [True]
        # the centroid initial guess (action 0.0) is returned unchanged
        assert np.all(control.action_indices == 1)

    def test_trace_is_reproducible(self, lq_bench):
        cfg = MsaConfig(n_paths=400, n_steps=10, max_iterations=3, tol_mu=1e-9)
        a_control, a = run_msa(lq_bench.problem, cfg)
        b_control, b = run_msa(lq_bench.problem, cfg)
        assert a.costs == b.costs
        assert a.mus == b.mus
        assert a.rhos == b.rhos
        assert np.array_equal(a_control.action_indices, b_control.action_indices)

    def test_worker_invariance_full_loop(self, lq_bench):
        cfg = MsaConfig(n_paths=300, n_steps=8, max_iterations=2, tol_mu=1e-9)
        a_control, a = run_msa(lq_bench.problem, cfg, workers=1)
        b_control, b = run_msa(lq_bench.problem, cfg, workers=4)
        assert a.costs == b.costs
        assert a.mus == b.mus
        assert np.array_equal(a_control.action_indices, b_control.action_indices)

    def test_initial_control_shape_checked(self, lq_bench):
        cfg = MsaConfig(n_paths=10, n_steps=5)
        bad = constant_control(lq_bench.problem, 10, 4)
        with pytest.raises(ValueError):
            run_msa(lq_bench.problem, cfg, initial=bad)

    def test_descent_failure_raises_with_trace(self, stress_bench):
        cfg = MsaConfig(
            n_paths=500,
            n_steps=10,
            rho_initial=0.0,
            rho_max=0.0,
            max_iterations=5,
        )
        with pytest.raises(DescentFailureError) as exc:
            run_msa(stress_bench.problem, cfg)
        trace = exc.value.trace
        assert trace.status == "descent_failure"
        assert trace.accepted[-1] is False
        assert trace.n_rows >= 1

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MsaConfig(rho_initial=-1.0)
        with pytest.raises(ValueError):
            MsaConfig(rho_growth=1.0)
        with pytest.raises(ValueError):
            MsaConfig(tol_mu=0.0)
        with pytest.raises(ValueError):
            MsaConfig(control_mode="average")

    def test_accepted_steps_descend_within_noise(self, lq_bench):
        cfg = MsaConfig(n_paths=2000, n_steps=20)
        _, trace = run_msa(lq_bench.problem, cfg)
        costs = [trace.initial_cost] + trace.costs
        ses = [trace.initial_cost_se] + trace.cost_ses
        for i in range(1, len(costs)):
            if trace.accepted[i - 1]:
                slack = 3.0 * (ses[i] + ses[i - 1])
                assert costs[i] <= costs[i - 1] + slack


class TestPontryaginCertificate:
    def test_update_certifies_its_own_argmin(self, rng):
        p = quadratic_drift_problem()
        m, n = 60, 5
        grid = TimeGrid(n_steps=n, horizon=1.0)
        states = StateEnsemble(values=rng.normal(size=(m, n + 1, 1)))
        adjoint = AdjointEnsemble(
            y_values=rng.normal(size=(m, n + 1, 1)),
            z_values=rng.normal(size=(m, n, 1, 1)),
        )
        prev = constant_control(p, m, n)
        new = update_control(p, grid, states, adjoint, prev, rho=0.0)
        report = verify_extended_pontryagin(
            p, grid, states, adjoint, new, rho=0.0, n_samples=400
        )
        assert report.violation_fraction == 0.0
        assert report.worst_gap == 0.0
        assert report.n_samples == 400

    def test_fixed_point_control_has_zero_gap_at_positive_rho(self):
        p = control_free_problem()
        m, n = 40, 4
        grid = TimeGrid(n_steps=n, horizon=1.0)
        states, adjoint = flat_artifacts(m, n, x=1.0)
        ctrl = constant_control(p, m, n)
        fixed = update_control(p, grid, states, adjoint, ctrl, rho=2.0)
        assert np.array_equal(fixed.action_indices, ctrl.action_indices)
        report = verify_extended_pontryagin(
            p, grid, states, adjoint, fixed, rho=2.0, n_samples=200
        )
        assert report.violation_fraction == 0.0
        assert report.worst_gap == 0.0
