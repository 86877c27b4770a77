"""Tests for the finite-horizon oracle."""
import numpy as np
import pytest

from core.config import OracleSettings
from core.oracle import (
    LinearPlant,
    OracleController,
    OracleFailure,
    OracleProblem,
    double_integrator,
    first_order_residual,
    lqr_closed_form,
    solutions_frame,
    solve,
    solve_batch,
)
from core.policy import build_policy
from core.references import SINE
from core.rollout import rollout
from core.tasks import VehicleTask
from core.tensor import constant


def _settings(**kwargs) -> OracleSettings:
    defaults = {"max_iter": 2000, "tol": 1e-8, "restarts": 2}
    defaults.update(kwargs)
    return OracleSettings(**defaults)


# ---------------------------------------------------------------------------
# Linear-quadratic checks
# ---------------------------------------------------------------------------

def test_matches_riccati_when_bounds_are_inactive():
    plant = double_integrator(dt=0.1, bounds=[[-10.0, 10.0]])
    x0 = np.array([1.0, -0.5])
    problem = OracleProblem(x0, plant.null_reference(10), plant, _settings())
    sol = solve(problem)
    exact = lqr_closed_form(plant.A, plant.B, plant.Q, plant.R, 10, x0)
    assert sol.converged
    assert sol.residual < 1e-8
    np.testing.assert_allclose(sol.U, exact, atol=1e-6)
    assert first_order_residual(problem, exact) < 1e-6


def test_active_bounds_scalar_integrator():
    plant = LinearPlant(A=[[1.0]], B=[[1.0]], Q=[[1.0]], R=[[0.1]], bounds=[[-1.0, 1.0]])
    problem = OracleProblem(np.array([5.0]), plant.null_reference(3), plant, _settings())
    sol = solve(problem)
    np.testing.assert_allclose(sol.U[:, 0], [-1.0, -1.0, 0.0], atol=1e-7)
    assert sol.converged
    assert np.all(np.abs(sol.U) <= 1.0)


def test_boxed_double_integrator_is_feasible():
    plant = double_integrator(dt=0.1, r=0.01, bounds=[[-0.5, 0.5]])
    sol = solve(OracleProblem(np.array([5.0, 0.0]), plant.null_reference(10), plant, _settings()))
    assert sol.residual < 1e-8
    assert np.all(sol.U >= -0.5) and np.all(sol.U <= 0.5)
    assert np.sum(np.isclose(sol.U, -0.5)) > 0


def test_cost_history_never_increases():
    plant = double_integrator(dt=0.1)
    sol = solve(OracleProblem(np.array([2.0, 1.0]), plant.null_reference(8), plant, _settings(restarts=0)))
    assert np.all(np.diff(sol.history) <= 1e-12)


def test_riccati_rejects_indefinite_weight():
    plant = double_integrator()
    with pytest.raises(ValueError):
        lqr_closed_form(plant.A, plant.B, plant.Q, -np.eye(1), 5, np.zeros(2))


# ---------------------------------------------------------------------------
# Batches and failures
# ---------------------------------------------------------------------------

def test_batch_matches_individual_solves():
    plant = double_integrator(dt=0.1, bounds=[[-1.0, 1.0]])
    settings = _settings()
    x0s = [np.array([1.0, 0.0]), np.array([-3.0, 1.0]), np.array([0.5, -2.0])]
    problems = [OracleProblem(x, plant.null_reference(6), plant, settings) for x in x0s]
    batch = solve_batch(problems)
    for problem, sol in zip(problems, batch):
        np.testing.assert_allclose(sol.U, solve(problem).U, atol=1e-7)


def test_batch_requires_shared_setup():
    plant = double_integrator()
    with pytest.raises(ValueError):
        solve_batch([
            OracleProblem(np.zeros(2), plant.null_reference(3), plant, _settings()),
            OracleProblem(np.zeros(2), plant.null_reference(4), plant, _settings()),
        ])


def test_empty_reference_window_is_rejected():
    plant = double_integrator()
    with pytest.raises(ValueError):
        OracleProblem(np.zeros(2), np.zeros((0, 4)), plant)


def test_nonfinite_everywhere_raises(config):
    task = VehicleTask(config)
    state = np.array([0.0, 0.0, 0.0, 0.05, 0.0, 0.0])
    refs = task.reference(state[None], np.array([SINE]), 3)[0]
    with pytest.raises(OracleFailure):
        solve(OracleProblem(state, refs, task, _settings(max_iter=5)))


def test_wrong_warm_start_shape_is_rejected():
    plant = double_integrator()
    problem = OracleProblem(np.zeros(2), plant.null_reference(3), plant, _settings(), warm_start=np.zeros(5))
    with pytest.raises(ValueError):
        solve(problem)


# ---------------------------------------------------------------------------
# Plant problems
# ---------------------------------------------------------------------------

def test_oracle_never_loses_to_the_policy(config):
    task = VehicleTask(config)
    policy = build_policy(config, task)
    states, paths = task.reset(np.random.default_rng(3), 4)
    N = 5
    refs = task.reference(states, paths, N)
    U_theta = policy.plan(states, paths, N)
    solutions = solve_batch([
        OracleProblem(states[b], refs[b], task, _settings(max_iter=300, tol=1e-6, restarts=2))
        for b in range(4)
    ])
    _, V_theta = rollout(states, constant(U_theta), refs, task)
    for b, sol in enumerate(solutions):
        assert sol.V <= V_theta.data[b] + 1e-6
        assert np.all(sol.U >= task.bounds[:, 0]) and np.all(sol.U <= task.bounds[:, 1])


def test_controller_warm_starts_and_shifts(config):
    task = VehicleTask(config)
    controller = OracleController(task, _settings(max_iter=50, tol=1e-6, restarts=0))
    state = task.initial_state(SINE)
    first = controller.plan(state[None], np.array([SINE]), 4)
    assert first.shape == (1, 4, 2)
    shifted = OracleController.shift(first[0], 4)
    np.testing.assert_array_equal(shifted[:3], first[0, 1:])
    np.testing.assert_array_equal(shifted[3], first[0, 3])
    assert OracleController.shift(first[0], 6).shape == (6, 2)
    controller.reset()
    assert controller.unconverged == 0


def test_solutions_frame_is_long():
    plant = double_integrator()
    sol = solve(OracleProblem(np.ones(2), plant.null_reference(3), plant, _settings()))
    frame = solutions_frame([sol, sol], state_ids=[7, 8])
    assert len(frame) == 6
    assert set(frame["state_id"]) == {7, 8}
    assert {"u", "V", "residual", "converged"} <= set(frame.columns)
