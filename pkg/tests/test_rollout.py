"""Tests for the shared rollout and its trajectory table."""
import numpy as np
import pytest

from core.oracle import double_integrator
from core.rollout import rollout, trajectory_frame
from core.tasks import VehicleTask
from core.tensor import NonFiniteError, ShapeError, Tape, constant, tsum


def test_single_rollout_of_linear_plant():
    plant = double_integrator(dt=0.1, q=1.0, r=1.0)
    U = constant(np.array([[1.0], [0.0]]))
    trajectory, V = rollout(np.array([1.0, 0.0]), U, plant.null_reference(2), plant)
    assert trajectory.shape == (3, 2)
    np.testing.assert_allclose(trajectory[1], [1.005, 0.1])
    # stage 0: |x0|^2 + u0^2, stage 1: |x1|^2
    assert V.item() == pytest.approx(1.0 + 1.0 + 1.005 ** 2 + 0.01)


def test_batched_rollout_matches_single(config):
    task = VehicleTask(config)
    rng = np.random.default_rng(0)
    states, paths = task.reset(rng, 3)
    refs = task.reference(states, paths, 4)
    U = rng.uniform(task.bounds[:, 0], task.bounds[:, 1], (3, 4, 2))
    trajectory, V = rollout(states, constant(U), refs, task)
    assert trajectory.shape == (3, 5, 6)
    assert V.shape == (3,)
    for b in range(3):
        single_traj, single_V = rollout(states[b], constant(U[b]), refs[b], task)
        np.testing.assert_allclose(single_traj, trajectory[b])
        assert single_V.item() == pytest.approx(V.data[b])


def test_rollout_gradient_flows_to_every_input(config):
    task = VehicleTask(config)
    states, paths = task.reset(np.random.default_rng(1), 2)
    refs = task.reference(states, paths, 3)
    tape = Tape()
    U = tape.watch(np.full((2, 3, 2), 0.05))
    _, V = rollout(states, U, refs, task)
    tape.backward(tsum(V))
    grad = tape.gradient(U)
    assert grad.shape == (2, 3, 2)
    assert np.all(np.abs(grad[:, 0, :]) > 0)


def test_horizon_and_batch_mismatch_raise(config):
    task = VehicleTask(config)
    states, paths = task.reset(np.random.default_rng(2), 2)
    refs = task.reference(states, paths, 3)
    with pytest.raises(ShapeError):
        rollout(states, constant(np.zeros((2, 4, 2))), refs, task)
    with pytest.raises(ShapeError):
        rollout(states, constant(np.zeros((3, 3, 2))), np.concatenate([refs, refs[:1]]), task)


def test_divergent_plant_raises():
    plant = double_integrator(dt=1.0)
    plant.A = np.array([[1e200, 0.0], [0.0, 1.0]])
    with pytest.raises(NonFiniteError):
        rollout(np.array([1e200, 0.0]), constant(np.zeros((2, 1))), plant.null_reference(2), plant)


def test_trajectory_frame_columns(config):
    task = VehicleTask(config)
    states = np.tile(task.initial_state(0), (3, 1))
    refs = np.zeros((2, 4))
    frame = trajectory_frame(task, states, refs, np.ones((2, 2)), np.array([1.0, 2.0]))
    assert list(frame.columns) == ["t", *task.state_fields, "ref_p_x", "ref_p_y", "ref_phi", "ref_v",
                                   *task.input_fields, "cost"]
    assert len(frame) == 3
    assert frame["t"].tolist() == pytest.approx([0.0, 0.1, 0.2])
    assert np.isnan(frame["cost"].iloc[-1])
