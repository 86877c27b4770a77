"""Tests for the Transformer policy and the MLP baseline."""
from unittest.mock import patch

import numpy as np
import pytest

import core.policy as policy_module
from core.gradcheck import grad_check
from core.policy import (
    HorizonMismatchError,
    Policy,
    build_policy,
    load_policy,
    positional_encoding,
    squash,
)
from core.references import SINE
from core.tasks import RobotTask, VehicleTask
from core.tensor import constant
from core.trainer import batch_loss


def _inputs(task, count=3, N=6, seed=0):
    states, paths = task.reset(np.random.default_rng(seed), count)
    return states, paths, task.reference(states, paths, N)


# ---------------------------------------------------------------------------
# Variable horizon
# ---------------------------------------------------------------------------

def test_output_shape_for_every_horizon(config):
    task = VehicleTask(config)
    policy = build_policy(config, task)
    states, paths = task.reset(np.random.default_rng(0), 2)
    for N in range(1, 21):
        U = policy.plan(states, paths, N)
        assert U.shape == (2, N, 2)
        assert np.all(U >= task.bounds[:, 0]) and np.all(U <= task.bounds[:, 1])


def test_single_state_matches_batch(config):
    task = VehicleTask(config)
    policy = build_policy(config, task)
    states, _, refs = _inputs(task)
    batch = policy.forward(states, refs).data
    for b in range(len(states)):
        single = policy.forward(states[b], refs[b])
        assert single.shape == (6, 2)
        np.testing.assert_allclose(single.data, batch[b], atol=1e-10)


def test_one_encoder_pass_per_call(config):
    task = VehicleTask(config)
    policy = build_policy(config, task)
    states, paths = task.reset(np.random.default_rng(1), 4)
    for N in (1, 7, 20):
        with patch("core.policy._encode", wraps=policy_module._encode) as encode:
            policy.plan(states, paths, N)
        assert encode.call_count == 1


def test_first_input_sees_the_last_reference_row(config):
    task = VehicleTask(config)
    policy = build_policy(config, task)
    state = task.initial_state(SINE)
    refs = task.reference(state[None], np.array([SINE]), 20)[0]
    moved = refs.copy()
    moved[-1, 1] += 0.5
    delta = np.abs(policy.forward(state, moved).data[0] - policy.forward(state, refs).data[0])
    assert delta.max() > 1e-9


def test_zero_horizon_is_rejected(config):
    task = VehicleTask(config)
    policy = build_policy(config, task)
    with pytest.raises(ValueError):
        policy.forward(task.initial_state(SINE), np.zeros((0, 4)))


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def test_squash_maps_into_bounds():
    bounds = np.array([[-3.0, 3.0], [-0.5, 1.5]])
    out = squash(constant([[100.0, -100.0], [0.0, 0.0]]), bounds).data
    np.testing.assert_allclose(out, [[3.0, -0.5], [0.0, 0.5]])
    with pytest.raises(ValueError):
        squash(constant([[0.0]]), np.array([[1.0, 1.0]]))


def test_positional_encoding_rows():
    pe = positional_encoding(5, 6)
    assert pe.shape == (5, 6)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1, 0, 1])
    assert not np.allclose(pe[1], pe[2])


def test_initialisation_is_seeded(config):
    task = VehicleTask(config)
    a = build_policy(config, task, seed=3).params.tensors
    b = build_policy(config, task, seed=3).params.tensors
    c = build_policy(config, task, seed=4).params.tensors
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def test_parameters_are_tied_to_the_task(config, robot_config):
    params = build_policy(config, VehicleTask(config)).params
    with pytest.raises(ValueError):
        Policy(params, RobotTask(robot_config))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def test_policy_loss_gradient_matches_finite_differences(config):
    task = VehicleTask(config)
    policy = build_policy(config, task)
    states, paths = task.reset(np.random.default_rng(5), 2)
    report = grad_check(
        lambda w: batch_loss(policy, task, states, paths, 3, w),
        policy.params.tensors, max_entries=2, rng=np.random.default_rng(0),
    )
    assert report.passed, report.errors


def test_robot_policy_runs(robot_config):
    task = RobotTask(robot_config)
    policy = build_policy(robot_config, task)
    states, paths = task.reset(np.random.default_rng(2), 3)
    assert policy.plan(states, paths, 5).shape == (3, 5, 2)


# ---------------------------------------------------------------------------
# MLP baseline and persistence
# ---------------------------------------------------------------------------

def test_mlp_is_fixed_horizon(config):
    task = VehicleTask(config)
    mlp = build_policy(config, task, kind="mlp")
    assert mlp.fixed_horizon == config.mlp.horizon
    states, paths = task.reset(np.random.default_rng(0), 2)
    assert mlp.plan(states, paths, config.mlp.horizon).shape == (2, config.mlp.horizon, 2)
    with pytest.raises(HorizonMismatchError):
        mlp.plan(states, paths, config.mlp.horizon + 1)


def test_checkpoint_round_trip(config, robot_config, tmp_path):
    task = VehicleTask(config)
    for kind in ("transformer", "mlp"):
        policy = build_policy(config, task, kind=kind)
        path = policy.save(tmp_path / f"{kind}.bin")
        restored = load_policy(path, task)
        assert restored.kind == kind
        for name, value in policy.params.tensors.items():
            assert restored.params.tensors[name].tobytes() == value.tobytes()
        states, paths = task.reset(np.random.default_rng(0), 2)
        np.testing.assert_array_equal(restored.plan(states, paths, 4), policy.plan(states, paths, 4))
    with pytest.raises(ValueError):
        load_policy(tmp_path / "transformer.bin", RobotTask(robot_config))


def test_manifest_records_architecture(config):
    policy = build_policy(config, VehicleTask(config))
    manifest = policy.params.manifest()
    assert manifest["kind"] == "transformer"
    assert manifest["N_max"] == config.train.n_max
    assert manifest["n_input"] == 2
    assert "D_u.weight" in manifest["params"]
