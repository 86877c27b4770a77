"""Tests for the sampling / learning loop."""
import threading
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest
from scipy.stats import chisquare

from core.checkpoint import load_checkpoint
from core.policy import build_policy
from core.tasks import VehicleTask
from core.tensor import ShapeError
from core.trainer import (
    AdamState,
    ReplayBuffer,
    SimEnv,
    adam_step,
    learn_phase,
    sample_horizon,
    sample_phase,
    train,
    train_mlp,
)
from core.vehicles import clamp_input


# ---------------------------------------------------------------------------
# Replay buffer
# ---------------------------------------------------------------------------

def test_buffer_wraps_at_capacity():
    buffer = ReplayBuffer(3, 2)
    for k in range(5):
        buffer.push(np.array([k, k]), k % 2)
    assert len(buffer) == 3
    assert buffer.inserted == 5
    assert sorted(buffer.states[:, 0].tolist()) == [2.0, 3.0, 4.0]


def test_buffer_sample_and_errors():
    buffer = ReplayBuffer(10, 1)
    with pytest.raises(ValueError):
        buffer.sample(1, np.random.default_rng(0))
    for k in range(4):
        buffer.push(np.array([float(k)]), 1)
    states, paths = buffer.sample(50, np.random.default_rng(0))
    assert states.shape == (50, 1)
    assert set(states[:, 0]) <= {0.0, 1.0, 2.0, 3.0}
    assert np.all(paths == 1)
    with pytest.raises(ValueError):
        ReplayBuffer(0, 1)


def test_buffer_snapshot_restores():
    buffer = ReplayBuffer(4, 2)
    for k in range(3):
        buffer.push(np.array([k, -k]), k)
    other = ReplayBuffer(4, 2)
    other.restore(buffer.snapshot())
    assert len(other) == 3
    np.testing.assert_array_equal(other.states[:3], buffer.states[:3])
    np.testing.assert_array_equal(other.paths[:3], [0, 1, 2])


# ---------------------------------------------------------------------------
# Adam and horizon sampling
# ---------------------------------------------------------------------------

def test_first_adam_step_moves_by_lr_times_sign():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    grads = {"w": np.array([0.3, -4.0, 0.0])}
    state = AdamState.zeros_like(params)
    lr, eps = 0.01, 1e-8
    updated = adam_step(params, grads, state, lr, eps=eps)
    expected = params["w"] - lr * grads["w"] / (np.abs(grads["w"]) + eps)
    np.testing.assert_allclose(updated["w"], expected, rtol=1e-7)
    assert state.step == 1


def test_adam_rejects_mismatched_gradients():
    params = {"w": np.zeros(3)}
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.zeros(4)}, AdamState.zeros_like(params), 0.1)
    with pytest.raises(ShapeError):
        adam_step(params, {}, AdamState.zeros_like(params), 0.1)


def test_horizon_draws_are_uniform():
    rng = np.random.default_rng(0)
    draws = np.array([sample_horizon(rng, 20) for _ in range(10_000)])
    assert draws.min() == 1 and draws.max() == 20
    counts = np.bincount(draws, minlength=21)[1:]
    assert chisquare(counts).pvalue > 0.01


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------

def test_sample_phase_pushes_one_state_per_step(config):
    task = VehicleTask(config)
    policy = build_policy(config, task)
    rng = np.random.default_rng(0)
    buffer = ReplayBuffer(100, task.n_state)
    info = sample_phase(policy, SimEnv(task, rng), config.train, buffer, rng)
    assert len(buffer) == config.train.episode_length
    assert 1 <= info["horizon"] <= config.train.n_max


def test_env_step_clips_inputs(config):
    task = VehicleTask(config)
    env = SimEnv(task, np.random.default_rng(0))
    state, _ = env.reset()
    with patch("core.trainer.clamp_input", wraps=clamp_input) as clamp:
        nxt = env.step(np.array([100.0, 0.0]))
    clamp.assert_called_once()
    assert nxt[3] == pytest.approx(state[3] + 3.0 * task.dt)


def test_learn_phase_lowers_the_batch_loss(config):
    task = VehicleTask(config)
    policy = build_policy(config, task)
    rng = np.random.default_rng(0)
    buffer = ReplayBuffer(100, task.n_state)
    env = SimEnv(task, rng)
    for _ in range(3):
        sample_phase(policy, env, config.train, buffer, rng)
    opt = AdamState.zeros_like(policy.params.tensors)
    before = dict(policy.params.tensors)
    J, N = learn_phase(policy, task, config.train, buffer, opt, rng, horizon=3)
    assert N == 3
    assert np.isfinite(J)
    assert opt.step == 1
    assert any(not np.array_equal(before[k], policy.params.tensors[k]) for k in before)


def test_learn_phase_needs_a_full_minibatch(config):
    task = VehicleTask(config)
    policy = build_policy(config, task)
    buffer = ReplayBuffer(10, task.n_state)
    opt = AdamState.zeros_like(policy.params.tensors)
    with pytest.raises(ValueError):
        learn_phase(policy, task, config.train, buffer, opt, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# Full loop
# ---------------------------------------------------------------------------

def test_train_writes_log_and_checkpoints(config, tmp_path):
    result = train(config, tmp_path)
    log = pd.read_csv(tmp_path / "train_log.csv")
    assert list(log.columns) == ["iteration", "J", "buffer_size", "horizon"]
    assert len(log) == config.train.iterations
    timing = pd.read_csv(tmp_path / "train_timing.csv")
    assert list(timing.columns) == ["iteration", "wall_time"]
    assert timing["wall_time"].is_monotonic_increasing
    assert (tmp_path / "checkpoint.bin").exists()
    assert (tmp_path / "checkpoint_2.bin").exists()
    tensors, meta = load_checkpoint(result.checkpoint)
    assert meta["trainer"]["iteration"] == config.train.iterations
    assert meta["policy"]["kind"] == "transformer"
    assert any(name.startswith("adam.m.") for name in tensors)
    assert "buffer.states" in tensors


def test_training_is_deterministic(config, tmp_path):
    train(config, tmp_path / "a")
    train(config, tmp_path / "b")
    first = (tmp_path / "a" / "train_log.csv").read_bytes()
    assert first == (tmp_path / "b" / "train_log.csv").read_bytes()


def test_resume_reproduces_the_next_losses(config, tmp_path):
    full = train(config, tmp_path / "full").log
    resumed = train(config, tmp_path / "resumed", resume=tmp_path / "full" / "checkpoint_2.bin").log
    np.testing.assert_array_equal(resumed["J"].to_numpy()[2:], full["J"].to_numpy()[2:])
    np.testing.assert_array_equal(resumed["horizon"].to_numpy()[2:], full["horizon"].to_numpy()[2:])


def test_resume_needs_trainer_state(config, tmp_path):
    policy = build_policy(config, VehicleTask(config))
    bare = policy.save(tmp_path / "bare.bin")
    with pytest.raises(ValueError):
        train(config, tmp_path / "run", resume=bare)


def test_mlp_trains_at_its_fixed_horizon(config, tmp_path):
    result = train_mlp(config, tmp_path)
    assert set(result.log["horizon"]) == {config.mlp.horizon}
    assert result.policy.kind == "mlp"


def test_concurrent_mode_runs(config, tmp_path):
    cfg = config.model_copy(update={"train": config.train.model_copy(update={"concurrent": True})})
    result = train(cfg, tmp_path)
    assert len(result.log) == cfg.train.iterations
    assert len(result.buffer) >= cfg.train.minibatch


def test_concurrent_sampler_failure_reaches_the_caller(config, tmp_path):
    cfg = config.model_copy(update={"train": config.train.model_copy(update={"concurrent": True})})
    real_step = SimEnv.step

    def step(self, u):
        if threading.current_thread() is not threading.main_thread():
            raise RuntimeError("simulator crashed")
        return real_step(self, u)

    with patch.object(SimEnv, "step", step):
        with pytest.raises(RuntimeError, match="simulator crashed"):
            train(cfg, tmp_path)
    assert not (tmp_path / "checkpoint.bin").exists()
