"""End-to-end acceptance checks on the desk profile. Run with ``pytest --runslow``."""
import time

import numpy as np
import pandas as pd
import pytest

from cli.main import main
from core.config import load_run_config
from core.evaluator import accuracy_sweep, closed_loop_eval, latency_bench, obstacle_eval
from core.oracle import OracleController, OracleProblem, solve_batch
from core.policy import build_policy
from core.references import DOUBLE_LANE_CHANGE, SINE
from core.rollout import rollout
from core.tasks import RobotTask, VehicleTask
from core.tensor import constant
from core.trainer import batch_loss, train

pytestmark = pytest.mark.slow

_ROBOT = ["policy.task=robot", "weights.collision_mode=clipped"]


def _desk(*overrides):
    return load_run_config(profile="desk", overrides=["train.log_every=200", *overrides])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    config = _desk()
    result = train(config, tmp_path_factory.mktemp("desk"))
    return config, result


@pytest.fixture(scope="module")
def mlp(tmp_path_factory):
    config = _desk("mlp.horizon=20")
    return train(config, tmp_path_factory.mktemp("mlp"), kind="mlp").policy


@pytest.fixture(scope="module")
def robot(tmp_path_factory):
    # Trained against a wider margin than the one it is checked against.
    config = _desk(*_ROBOT, "weights.collision=50", "weights.r_safe=0.15")
    return train(config, tmp_path_factory.mktemp("robot")).policy


def _sine_states(task, count, seed):
    states, paths = task.reset(np.random.default_rng(seed), 8 * count)
    on_sine = paths == SINE
    return states[on_sine][:count], paths[on_sine][:count]


def _oracle_values(task, states, paths, N, settings):
    refs = task.reference(states, paths, N)
    solutions = solve_batch([OracleProblem(states[b], refs[b], task, settings) for b in range(len(states))])
    return np.array([s.V for s in solutions])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_training_lowers_the_loss(trained):
    _, result = trained
    J = result.log["J"].to_numpy()
    assert np.all(np.isfinite(J))
    assert J[-50:].mean() < J[:50].mean()


def test_training_closes_the_gap_to_the_oracle(trained):
    config, result = trained
    task = VehicleTask(config)
    states, paths = task.reset(np.random.default_rng(0), 32)
    N = 20
    J_star = _oracle_values(task, states, paths, N, config.eval.oracle).mean()
    J_untrained = batch_loss(build_policy(config, task), task, states, paths, N).item()
    J_trained = batch_loss(result.policy, task, states, paths, N).item()
    assert J_trained < J_untrained
    assert J_untrained - J_star >= 10.0 * (J_trained - J_star)


def test_trained_policy_tracks_the_sinusoid(trained):
    config, result = trained
    task = VehicleTask(config)
    run = closed_loop_eval(result.policy, task, SINE, N=20, steps=config.eval.steps)
    oracle = OracleController(task, config.eval.oracle)
    reference = closed_loop_eval(oracle, task, SINE, N=20, steps=config.eval.steps, algorithm="oracle_mpc")
    assert not run.diverged
    assert run.delta_y <= 0.05
    assert run.C <= 2.0 * reference.C


# ---------------------------------------------------------------------------
# Policy properties
# ---------------------------------------------------------------------------

def test_oracle_dominates_the_trained_policy(trained):
    config, result = trained
    task = VehicleTask(config)
    states, paths = _sine_states(task, 50, seed=21)
    assert len(states) == 50
    N = 20
    refs = task.reference(states, paths, N)
    _, V_theta = rollout(states, constant(result.policy.plan(states, paths, N)), refs, task)
    V_star = _oracle_values(task, states, paths, N, config.eval.oracle)
    assert np.all(V_star <= V_theta.data + 1e-6)


def test_every_horizon_is_served_by_one_network(trained):
    config, result = trained
    task = VehicleTask(config)
    states, paths = task.reset(np.random.default_rng(11), 8)
    for N in range(1, config.train.n_max + 1):
        U = result.policy.plan(states, paths, N)
        assert U.shape == (8, N, 2)
        assert np.all(U >= task.bounds[:, 0]) and np.all(U <= task.bounds[:, 1])


@pytest.mark.parametrize("path", [SINE, DOUBLE_LANE_CHANGE])
def test_longer_horizon_lowers_the_closed_loop_cost(trained, path):
    config, result = trained
    task = VehicleTask(config)
    long = closed_loop_eval(result.policy, task, path, N=20, steps=config.eval.steps)
    short = closed_loop_eval(result.policy, task, path, N=5, steps=config.eval.steps)
    assert long.C < short.C


def test_first_input_beats_the_fixed_horizon_mlp(trained, mlp):
    config, result = trained
    task = VehicleTask(config)
    common = {"n_states": 200, "horizons": [20], "mode": "first",
              "failure_threshold": config.eval.oracle_failure_threshold}
    ours = accuracy_sweep(result.policy, task, config.eval.oracle, rng=np.random.default_rng(5), **common)
    theirs = accuracy_sweep(mlp, task, config.eval.oracle, rng=np.random.default_rng(5), algorithm="mlp", **common)
    assert ours.frame["mean"].mean() <= theirs.frame["mean"].mean()


def test_first_input_sees_the_end_of_the_window(trained):
    config, result = trained
    task = VehicleTask(config)
    state = task.initial_state(SINE)
    refs = task.reference(state[None], np.array([SINE]), 20)[0]
    moved = refs.copy()
    moved[-1, 1] += 1e-3
    for policy in (build_policy(config, task), result.policy):
        delta = np.abs(policy.forward(state, moved).data[0] - policy.forward(state, refs).data[0])
        assert delta.max() > 1e-9


def test_latency_is_flat_in_the_horizon(trained):
    config, result = trained
    frame = latency_bench(result.policy, VehicleTask(config), [1, 20], repetitions=200)
    median = frame.set_index("N")["median_s"]
    assert median[20] <= 3.0 * median[1]


def test_policy_is_faster_than_the_oracle(trained):
    config, result = trained
    task = VehicleTask(config)
    state = task.initial_state(SINE)[None]
    paths = np.array([SINE])
    oracle = OracleController(task, config.eval.oracle, warm_start=False)

    def median_time(controller, repetitions):
        times = []
        for _ in range(repetitions):
            start = time.perf_counter()
            controller.plan(state, paths, 20)
            times.append(time.perf_counter() - start)
        return float(np.median(times))

    assert median_time(result.policy, 20) < median_time(oracle, 3)


# ---------------------------------------------------------------------------
# Obstacle avoidance
# ---------------------------------------------------------------------------

def test_robot_keeps_clear_of_an_obstacle_on_its_path(robot):
    task = RobotTask(_desk(*_ROBOT))
    report = obstacle_eval(robot, task, obstacle_ahead=3.0, obstacle_lateral=0.0, N=20, steps=170)
    assert report.steps == 170
    assert report.min_clearance >= 0.0
    assert not report.collision


# ---------------------------------------------------------------------------
# Validation commands
# ---------------------------------------------------------------------------

def test_gradcheck_command_over_ten_seeds(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path), "--log-level", "WARNING"]) == 0
    frame = pd.read_csv(tmp_path / "gradcheck.csv")
    assert frame["seed"].nunique() == 10
    assert frame["max_rel_error"].max() < 1e-4


def test_oracle_command_on_defaults(tmp_path):
    assert main(["oracle", "--out", str(tmp_path), "--log-level", "WARNING"]) == 0
