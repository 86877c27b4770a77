"""Control tasks: a plant, its cost, its references, its resets and the
feature maps the networks read.

``VehicleTask`` tracks the sinusoid and double-lane-change paths with the
dynamic bicycle model. ``RobotTask`` follows a straight line with the
differential-drive model, optionally with a static obstacle folded into the
state as relative offsets.
"""
from typing import Optional

import numpy as np

from core.config import RunConfig
from core.references import (
    DOUBLE_LANE_CHANGE,
    LINE,
    SINE,
    gen_line_reference,
    path_point,
    reference_window,
)
from core.rollout import Plant
from core.tensor import Tensor
from core.vehicles import (
    RobotInput,
    RobotState,
    VehicleInput,
    VehicleState,
    bicycle_step,
    clearance,
    diffdrive_step,
    running_cost_avoid,
    running_cost_track,
)

N_REF_FEATURES = 5


def _wrap(angle: np.ndarray) -> np.ndarray:
    return np.arctan2(np.sin(angle), np.cos(angle))


def _body_frame(states: np.ndarray, refs: np.ndarray, speed: float) -> list[np.ndarray]:
    """Reference rows relative to the current pose, rotated into the body frame."""
    px, py, phi = states[:, 0:1], states[:, 1:2], states[:, 2:3]
    dx, dy = refs[..., 0] - px, refs[..., 1] - py
    c, s = np.cos(phi), np.sin(phi)
    dphi = _wrap(refs[..., 2] - phi)
    return [
        (c * dx + s * dy) / speed,
        -s * dx + c * dy,
        np.sin(dphi),
        np.cos(dphi) - 1.0,
        refs[..., 3] / speed - 1.0,
    ]


class Task(Plant):
    """A :class:`Plant` plus the references, resets and features of a scenario."""

    name: str
    speed: float
    n_state_features: int
    n_ref_features = N_REF_FEATURES

    def reference(self, states: np.ndarray, paths: np.ndarray, N: int) -> np.ndarray:
        raise NotImplementedError

    def reset(self, rng: np.random.Generator, count: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def lateral_error(self, states: np.ndarray, paths: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def state_features(self, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def ref_features(self, states: np.ndarray, refs: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        return np.stack(_body_frame(states, refs, self.speed), axis=-1)

    def start_index(self, states: np.ndarray) -> np.ndarray:
        """Fractional step index whose reference row sits at each state's p_x."""
        return np.atleast_2d(states)[:, 0] / (self.speed * self.dt)


class VehicleTask(Task):
    name = "vehicle"
    n_state = 6
    n_input = 2
    n_state_features = 5
    state_fields = ("p_x", "p_y", "phi", "v", "v_lat", "omega")
    input_fields = ("a_x", "delta")
    paths = (SINE, DOUBLE_LANE_CHANGE)

    def __init__(self, config: RunConfig):
        self.params = config.bicycle
        self.weights = config.weights
        self.scenario = config.scenario
        self.speed = config.scenario.speed
        self.dt = config.scenario.dt
        self.bounds = np.array([self.params.accel_bounds, self.params.steer_bounds], dtype=np.float64)

    def make_state(self, x: np.ndarray) -> VehicleState:
        return VehicleState.from_array(x)

    def state_array(self, state: VehicleState) -> np.ndarray:
        return state.to_array()

    def make_input(self, u: Tensor) -> VehicleInput:
        return VehicleInput(u[:, 0], u[:, 1])

    def step(self, state: VehicleState, inp: VehicleInput) -> VehicleState:
        return bicycle_step(state, inp, self.dt, self.params)

    def cost(self, state: VehicleState, ref_row: np.ndarray, inp: VehicleInput) -> Tensor:
        return running_cost_track(state, ref_row, inp, self.weights)

    def reference(self, states: np.ndarray, paths: np.ndarray, N: int) -> np.ndarray:
        t0 = self.start_index(states)
        paths = np.broadcast_to(np.asarray(paths), t0.shape)
        out = np.empty((len(t0), N, 4))
        for path in np.unique(paths):
            mask = paths == path
            out[mask] = reference_window(int(path), t0[mask], N, self.scenario)
        return out

    def reset(self, rng: np.random.Generator, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Random point of a random path, perturbed in offset, heading and speed."""
        cfg = self.scenario
        paths = rng.choice(np.array(self.paths), size=count)
        px = rng.uniform(0.0, cfg.path_length, count)
        py = np.empty(count)
        heading = np.empty(count)
        for path in self.paths:
            mask = paths == path
            py[mask], heading[mask] = path_point(path, px[mask], cfg)
        states = np.column_stack([
            px,
            py + rng.uniform(-cfg.reset_lateral, cfg.reset_lateral, count),
            heading + rng.uniform(-cfg.reset_heading, cfg.reset_heading, count),
            self.speed + rng.uniform(-cfg.reset_speed_spread, cfg.reset_speed_spread, count),
            np.zeros(count),
            np.zeros(count),
        ])
        return states, paths

    def initial_state(self, path: int) -> np.ndarray:
        """On the path at p_x = 0, aligned with it, at nominal speed."""
        py, heading = path_point(path, np.zeros(1), self.scenario)
        return np.array([0.0, py[0], heading[0], self.speed, 0.0, 0.0])

    def lateral_error(self, states: np.ndarray, paths: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        paths = np.broadcast_to(np.asarray(paths), (len(states),))
        error = np.empty(len(states))
        for path in np.unique(paths):
            mask = paths == path
            py, _ = path_point(int(path), states[mask, 0], self.scenario)
            error[mask] = np.abs(states[mask, 1] - py)
        return error

    def state_features(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        return np.column_stack([
            np.cos(states[:, 2]),
            np.sin(states[:, 2]),
            states[:, 3] / self.speed - 1.0,
            states[:, 4],
            states[:, 5],
        ])


class RobotTask(Task):
    name = "robot"
    n_input = 2
    n_state_features = 6
    input_fields = ("dv", "domega")
    paths = (LINE,)

    def __init__(self, config: RunConfig):
        cfg = config.robot
        self.robot = cfg
        self.weights = config.weights
        self.frequency = cfg.frequency
        self.speed = cfg.speed
        self.dt = 1.0 / cfg.frequency
        self.obstacle = cfg.obstacle
        self.obstacle_scale = cfg.obstacle_scale
        self.n_state = 7 if cfg.obstacle else 5
        self.state_fields = ("p_x", "p_y", "phi", "v", "omega") + (
            ("obs_dx", "obs_dy") if cfg.obstacle else ()
        )
        self.bounds = np.array([
            [-cfg.dv_rate / cfg.frequency, cfg.dv_rate / cfg.frequency],
            [-cfg.domega_rate / cfg.frequency, cfg.domega_rate / cfg.frequency],
        ])

    def make_state(self, x: np.ndarray) -> RobotState:
        return RobotState.from_array(x)

    def state_array(self, state: RobotState) -> np.ndarray:
        return state.to_array()

    def make_input(self, u: Tensor) -> RobotInput:
        return RobotInput(u[:, 0], u[:, 1])

    def step(self, state: RobotState, inp: RobotInput) -> RobotState:
        return diffdrive_step(state, inp, self.frequency)

    def cost(self, state: RobotState, ref_row: np.ndarray, inp: RobotInput) -> Tensor:
        if state.has_obstacle:
            return running_cost_avoid(state, ref_row, inp, self.weights)
        return running_cost_track(state, ref_row, inp, self.weights)

    def clearance_values(self, states: np.ndarray) -> np.ndarray:
        return clearance(RobotState.from_array(states), self.weights).data

    def reference(self, states: np.ndarray, paths: np.ndarray, N: int) -> np.ndarray:
        return gen_line_reference(self.start_index(states), N, self.speed, self.dt)

    def reset(self, rng: np.random.Generator, count: int) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.robot
        px = rng.uniform(0.0, cfg.path_length, count)
        py = rng.uniform(-cfg.reset_lateral, cfg.reset_lateral, count)
        columns = [
            px,
            py,
            rng.uniform(-cfg.reset_heading, cfg.reset_heading, count),
            self.speed + rng.uniform(-cfg.reset_speed_spread, cfg.reset_speed_spread, count),
            np.zeros(count),
        ]
        if self.obstacle:
            lo, hi = cfg.obstacle_ahead
            # Obstacle on the line ahead, offsets taken relative to the robot.
            ahead = rng.uniform(lo, hi, count)
            jitter = rng.uniform(-cfg.obstacle_jitter, cfg.obstacle_jitter, count)
            columns += [ahead, jitter - py]
        return np.column_stack(columns), np.full(count, LINE)

    def initial_state(self, path: int = LINE, obstacle_ahead: float = 3.0, obstacle_lateral: float = 0.0) -> np.ndarray:
        state = [0.0, 0.0, 0.0, self.speed, 0.0]
        if self.obstacle:
            state += [obstacle_ahead, obstacle_lateral]
        return np.array(state)

    def lateral_error(self, states: np.ndarray, paths: np.ndarray) -> np.ndarray:
        return np.abs(np.atleast_2d(states)[:, 1])

    def state_features(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        phi = states[:, 2]
        c, s = np.cos(phi), np.sin(phi)
        if self.obstacle:
            dx, dy = states[:, 5], states[:, 6]
            obs_x = (c * dx + s * dy) / self.obstacle_scale
            obs_y = (-s * dx + c * dy) / self.obstacle_scale
        else:
            obs_x = obs_y = np.zeros(len(states))
        return np.column_stack([c, s, states[:, 3] / self.speed - 1.0, states[:, 4], obs_x, obs_y])


def make_task(config: RunConfig, kind: Optional[str] = None) -> Task:
    """Task named by ``kind``, or by ``config.policy.task`` when omitted."""
    kind = kind or config.policy.task
    if kind == "vehicle":
        return VehicleTask(config)
    if kind == "robot":
        return RobotTask(config)
    raise ValueError(f"Unknown task {kind!r}")
