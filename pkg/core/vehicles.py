"""Differentiable plant models and running costs.

States and inputs are dataclasses of column tensors: each field holds a
``(B,)`` tensor so a whole batch of vehicles steps through one set of tape
ops. ``from_array`` / ``to_array`` convert to and from ``(B, n)`` arrays.
"""
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from core.config import BicycleParams, CostWeights
from core.tensor import (
    NonFiniteError,
    Tensor,
    atan2,
    cos,
    is_tolerant,
    relu,
    sin,
    sqrt,
    square,
)


class VelocityFloorError(ValueError):
    """Longitudinal velocity fell below the bicycle model's guard floor."""


class _Columns:
    """Shared conversions for the state and input dataclasses."""

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_array(cls, values) -> "_Columns":
        arr = np.atleast_2d(np.asarray(values, dtype=np.float64))
        names = cls.names()
        if arr.shape[-1] < len(names):
            raise ValueError(f"{cls.__name__} needs {len(names)} columns, got {arr.shape[-1]}")
        return cls(*(Tensor(arr[:, i]) for i in range(len(names))))

    def columns(self) -> list[Tensor]:
        return [getattr(self, name) for name in self.names()]

    def to_array(self) -> np.ndarray:
        return np.stack([c.data for c in self.columns()], axis=-1)


@dataclass(frozen=True)
class VehicleState(_Columns):
    p_x: Tensor
    p_y: Tensor
    phi: Tensor
    v: Tensor
    v_lat: Tensor
    omega: Tensor


@dataclass(frozen=True)
class VehicleInput(_Columns):
    a_x: Tensor
    delta: Tensor


@dataclass(frozen=True)
class RobotState(_Columns):
    p_x: Tensor
    p_y: Tensor
    phi: Tensor
    v: Tensor
    omega: Tensor
    obs_dx: Optional[Tensor] = None
    obs_dy: Optional[Tensor] = None

    @classmethod
    def from_array(cls, values) -> "RobotState":
        arr = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if arr.shape[-1] not in (5, 7):
            raise ValueError(f"RobotState needs 5 or 7 columns, got {arr.shape[-1]}")
        return cls(*(Tensor(arr[:, i]) for i in range(arr.shape[-1])))

    def columns(self) -> list[Tensor]:
        return [c for c in super().columns() if c is not None]

    @property
    def has_obstacle(self) -> bool:
        return self.obs_dx is not None


@dataclass(frozen=True)
class RobotInput(_Columns):
    dv: Tensor
    domega: Tensor


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

def _guard_velocity(v: Tensor, floor: float) -> Tensor:
    below = v.data < floor
    if not np.any(below):
        return v
    if is_tolerant() and v.tape is None:
        return Tensor(np.where(below, np.nan, v.data))
    raise VelocityFloorError(
        f"Longitudinal velocity {float(v.data.min()):.4f} m/s is below the floor {floor} m/s"
    )


def bicycle_step(state: VehicleState, inp: VehicleInput, dt: float, params: BicycleParams) -> VehicleState:
    """
    One step of the discrete dynamic bicycle model, implicit in the lateral
    velocity and yaw rate so the update stays stable at low speed.

    Raises:
        VelocityFloorError: Any ``v`` below ``params.v_floor``.
        NonFiniteError:     The update produced NaN or Inf.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    m, iz = params.mass, params.yaw_inertia
    lf, lr, kf, kr = params.lf, params.lr, params.kf, params.kr
    v = _guard_velocity(state.v, params.v_floor)

    c, s = cos(state.phi), sin(state.phi)
    lever = lf * kf - lr * kr

    p_x = state.p_x + (v * c - state.v_lat * s) * dt
    p_y = state.p_y + (v * s + state.v_lat * c) * dt
    phi = state.phi + state.omega * dt
    v_next = v + inp.a_x * dt

    v_lat = (
        v * state.v_lat * m
        + state.omega * (dt * lever)
        - inp.delta * v * (dt * kf)
        - v * v * state.omega * (dt * m)
    ) / (v * m - dt * (kf + kr))
    omega = (
        v * state.omega * iz
        + state.v_lat * (dt * lever)
        - inp.delta * v * (dt * lf * kf)
    ) / (v * iz - dt * (lf * lf * kf + lr * lr * kr))

    return VehicleState(p_x, p_y, phi, v_next, v_lat, omega)


def diffdrive_step(state: RobotState, inp: RobotInput, f: float) -> RobotState:
    """Differential-drive kinematics with incremental velocity inputs."""
    if f <= 0:
        raise ValueError(f"Control frequency must be positive, got {f}")
    dx = state.v * cos(state.phi) / f
    dy = state.v * sin(state.phi) / f
    obs_dx = obs_dy = None
    if state.has_obstacle:
        # Static obstacle: the offset shrinks by exactly the ego displacement.
        obs_dx = state.obs_dx - dx
        obs_dy = state.obs_dy - dy
    return RobotState(
        state.p_x + dx,
        state.p_y + dy,
        state.phi + state.omega / f,
        state.v + inp.dv,
        state.omega + inp.domega,
        obs_dx,
        obs_dy,
    )


def clamp_input(raw, bounds) -> np.ndarray:
    """Clip the last axis of ``raw`` to per-dimension ``(lo, hi)`` bounds."""
    bounds = np.asarray(bounds, dtype=np.float64)
    return np.clip(np.asarray(raw, dtype=np.float64), bounds[:, 0], bounds[:, 1])


def check_finite_state(values: np.ndarray) -> None:
    if is_tolerant():
        return
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("State contains NaN or Inf")


# ---------------------------------------------------------------------------
# Running costs
# ---------------------------------------------------------------------------

def _ref_columns(ref_row) -> list[np.ndarray]:
    ref = np.atleast_2d(np.asarray(ref_row, dtype=np.float64))
    return [ref[:, i] for i in range(4)]


def wrapped_difference(angle: Tensor, reference) -> Tensor:
    """Heading error in (-pi, pi] via atan2(sin, cos)."""
    diff = angle - reference
    return atan2(sin(diff), cos(diff))


def running_cost_track(state, ref_row, inp, weights: CostWeights) -> Tensor:
    """
    Tracking cost with speed, yaw-rate and effort regularisation.

    ``state`` needs ``p_x, p_y, phi, v, omega``; ``inp`` is any two-column
    input (a_x/delta for the car, dv/domega for the robot).
    """
    px_ref, py_ref, phi_ref, v_ref = _ref_columns(ref_row)
    u0, u1 = inp.columns()
    return (
        square(state.p_x - px_ref) * weights.px
        + square(state.p_y - py_ref) * weights.py
        + square(wrapped_difference(state.phi, phi_ref)) * weights.phi
        + square(state.v - v_ref) * weights.v_error
        + square(state.v) * weights.v
        + square(state.omega) * weights.omega
        + square(u0) * weights.u0
        + square(u1) * weights.u1
    )


def clearance(state: RobotState, weights: CostWeights) -> Tensor:
    """Centre distance to the obstacle minus both radii and the safety margin."""
    if not state.has_obstacle:
        raise ValueError("Clearance needs a state with obstacle offsets")
    distance = sqrt(square(state.obs_dx) + square(state.obs_dy))
    return distance - (weights.r_ego + weights.r_obstacle + weights.r_safe)


def running_cost_avoid(state: RobotState, ref_row, inp, weights: CostWeights) -> Tensor:
    """Tracking cost plus the clearance term, as written or clipped."""
    track = running_cost_track(state, ref_row, inp, weights)
    l_c = clearance(state, weights)
    if weights.collision_mode == "clipped":
        return track + square(relu(-l_c)) * weights.collision
    return track - square(l_c) * weights.collision
