"""Reference path generators.

A reference window X^R is an ``(N, 4)`` array of rows
``(p_x^R, p_y^R, phi^R, v^R)`` sampled every ``dt`` seconds. Windows are
indexed by a step index ``t0`` along the path; ``t0`` may be fractional so
that a window can start exactly at a vehicle's longitudinal position
(``t0 = p_x / (speed * dt)``). Passing an array of ``t0`` values returns a
batch of windows with shape ``(B, N, 4)``.
"""
import math
from typing import Union

import numpy as np

from core.config import ScenarioConfig

SINE = 0
DOUBLE_LANE_CHANGE = 1
LINE = 2

PATH_NAMES = {SINE: "sine", DOUBLE_LANE_CHANGE: "double_lane_change", LINE: "line"}

StepIndex = Union[float, np.ndarray]


def _check_horizon(N: int) -> None:
    if N < 1:
        raise ValueError(f"Reference window needs N >= 1, got {N}")


def _stations(t0: StepIndex, N: int, speed: float, dt: float) -> np.ndarray:
    """Longitudinal positions of every row, shape (..., N)."""
    steps = np.asarray(t0, dtype=np.float64)[..., None] + np.arange(N)
    return steps * speed * dt


def _assemble(px: np.ndarray, py: np.ndarray, slope: np.ndarray, speed: float) -> np.ndarray:
    return np.stack([px, py, np.arctan(slope), np.full_like(px, speed)], axis=-1)


# ---------------------------------------------------------------------------
# Path geometry: lateral offset and slope as functions of p_x
# ---------------------------------------------------------------------------

def sine_profile(px: np.ndarray, amplitude: float, wavelength: float) -> tuple[np.ndarray, np.ndarray]:
    k = 2.0 * math.pi / wavelength
    return amplitude * np.sin(k * px), amplitude * k * np.cos(k * px)


def lane_change_profile(
    px: np.ndarray, offset: float, start: float, ramp: float, plateau: float
) -> tuple[np.ndarray, np.ndarray]:
    """
    Smooth out-and-back offset built from two tanh ramps.

    The rise is centred half a ramp after ``start`` and the return half a
    ramp after the plateau ends. ``k = 4 / ramp`` puts 96% of each
    transition inside the ramp length.
    """
    k = 4.0 / ramp
    rise = start + 0.5 * ramp
    fall = rise + 0.5 * ramp + plateau + 0.5 * ramp
    up, down = np.tanh(k * (px - rise)), np.tanh(k * (px - fall))
    py = 0.5 * offset * (up - down)
    slope = 0.5 * offset * k * ((1.0 - up ** 2) - (1.0 - down ** 2))
    return py, slope


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def gen_sine_reference(
    t0: StepIndex,
    N: int,
    speed: float = 5.0,
    dt: float = 0.1,
    amplitude: float = 1.0,
    wavelength: float = 30.0,
) -> np.ndarray:
    """Sinusoidal lane: p_y^R = A sin(2 pi p_x^R / lambda)."""
    _check_horizon(N)
    px = _stations(t0, N, speed, dt)
    py, slope = sine_profile(px, amplitude, wavelength)
    return _assemble(px, py, slope, speed)


def gen_double_lane_change(
    t0: StepIndex,
    N: int,
    speed: float = 5.0,
    dt: float = 0.1,
    offset: float = 1.0,
    start: float = 20.0,
    ramp: float = 10.0,
    plateau: float = 15.0,
) -> np.ndarray:
    """Double lane change: 0 -> W -> 0 with tanh transitions."""
    _check_horizon(N)
    px = _stations(t0, N, speed, dt)
    py, slope = lane_change_profile(px, offset, start, ramp, plateau)
    return _assemble(px, py, slope, speed)


def gen_line_reference(t0: StepIndex, N: int, speed: float = 0.4, dt: float = 0.1) -> np.ndarray:
    """Straight path along the x axis."""
    _check_horizon(N)
    px = _stations(t0, N, speed, dt)
    return _assemble(px, np.zeros_like(px), np.zeros_like(px), speed)


def reference_window(path: int, t0: StepIndex, N: int, scenario: ScenarioConfig) -> np.ndarray:
    """Dispatch on a path id with the scenario's geometry."""
    if path == SINE:
        return gen_sine_reference(
            t0, N, scenario.speed, scenario.dt, scenario.sine_amplitude, scenario.sine_wavelength
        )
    if path == DOUBLE_LANE_CHANGE:
        return gen_double_lane_change(
            t0, N, scenario.speed, scenario.dt,
            scenario.dlc_offset, scenario.dlc_start, scenario.dlc_ramp, scenario.dlc_plateau,
        )
    raise ValueError(f"Unknown vehicle path id {path}")


def path_point(path: int, px: np.ndarray, scenario: ScenarioConfig) -> tuple[np.ndarray, np.ndarray]:
    """Lateral offset and heading of ``path`` at longitudinal positions ``px``."""
    if path == SINE:
        py, slope = sine_profile(px, scenario.sine_amplitude, scenario.sine_wavelength)
    elif path == DOUBLE_LANE_CHANGE:
        py, slope = lane_change_profile(
            px, scenario.dlc_offset, scenario.dlc_start, scenario.dlc_ramp, scenario.dlc_plateau
        )
    else:
        raise ValueError(f"Unknown vehicle path id {path}")
    return py, np.arctan(slope)
