"""Finite-horizon rollout of a plant under a control sequence.

A :class:`Plant` packs the dynamics ``f``, the running cost ``l`` and the
input bounds behind one small interface so that the policy trainer, the
oracle and the evaluator all roll out the same way.
"""
from typing import Any, Callable, Optional

import numpy as np
import pandas as pd

from core.tensor import ShapeError, Tensor, reshape
from core.vehicles import check_finite_state

CostFn = Callable[[Any, np.ndarray, Any], Tensor]


class Plant:
    """Dynamics, running cost and input bounds for a batch of systems.

    Subclasses choose how a ``(B, n)`` state array and a ``(B, m)`` input
    tensor are represented while they flow through the tape.
    """

    n_state: int
    n_input: int
    bounds: np.ndarray
    dt: float
    state_fields: tuple[str, ...] = ()
    input_fields: tuple[str, ...] = ()

    def make_state(self, x: np.ndarray) -> Any:
        raise NotImplementedError

    def state_array(self, state: Any) -> np.ndarray:
        raise NotImplementedError

    def make_input(self, u: Tensor) -> Any:
        raise NotImplementedError

    def step(self, state: Any, inp: Any) -> Any:
        raise NotImplementedError

    def cost(self, state: Any, ref_row: np.ndarray, inp: Any) -> Tensor:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def rollout(
    x_t,
    U: Tensor,
    refs,
    plant: Plant,
    cost: Optional[CostFn] = None,
) -> tuple[np.ndarray, Tensor]:
    """
    Roll ``plant`` forward from ``x_t`` under ``U`` and sum the running cost.

    V = sum_{i=0}^{N-1} l(x_{t+i}, x^R_{t+i}, u_{t+i}), x_{t+i+1} = f(x_{t+i}, u_{t+i}).
    The initial state enters as a constant, so it contributes no gradient.

    Args:
        x_t:   Initial state, shape (n,) or (B, n).
        U:     Control sequence, shape (N, m) or (B, N, m). May be taped.
        refs:  Reference window, shape (N, 4) or (B, N, 4).
        plant: Dynamics and default cost.
        cost:  Optional running cost overriding ``plant.cost``.

    Returns:
        ``(trajectory, V)``: the visited states, shape (B, N+1, n) (or
        (N+1, n) for a single problem), and V with shape (B,) (or a scalar
        tensor for a single problem).

    Raises:
        ShapeError:     ``U`` and ``refs`` disagree on N or the batch size.
        NonFiniteError: The trajectory left the finite reals.
    """
    single = U.ndim == 2
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    refs = np.asarray(refs, dtype=np.float64)
    if single:
        U = reshape(U, (1,) + U.shape)
        refs = refs[None]
    if U.ndim != 3 or refs.ndim != 3:
        raise ShapeError(f"rollout needs U (B, N, m) and refs (B, N, 4), got {U.shape} and {refs.shape}")
    batch, horizon, _ = U.shape
    if horizon < 1:
        raise ShapeError("rollout needs at least one control step")
    if refs.shape[1] != horizon:
        raise ShapeError(f"U has {horizon} rows but the reference window has {refs.shape[1]}")
    if refs.shape[0] != batch or x.shape[0] != batch:
        raise ShapeError(
            f"Batch sizes differ: x_t {x.shape[0]}, U {batch}, refs {refs.shape[0]}"
        )

    running = cost or plant.cost
    state = plant.make_state(x)
    visited = [plant.state_array(state)]
    total = None
    for i in range(horizon):
        inp = plant.make_input(U[:, i])
        stage = running(state, refs[:, i], inp)
        total = stage if total is None else total + stage
        state = plant.step(state, inp)
        visited.append(plant.state_array(state))

    trajectory = np.stack(visited, axis=1)
    check_finite_state(trajectory)
    if single:
        return trajectory[0], total[0]
    return trajectory, total


def trajectory_frame(
    plant: Plant,
    states: np.ndarray,
    refs: np.ndarray,
    inputs: np.ndarray,
    costs: np.ndarray,
) -> pd.DataFrame:
    """
    One row per step: t, state fields, ref fields, input fields, running cost.

    ``states`` holds one more row than ``inputs``; the final state is logged
    with empty input and cost columns.
    """
    steps = len(inputs)
    frame = pd.DataFrame({"t": np.arange(steps + 1) * plant.dt})
    for j, name in enumerate(plant.state_fields):
        frame[name] = states[: steps + 1, j]
    for j, name in enumerate(("ref_p_x", "ref_p_y", "ref_phi", "ref_v")):
        frame[name] = np.append(refs[:steps, j], np.nan)
    for j, name in enumerate(plant.input_fields):
        frame[name] = np.append(inputs[:, j], np.nan)
    frame["cost"] = np.append(costs[:steps], np.nan)
    return frame
