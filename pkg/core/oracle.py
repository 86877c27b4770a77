"""Finite-horizon optimal control oracle.

Minimises the rollout cost V(U) over a box of inputs with projected
L-BFGS and a monotone Armijo backtracking search along the projection arc.
Gradients come from the same tape the policy trains through. Every problem
is solved from the zero sequence, ``restarts`` uniform random sequences and
an optional warm start; all problems and starts of one call advance together
as a single batch, each with its own step size, memory and stopping state.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import cho_factor, cho_solve

from core.config import OracleSettings
from core.rollout import CostFn, Plant, rollout
from core.tensor import Tape, Tensor, constant, matmul, multiply, nonfinite_tolerant, tsum

_log = logging.getLogger(__name__)

_ROUNDING = 16 * np.finfo(np.float64).eps


class OracleFailure(RuntimeError):
    """No start produced a finite cost, or too many solves failed."""


@dataclass
class OracleProblem:
    x0: np.ndarray
    refs: np.ndarray
    plant: Plant
    settings: OracleSettings = field(default_factory=OracleSettings)
    bounds: Optional[np.ndarray] = None
    cost: Optional[CostFn] = None
    warm_start: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.refs = np.asarray(self.refs, dtype=np.float64)
        if self.refs.ndim != 2 or len(self.refs) < 1:
            raise ValueError(f"OracleProblem needs a reference window of N >= 1 rows, got {self.refs.shape}")
        box = self.input_bounds
        if np.any(box[:, 1] < box[:, 0]):
            raise ValueError(f"Inconsistent input bounds {box.tolist()}")

    @property
    def N(self) -> int:
        return len(self.refs)

    @property
    def input_bounds(self) -> np.ndarray:
        return np.asarray(self.plant.bounds if self.bounds is None else self.bounds, dtype=np.float64)


@dataclass
class OracleSolution:
    U: np.ndarray
    V: float
    residual: float
    iterations: int
    converged: bool
    history: np.ndarray = field(default_factory=lambda: np.zeros(0))


# ---------------------------------------------------------------------------
# Private helpers
# ---------------------------------------------------------------------------

class _Objective:
    """Batched V(U) and dV/dU for fixed initial states and references."""

    def __init__(self, plant: Plant, cost: Optional[CostFn], x0: np.ndarray, refs: np.ndarray, shape):
        self.plant = plant
        self.cost = cost
        self.x0 = x0
        self.refs = refs
        self.shape = shape

    def _sequence(self, U: np.ndarray) -> np.ndarray:
        return U.reshape((len(U),) + self.shape)

    def values(self, U: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Costs with every non-finite rollout mapped to +inf."""
        with nonfinite_tolerant(), np.errstate(all="ignore"):
            _, V = rollout(self.x0[idx], constant(self._sequence(U)), self.refs[idx], self.plant, self.cost)
        return np.where(np.isfinite(V.data), V.data, np.inf)

    def value_and_grad(self, U: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        tape = Tape()
        u = tape.watch(self._sequence(U))
        _, V = rollout(self.x0[idx], u, self.refs[idx], self.plant, self.cost)
        tape.backward(tsum(V))
        return V.data.copy(), tape.gradient(u).reshape(len(U), -1)


def _free(U: np.ndarray, g: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Variables not pinned at a bound by a gradient pushing outward."""
    return ~(((U <= lo) & (g > 0)) | ((U >= hi) & (g < 0)))


def _projected_gradient(U: np.ndarray, g: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return g * _free(U, g, lo, hi)


def _direction(g: np.ndarray, free: np.ndarray, S: np.ndarray, Y: np.ndarray, count: np.ndarray) -> np.ndarray:
    """Two-loop L-BFGS restricted to the free variables; newest pair at index 0."""
    mask = free.astype(np.float64)
    q = g * mask
    Sf, Yf = S * mask[:, None, :], Y * mask[:, None, :]
    memory = S.shape[1]
    sy = np.sum(Sf * Yf, axis=2)
    usable = (np.arange(memory)[None, :] < count[:, None]) & (sy > 1e-12)
    rho = np.where(usable, 1.0 / np.where(usable, sy, 1.0), 0.0)

    alpha = np.zeros((len(g), memory))
    for i in range(memory):
        alpha[:, i] = rho[:, i] * np.sum(Sf[:, i] * q, axis=1)
        q = q - alpha[:, i, None] * Yf[:, i]

    gnorm = np.linalg.norm(g * mask, axis=1)
    gamma = 1.0 / np.maximum(gnorm, 1.0)
    if memory:
        yy = np.sum(Yf[:, 0] ** 2, axis=1)
        scaled = usable[:, 0] & (yy > 0)
        gamma = np.where(scaled, sy[:, 0] / np.where(scaled, yy, 1.0), gamma)
    r = gamma[:, None] * q

    for i in reversed(range(memory)):
        beta = rho[:, i] * np.sum(Yf[:, i] * r, axis=1)
        r = r + Sf[:, i] * (alpha[:, i] - beta)[:, None]
    return -r * mask


def _remember(S, Y, count, rows: np.ndarray, s: np.ndarray, y: np.ndarray) -> None:
    memory = S.shape[1]
    if memory == 0:
        return
    keep = np.sum(s * y, axis=1) > 1e-12
    rows, s, y = rows[keep], s[keep], y[keep]
    S[rows] = np.roll(S[rows], 1, axis=1)
    Y[rows] = np.roll(Y[rows], 1, axis=1)
    S[rows, 0], Y[rows, 0] = s, y
    count[rows] = np.minimum(count[rows] + 1, memory)


def _check_batch(problems: Sequence[OracleProblem]) -> None:
    first = problems[0]
    for p in problems[1:]:
        if p.plant is not first.plant or p.cost is not first.cost or p.settings != first.settings:
            raise ValueError("Problems in one batch must share plant, cost and settings")
        if p.N != first.N or not np.array_equal(p.input_bounds, first.input_bounds):
            raise ValueError("Problems in one batch must share horizon and input bounds")


def _starts(problem: OracleProblem, lo: np.ndarray, hi: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
    starts = [np.clip(np.zeros_like(lo), lo, hi)]
    starts += [rng.uniform(lo, hi) for _ in range(problem.settings.restarts)]
    if problem.warm_start is not None:
        warm = np.asarray(problem.warm_start, dtype=np.float64).reshape(-1)
        if warm.shape != lo.shape:
            raise ValueError(f"Warm start has {warm.size} entries, expected {lo.size}")
        starts.append(np.clip(warm, lo, hi))
    return starts


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def solve_batch(problems: Sequence[OracleProblem]) -> list[OracleSolution]:
    """
    Solve many problems that share plant, horizon, bounds and settings.

    Returns:
        One :class:`OracleSolution` per problem: the best start by cost.
        Problems that exhaust ``max_iter`` come back with ``converged=False``.

    Raises:
        OracleFailure: Some problem has a non-finite cost at every start.
    """
    if not problems:
        return []
    _check_batch(problems)
    first = problems[0]
    settings = first.settings
    box = first.input_bounds
    shape = (first.N, len(box))
    lo = np.broadcast_to(box[:, 0], shape).reshape(-1)
    hi = np.broadcast_to(box[:, 1], shape).reshape(-1)
    rng = np.random.default_rng(settings.seed)

    owner, U0 = [], []
    for k, problem in enumerate(problems):
        starts = _starts(problem, lo, hi, rng)
        owner += [k] * len(starts)
        U0 += starts
    owner = np.array(owner)
    U = np.array(U0)
    objective = _Objective(
        first.plant,
        first.cost,
        np.stack([problems[k].x0 for k in owner]),
        np.stack([problems[k].refs for k in owner]),
        shape,
    )
    everything = np.arange(len(U))

    f = objective.values(U, everything)
    alive = np.isfinite(f)
    for k in np.unique(owner[~alive]):
        _log.warning("Oracle problem %d: %d start(s) dropped for a non-finite cost",
                     k, int(np.sum(~alive & (owner == k))))
    hopeless = [k for k in range(len(problems)) if not alive[owner == k].any()]
    if hopeless:
        raise OracleFailure(f"Non-finite cost at every start for problem(s) {hopeless}")

    g = np.zeros_like(U)
    live = everything[alive]
    f[live], g[live] = objective.value_and_grad(U[live], live)
    residual = np.full(len(U), np.inf)
    residual[live] = np.linalg.norm(_projected_gradient(U[live], g[live], lo, hi), axis=1)

    active = alive & (residual >= settings.tol)
    iterations = np.zeros(len(U), dtype=int)
    S = np.zeros((len(U), settings.memory, U.shape[1]))
    Y = np.zeros_like(S)
    count = np.zeros(len(U), dtype=int)
    history = [f.copy()]

    for sweep in range(settings.max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        u, gi, fi = U[idx], g[idx], f[idx]
        free = _free(u, gi, lo, hi)
        d = _direction(gi, free, S[idx], Y[idx], count[idx])
        uphill = np.sum(gi * d, axis=1) >= 0
        d[uphill] = -(gi * free)[uphill]

        step = np.ones(len(idx))
        accepted = np.zeros(len(idx), dtype=bool)
        new_u = u.copy()
        pending = np.arange(len(idx))
        for _ in range(settings.max_backtracks):
            trial = np.clip(u[pending] + step[pending, None] * d[pending], lo, hi)
            ft = objective.values(trial, idx[pending])
            decrease = np.sum(gi[pending] * (trial - u[pending]), axis=1)
            # Allow for rounding in V once the true decrease drops below a few ulps.
            slack = _ROUNDING * np.abs(fi[pending])
            ok = (
                np.isfinite(ft)
                & (ft <= fi[pending] + slack)
                & (ft <= fi[pending] + settings.armijo * decrease + slack)
            )
            new_u[pending[ok]] = trial[ok]
            accepted[pending[ok]] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
            step[pending] *= 0.5

        failed = idx[~accepted]
        if failed.size:
            # A failed quasi-Newton step retries once as projected gradient.
            had_memory = count[failed] > 0
            retry, give_up = failed[had_memory], failed[~had_memory]
            count[retry] = 0
            S[retry] = 0.0
            Y[retry] = 0.0
            active[give_up] = False
            _log.debug("Oracle sweep %d: %d line search failure(s)", sweep, failed.size)

        moved = idx[accepted]
        if moved.size:
            f_new, g_new = objective.value_and_grad(new_u[accepted], moved)
            s, y = new_u[accepted] - U[moved], g_new - g[moved]
            U[moved], f[moved], g[moved] = new_u[accepted], f_new, g_new
            _remember(S, Y, count, moved, s, y)
            iterations[moved] += 1
            residual[moved] = np.linalg.norm(_projected_gradient(U[moved], g[moved], lo, hi), axis=1)
            done = residual[moved] < settings.tol
            stalled = np.linalg.norm(s, axis=1) <= 1e-15 * (1.0 + np.linalg.norm(U[moved], axis=1))
            active[moved[done | stalled]] = False
        history.append(f.copy())

    history = np.stack(history)
    if active.any():
        _log.debug("Oracle: %d start(s) hit the iteration budget of %d", int(active.sum()), settings.max_iter)

    solutions = []
    for k in range(len(problems)):
        rows = np.flatnonzero(owner == k)
        best = rows[np.argmin(f[rows])]
        converged = bool(residual[best] < settings.tol)
        if not converged:
            _log.debug("Oracle problem %d not converged: residual %.3e after %d iterations",
                       k, residual[best], iterations[best])
        solutions.append(OracleSolution(
            U=U[best].reshape(shape),
            V=float(f[best]),
            residual=float(residual[best]),
            iterations=int(iterations[best]),
            converged=converged,
            history=history[:, best],
        ))
    return solutions


def solve(problem: OracleProblem) -> OracleSolution:
    """Single-problem form of :func:`solve_batch`."""
    return solve_batch([problem])[0]


def first_order_residual(problem: OracleProblem, U) -> float:
    """Norm of the gradient with outward-pushing components at active bounds zeroed."""
    box = problem.input_bounds
    shape = (problem.N, len(box))
    lo = np.broadcast_to(box[:, 0], shape).reshape(1, -1)
    hi = np.broadcast_to(box[:, 1], shape).reshape(1, -1)
    flat = np.asarray(U, dtype=np.float64).reshape(1, -1)
    objective = _Objective(problem.plant, problem.cost, problem.x0[None], problem.refs[None], shape)
    _, g = objective.value_and_grad(flat, np.array([0]))
    return float(np.linalg.norm(_projected_gradient(flat, g, lo, hi)))


def solutions_frame(solutions: Sequence[OracleSolution], state_ids: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """Long table: one row per (state, step, input dimension)."""
    rows = []
    ids = range(len(solutions)) if state_ids is None else state_ids
    for state_id, sol in zip(ids, solutions):
        for step, u_row in enumerate(sol.U):
            for dim, value in enumerate(u_row):
                rows.append({
                    "state_id": state_id,
                    "N": len(sol.U),
                    "step": step,
                    "dim": dim,
                    "u": value,
                    "V": sol.V,
                    "residual": sol.residual,
                    "iterations": sol.iterations,
                    "converged": sol.converged,
                })
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Linear-quadratic validation
# ---------------------------------------------------------------------------

class LinearPlant(Plant):
    """x+ = A x + B u with stage cost x'Qx + u'Ru; references are ignored."""

    def __init__(self, A, B, Q, R, bounds=None, dt: float = 1.0):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        self.Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        self.R = np.atleast_2d(np.asarray(R, dtype=np.float64))
        self.n_state, self.n_input = self.B.shape
        self.dt = dt
        self.bounds = (
            np.tile([-1e3, 1e3], (self.n_input, 1)).astype(np.float64)
            if bounds is None else np.asarray(bounds, dtype=np.float64)
        )
        self.state_fields = tuple(f"x{i}" for i in range(self.n_state))
        self.input_fields = tuple(f"u{i}" for i in range(self.n_input))

    def make_state(self, x: np.ndarray) -> Tensor:
        return constant(x)

    def state_array(self, state: Tensor) -> np.ndarray:
        return state.data

    def make_input(self, u: Tensor) -> Tensor:
        return u

    def step(self, state: Tensor, inp: Tensor) -> Tensor:
        return matmul(state, self.A.T) + matmul(inp, self.B.T)

    def cost(self, state: Tensor, ref_row: np.ndarray, inp: Tensor) -> Tensor:
        return (
            tsum(multiply(matmul(state, self.Q), state), axis=1)
            + tsum(multiply(matmul(inp, self.R), inp), axis=1)
        )

    def null_reference(self, N: int) -> np.ndarray:
        return np.zeros((N, 4))


def double_integrator(dt: float = 0.1, q: float = 1.0, r: float = 1.0, bounds=None) -> LinearPlant:
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.5 * dt * dt], [dt]])
    return LinearPlant(A, B, q * np.eye(2), r * np.eye(1), bounds, dt)


def lqr_closed_form(A, B, Q, R, N: int, x0, Qf=None) -> np.ndarray:
    """
    Finite-horizon LQ optimum by backward Riccati recursion.

    Minimises sum_{i=0}^{N-1} x_i'Qx_i + u_i'Ru_i (+ x_N'Qf x_N) subject to
    x_{i+1} = A x_i + B u_i.

    Returns:
        U* with shape (N, m).

    Raises:
        ValueError: R is not positive definite, or N < 1.
    """
    A, B = np.atleast_2d(A).astype(np.float64), np.atleast_2d(B).astype(np.float64)
    Q, R = np.atleast_2d(Q).astype(np.float64), np.atleast_2d(R).astype(np.float64)
    if N < 1:
        raise ValueError(f"Horizon must be >= 1, got {N}")
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise ValueError("R must be positive definite") from exc

    P = np.zeros_like(Q) if Qf is None else np.atleast_2d(Qf).astype(np.float64)
    gains = []
    for _ in range(N):
        factor = cho_factor(R + B.T @ P @ B)
        K = cho_solve(factor, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        P = 0.5 * (P + P.T)
        gains.append(K)
    gains.reverse()

    x = np.asarray(x0, dtype=np.float64).reshape(-1)
    U = []
    for K in gains:
        u = -K @ x
        U.append(u)
        x = A @ x + B @ u
    return np.array(U)


class OracleController:
    """Receding-horizon MPC on the oracle, warm-started from the previous plan."""

    def __init__(self, task, settings: OracleSettings, warm_start: bool = True):
        self.task = task
        self.settings = settings
        self.warm_start = warm_start
        self._previous: Optional[np.ndarray] = None
        self.unconverged = 0

    def reset(self) -> None:
        self._previous = None
        self.unconverged = 0

    @staticmethod
    def shift(U: np.ndarray, N: int) -> np.ndarray:
        """Drop the applied input, repeat the last one, and fit to N rows."""
        shifted = np.concatenate([U[1:], U[-1:]], axis=0)
        if len(shifted) < N:
            shifted = np.concatenate([shifted, np.repeat(shifted[-1:], N - len(shifted), axis=0)])
        return shifted[:N]

    def plan(self, states: np.ndarray, paths: np.ndarray, N: int) -> np.ndarray:
        states = np.atleast_2d(states)
        refs = self.task.reference(states, paths, N)
        warm = None
        if self.warm_start and self._previous is not None and len(states) == 1:
            warm = self.shift(self._previous, N)
        problems = [
            OracleProblem(states[b], refs[b], self.task, self.settings, warm_start=warm)
            for b in range(len(states))
        ]
        solutions = solve_batch(problems)
        self.unconverged += sum(not s.converged for s in solutions)
        self._previous = solutions[0].U
        return np.stack([s.U for s in solutions])
