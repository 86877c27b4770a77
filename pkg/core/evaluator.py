"""Evaluation: relative accuracy against the oracle, closed-loop tracking,
obstacle clearance, inference latency and report files.

CSV headers written by :func:`emit_report`:

    accuracy.csv     mode, algorithm, N, index, dim, mean, max, count, excluded
    closed_loop.csv  algorithm, scenario, N, delta_y, C, total_cost, steps, diverged, reason
    latency.csv      algorithm, N, median_s, p95_s, repetitions
    clearance.csv    algorithm, obstacle_ahead, obstacle_lateral, min_clearance, collision, steps
    long.csv         scenario, N, metric, algorithm, value
"""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np
import pandas as pd

from core.config import OracleSettings
from core.oracle import OracleFailure, OracleProblem, solve_batch
from core.references import PATH_NAMES
from core.rollout import trajectory_frame
from core.tasks import RobotTask, Task
from core.tensor import NonFiniteError, constant
from core.vehicles import VelocityFloorError, clamp_input

_log = logging.getLogger(__name__)

ACCURACY_COLUMNS = ["mode", "algorithm", "N", "index", "dim", "mean", "max", "count", "excluded"]
CLOSED_LOOP_COLUMNS = ["algorithm", "scenario", "N", "delta_y", "C", "total_cost", "steps", "diverged", "reason"]
LATENCY_COLUMNS = ["algorithm", "N", "median_s", "p95_s", "repetitions"]
CLEARANCE_COLUMNS = ["algorithm", "obstacle_ahead", "obstacle_lateral", "min_clearance", "collision", "steps"]
LONG_COLUMNS = ["scenario", "N", "metric", "algorithm", "value"]

DIVERGENCE_LIMIT = 5.0


class Controller(Protocol):
    def plan(self, states: np.ndarray, paths: np.ndarray, N: int) -> np.ndarray:
        ...


# ---------------------------------------------------------------------------
# Report types
# ---------------------------------------------------------------------------

@dataclass
class AccuracyReport:
    """Per (N, sequence index, control dimension): mean/max relative accuracy."""

    mode: str
    algorithm: str
    frame: pd.DataFrame
    n_states: int
    excluded: dict[int, int] = field(default_factory=dict)


@dataclass
class ClosedLoopReport:
    algorithm: str
    scenario: str
    N: int
    delta_y: float
    C: float
    total_cost: float
    steps: int
    diverged: bool = False
    reason: str = ""
    trajectory: pd.DataFrame = field(default_factory=pd.DataFrame)
    min_clearance: Optional[float] = None

    def row(self) -> dict:
        return {name: getattr(self, name) for name in CLOSED_LOOP_COLUMNS}


@dataclass
class ClearanceReport:
    algorithm: str
    obstacle_ahead: float
    obstacle_lateral: float
    min_clearance: float
    collision: bool
    steps: int
    trajectory: pd.DataFrame = field(default_factory=pd.DataFrame)

    def row(self) -> dict:
        return {name: getattr(self, name) for name in CLEARANCE_COLUMNS}


@dataclass
class EvalReport:
    """Everything one evaluation run produced, plus provenance."""

    provenance: dict = field(default_factory=dict)
    accuracy: list[AccuracyReport] = field(default_factory=list)
    closed_loop: list[ClosedLoopReport] = field(default_factory=list)
    latency: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=LATENCY_COLUMNS))
    clearance: list[ClearanceReport] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Accuracy
# ---------------------------------------------------------------------------

def relative_accuracy(u_theta, u_star, bounds) -> np.ndarray:
    """
    |u_theta - u_star| / (u_max - u_min), element-wise per control dimension.

    Raises:
        ValueError: Shapes differ, or some dimension has u_max <= u_min.
    """
    u_theta = np.asarray(u_theta, dtype=np.float64)
    u_star = np.asarray(u_star, dtype=np.float64)
    bounds = np.asarray(bounds, dtype=np.float64)
    if u_theta.shape != u_star.shape:
        raise ValueError(f"Shapes differ: {u_theta.shape} vs {u_star.shape}")
    span = bounds[:, 1] - bounds[:, 0]
    if np.any(span <= 0):
        raise ValueError(f"Degenerate bounds {bounds.tolist()}")
    return np.abs(u_theta - u_star) / span


def accuracy_sweep(
    policy: Controller,
    task: Task,
    settings: OracleSettings,
    n_states: int = 200,
    horizons: Union[int, Sequence[int]] = 20,
    mode: str = "sequence",
    rng: Optional[np.random.Generator] = None,
    failure_threshold: float = 0.2,
    algorithm: str = "transformer",
) -> AccuracyReport:
    """
    Relative accuracy of ``policy`` against converged oracle solutions.

    Initial states come from the task's reset distribution. ``mode`` is
    ``"sequence"`` (every element of the sequence) or ``"first"`` (u_t only).
    The oracle starts cold from the zero sequence and its own random
    restarts, never from the policy's plan. States whose oracle did not
    converge are dropped and counted per N.

    Raises:
        OracleFailure: The share of dropped states exceeds ``failure_threshold``.
    """
    if mode not in ("sequence", "first"):
        raise ValueError(f"Unknown accuracy mode {mode!r}")
    rng = rng or np.random.default_rng(0)
    horizons = [horizons] if isinstance(horizons, int) else list(horizons)
    states, paths = task.reset(rng, n_states)
    names = task.input_fields

    rows, excluded = [], {}
    for N in horizons:
        U_theta = policy.plan(states, paths, N)
        refs = task.reference(states, paths, N)
        solutions = solve_batch([
            OracleProblem(states[b], refs[b], task, settings)
            for b in range(n_states)
        ])
        ok = np.array([s.converged for s in solutions])
        excluded[N] = int(np.sum(~ok))
        if excluded[N]:
            _log.warning("N=%d: %d of %d oracle solves did not converge; excluded", N, excluded[N], n_states)
        if excluded[N] / n_states > failure_threshold:
            raise OracleFailure(
                f"Oracle failed on {excluded[N]} of {n_states} states at N={N} "
                f"(threshold {failure_threshold:.0%})"
            )
        U_star = np.stack([s.U for s in solutions])
        acc = relative_accuracy(U_theta[ok], U_star[ok], task.bounds)
        indices = range(N) if mode == "sequence" else [0]
        for i in indices:
            for j, name in enumerate(names):
                values = acc[:, i, j]
                rows.append({
                    "mode": mode, "algorithm": algorithm, "N": N, "index": i, "dim": name,
                    "mean": float(values.mean()) if values.size else np.nan,
                    "max": float(values.max()) if values.size else np.nan,
                    "count": int(values.size), "excluded": excluded[N],
                })
    return AccuracyReport(mode, algorithm, pd.DataFrame(rows, columns=ACCURACY_COLUMNS), n_states, excluded)


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------

def _stage_cost(task: Task, state: np.ndarray, ref_row: np.ndarray, u: np.ndarray) -> float:
    return task.cost(task.make_state(state[None]), ref_row[None], task.make_input(constant(u[None]))).item()


def closed_loop_eval(
    controller: Controller,
    task: Task,
    path: int,
    N: int = 20,
    steps: int = 170,
    algorithm: str = "transformer",
    initial_state: Optional[np.ndarray] = None,
) -> ClosedLoopReport:
    """
    Receding-horizon run: plan N steps, apply the first input, re-plan.

    ``delta_y`` is the mean |p_y - p_y^R| over the states at which a plan was
    made; ``C`` is the running cost per executed step. A lateral
    error above 5 m, a non-finite state or a velocity-floor violation stops
    the run and flags the report.
    """
    state = task.initial_state(path) if initial_state is None else np.asarray(initial_state, dtype=np.float64)
    paths = np.array([path])
    visited, ref_rows, inputs, costs, errors = [state], [], [], [], []
    diverged, reason = False, ""

    for _ in range(steps):
        refs = task.reference(state[None], paths, N)[0]
        U = controller.plan(state[None], paths, N)[0]
        u = clamp_input(U[0], task.bounds)
        errors.append(task.lateral_error(state, paths)[0])
        ref_rows.append(refs[0])
        inputs.append(u)
        costs.append(_stage_cost(task, state, refs[0], u))
        try:
            state = task.state_array(task.step(task.make_state(state[None]), task.make_input(constant(u[None]))))[0]
        except (NonFiniteError, VelocityFloorError) as exc:
            diverged, reason = True, str(exc)
            visited.append(np.full_like(state, np.nan))
            break
        visited.append(state)
        if task.lateral_error(state, paths)[0] > DIVERGENCE_LIMIT:
            diverged, reason = True, f"lateral error above {DIVERGENCE_LIMIT} m"
            break

    if diverged:
        _log.warning("%s diverged on %s at N=%d after %d steps: %s",
                     algorithm, PATH_NAMES.get(path, path), N, len(inputs), reason)
    states = np.array(visited)
    frame = trajectory_frame(task, states, np.array(ref_rows), np.array(inputs), np.array(costs))
    total = float(np.sum(costs))
    report = ClosedLoopReport(
        algorithm=algorithm,
        scenario=PATH_NAMES.get(path, str(path)),
        N=N,
        delta_y=float(np.mean(errors)),
        C=total / len(inputs),
        total_cost=total,
        steps=len(inputs),
        diverged=diverged,
        reason=reason,
        trajectory=frame,
    )
    if isinstance(task, RobotTask) and task.obstacle:
        finite = np.all(np.isfinite(states), axis=1)
        clearance = np.full(len(states), np.nan)
        clearance[finite] = task.clearance_values(states[finite])
        report.trajectory["clearance"] = clearance
        report.min_clearance = float(np.nanmin(clearance))
    return report


def obstacle_eval(
    controller: Controller,
    task: RobotTask,
    obstacle_ahead: float = 3.0,
    obstacle_lateral: float = 0.0,
    N: int = 20,
    steps: int = 170,
    algorithm: str = "transformer",
) -> ClearanceReport:
    """
    Closed-loop run with a static obstacle; collision means l_c < -r_safe.

    Raises:
        ValueError: The task carries no obstacle in its state.
    """
    if not isinstance(task, RobotTask) or not task.obstacle:
        raise ValueError("obstacle_eval needs the robot task with an obstacle")
    start = task.initial_state(obstacle_ahead=obstacle_ahead, obstacle_lateral=obstacle_lateral)
    run = closed_loop_eval(controller, task, path=task.paths[0], N=N, steps=steps,
                           algorithm=algorithm, initial_state=start)
    collision = run.min_clearance < -task.weights.r_safe
    if collision:
        _log.warning("%s collided with the obstacle: min clearance %.3f m", algorithm, run.min_clearance)
    return ClearanceReport(algorithm, obstacle_ahead, obstacle_lateral, run.min_clearance,
                           bool(collision), run.steps, run.trajectory)


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------

def latency_bench(
    policy,
    task: Task,
    horizons: Sequence[int],
    repetitions: int = 200,
    algorithm: str = "transformer",
    state: Optional[np.ndarray] = None,
    path: Optional[int] = None,
) -> pd.DataFrame:
    """
    Median and 95th-percentile wall time of one forward call per horizon.

    The first call for every N is discarded as warm-up.
    """
    path = task.paths[0] if path is None else path
    state = task.initial_state(path) if state is None else state
    rows = []
    for N in horizons:
        refs = task.reference(state[None], np.array([path]), N)[0]
        policy.forward(state, refs)
        times = np.empty(repetitions)
        for k in range(repetitions):
            t0 = time.perf_counter()
            policy.forward(state, refs)
            times[k] = time.perf_counter() - t0
        rows.append({
            "algorithm": algorithm, "N": N,
            "median_s": float(np.median(times)),
            "p95_s": float(np.percentile(times, 95)),
            "repetitions": repetitions,
        })
        _log.info("%s latency at N=%d: median %.3f ms", algorithm, N, rows[-1]["median_s"] * 1e3)
    return pd.DataFrame(rows, columns=LATENCY_COLUMNS)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def long_format(report: EvalReport) -> pd.DataFrame:
    """One row per (scenario, N, metric, algorithm)."""
    rows = []
    for run in report.closed_loop:
        for metric in ("delta_y", "C"):
            rows.append({"scenario": run.scenario, "N": run.N, "metric": metric,
                         "algorithm": run.algorithm, "value": getattr(run, metric)})
    for acc in report.accuracy:
        for (N, dim), group in acc.frame.groupby(["N", "dim"]):
            rows.append({"scenario": "random_states", "N": N, "metric": f"accuracy_{acc.mode}_{dim}",
                         "algorithm": acc.algorithm, "value": group["mean"].mean()})
    for _, row in report.latency.iterrows():
        rows.append({"scenario": "latency", "N": row["N"], "metric": "latency_median_s",
                     "algorithm": row["algorithm"], "value": row["median_s"]})
    for clr in report.clearance:
        rows.append({"scenario": "obstacle", "N": clr.steps, "metric": "min_clearance",
                     "algorithm": clr.algorithm, "value": clr.min_clearance})
    return pd.DataFrame(rows, columns=LONG_COLUMNS)


def emit_report(report: EvalReport, out_dir: Union[str, Path]) -> dict[str, Path]:
    """
    Write every table of ``report`` plus ``summary.json`` under ``out_dir``.

    Returns:
        Mapping of table name to the file written.
    """
    out = Path(out_dir)
    (out / "trajectories").mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    tables = {
        "accuracy": pd.concat([a.frame for a in report.accuracy], ignore_index=True)
        if report.accuracy else pd.DataFrame(columns=ACCURACY_COLUMNS),
        "closed_loop": pd.DataFrame([r.row() for r in report.closed_loop], columns=CLOSED_LOOP_COLUMNS),
        "latency": report.latency,
        "clearance": pd.DataFrame([c.row() for c in report.clearance], columns=CLEARANCE_COLUMNS),
        "long": long_format(report),
    }
    for name, table in tables.items():
        path = out / f"{name}.csv"
        table.to_csv(path, index=False)
        written[name] = path

    for run in report.closed_loop:
        path = out / "trajectories" / f"{run.algorithm}_{run.scenario}_N{run.N}.csv"
        run.trajectory.to_csv(path, index=False)
    for clr in report.clearance:
        path = out / "trajectories" / f"{clr.algorithm}_obstacle_{clr.obstacle_ahead:g}.csv"
        clr.trajectory.to_csv(path, index=False)

    summary = {
        "provenance": report.provenance,
        "closed_loop": [r.row() for r in report.closed_loop],
        "clearance": [c.row() for c in report.clearance],
        "accuracy": {
            f"{a.algorithm}/{a.mode}": {"mean": float(a.frame["mean"].mean()) if len(a.frame) else None,
                                        "excluded": {str(k): v for k, v in a.excluded.items()}}
            for a in report.accuracy
        },
    }
    path = out / "summary.json"
    path.write_text(json.dumps(summary, indent=2, default=float))
    written["summary"] = path
    _log.info("Wrote evaluation report to %s", out)
    return written
