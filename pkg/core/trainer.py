"""Sampling / learning training loop.

Each iteration runs one sampling phase (an M-step episode of the current
policy on the simulator, every visited state pushed into the replay buffer)
and one learning phase (a minibatch of buffered states, one horizon N drawn
for the whole batch, the policy's control sequences rolled out through the
model, the mean cost J minimised with Adam).
"""
import copy
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from core.checkpoint import load_checkpoint
from core.config import RunConfig, TrainConfig
from core.policy import Policy, PolicyKind, PolicyParams, build_policy
from core.rollout import rollout
from core.tasks import Task, make_task
from core.tensor import NonFiniteError, ShapeError, Tape, constant, mean
from core.vehicles import VelocityFloorError, clamp_input

_log = logging.getLogger(__name__)

LOG_COLUMNS = ["iteration", "J", "buffer_size", "horizon"]
TIMING_COLUMNS = ["iteration", "wall_time"]
DIVERGENCE_LIMIT = 5.0


# ---------------------------------------------------------------------------
# Replay buffer
# ---------------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity ring of visited states, each tagged with its path id."""

    def __init__(self, capacity: int, n_state: int):
        if capacity < 1:
            raise ValueError(f"Buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.states = np.zeros((capacity, n_state))
        self.paths = np.zeros(capacity, dtype=int)
        self.inserted = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def push(self, state: np.ndarray, path: int) -> None:
        with self._lock:
            slot = self.inserted % self.capacity
            self.states[slot] = state
            self.paths[slot] = path
            self.inserted += 1

    def sample(self, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Uniform draw of ``k`` entries with replacement."""
        with self._lock:
            size = len(self)
            if k > size:
                raise ValueError(f"Cannot sample {k} states from a buffer holding {size}")
            picks = rng.integers(0, size, k)
            return self.states[picks].copy(), self.paths[picks].copy()

    def snapshot(self) -> dict[str, np.ndarray]:
        with self._lock:
            return {
                "buffer.states": self.states[: len(self)].copy(),
                "buffer.paths": self.paths[: len(self)].astype(np.float64),
                "buffer.inserted": np.array([self.inserted], dtype=np.float64),
            }

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        with self._lock:
            states = snapshot["buffer.states"]
            size = len(states)
            self.states[:size] = states
            self.paths[:size] = snapshot["buffer.paths"].astype(int)
            self.inserted = int(snapshot["buffer.inserted"][0])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            {name: np.zeros_like(p) for name, p in params.items()},
            {name: np.zeros_like(p) for name, p in params.items()},
        )

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{name}": value for name, value in self.m.items()}
        out.update({f"adam.v.{name}": value for name, value in self.v.items()})
        return out


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """
    One bias-corrected Adam update. ``state`` is advanced in place.

    Raises:
        ShapeError: A gradient or moment does not match its parameter.
    """
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None or grad.shape != value.shape:
            raise ShapeError(f"Gradient for '{name}' has shape "
                             f"{None if grad is None else grad.shape}, expected {value.shape}")
        if state.m[name].shape != value.shape:
            raise ShapeError(f"Adam moment for '{name}' does not match its parameter")

    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    updated = {}
    for name, value in params.items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        updated[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return updated


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_horizon(rng: np.random.Generator, n_max: int) -> int:
    """N ~ U{1, ..., n_max}."""
    return int(rng.integers(1, n_max + 1))


class SimEnv:
    """The plant used as simulator, with the task's reset distribution."""

    def __init__(self, task: Task, rng: np.random.Generator):
        self.task = task
        self.rng = rng
        self.state: Optional[np.ndarray] = None
        self.path: int = 0

    def reset(self) -> tuple[np.ndarray, int]:
        states, paths = self.task.reset(self.rng, 1)
        self.state, self.path = states[0], int(paths[0])
        return self.state, self.path

    def step(self, u: np.ndarray) -> np.ndarray:
        """
        Apply one clipped input.

        Raises:
            NonFiniteError:     The next state is not finite or has left the road.
            VelocityFloorError: The bicycle model's speed guard tripped.
        """
        u = clamp_input(u, self.task.bounds)
        state = self.task.make_state(self.state[None])
        nxt = self.task.state_array(self.task.step(state, self.task.make_input(constant(u[None]))))[0]
        if self.task.lateral_error(nxt, self.path)[0] > DIVERGENCE_LIMIT:
            raise NonFiniteError(f"Lateral error exceeded {DIVERGENCE_LIMIT} m")
        self.state = nxt
        return nxt


def sample_phase(
    policy: Policy,
    env: SimEnv,
    config: TrainConfig,
    buffer: ReplayBuffer,
    rng: np.random.Generator,
    horizon: Optional[int] = None,
) -> dict:
    """
    One M-step episode from a fresh reset; every visited state is buffered.

    The states x_0 ... x_{M-1} are pushed, so an episode adds exactly M
    states. Only the first row of each planned sequence is applied.
    """
    N = horizon or sample_horizon(rng, config.n_max)
    state, path = env.reset()
    resets = 0
    for _ in range(config.episode_length):
        buffer.push(state, path)
        U = policy.plan(state[None], np.array([path]), N)[0]
        try:
            state = env.step(U[0])
        except (NonFiniteError, VelocityFloorError) as exc:
            _log.warning("Sampling episode diverged (%s); resetting", exc)
            state, path = env.reset()
            resets += 1
    return {"horizon": N, "resets": resets}


# ---------------------------------------------------------------------------
# Learning
# ---------------------------------------------------------------------------

def batch_loss(policy: Policy, task: Task, states: np.ndarray, paths: np.ndarray, N: int,
               weights=None):
    """J = mean over the batch of the N-step rollout cost of the policy's plans."""
    refs = task.reference(states, paths, N)
    U = policy.forward(states, refs, weights)
    _, V = rollout(states, U, refs, task)
    return mean(V)


def learn_phase(
    policy: Policy,
    task: Task,
    config: TrainConfig,
    buffer: ReplayBuffer,
    opt_state: AdamState,
    rng: np.random.Generator,
    horizon: Optional[int] = None,
) -> tuple[Optional[float], int]:
    """
    One Adam step on dJ/dtheta over a minibatch that shares one horizon.

    Returns:
        ``(J, N)``; J is None when the step was skipped for a non-finite
        loss, in which case neither the parameters nor the optimizer moved.

    Raises:
        ValueError: The buffer holds fewer states than a minibatch.
    """
    if len(buffer) < config.minibatch:
        raise ValueError(f"Buffer holds {len(buffer)} states, minibatch needs {config.minibatch}")
    N = horizon or sample_horizon(rng, config.n_max)
    states, paths = buffer.sample(config.minibatch, rng)

    tape = Tape()
    weights = tape.watch_all(policy.params.tensors)
    try:
        J = batch_loss(policy, task, states, paths, N, weights)
        tape.backward(J)
    except (NonFiniteError, VelocityFloorError) as exc:
        _log.warning("Skipping learning step at N=%d: %s", N, exc)
        return None, N

    grads = {name: tape.gradient(w) for name, w in weights.items()}
    policy.update(adam_step(policy.params.tensors, grads, opt_state,
                            config.lr, config.beta1, config.beta2, config.eps))
    return J.item(), N


# ---------------------------------------------------------------------------
# Training run
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    policy: Policy
    log: pd.DataFrame
    checkpoint: Path
    buffer: ReplayBuffer
    optimizer: AdamState


def _save(path: Path, policy: Policy, opt: AdamState, buffer: ReplayBuffer,
          rng: np.random.Generator, iteration: int, seed: int) -> Path:
    extra = opt.tensors()
    extra.update(buffer.snapshot())
    meta = {"trainer": {
        "iteration": iteration,
        "adam_step": opt.step,
        "rng": rng.bit_generator.state,
        "seed": seed,
    }}
    return policy.save(path, extra=extra, meta=meta)


def _resume(path: Union[str, Path], policy: Policy, opt: AdamState, buffer: ReplayBuffer,
            rng: np.random.Generator) -> int:
    tensors, meta = load_checkpoint(path)
    if "trainer" not in meta:
        raise ValueError(f"{path} holds no trainer state to resume from")
    params = PolicyParams.from_checkpoint(tensors, meta)
    if set(params.tensors) != set(policy.params.tensors):
        raise ValueError(f"{path} was written for a different architecture")
    policy.update(params.tensors)
    opt.m = {name: tensors[f"adam.m.{name}"] for name in params.tensors}
    opt.v = {name: tensors[f"adam.v.{name}"] for name in params.tensors}
    opt.step = meta["trainer"]["adam_step"]
    buffer.restore(tensors)
    rng.bit_generator.state = meta["trainer"]["rng"]
    return int(meta["trainer"]["iteration"])


def _concurrent_sampler(policy: Policy, task: Task, config: TrainConfig, buffer: ReplayBuffer,
                        seed: int, horizon: Optional[int], stop: threading.Event,
                        failures: list[BaseException]) -> None:
    """Sample until ``stop`` is set. A failure is recorded for the learner to re-raise."""
    rng = np.random.default_rng(seed)
    env = SimEnv(task, rng)
    try:
        while not stop.is_set():
            sample_phase(policy, env, config, buffer, rng, horizon)
    except Exception as exc:
        _log.error("Concurrent sampler stopped: %s", exc)
        failures.append(exc)
        stop.set()


def train(
    config: RunConfig,
    out_dir: Union[str, Path],
    kind: PolicyKind = "transformer",
    resume: Optional[Union[str, Path]] = None,
    task: Optional[Task] = None,
) -> TrainResult:
    """
    Run the full sampling / learning loop and write checkpoints and the log.

    Lock-step mode (the default) is reproducible bit for bit from
    ``config.seed``. With ``config.train.concurrent`` the sampler runs on its
    own thread against a policy snapshot refreshed after every update.

    Files written under ``out_dir``: ``train_log.csv``, ``train_timing.csv``
    (wall time per iteration),
    ``checkpoint.bin`` (final) and ``checkpoint_<iteration>.bin`` every
    ``checkpoint_every`` iterations.
    """
    cfg = config.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = task or make_task(config)
    rng = np.random.default_rng(config.seed)
    policy = build_policy(config, task, kind)
    horizon = policy.fixed_horizon
    buffer = ReplayBuffer(cfg.buffer_capacity, task.n_state)
    opt = AdamState.zeros_like(policy.params.tensors)
    env = SimEnv(task, rng)
    log_path = out / "train_log.csv"
    timing_path = out / "train_timing.csv"

    start = 0
    rows: list[dict] = []
    timings: list[dict] = []
    if resume is not None:
        start = _resume(resume, policy, opt, buffer, rng)
        previous = log_path if log_path.exists() else Path(resume).parent / "train_log.csv"
        if previous.exists():
            rows = pd.read_csv(previous).iloc[:start].to_dict("records")
        _log.info("Resumed from %s at iteration %d", resume, start)

    while len(buffer) < cfg.minibatch:
        sample_phase(policy, env, cfg, buffer, rng, horizon)

    stop = threading.Event()
    failures: list[BaseException] = []
    sampler = None
    sampler_policy = None
    if cfg.concurrent:
        sampler_policy = Policy(copy.deepcopy(policy.params), task)
        sampler = threading.Thread(
            target=_concurrent_sampler,
            args=(sampler_policy, task, cfg, buffer, config.seed + 1, horizon, stop, failures),
            daemon=True,
        )
        sampler.start()

    def write_logs() -> None:
        pd.DataFrame(rows, columns=LOG_COLUMNS).to_csv(log_path, index=False)
        pd.DataFrame(timings, columns=TIMING_COLUMNS).to_csv(timing_path, index=False)

    t0 = time.perf_counter()
    checkpoint = out / "checkpoint.bin"
    try:
        for iteration in range(start, cfg.iterations):
            if failures:
                raise failures[0]
            if not cfg.concurrent:
                sample_phase(policy, env, cfg, buffer, rng, horizon)
            for _ in range(cfg.learn_steps):
                J, N = learn_phase(policy, task, cfg, buffer, opt, rng, horizon)
            if sampler_policy is not None:
                sampler_policy.update(policy.params.tensors)
            rows.append({
                "iteration": iteration,
                "J": np.nan if J is None else J,
                "buffer_size": len(buffer),
                "horizon": N,
            })
            timings.append({"iteration": iteration, "wall_time": time.perf_counter() - t0})
            if (iteration + 1) % cfg.log_every == 0:
                _log.info("iteration %d: J=%.5f N=%d buffer=%d", iteration + 1,
                          rows[-1]["J"], N, len(buffer))
            if (iteration + 1) % cfg.checkpoint_every == 0:
                _save(out / f"checkpoint_{iteration + 1}.bin", policy, opt, buffer, rng,
                      iteration + 1, config.seed)
                write_logs()
    finally:
        stop.set()
        if sampler is not None:
            sampler.join()
    if failures:
        raise failures[0]

    _save(checkpoint, policy, opt, buffer, rng, cfg.iterations, config.seed)
    write_logs()
    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    _log.info("Training finished: %d iterations, checkpoint %s", len(log), checkpoint)
    return TrainResult(policy, log, checkpoint, buffer, opt)


def train_mlp(config: RunConfig, out_dir: Union[str, Path], resume: Optional[Union[str, Path]] = None) -> TrainResult:
    """The MLP baseline through the same loop, horizon fixed to ``config.mlp.horizon``."""
    return train(config, out_dir, kind="mlp", resume=resume)
