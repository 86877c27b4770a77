"""Configuration models, built-in profiles, and config-file loading."""
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

load_dotenv()

DEFAULT_OUT_DIR = os.getenv("TRANSMPC_OUT_DIR", "runs")
DEFAULT_LOG_LEVEL = os.getenv("TRANSMPC_LOG_LEVEL", "INFO")
DEFAULT_PROFILE = os.getenv("TRANSMPC_PROFILE", "desk")


class _Strict(BaseModel):
    """Base for every config block: unknown keys are an error."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# ---------------------------------------------------------------------------
# Plant, cost and scenario
# ---------------------------------------------------------------------------

class BicycleParams(_Strict):
    mass: float = Field(1412.0, gt=0, description="Vehicle mass m [kg]")
    yaw_inertia: float = Field(1536.7, gt=0, description="Yaw moment of inertia I_z [kg m^2]")
    lf: float = Field(1.06, gt=0, description="CoG to front axle [m]")
    lr: float = Field(1.85, gt=0, description="CoG to rear axle [m]")
    kf: float = Field(-128916.0, description="Front cornering stiffness [N/rad]")
    kr: float = Field(-85944.0, description="Rear cornering stiffness [N/rad]")
    v_floor: float = Field(0.1, gt=0, description="Guard floor on v in the implicit update [m/s]")
    accel_bounds: tuple[float, float] = Field((-3.0, 3.0), description="a_x bounds [m/s^2]")
    steer_bounds: tuple[float, float] = Field((-0.52, 0.52), description="delta bounds [rad]")


class CostWeights(_Strict):
    """Coefficients of the tracking cost and the obstacle clearance term."""

    px: float = Field(0.2, ge=0)
    py: float = Field(0.3, ge=0)
    phi: float = Field(0.2, ge=0)
    v_error: float = Field(0.3, ge=0)
    v: float = Field(0.1, ge=0)
    omega: float = Field(0.1, ge=0)
    u0: float = Field(0.05, ge=0, description="First input (a_x or dv)")
    u1: float = Field(0.05, ge=0, description="Second input (delta or domega)")
    r_ego: float = Field(0.4765, ge=0, description="Ego radius [m]")
    r_obstacle: float = Field(0.25, ge=0, description="Obstacle radius [m]")
    r_safe: float = Field(0.1, ge=0, description="Safety margin [m]")
    collision: float = Field(1.0, ge=0, description="Weight on the clearance term")
    collision_mode: Literal["as_written", "clipped"] = Field(
        "as_written", description="as_written: -l_c^2; clipped: +max(0, -l_c)^2"
    )


class ScenarioConfig(_Strict):
    speed: float = Field(5.0, gt=0, description="Nominal reference speed [m/s]")
    dt: float = Field(0.1, gt=0, description="Control period [s]")
    sine_amplitude: float = Field(1.0, description="Sinusoid amplitude A [m]")
    sine_wavelength: float = Field(30.0, gt=0, description="Sinusoid wavelength [m]")
    dlc_offset: float = Field(1.0, description="Double lane change lateral offset W [m]")
    dlc_start: float = Field(20.0, ge=0, description="Longitudinal start of the first ramp [m]")
    dlc_ramp: float = Field(10.0, gt=0, description="Length of each tanh ramp [m]")
    dlc_plateau: float = Field(15.0, ge=0, description="Length of the offset plateau [m]")
    path_length: float = Field(85.0, gt=0, description="Length sampled by resets [m]")
    reset_lateral: float = Field(1.0, ge=0)
    reset_heading: float = Field(0.3, ge=0)
    reset_speed_spread: float = Field(1.0, ge=0)


class RobotConfig(_Strict):
    frequency: float = Field(10.0, gt=0, description="Control frequency f [Hz]")
    speed: float = Field(0.4, gt=0, description="Desired speed [m/s]")
    dv_rate: float = Field(0.8, gt=0, description="|dv| <= dv_rate / f")
    domega_rate: float = Field(0.4, gt=0, description="|domega| <= domega_rate / f")
    obstacle: bool = Field(True, description="Augment the state with a static obstacle")
    path_length: float = Field(6.8, gt=0)
    reset_lateral: float = Field(0.3, ge=0)
    reset_heading: float = Field(0.2, ge=0)
    reset_speed_spread: float = Field(0.1, ge=0)
    obstacle_ahead: tuple[float, float] = Field((1.5, 4.0))
    obstacle_jitter: float = Field(0.2, ge=0)
    obstacle_scale: float = Field(2.0, gt=0, description="Divisor of the obstacle features [m]")


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class PolicyHyper(_Strict):
    task: Literal["vehicle", "robot"] = "vehicle"
    d_embed: int = Field(32, gt=0)
    n_heads: int = Field(2, gt=0)
    n_layers: int = Field(1, gt=0)
    d_ffn: int = Field(32, gt=0)
    n_max: int = Field(20, ge=1, description="Maximum training horizon N_max")
    decoder_scale: float = Field(0.01, gt=0)

    @model_validator(mode="after")
    def _heads_divide_embedding(self):
        if self.d_embed % self.n_heads:
            raise ValueError(
                f"d_embed={self.d_embed} is not divisible by n_heads={self.n_heads}"
            )
        return self

    @property
    def head_width(self) -> int:
        return self.d_embed // self.n_heads


class MLPHyper(_Strict):
    task: Literal["vehicle", "robot"] = "vehicle"
    hidden: int = Field(256, gt=0)
    n_hidden_layers: int = Field(3, gt=0)
    horizon: int = Field(20, ge=1, description="The one horizon this network is trained for")
    decoder_scale: float = Field(0.01, gt=0)


# ---------------------------------------------------------------------------
# Solver, training, evaluation
# ---------------------------------------------------------------------------

class OracleSettings(_Strict):
    max_iter: int = Field(2000, ge=1)
    tol: float = Field(1e-8, gt=0, description="Projected-gradient norm tolerance")
    restarts: int = Field(8, ge=0, description="Random starts besides the zero sequence")
    memory: int = Field(10, ge=0, description="L-BFGS memory; 0 = projected gradient only")
    armijo: float = Field(1e-4, gt=0, lt=1)
    max_backtracks: int = Field(60, ge=1)
    seed: int = 0


class TrainConfig(_Strict):
    n_max: int = Field(20, ge=1)
    episode_length: int = Field(50, ge=1, description="M: reset every M sampling steps")
    minibatch: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    iterations: int = Field(2000, ge=1)
    learn_steps: int = Field(1, ge=1, description="Learning updates per sampling phase")
    buffer_capacity: int = Field(20000, ge=1)
    checkpoint_every: int = Field(500, ge=1)
    log_every: int = Field(50, ge=1)
    concurrent: bool = Field(False, description="Sample and learn on separate threads")
    model: Literal["transformer", "mlp"] = "transformer"


class EvalConfig(_Strict):
    n_states: int = Field(200, ge=1)
    accuracy_horizon: int = Field(20, ge=1)
    horizons: list[int] = Field(default_factory=lambda: [5, 10, 15, 20])
    first_element_horizons: list[int] = Field(default_factory=lambda: list(range(1, 21)))
    steps: int = Field(170, ge=1)
    latency_horizons: list[int] = Field(default_factory=lambda: [1, 5, 10, 15, 20])
    latency_repetitions: int = Field(200, ge=2)
    oracle_failure_threshold: float = Field(0.2, ge=0, le=1)
    oracle_mpc: bool = Field(True, description="Include the oracle as a closed-loop controller")
    mlp_checkpoint: Optional[str] = None
    obstacle_ahead: float = Field(3.0, gt=0, description="Obstacle distance for obstacle_eval [m]")
    oracle: OracleSettings = Field(default_factory=OracleSettings)


class GradcheckConfig(_Strict):
    seeds: int = Field(10, ge=1)
    h: float = Field(1e-6, gt=0)
    tol: float = Field(1e-4, gt=0)
    horizon: int = Field(5, ge=1)
    batch: int = Field(3, ge=1)
    max_entries: int = Field(4, ge=1, description="Sampled entries per parameter tensor")


class RunConfig(_Strict):
    seed: int = 0
    profile: Literal["desk", "paper"] = "desk"
    bicycle: BicycleParams = Field(default_factory=BicycleParams)
    weights: CostWeights = Field(default_factory=CostWeights)
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    robot: RobotConfig = Field(default_factory=RobotConfig)
    policy: PolicyHyper = Field(default_factory=PolicyHyper)
    mlp: MLPHyper = Field(default_factory=MLPHyper)
    oracle: OracleSettings = Field(default_factory=OracleSettings)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    gradcheck: GradcheckConfig = Field(default_factory=GradcheckConfig)


PROFILES: dict[str, dict[str, Any]] = {
    "desk": {
        "policy": {"d_embed": 32, "n_heads": 2, "n_layers": 1, "d_ffn": 32},
        "mlp": {"hidden": 64},
        "train": {"iterations": 2000},
    },
    "paper": {
        "policy": {"d_embed": 256, "n_heads": 4, "n_layers": 2, "d_ffn": 256},
        "mlp": {"hidden": 256},
        "train": {"iterations": 20000},
    },
}


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _merge(base: dict, update: dict) -> dict:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_override(item: str) -> dict:
    """
    Turn ``"a.b.c=value"`` into ``{"a": {"b": {"c": value}}}``.

    The value is parsed as JSON when possible (numbers, booleans, lists)
    and kept as a bare string otherwise.
    """
    if "=" not in item:
        raise ValueError(f"Override {item!r} is not of the form key=value")
    path, raw = item.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ValueError(f"Override {item!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    for key in reversed(keys):
        value = {key: value}
    return value


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    profile: Optional[str] = None,
    overrides: Optional[list[str]] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    """
    Build the effective run configuration.

    Layers, later wins: built-in profile, config file, ``--set`` overrides,
    explicit seed. The profile may also be named inside the file.

    Raises:
        ValueError: Unknown profile, malformed override, unreadable file,
                    or any unknown key (pydantic ``ValidationError`` is a
                    ``ValueError``).
    """
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"Cannot read config file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ValueError(f"Config file {path} must hold a JSON object")

    name = profile or data.get("profile") or DEFAULT_PROFILE
    if name not in PROFILES:
        raise ValueError(f"Unknown profile {name!r}; expected one of {sorted(PROFILES)}")

    merged = _merge(PROFILES[name], data)
    for item in overrides or []:
        merged = _merge(merged, parse_override(item))
    merged["profile"] = name
    if seed is not None:
        merged["seed"] = seed
    config = RunConfig.model_validate(merged)

    # Keep the two network blocks pointed at the same plant unless told otherwise.
    if "task" not in merged.get("mlp", {}):
        config.mlp.task = config.policy.task
    return config


def config_hash(config: RunConfig) -> str:
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()
