"""Explicit MPC policies.

The encoder-only Transformer maps the current state and an N-row reference
window to the whole N-step control sequence in one parallel pass:

    tokens = [E_x(x_t)] ++ [E_r(x^R_{t+i})] + PE
    Z      = encoder(tokens)             (unmasked self-attention, post-LN)
    U      = squash(D_u(Z[1:]))          (state token output is dropped)

The MLP baseline flattens the same features and predicts a fixed-length
sequence; it has to be retrained for every horizon.

Parameters are plain float64 arrays in a :class:`PolicyParams`. A forward
pass reads them as tensors, which are constants at inference and tape leaves
during learning.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping, Optional, Union

import numpy as np

from core.checkpoint import load_checkpoint, save_checkpoint
from core.config import MLPHyper, PolicyHyper, RunConfig
from core.tasks import Task
from core.tensor import (
    ShapeError,
    Tensor,
    add_row,
    concat,
    constant,
    layer_norm,
    matmul,
    multiply,
    permute,
    relu,
    reshape,
    softmax,
    tanh,
    transpose,
)

_log = logging.getLogger(__name__)

PolicyKind = Literal["transformer", "mlp"]
Weights = Mapping[str, Tensor]


class HorizonMismatchError(ValueError):
    """The MLP baseline was asked for a horizon it was not trained on."""


@dataclass
class PolicyParams:
    """Named parameter arrays plus everything needed to rebuild the network."""

    kind: PolicyKind
    hyper: Union[PolicyHyper, MLPHyper]
    tensors: dict[str, np.ndarray]
    n_state: int
    n_state_features: int
    n_ref_features: int
    n_input: int
    bounds: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def manifest(self) -> dict:
        n_max = self.hyper.n_max if self.kind == "transformer" else self.hyper.horizon
        return {
            "kind": self.kind,
            "task": self.hyper.task,
            "hyper": self.hyper.model_dump(mode="json"),
            "n_state": self.n_state,
            "n_ref": 4,
            "n_state_features": self.n_state_features,
            "n_ref_features": self.n_ref_features,
            "n_input": self.n_input,
            "N_max": n_max,
            "bounds": np.asarray(self.bounds).tolist(),
            "params": list(self.tensors),
        }

    def save(self, path: Union[str, Path], extra: Optional[Mapping[str, np.ndarray]] = None,
             meta: Optional[dict] = None) -> Path:
        tensors = dict(self.tensors)
        tensors.update(extra or {})
        return save_checkpoint(path, tensors, {"policy": self.manifest(), **(meta or {})})

    @classmethod
    def from_checkpoint(cls, tensors: Mapping[str, np.ndarray], meta: dict) -> "PolicyParams":
        try:
            manifest = meta["policy"]
            hyper_cls = PolicyHyper if manifest["kind"] == "transformer" else MLPHyper
            return cls(
                kind=manifest["kind"],
                hyper=hyper_cls.model_validate(manifest["hyper"]),
                tensors={name: tensors[name] for name in manifest["params"]},
                n_state=manifest["n_state"],
                n_state_features=manifest["n_state_features"],
                n_ref_features=manifest["n_ref_features"],
                n_input=manifest["n_input"],
                bounds=np.array(manifest["bounds"], dtype=np.float64),
            )
        except KeyError as exc:
            raise ValueError(f"Checkpoint has no policy entry {exc}") from exc

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PolicyParams":
        tensors, meta = load_checkpoint(path)
        return cls.from_checkpoint(tensors, meta)


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

def _linear(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0):
    bound = 1.0 / math.sqrt(fan_in)
    weight = rng.uniform(-bound, bound, (fan_in, fan_out)) * scale
    bias = rng.uniform(-bound, bound, fan_out) * scale
    return weight, bias


def _put_linear(tensors: dict, name: str, pair) -> None:
    tensors[f"{name}.weight"], tensors[f"{name}.bias"] = pair


def init_params(
    hyper: PolicyHyper,
    seed: int,
    n_state_features: int,
    n_ref_features: int,
    n_input: int,
    n_state: Optional[int] = None,
    bounds=None,
) -> PolicyParams:
    """
    Uniform(+-1/sqrt(fan_in)) weights and biases, decoder shrunk by
    ``hyper.decoder_scale``, layer norms at unit gain and zero bias.

    Raises:
        ValueError: ``d_embed`` not divisible by ``n_heads``.
    """
    if hyper.d_embed % hyper.n_heads:
        raise ValueError(f"d_embed={hyper.d_embed} is not divisible by n_heads={hyper.n_heads}")
    rng = np.random.default_rng(seed)
    d, f = hyper.d_embed, hyper.d_ffn
    tensors: dict[str, np.ndarray] = {}
    _put_linear(tensors, "E_x", _linear(rng, n_state_features, d))
    _put_linear(tensors, "E_r", _linear(rng, n_ref_features, d))
    for layer in range(hyper.n_layers):
        prefix = f"layers.{layer}"
        for proj in ("q", "k", "v", "o"):
            _put_linear(tensors, f"{prefix}.attn.{proj}", _linear(rng, d, d))
        tensors[f"{prefix}.ln1.gain"], tensors[f"{prefix}.ln1.bias"] = np.ones(d), np.zeros(d)
        _put_linear(tensors, f"{prefix}.ffn.0", _linear(rng, d, f))
        _put_linear(tensors, f"{prefix}.ffn.1", _linear(rng, f, d))
        tensors[f"{prefix}.ln2.gain"], tensors[f"{prefix}.ln2.bias"] = np.ones(d), np.zeros(d)
    _put_linear(tensors, "D_u", _linear(rng, d, n_input, hyper.decoder_scale))
    return PolicyParams(
        "transformer", hyper, tensors, n_state or n_state_features,
        n_state_features, n_ref_features, n_input,
        np.zeros((n_input, 2)) if bounds is None else np.asarray(bounds, dtype=np.float64),
    )


def init_mlp_params(
    hyper: MLPHyper,
    seed: int,
    n_state_features: int,
    n_ref_features: int,
    n_input: int,
    n_state: Optional[int] = None,
    bounds=None,
) -> PolicyParams:
    rng = np.random.default_rng(seed)
    width = n_state_features + hyper.horizon * n_ref_features
    tensors: dict[str, np.ndarray] = {}
    for layer in range(hyper.n_hidden_layers):
        _put_linear(tensors, f"hidden.{layer}", _linear(rng, width, hyper.hidden))
        width = hyper.hidden
    _put_linear(tensors, "head", _linear(rng, width, hyper.horizon * n_input, hyper.decoder_scale))
    return PolicyParams(
        "mlp", hyper, tensors, n_state or n_state_features,
        n_state_features, n_ref_features, n_input,
        np.zeros((n_input, 2)) if bounds is None else np.asarray(bounds, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def positional_encoding(length: int, d_embed: int) -> np.ndarray:
    """Fixed sinusoidal encoding; row 0 is the state token."""
    position = np.arange(length)[:, None]
    column = np.arange(d_embed)[None, :]
    angle = position / np.power(10000.0, (2 * (column // 2)) / d_embed)
    return np.where(column % 2 == 0, np.sin(angle), np.cos(angle))


def _affine(x: Tensor, weights: Weights, name: str) -> Tensor:
    return add_row(matmul(x, weights[f"{name}.weight"]), weights[f"{name}.bias"])


def squash(raw: Tensor, bounds) -> Tensor:
    """Map unbounded outputs into (lo, hi) per action dimension via tanh."""
    bounds = np.asarray(bounds, dtype=np.float64)
    lo, hi = bounds[:, 0], bounds[:, 1]
    if np.any(hi <= lo):
        raise ValueError(f"Action bounds need lo < hi, got {bounds.tolist()}")
    half = constant(np.broadcast_to(0.5 * (hi - lo), raw.shape))
    return add_row(multiply(tanh(raw), half), constant(0.5 * (hi + lo)))


def _self_attention(x: Tensor, weights: Weights, prefix: str, hyper: PolicyHyper) -> Tensor:
    batch, length, d = x.shape
    heads, width = hyper.n_heads, hyper.head_width

    def split(t: Tensor) -> Tensor:
        return permute(reshape(t, (batch, length, heads, width)), (0, 2, 1, 3))

    q = split(_affine(x, weights, f"{prefix}.q"))
    k = split(_affine(x, weights, f"{prefix}.k"))
    v = split(_affine(x, weights, f"{prefix}.v"))
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(width))
    mixed = matmul(softmax(scores), v)
    merged = reshape(permute(mixed, (0, 2, 1, 3)), (batch, length, d))
    return _affine(merged, weights, f"{prefix}.o")


def _encoder_layer(x: Tensor, weights: Weights, prefix: str, hyper: PolicyHyper) -> Tensor:
    h = layer_norm(
        x + _self_attention(x, weights, f"{prefix}.attn", hyper),
        weights[f"{prefix}.ln1.gain"], weights[f"{prefix}.ln1.bias"],
    )
    ffn = _affine(relu(_affine(h, weights, f"{prefix}.ffn.0")), weights, f"{prefix}.ffn.1")
    return layer_norm(h + ffn, weights[f"{prefix}.ln2.gain"], weights[f"{prefix}.ln2.bias"])


def _encode(tokens: Tensor, weights: Weights, hyper: PolicyHyper) -> Tensor:
    for layer in range(hyper.n_layers):
        tokens = _encoder_layer(tokens, weights, f"layers.{layer}", hyper)
    return tokens


def _features(x_t, refs, task: Task) -> tuple[np.ndarray, np.ndarray, bool]:
    states = np.asarray(x_t, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    single = states.ndim == 1
    if single:
        states, refs = states[None], refs[None]
    if refs.ndim != 3 or refs.shape[-1] != 4:
        raise ShapeError(f"Reference window must have rows of 4, got shape {refs.shape}")
    if refs.shape[1] < 1:
        raise ValueError("Policy needs a horizon N >= 1")
    if len(states) != len(refs):
        raise ShapeError(f"{len(states)} states but {len(refs)} reference windows")
    return task.state_features(states), task.ref_features(states, refs), single


def constant_weights(params: PolicyParams) -> dict[str, Tensor]:
    return {name: constant(value) for name, value in params.tensors.items()}


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def policy_forward(
    x_t,
    refs,
    params: PolicyParams,
    bounds,
    task: Task,
    weights: Optional[Weights] = None,
) -> Tensor:
    """
    Control sequence for every state in one encoder pass.

    Args:
        x_t:     State, shape (n,) or (B, n).
        refs:    Reference window, shape (N, 4) or (B, N, 4); any N >= 1.
        params:  Transformer parameters.
        bounds:  (n_input, 2) action bounds.
        task:    Supplies the state and reference feature maps.
        weights: Tensors to read instead of ``params.tensors`` (tape leaves
                 during learning).

    Returns:
        U with shape (N, n_input) or (B, N, n_input), inside ``bounds``.

    Raises:
        ValueError: N = 0.
        ShapeError: Feature widths or batch sizes do not match.
    """
    hyper = params.hyper
    weights = weights if weights is not None else constant_weights(params)
    state_feats, ref_feats, single = _features(x_t, refs, task)
    batch, horizon, _ = ref_feats.shape

    state_token = reshape(_affine(constant(state_feats), weights, "E_x"), (batch, 1, hyper.d_embed))
    ref_tokens = _affine(constant(ref_feats), weights, "E_r")
    pe = np.broadcast_to(positional_encoding(horizon + 1, hyper.d_embed), (batch, horizon + 1, hyper.d_embed))
    tokens = concat([state_token, ref_tokens], axis=1) + constant(pe)

    z = _encode(tokens, weights, hyper)
    U = squash(_affine(z[:, 1:], weights, "D_u"), bounds)
    return U[0] if single else U


def mlp_policy_forward(
    x_t,
    refs,
    params: PolicyParams,
    bounds,
    task: Task,
    weights: Optional[Weights] = None,
) -> Tensor:
    """
    Fixed-horizon MLP baseline over the flattened state and reference features.

    Raises:
        HorizonMismatchError: ``refs`` length differs from the trained horizon.
    """
    hyper = params.hyper
    weights = weights if weights is not None else constant_weights(params)
    state_feats, ref_feats, single = _features(x_t, refs, task)
    batch, horizon, width = ref_feats.shape
    if horizon != hyper.horizon:
        raise HorizonMismatchError(
            f"MLP baseline was trained for N={hyper.horizon}, asked for N={horizon}"
        )

    h = constant(np.concatenate([state_feats, ref_feats.reshape(batch, horizon * width)], axis=1))
    for layer in range(hyper.n_hidden_layers):
        h = tanh(_affine(h, weights, f"hidden.{layer}"))
    raw = reshape(_affine(h, weights, "head"), (batch, horizon, params.n_input))
    U = squash(raw, bounds)
    return U[0] if single else U


class Policy:
    """A parameter set bound to a task: the controller used at run time."""

    def __init__(self, params: PolicyParams, task: Task):
        if params.n_state_features != task.n_state_features or params.n_input != task.n_input:
            raise ValueError(
                f"Parameters were built for {params.n_state_features} state features and "
                f"{params.n_input} inputs; task '{task.name}' has "
                f"{task.n_state_features} and {task.n_input}"
            )
        self.params = params
        self.task = task
        self.bounds = task.bounds
        self._weights = constant_weights(params)

    @property
    def kind(self) -> PolicyKind:
        return self.params.kind

    @property
    def fixed_horizon(self) -> Optional[int]:
        return self.params.hyper.horizon if self.kind == "mlp" else None

    def forward(self, x_t, refs, weights: Optional[Weights] = None) -> Tensor:
        fn = policy_forward if self.kind == "transformer" else mlp_policy_forward
        return fn(x_t, refs, self.params, self.bounds, self.task, self._weights if weights is None else weights)

    def plan(self, states: np.ndarray, paths: np.ndarray, N: int) -> np.ndarray:
        """N-step control sequences for a batch of states, as an array."""
        refs = self.task.reference(np.atleast_2d(states), paths, N)
        return self.forward(np.atleast_2d(states), refs).numpy()

    def update(self, tensors: Mapping[str, np.ndarray]) -> None:
        """Swap in a new parameter snapshot."""
        self.params.tensors = dict(tensors)
        self._weights = constant_weights(self.params)

    def save(self, path: Union[str, Path], **kwargs) -> Path:
        return self.params.save(path, **kwargs)


def build_policy(config: RunConfig, task: Task, kind: PolicyKind = "transformer", seed: Optional[int] = None) -> Policy:
    """Freshly initialised policy for ``task`` from the run configuration."""
    seed = config.seed if seed is None else seed
    if kind == "transformer":
        hyper = config.policy.model_copy(update={"task": task.name, "n_max": config.train.n_max})
        params = init_params(hyper, seed, task.n_state_features, task.n_ref_features,
                             task.n_input, task.n_state, task.bounds)
    else:
        hyper = config.mlp.model_copy(update={"task": task.name})
        params = init_mlp_params(hyper, seed, task.n_state_features, task.n_ref_features,
                                 task.n_input, task.n_state, task.bounds)
    _log.info("Initialised %s policy for task '%s' with %d parameters (seed %d)",
              kind, task.name, sum(v.size for v in params.tensors.values()), seed)
    return Policy(params, task)


def load_policy(path: Union[str, Path], task: Task) -> Policy:
    """
    Raises:
        FileNotFoundError: No checkpoint at ``path``.
        ValueError:        Not a policy checkpoint, or built for another task.
    """
    params = PolicyParams.load(path)
    if params.hyper.task != task.name:
        raise ValueError(f"Checkpoint {path} is for task '{params.hyper.task}', not '{task.name}'")
    return Policy(params, task)
