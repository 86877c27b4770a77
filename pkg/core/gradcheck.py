"""Central finite-difference checks of tape gradients."""
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from core.tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    constant,
    multiply,
    record,
    supported_ops,
    tsum,
)

_log = logging.getLogger(__name__)

ScalarFn = Callable[[dict[str, Tensor]], Tensor]


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between tape and finite differences."""

    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


# Rounding in one evaluation of fn, in ulps of its value.
_RESOLUTION_ULPS = 64


def _relative_error(analytic: float, numeric: float, floor: float) -> float:
    """
    |a - n| relative to the larger magnitude. Entries smaller than ``floor``
    sit below what the central difference can resolve and are measured
    against ``floor`` instead.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor, np.finfo(np.float64).tiny)


def _evaluate(fn: ScalarFn, params: Mapping[str, np.ndarray], where: str) -> float:
    try:
        value = fn({name: constant(v) for name, v in params.items()})
    except NonFiniteError as exc:
        raise NonFiniteError(f"Function is non-finite at perturbed point {where}") from exc
    return value.item()


def grad_check(
    fn: ScalarFn,
    params: Mapping[str, np.ndarray],
    h: float = 1e-6,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """
    Compare the tape gradient of ``fn`` with central differences.

    Args:
        fn:          Maps a dict of tensors (same keys as ``params``) to a scalar tensor.
        params:      Point of evaluation.
        h:           Finite-difference step.
        tol:         Pass threshold on the relative error.
        max_entries: Check at most this many randomly chosen entries per tensor.
        rng:         Source of the entry sample; defaults to seed 0.

    Returns:
        A :class:`GradCheckReport`.

    Raises:
        ValueError:     ``h`` is not positive.
        NonFiniteError: ``fn`` is non-finite at a perturbed point.
    """
    if h <= 0:
        raise ValueError(f"Finite-difference step must be positive, got {h}")
    rng = rng or np.random.default_rng(0)
    point = {name: np.array(value, dtype=np.float64) for name, value in params.items()}

    tape = Tape()
    watched = tape.watch_all(point)
    loss = fn(watched)
    if loss.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {loss.shape}")
    tape.backward(loss)

    report = GradCheckReport(tol=tol)
    for name, value in point.items():
        analytic = tape.gradient(watched[name]).reshape(-1)
        flat = value.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))

        worst = 0.0
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + h
            plus = _evaluate(fn, point, f"{name}[{idx}]+h")
            flat[idx] = original - h
            minus = _evaluate(fn, point, f"{name}[{idx}]-h")
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * h)
            resolution = _RESOLUTION_ULPS * np.finfo(np.float64).eps * max(abs(plus), abs(minus)) / (2.0 * h)
            worst = max(worst, _relative_error(float(analytic[idx]), numeric, resolution / tol))
        report.errors[name] = worst
        _log.debug("grad_check %s: max relative error %.3e over %d entries", name, worst, len(indices))
    return report


# ---------------------------------------------------------------------------
# Per-op suite
# ---------------------------------------------------------------------------

def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.2, high: float = 1.5) -> np.ndarray:
    return rng.uniform(low, high, shape) * rng.choice([-1.0, 1.0], shape)


_OP_CASES: dict[str, Callable[[np.random.Generator], tuple[list[np.ndarray], dict]]] = {
    "add": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], {}),
    "subtract": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], {}),
    "multiply": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], {}),
    "divide": lambda r: ([r.normal(size=(3, 4)), _away_from_zero(r, (3, 4), 0.5)], {}),
    "negate": lambda r: ([r.normal(size=(3, 4))], {}),
    "scale": lambda r: ([r.normal(size=(3, 4))], {"factor": -1.7}),
    "add_row": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=4)], {}),
    "matmul": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))], {}),
    "transpose": lambda r: ([r.normal(size=(2, 3, 4))], {}),
    "permute": lambda r: ([r.normal(size=(2, 3, 4))], {"axes": (1, 0, 2)}),
    "reshape": lambda r: ([r.normal(size=(3, 4))], {"shape": (2, 6)}),
    "slice": lambda r: ([r.normal(size=(3, 4))], {"key": (slice(None), slice(1, 3))}),
    "sum": lambda r: ([r.normal(size=(3, 4))], {"axis": 0}),
    "mean": lambda r: ([r.normal(size=(3, 4))], {"axis": 1}),
    "square": lambda r: ([r.normal(size=(3, 4))], {}),
    "sqrt": lambda r: ([r.uniform(0.5, 2.0, size=(3, 4))], {}),
    "tanh": lambda r: ([r.normal(size=(3, 4))], {}),
    "relu": lambda r: ([_away_from_zero(r, (3, 4))], {}),
    "sin": lambda r: ([r.normal(size=(3, 4))], {}),
    "cos": lambda r: ([r.normal(size=(3, 4))], {}),
    "atan2": lambda r: ([r.normal(size=(3, 4)), _away_from_zero(r, (3, 4), 0.5)], {}),
    "concat": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 2))], {"axis": 1}),
    "softmax": lambda r: ([r.normal(size=(3, 5))], {}),
    "layer_norm": lambda r: ([r.normal(size=(3, 6)), r.normal(size=6), r.normal(size=6)], {}),
}


def op_suite(
    rng: np.random.Generator,
    h: float = 1e-6,
    tol: float = 1e-4,
) -> dict[str, GradCheckReport]:
    """
    Finite-difference check of every registered op on random inputs.

    Each op's output is contracted against a fixed random weight so every
    output entry contributes to the scalar under test.
    """
    missing = set(supported_ops()) - set(_OP_CASES)
    if missing:
        raise ValueError(f"No finite-difference case for ops: {sorted(missing)}")

    reports = {}
    for op in supported_ops():
        arrays, attrs = _OP_CASES[op](rng)
        params = {f"x{i}": a for i, a in enumerate(arrays)}
        names = list(params)
        shaped = record(op, *[constant(a) for a in arrays], **attrs)
        weight = constant(rng.normal(size=shaped.shape))

        def fn(p, op=op, attrs=attrs, weight=weight, names=names):
            return tsum(multiply(record(op, *[p[n] for n in names], **attrs), weight))

        reports[op] = grad_check(fn, params, h=h, tol=tol)
    return reports
