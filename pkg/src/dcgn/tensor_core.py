"""Dense 2-D float64 arrays, a few primitive ops, and a gradient checker.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.
Backward rules live next to the forward ops that need them (``layers``,
``graph``, ``classifier``); this module only holds the shared pieces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Tensor2 = np.ndarray

ACTIVATIONS = ("sigmoid", "relu", "identity")


class DimensionError(ValueError):
    pass


class GradientCheckError(RuntimeError):
    """Raised when the checked function returns a non-finite value."""


def as_tensor(x, *, name: str = "tensor") -> Tensor2:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


@dataclass
class ParamTensor:
    """A trainable matrix and its accumulated gradient."""

    value: Tensor2
    grad: Tensor2 = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = as_tensor(self.value, name="param")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def row_softmax(x: Tensor2) -> Tensor2:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(x: Tensor2, kind: str = "sigmoid") -> Tensor2:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "identity":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activate_backward(pre: Tensor2, out: Tensor2, grad_out: Tensor2, kind: str) -> Tensor2:
    """Gradient w.r.t. the pre-activation, given the forward input and output."""
    if kind == "sigmoid":
        return grad_out * out * (1.0 - out)
    if kind == "relu":
        return grad_out * (pre > 0)
    if kind == "identity":
        return grad_out
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class ParamReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple[int, int] | None
    passed: bool


@dataclass
class GradCheckReport:
    params: list[ParamReport]
    tol: float

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def failures(self) -> list[str]:
        return [p.name for p in self.params if not p.passed]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise.

    The floor keeps entries whose true gradient is ~0 from turning round-off
    into huge relative errors.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[], float],
    params: Sequence[ParamTensor] | dict[str, ParamTensor],
    epsilon: float = 1e-5,
    tol: float = 1e-4,
    analytic: Callable[[], None] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f`` evaluates the scalar loss from the current parameter values.
    ``analytic`` (if given) is called once after zeroing all grads and must
    fill ``param.grad``; otherwise the grads already present are compared.
    Each parameter entry is perturbed in place and restored afterwards.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"param{i}", p) for i, p in enumerate(params)]

    if analytic is not None:
        for _, p in named:
            p.zero_grad()
        analytic()

    def evaluate(where: str) -> float:
        with np.errstate(all="ignore"):
            val = float(f())
        if not np.isfinite(val):
            raise GradientCheckError(f"non-finite loss {val} while perturbing {where}")
        return val

    reports = []
    for name, p in named:
        numeric = np.zeros_like(p.value)
        if not p.value.flags.c_contiguous:
            p.value = np.ascontiguousarray(p.value)
        flat = p.value.reshape(-1)  # a view, so writes perturb the parameter
        nflat = numeric.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            where = f"{name}[{tuple(int(i) for i in np.unravel_index(idx, p.shape))}]"
            flat[idx] = orig + epsilon
            fp = evaluate(where)
            flat[idx] = orig - epsilon
            fm = evaluate(where)
            flat[idx] = orig
            nflat[idx] = (fp - fm) / (2.0 * epsilon)
        rel = relative_error(p.grad, numeric, floor)
        if rel.size:
            worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
            max_rel = float(rel[worst])
            max_abs = float(np.max(np.abs(p.grad - numeric)))
            worst_idx = (int(worst[0]), int(worst[1]))
        else:
            max_rel, max_abs, worst_idx = 0.0, 0.0, None
        reports.append(ParamReport(name, max_rel, max_abs, worst_idx, max_rel <= tol))
    return GradCheckReport(reports, tol)
