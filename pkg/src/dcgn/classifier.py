"""Mixture-of-experts multi-label head and its loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import glorot
from .tensor_core import DimensionError, ParamTensor, Tensor2, row_softmax, sigmoid

LOSSES = ("binary", "categorical")
SCORE_CLIP = 1e-6


@dataclass
class MoEParams:
    """Per-class gating over ``num_experts`` sigmoid experts.

    Column ``c * E + e`` of the weight matrices belongs to class c, expert e.
    """

    num_classes: int
    num_experts: int
    w_gate: ParamTensor
    b_gate: ParamTensor
    w_expert: ParamTensor
    b_expert: ParamTensor

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError("need at least one expert")
        width = self.num_classes * self.num_experts
        d = self.w_gate.shape[0]
        for name, shape in (("w_gate", (d, width)), ("w_expert", (d, width)),
                            ("b_gate", (1, width)), ("b_expert", (1, width))):
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def input_dim(self) -> int:
        return self.w_gate.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, num_classes: int,
             num_experts: int = 2) -> "MoEParams":
        width = num_classes * num_experts
        return cls(num_classes, num_experts,
                   w_gate=ParamTensor(glorot(rng, input_dim, width)),
                   b_gate=ParamTensor(np.zeros((1, width))),
                   w_expert=ParamTensor(glorot(rng, input_dim, width)),
                   b_expert=ParamTensor(np.zeros((1, width))))

    def named(self) -> dict[str, ParamTensor]:
        return {"w_gate": self.w_gate, "b_gate": self.b_gate,
                "w_expert": self.w_expert, "b_expert": self.b_expert}


def _gate_and_experts(h: Tensor2, params: MoEParams):
    if h.shape != (1, params.input_dim):
        raise DimensionError(f"MoE input must be 1x{params.input_dim}, got {h.shape}")
    c, e = params.num_classes, params.num_experts
    gate_logits = (h @ params.w_gate.value + params.b_gate.value).reshape(c, e)
    expert = sigmoid((h @ params.w_expert.value + params.b_expert.value).reshape(c, e))
    return row_softmax(gate_logits), expert


def moe_forward(h: Tensor2, params: MoEParams) -> np.ndarray:
    """Class scores in (0, 1), shape (C,)."""
    gate, expert = _gate_and_experts(h, params)
    return (gate * expert).sum(axis=1)


def moe_backward(h: Tensor2, params: MoEParams, grad_scores: np.ndarray) -> Tensor2:
    """Accumulate MoE parameter grads; return the gradient w.r.t. ``h``."""
    gate, expert = _gate_and_experts(h, params)
    g = grad_scores[:, None]
    grad_gate = g * expert
    grad_gate_logits = gate * (grad_gate - (gate * grad_gate).sum(axis=1, keepdims=True))
    grad_expert_logits = g * gate * expert * (1.0 - expert)
    gl = grad_gate_logits.reshape(1, -1)
    el = grad_expert_logits.reshape(1, -1)
    params.w_gate.grad += h.T @ gl
    params.b_gate.grad += gl
    params.w_expert.grad += h.T @ el
    params.b_expert.grad += el
    return gl @ params.w_gate.value.T + el @ params.w_expert.value.T


def label_vector(labels, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes)
    y[list(labels)] = 1.0
    return y


def multilabel_loss(scores: np.ndarray, labels, kind: str = "binary",
                    clip: float = SCORE_CLIP) -> float:
    """Cross-entropy of class scores against a label index set.

    ``binary`` sums per-class binary cross-entropy; ``categorical`` keeps only
    the positive-class terms.
    """
    y = label_vector(labels, scores.shape[0])
    p = np.clip(scores, clip, 1.0 - clip)
    if kind == "binary":
        return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum())
    if kind == "categorical":
        return float(-(y * np.log(p)).sum())
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


def multilabel_loss_grad(scores: np.ndarray, labels, kind: str = "binary",
                         clip: float = SCORE_CLIP) -> np.ndarray:
    y = label_vector(labels, scores.shape[0])
    inside = (scores > clip) & (scores < 1.0 - clip)
    p = np.clip(scores, clip, 1.0 - clip)
    if kind == "binary":
        g = -y / p + (1.0 - y) / (1.0 - p)
    elif kind == "categorical":
        g = -y / p
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return np.where(inside, g, 0.0)
