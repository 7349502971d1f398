"""One graph layer: pool K consecutive nodes, convolve them, propagate.

Windows are described by an integer gather matrix ``idx`` of shape
(M, width) whose entries index rows of the input, with -1 marking padding.
Fixed-size windows and shot-sized windows both reduce to this form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import graph
from .tensor_core import (
    DimensionError,
    ParamTensor,
    Tensor2,
    activate,
    activate_backward,
)

POOLINGS = ("average", "attention")


def num_windows(n: int, k: int) -> int:
    return -(-n // k)


def window_index(n: int, k: int) -> np.ndarray:
    """Gather matrix for windows [i*k, min((i+1)*k, n))."""
    if n < 1 or k < 1:
        raise ValueError(f"need n >= 1 and k >= 1, got n={n}, k={k}")
    m = num_windows(n, k)
    idx = np.arange(m * k).reshape(m, k)
    idx[idx >= n] = -1
    return idx


def segment_index(starts, stops, width: int | None = None) -> np.ndarray:
    """Gather matrix for arbitrary [start, stop) spans.

    With ``width`` given, longer spans are truncated to their first ``width``
    rows and shorter ones padded.
    """
    lengths = [b - a for a, b in zip(starts, stops)]
    if any(n < 1 for n in lengths):
        raise ValueError("every span must be non-empty")
    w = max(lengths) if width is None else width
    idx = np.full((len(lengths), w), -1, dtype=np.int64)
    for i, (a, n) in enumerate(zip(starts, lengths)):
        take = min(n, w)
        idx[i, :take] = np.arange(a, a + take)
    return idx


def _gather(h: Tensor2, idx: np.ndarray) -> np.ndarray:
    padded = np.vstack([h, np.zeros((1, h.shape[1]))])
    return padded[idx]  # -1 picks the zero row


def _scatter(grad_windows: np.ndarray, idx: np.ndarray, n: int) -> Tensor2:
    out = np.zeros((n + 1, grad_windows.shape[-1]))
    np.add.at(out, idx.reshape(-1), grad_windows.reshape(-1, grad_windows.shape[-1]))
    return out[:n]


# -- pooling -----------------------------------------------------------------

def pool_mean(h: Tensor2, idx: np.ndarray) -> Tensor2:
    counts = (idx >= 0).sum(axis=1)
    return _gather(h, idx).sum(axis=1) / counts[:, None]


def pool_mean_backward(h: Tensor2, idx: np.ndarray, grad_out: Tensor2) -> Tensor2:
    counts = (idx >= 0).sum(axis=1)
    g = np.broadcast_to((grad_out / counts[:, None])[:, None, :],
                        idx.shape + (h.shape[1],))
    g = np.where((idx >= 0)[..., None], g, 0.0)
    return _scatter(g, idx, h.shape[0])


def _attention_weights(x: np.ndarray, mask: np.ndarray, w_att: Tensor2, b_att: float) -> np.ndarray:
    scores = x @ w_att[:, 0] + b_att
    scores = np.where(mask, scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(scores), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def pool_attention(h: Tensor2, idx: np.ndarray, w_att: Tensor2, b_att: float) -> Tensor2:
    x = _gather(h, idx)
    alpha = _attention_weights(x, idx >= 0, w_att, b_att)
    return np.einsum("mw,mwd->md", alpha, x)


def pool_attention_backward(h, idx, w_att, b_att, grad_out):
    """Returns (grad_h, grad_w_att, grad_b_att)."""
    mask = idx >= 0
    x = _gather(h, idx)
    alpha = _attention_weights(x, mask, w_att, b_att)
    grad_alpha = np.einsum("mwd,md->mw", x, grad_out)
    grad_scores = alpha * (grad_alpha - (alpha * grad_alpha).sum(axis=1, keepdims=True))
    grad_scores = np.where(mask, grad_scores, 0.0)
    grad_w = np.einsum("mwd,mw->d", x, grad_scores)[:, None]
    grad_b = float(grad_scores.sum())
    grad_x = alpha[..., None] * grad_out[:, None, :] + grad_scores[..., None] * w_att[:, 0]
    grad_x = np.where(mask[..., None], grad_x, 0.0)
    return _scatter(grad_x, idx, h.shape[0]), grad_w, grad_b


def average_pool(h: Tensor2, k: int) -> Tensor2:
    """Mean of each window of ``k`` consecutive rows; the tail window may be short."""
    return pool_mean(h, window_index(h.shape[0], k))


def attention_pool(h: Tensor2, k: int, w_att: Tensor2, b_att: float) -> Tensor2:
    """Softmax-weighted sum of each window, weights from a linear score per row."""
    if w_att.shape != (h.shape[1], 1):
        raise DimensionError(f"w_att must be {(h.shape[1], 1)}, got {w_att.shape}")
    return pool_attention(h, window_index(h.shape[0], k), w_att, b_att)


# -- convolution -------------------------------------------------------------

def convolve(h: Tensor2, idx: np.ndarray, w_conv: Tensor2) -> Tensor2:
    m, width = idx.shape
    if w_conv.shape[0] != width * h.shape[1]:
        raise DimensionError(
            f"w_conv has {w_conv.shape[0]} rows, expected {width}*{h.shape[1]}")
    return _gather(h, idx).reshape(m, -1) @ w_conv


def convolve_backward(h, idx, w_conv, grad_out):
    """Returns (grad_h, grad_w_conv)."""
    m, width = idx.shape
    flat = _gather(h, idx).reshape(m, -1)
    grad_w = flat.T @ grad_out
    grad_flat = (grad_out @ w_conv.T).reshape(m, width, h.shape[1])
    grad_flat = np.where((idx >= 0)[..., None], grad_flat, 0.0)
    return _scatter(grad_flat, idx, h.shape[0]), grad_w


def node_convolve(h: Tensor2, k: int, w_conv: Tensor2) -> Tensor2:
    """Flatten each k-row window (zero-padded tail) and project with ``w_conv``."""
    return convolve(h, window_index(h.shape[0], k), w_conv)


# -- propagation -------------------------------------------------------------

@dataclass
class GraphOptions:
    activation: str = "sigmoid"
    clamp_negative: bool = True
    normalization: str = "symmetric"


def propagate(pooled: Tensor2, convolved: Tensor2, w_prop: Tensor2,
              activation: str | GraphOptions = "sigmoid") -> Tensor2:
    opts = activation if isinstance(activation, GraphOptions) else GraphOptions(activation)
    if pooled.shape[0] != convolved.shape[0]:
        raise DimensionError(
            f"pooled has {pooled.shape[0]} rows but convolved has {convolved.shape[0]}")
    adj = graph.normalize(graph.build_affinity(pooled, opts.clamp_negative), opts.normalization)
    return activate(adj @ convolved @ w_prop, opts.activation)


def propagate_backward(pooled, convolved, w_prop, opts: GraphOptions, grad_out):
    """Returns (grad_pooled, grad_convolved, grad_w_prop)."""
    a = graph.build_affinity(pooled, opts.clamp_negative)
    adj = graph.normalize(a, opts.normalization)
    cw = convolved @ w_prop
    pre = adj @ cw
    out = activate(pre, opts.activation)
    grad_pre = activate_backward(pre, out, grad_out, opts.activation)
    ac = adj @ convolved
    grad_w = ac.T @ grad_pre
    grad_conv = adj.T @ grad_pre @ w_prop.T
    grad_adj = grad_pre @ cw.T
    grad_a = graph.normalize_backward(a, grad_adj, opts.normalization)
    grad_pooled = graph.affinity_backward(pooled, grad_a, opts.clamp_negative)
    return grad_pooled, grad_conv, grad_w


# -- full layer --------------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


@dataclass
class LayerParams:
    k: int
    d_in: int
    d_out: int
    w_conv: ParamTensor
    w_att: ParamTensor
    b_att: ParamTensor
    w_prop: ParamTensor

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        expected = {
            "w_conv": (self.k * self.d_in, self.d_out),
            "w_att": (self.d_in, 1),
            "b_att": (1, 1),
            "w_prop": (self.d_out, self.d_out),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"{name} has shape {got}, expected {shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, k: int, d_in: int, d_out: int,
             zero_attention: bool = False) -> "LayerParams":
        return cls(
            k, d_in, d_out,
            w_conv=ParamTensor(glorot(rng, k * d_in, d_out)),
            w_att=ParamTensor(np.zeros((d_in, 1)) if zero_attention else glorot(rng, d_in, 1)),
            b_att=ParamTensor(np.zeros((1, 1))),
            w_prop=ParamTensor(glorot(rng, d_out, d_out)),
        )

    def named(self) -> dict[str, ParamTensor]:
        return {"w_conv": self.w_conv, "w_att": self.w_att,
                "b_att": self.b_att, "w_prop": self.w_prop}


@dataclass
class LayerOutput:
    pooled: Tensor2
    convolved: Tensor2
    hidden: Tensor2


def _pool(h, idx, params: LayerParams, pooling: str):
    if pooling == "average":
        return pool_mean(h, idx)
    if pooling == "attention":
        return pool_attention(h, idx, params.w_att.value, float(params.b_att.value[0, 0]))
    raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")


def layer_forward(h_prev: Tensor2, params: LayerParams, pooling: str = "attention",
                  activation: str | GraphOptions = "sigmoid") -> LayerOutput:
    if h_prev.shape[1] != params.d_in:
        raise DimensionError(f"input width {h_prev.shape[1]} != layer d_in {params.d_in}")
    opts = activation if isinstance(activation, GraphOptions) else GraphOptions(activation)
    idx = window_index(h_prev.shape[0], params.k)
    pooled = _pool(h_prev, idx, params, pooling)
    convolved = convolve(h_prev, idx, params.w_conv.value)
    hidden = propagate(pooled, convolved, params.w_prop.value, opts)
    return LayerOutput(pooled, convolved, hidden)


def layer_backward(h_prev: Tensor2, params: LayerParams, out: LayerOutput, grad_hidden: Tensor2,
                   pooling: str = "attention",
                   activation: str | GraphOptions = "sigmoid") -> Tensor2:
    """Accumulate parameter grads and return the gradient w.r.t. ``h_prev``."""
    opts = activation if isinstance(activation, GraphOptions) else GraphOptions(activation)
    idx = window_index(h_prev.shape[0], params.k)
    g_pooled, g_conv, g_wprop = propagate_backward(
        out.pooled, out.convolved, params.w_prop.value, opts, grad_hidden)
    params.w_prop.grad += g_wprop
    g_h, g_wconv = convolve_backward(h_prev, idx, params.w_conv.value, g_conv)
    params.w_conv.grad += g_wconv
    if pooling == "average":
        g_h += pool_mean_backward(h_prev, idx, g_pooled)
    else:
        gh_att, gw_att, gb_att = pool_attention_backward(
            h_prev, idx, params.w_att.value, float(params.b_att.value[0, 0]), g_pooled)
        g_h += gh_att
        params.w_att.grad += gw_att
        params.b_att.grad += gb_att
    return g_h


def stack_node_counts(n: int, ks) -> list[int]:
    counts = [n]
    for k in ks:
        counts.append(num_windows(counts[-1], k))
    return counts


def stack_forward(h0: Tensor2, layers: list[LayerParams], pooling: str = "attention",
                  activation: str | GraphOptions = "sigmoid",
                  return_outputs: bool = False):
    """Run the layers in order and flatten the last hidden rows into one row.

    With ``return_outputs`` the per-layer ``LayerOutput`` list is returned too,
    which ``stack_backward`` needs.
    """
    outputs = []
    h = h0
    for params in layers:
        out = layer_forward(h, params, pooling, activation)
        outputs.append(out)
        h = out.hidden
    flat = h.reshape(1, -1)
    if return_outputs:
        return flat, outputs
    return flat


def stack_backward(h0: Tensor2, layers: list[LayerParams], outputs: list[LayerOutput],
                   grad_flat: Tensor2, pooling: str = "attention",
                   activation: str | GraphOptions = "sigmoid") -> Tensor2:
    if not outputs:
        return grad_flat.reshape(h0.shape)
    grad = grad_flat.reshape(outputs[-1].hidden.shape)
    for i in range(len(layers) - 1, -1, -1):
        h_prev = h0 if i == 0 else outputs[i - 1].hidden
        grad = layer_backward(h_prev, layers[i], outputs[i], grad, pooling, activation)
    return grad
