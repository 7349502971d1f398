"""Cosine-similarity graphs over node features."""

from __future__ import annotations

import numpy as np

from .tensor_core import Tensor2


def _unit_rows(features: Tensor2) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", features, features))
    safe = np.where(norms > 0, norms, 1.0)
    units = features / safe[:, None]
    units[norms == 0] = 0.0
    return units, norms


def build_affinity(features: Tensor2, clamp_negative: bool = True) -> Tensor2:
    """Dense N x N cosine similarity between the rows of ``features``.

    Zero-norm rows are isolated: similarity 0 to every other node, 1 to
    themselves. The diagonal is always exactly 1.
    """
    if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
        raise ValueError(f"features must be a non-empty 2-D matrix, got {features.shape}")
    units, _ = _unit_rows(features)
    a = units @ units.T
    if clamp_negative:
        np.maximum(a, 0.0, out=a)
    # Symmetrize away round-off from the matmul.
    a = 0.5 * (a + a.T)
    np.fill_diagonal(a, 1.0)
    return a


def normalize_symmetric(a: Tensor2) -> Tensor2:
    """D^{-1/2} A D^{-1/2} with D the diagonal of row sums."""
    deg = a.sum(axis=1)
    if np.any(deg <= 0):
        raise AssertionError("affinity has a row with non-positive degree")
    r = 1.0 / np.sqrt(deg)
    return a * r[:, None] * r[None, :]


def normalize_rows(a: Tensor2) -> Tensor2:
    """D^{-1} A, so every row sums to one."""
    deg = a.sum(axis=1)
    if np.any(deg <= 0):
        raise AssertionError("affinity has a row with non-positive degree")
    return a / deg[:, None]


def normalize(a: Tensor2, mode: str = "symmetric") -> Tensor2:
    if mode == "symmetric":
        return normalize_symmetric(a)
    if mode == "row":
        return normalize_rows(a)
    raise ValueError(f"unknown adjacency normalization {mode!r}")


def normalize_backward(a: Tensor2, grad_norm: Tensor2, mode: str = "symmetric") -> Tensor2:
    """Gradient of the normalized adjacency w.r.t. the raw affinity ``a``."""
    deg = a.sum(axis=1)
    if mode == "symmetric":
        r = 1.0 / np.sqrt(deg)
        grad_a = grad_norm * r[:, None] * r[None, :]
        # N_ij = A_ij r_i r_j; collect dN/dr_i from both index positions.
        weighted = grad_norm * a
        grad_r = (weighted * r[None, :]).sum(axis=1) + (weighted * r[:, None]).sum(axis=0)
        grad_deg = grad_r * (-0.5) * r ** 3
    elif mode == "row":
        grad_a = grad_norm / deg[:, None]
        grad_deg = -(grad_norm * a).sum(axis=1) / deg ** 2
    else:
        raise ValueError(f"unknown adjacency normalization {mode!r}")
    return grad_a + grad_deg[:, None]


def affinity_backward(features: Tensor2, grad_a: Tensor2, clamp_negative: bool = True) -> Tensor2:
    """Gradient of ``build_affinity`` w.r.t. the node features.

    The diagonal is constant and clamped entries carry no gradient. Zero-norm
    rows get zero gradient (the cosine is not differentiable there).
    """
    units, norms = _unit_rows(features)
    sim = units @ units.T
    mask = np.ones_like(sim, dtype=bool)
    np.fill_diagonal(mask, False)
    if clamp_negative:
        mask &= sim > 0
    g = np.where(mask, grad_a, 0.0)
    # The symmetrization averages A and A^T.
    g = 0.5 * (g + g.T)
    grad_units = (g + g.T) @ units
    radial = np.einsum("ij,ij->i", units, grad_units)
    safe = np.where(norms > 0, norms, 1.0)
    grad_f = (grad_units - units * radial[:, None]) / safe[:, None]
    grad_f[norms == 0] = 0.0
    return grad_f


def spectral_radius(m: Tensor2, iters: int = 500, seed: int = 0) -> float:
    """Largest |eigenvalue| of a symmetric matrix by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(m.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = m @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        lam = nrm
        v = w / nrm
    return float(lam)
