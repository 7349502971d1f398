"""Finite-difference check of every parameter tensor of a tiny DCGN."""

from __future__ import annotations

import dataclasses

import numpy as np

from .data_io import derive_seed
from .tensor_core import GradCheckReport, finite_diff_check
from .training import (
    DcgnModel,
    ModelConfig,
    TrainConfig,
    accumulate_gradients,
    batch_loss,
    prepare_example,
)

FRAMES = 12
DIM = 6
STACKED_LAYERS = 2
CLASSES = 3
SHOTS = 8  # 8 -> 4 -> 2 nodes, so both stacked layers build a real graph
FILTERS = 4


def tiny_model(model_cfg: ModelConfig, seed: int):
    train_cfg = TrainConfig(layers=STACKED_LAYERS + 1, filter_size=FILTERS, shots_m=SHOTS, k=2,
                            moe_mixtures=2, pooling="attention", seed=seed)
    cfg = dataclasses.replace(model_cfg, arch="dcgn", num_classes=CLASSES, input_dim=DIM,
                              shot_kmax=-(-FRAMES // SHOTS), attention_init="glorot")
    model = DcgnModel(train_cfg, cfg)
    rng = np.random.default_rng(derive_seed(seed, 3))
    frames = rng.standard_normal((FRAMES, DIM))
    labels = [c for c in range(CLASSES) if rng.random() < 0.5] or [0]
    # Nudge attention biases off zero so the scalar path is exercised too.
    for layer in model.layers:
        layer.b_att.value[...] = rng.normal(scale=0.1)
    example = prepare_example("gradcheck", frames, labels, cfg, train_cfg)
    return model, example


def run_gradcheck(model_cfg: ModelConfig | None = None, seed: int = 0,
                  epsilon: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    model, ex = tiny_model(model_cfg or ModelConfig(), seed)
    return finite_diff_check(
        lambda: batch_loss(model, [ex]),
        model.named_params(),
        epsilon=epsilon,
        tol=tol,
        analytic=lambda: accumulate_gradients(model, [ex]),
    )
