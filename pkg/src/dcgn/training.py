"""Models, optimizer, schedule, checkpoints and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from fractions import Fraction
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import classifier, data_io, metrics
from .classifier import MoEParams
from .layers import GraphOptions, LayerParams, stack_backward, stack_forward, stack_node_counts
from .shots import (
    ShotBoundaries,
    ShotLayerParams,
    kts_fixed,
    segment_costs,
    shot_layer_backward,
    shot_layer_forward,
)
from .tensor_core import ParamTensor

log = logging.getLogger(__name__)


class TrainingAbort(RuntimeError):
    """Loss or gradients went non-finite."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    lr_decay: float = 0.8
    lr_decay_examples: int = 4000
    batch_size: int = 32
    epochs: int = 5
    layers: int = 5
    filter_size: int = 64
    moe_mixtures: int = 2
    pooling: str = "attention"
    shots_m: int = 16
    k: int = 2
    seed: int = 0
    optimizer: str = "adam"

    def validate(self) -> None:
        for name in ("lr_decay_examples", "batch_size", "layers", "filter_size",
                     "moe_mixtures", "shots_m", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"train.{name} must be positive")
        if self.epochs < 0:
            raise ValueError("train.epochs must be non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("train.lr_decay must be in (0, 1]")
        if self.base_lr < 0:
            raise ValueError("train.base_lr must be non-negative")
        if self.pooling not in ("average", "attention"):
            raise ValueError(f"train.pooling must be 'average' or 'attention', got {self.pooling!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"train.optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass
class ModelConfig:
    """Architecture toggles. Fixed choices are listed so resolved configs record them."""

    arch: str = "dcgn"  # or "baseline": mean of frames -> MoE
    num_classes: int = 16
    input_dim: int | None = None  # resolved from the data
    shot_kmax: int | None = None  # resolved from the data: ceil(median frames / shots_m)
    activation: str = "relu"
    affinity_clamp_negative: bool = True
    adjacency_norm: str = "symmetric"
    loss: str = "binary"
    score_clip: float = classifier.SCORE_CLIP
    gate: str = "per_class"
    dummy_expert: bool = False
    attention_bias: str = "scalar"
    gap_variant: str = "global"
    gap_top_n: int = metrics.TOP_N
    kts_kernel: str = "linear"
    kts_penalty_log: str = "natural"
    short_video: str = "repeat_frames"
    attention_init: str = "zero"  # or "glorot"

    _FIXED = {"gate": "per_class", "dummy_expert": False, "attention_bias": "scalar",
              "gap_variant": "global", "kts_kernel": "linear", "kts_penalty_log": "natural",
              "short_video": "repeat_frames"}

    def validate(self) -> None:
        if self.arch not in ("dcgn", "baseline"):
            raise ValueError(f"model.arch must be 'dcgn' or 'baseline', got {self.arch!r}")
        if self.activation not in ("sigmoid", "relu"):
            raise ValueError(f"model.activation must be 'sigmoid' or 'relu', got {self.activation!r}")
        if self.adjacency_norm not in ("symmetric", "row"):
            raise ValueError("model.adjacency_norm must be 'symmetric' or 'row'")
        if self.loss not in classifier.LOSSES:
            raise ValueError(f"model.loss must be one of {classifier.LOSSES}")
        if self.num_classes < 1:
            raise ValueError("model.num_classes must be positive")
        if not 0 < self.score_clip < 0.5:
            raise ValueError("model.score_clip must be in (0, 0.5)")
        if self.gap_top_n < 1:
            raise ValueError("model.gap_top_n must be positive")
        if self.attention_init not in ("zero", "glorot"):
            raise ValueError("model.attention_init must be 'zero' or 'glorot'")
        for name, only in self._FIXED.items():
            if getattr(self, name) != only:
                raise ValueError(f"model.{name} only supports {only!r}")

    def graph_options(self) -> GraphOptions:
        return GraphOptions(self.activation, self.affinity_clamp_negative, self.adjacency_norm)


def lr_schedule(step_examples: int, cfg: TrainConfig) -> float:
    """base_lr * lr_decay ** floor(step_examples / lr_decay_examples).

    The product is formed exactly from the decimal config values and rounded
    once, so 0.001 * 0.8**2 comes out as 0.00064 rather than 0.00064000...02.
    """
    k = step_examples // cfg.lr_decay_examples
    return float(Fraction(repr(cfg.base_lr)) * Fraction(repr(cfg.lr_decay)) ** k)


# -- examples ----------------------------------------------------------------

@dataclass
class Example:
    id: str
    frames: np.ndarray
    labels: tuple[int, ...]
    boundaries: ShotBoundaries | None = None


def fit_length(frames: np.ndarray, m: int) -> np.ndarray:
    """Stretch a video shorter than ``m`` frames by repeating frames evenly."""
    n = frames.shape[0]
    if n >= m:
        return frames
    return frames[(np.arange(m) * n) // m]


def prepare_example(ex_id: str, frames: np.ndarray, labels, model_cfg: ModelConfig,
                    train_cfg: TrainConfig) -> Example:
    labels = tuple(sorted(set(int(c) for c in labels)))
    if model_cfg.arch == "baseline":
        return Example(ex_id, frames, labels)
    frames = fit_length(frames, train_cfg.shots_m)
    bounds = kts_fixed(segment_costs(frames), train_cfg.shots_m)
    return Example(ex_id, frames, labels, bounds)


def load_examples(manifest, model_cfg: ModelConfig, train_cfg: TrainConfig) -> list[Example]:
    entries = data_io.load_manifest(manifest, model_cfg.num_classes)
    out = []
    for e in entries:
        frames = data_io.read_features(e.path)
        if model_cfg.input_dim is not None and frames.shape[1] != model_cfg.input_dim:
            raise CheckpointError(
                f"{e.path}: feature width {frames.shape[1]} != model input width {model_cfg.input_dim}")
        out.append(prepare_example(e.id, frames, e.labels, model_cfg, train_cfg))
    return out


# -- models ------------------------------------------------------------------

class DcgnModel:
    """Shot layer -> stacked graph layers -> concatenated final nodes -> MoE."""

    def __init__(self, train_cfg: TrainConfig, model_cfg: ModelConfig,
                 rng: np.random.Generator | None = None):
        if model_cfg.input_dim is None or model_cfg.shot_kmax is None:
            raise ValueError("model_cfg.input_dim and shot_kmax must be resolved first")
        self.train_cfg = train_cfg
        self.model_cfg = model_cfg
        self.opts = model_cfg.graph_options()
        rng = rng or np.random.default_rng(data_io.derive_seed(train_cfg.seed, 1))
        f = train_cfg.filter_size
        self.shot = ShotLayerParams.init(rng, model_cfg.shot_kmax, model_cfg.input_dim, f)
        self.layers = [LayerParams.init(rng, train_cfg.k, f, f, model_cfg.attention_init == "zero")
                       for _ in range(train_cfg.layers - 1)]
        self.final_nodes = stack_node_counts(train_cfg.shots_m, [train_cfg.k] * len(self.layers))[-1]
        self.moe = MoEParams.init(rng, self.final_nodes * f, model_cfg.num_classes,
                                  train_cfg.moe_mixtures)

    def named_params(self) -> dict[str, ParamTensor]:
        out = {f"shot.{k}": v for k, v in self.shot.named().items()}
        for i, layer in enumerate(self.layers, start=1):
            out.update({f"layer{i}.{k}": v for k, v in layer.named().items()})
        out.update({f"moe.{k}": v for k, v in self.moe.named().items()})
        return out

    def _forward(self, ex: Example):
        shot_out = shot_layer_forward(ex.frames, ex.boundaries, self.shot, self.opts)
        flat, outs = stack_forward(shot_out.hidden, self.layers, self.train_cfg.pooling,
                                   self.opts, return_outputs=True)
        return classifier.moe_forward(flat, self.moe), (shot_out, flat, outs)

    def predict(self, ex: Example) -> np.ndarray:
        return self._forward(ex)[0]

    def backward(self, ex: Example, cache, grad_scores: np.ndarray) -> None:
        shot_out, flat, outs = cache
        g_flat = classifier.moe_backward(flat, self.moe, grad_scores)
        g_h1 = stack_backward(shot_out.hidden, self.layers, outs, g_flat,
                              self.train_cfg.pooling, self.opts)
        shot_layer_backward(ex.frames, ex.boundaries, self.shot, shot_out, g_h1, self.opts)

    def forward_with_cache(self, ex: Example):
        return self._forward(ex)


class BaselineModel:
    """Mean of all frames fed straight into the MoE head."""

    def __init__(self, train_cfg: TrainConfig, model_cfg: ModelConfig,
                 rng: np.random.Generator | None = None):
        if model_cfg.input_dim is None:
            raise ValueError("model_cfg.input_dim must be resolved first")
        self.train_cfg = train_cfg
        self.model_cfg = model_cfg
        rng = rng or np.random.default_rng(data_io.derive_seed(train_cfg.seed, 1))
        self.moe = MoEParams.init(rng, model_cfg.input_dim, model_cfg.num_classes,
                                  train_cfg.moe_mixtures)

    def named_params(self) -> dict[str, ParamTensor]:
        return {f"moe.{k}": v for k, v in self.moe.named().items()}

    def forward_with_cache(self, ex: Example):
        h = ex.frames.mean(axis=0, keepdims=True)
        return classifier.moe_forward(h, self.moe), h

    def predict(self, ex: Example) -> np.ndarray:
        return self.forward_with_cache(ex)[0]

    def backward(self, ex: Example, cache, grad_scores: np.ndarray) -> None:
        classifier.moe_backward(cache, self.moe, grad_scores)


def baseline_average_forward(frames: np.ndarray, moe: MoEParams) -> np.ndarray:
    return classifier.moe_forward(frames.mean(axis=0, keepdims=True), moe)


def build_model(train_cfg: TrainConfig, model_cfg: ModelConfig):
    if model_cfg.arch == "baseline":
        return BaselineModel(train_cfg, model_cfg)
    return DcgnModel(train_cfg, model_cfg)


def example_loss(model, ex: Example) -> float:
    scores = model.predict(ex)
    return classifier.multilabel_loss(scores, ex.labels, model.model_cfg.loss,
                                      model.model_cfg.score_clip)


def batch_loss(model, batch: list[Example]) -> float:
    return sum(example_loss(model, ex) for ex in batch) / len(batch)


def accumulate_gradients(model, batch: list[Example]) -> float:
    """Zero grads, backprop the batch-mean loss, return that loss."""
    for p in model.named_params().values():
        p.zero_grad()
    mc = model.model_cfg
    total = 0.0
    scale = 1.0 / len(batch)
    for ex in batch:
        scores, cache = model.forward_with_cache(ex)
        loss = classifier.multilabel_loss(scores, ex.labels, mc.loss, mc.score_clip)
        if not math.isfinite(loss):
            raise TrainingAbort(f"non-finite loss {loss} on example {ex.id}")
        total += loss
        grad = classifier.multilabel_loss_grad(scores, ex.labels, mc.loss, mc.score_clip) * scale
        model.backward(ex, cache, grad)
    return total * scale


# -- optimizers --------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, ParamTensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            if lr != 0.0:
                p.value -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_finite(self) -> bool:
        return all(np.all(np.isfinite(self.m[k])) and np.all(np.isfinite(self.v[k]))
                   for k in self.params)


class SGD:
    def __init__(self, params: dict[str, ParamTensor]):
        self.params = params

    def step(self, lr: float) -> None:
        if lr != 0.0:
            for p in self.params.values():
                p.value -= lr * p.grad

    def state_finite(self) -> bool:
        return True


def make_optimizer(model, cfg: TrainConfig):
    params = model.named_params()
    return Adam(params) if cfg.optimizer == "adam" else SGD(params)


def train_step(model, batch: list[Example], lr: float, optimizer=None, step: int = 0) -> float:
    """One optimizer update on ``batch``; returns the pre-update mean loss."""
    if not batch:
        raise ValueError("empty batch")
    optimizer = optimizer if optimizer is not None else make_optimizer(model, model.train_cfg)
    try:
        loss = accumulate_gradients(model, batch)
    except TrainingAbort as exc:
        raise TrainingAbort(f"step {step}: {exc}; batch ids {[ex.id for ex in batch]}") from None
    for name, p in optimizer.params.items():
        if not np.all(np.isfinite(p.grad)):
            raise TrainingAbort(
                f"step {step}: non-finite gradient in {name}; batch ids {[ex.id for ex in batch]}")
    optimizer.step(lr)
    return loss


# -- evaluation --------------------------------------------------------------

def _threads() -> int:
    env = os.environ.get("DCGN_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def evaluate(model, examples: list[Example]) -> dict:
    """GAP / Hit@1 / mean loss. Prediction order is fixed, so results are stable."""
    if not examples:
        raise metrics.UndefinedMetricError("cannot evaluate an empty example set")
    mc = model.model_cfg
    workers = min(_threads(), len(examples))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            all_scores = list(pool.map(model.predict, examples))
    else:
        all_scores = [model.predict(ex) for ex in examples]
    preds = metrics.PredictionSet(top_n=mc.gap_top_n)
    loss = 0.0
    for ex, scores in zip(examples, all_scores):
        preds.add(ex.id, scores, ex.labels)
        loss += classifier.multilabel_loss(scores, ex.labels, mc.loss, mc.score_clip)
    return {
        "gap": metrics.gap(preds),
        "hit_at_1": metrics.hit_at_1(preds),
        "loss": loss / len(examples),
        "examples": len(examples),
        "gap_variant": mc.gap_variant,
    }


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"DCGM"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict[str, ParamTensor]) -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, p in params.items():
        raw = name.encode("utf-8")
        rows, cols = p.shape
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8 or struct.unpack_from("<I", blob, 4)[0] != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version")
    pos = 8
    out = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = struct.unpack_from("<II", blob, pos)
            pos += 8
            size = 8 * rows * cols
            if pos + size > len(blob):
                raise CheckpointError(f"{path}: block {name!r} truncated at byte {pos}")
            out[name] = np.frombuffer(blob, "<f8", rows * cols, pos).reshape(rows, cols).copy()
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated block header at byte {pos} ({exc})") from None
    return out


def load_into(model, values: dict[str, np.ndarray]) -> None:
    params = model.named_params()
    missing = sorted(set(params) - set(values))
    extra = sorted(set(values) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        if values[name].shape != p.shape:
            raise CheckpointError(
                f"{name}: checkpoint shape {values[name].shape} != model shape {p.shape}")
        p.value[...] = values[name]


# -- run loop ----------------------------------------------------------------

@dataclass
class RunResult:
    model: object
    reports: list[dict] = field(default_factory=list)


def resolve_model_config(model_cfg: ModelConfig, train_cfg: TrainConfig,
                         examples: Iterable[Example]) -> ModelConfig:
    examples = list(examples)
    if not examples:
        raise ValueError("training manifest is empty")
    resolved = ModelConfig(**asdict(model_cfg))
    if resolved.input_dim is None:
        resolved.input_dim = int(examples[0].frames.shape[1])
    if resolved.shot_kmax is None:
        median = float(np.median([ex.frames.shape[0] for ex in examples]))
        resolved.shot_kmax = max(1, math.ceil(median / train_cfg.shots_m))
    return resolved


def run_training(train_cfg: TrainConfig, model_cfg: ModelConfig, train_manifest, val_manifest,
                 out_dir=None, *, train_examples=None, val_examples=None) -> RunResult:
    """Train for ``train_cfg.epochs`` epochs, evaluating on validation after each.

    With ``out_dir`` set, writes ``config.json``, ``epochs.jsonl``, one
    checkpoint per epoch and ``model.dcgm``. Preloaded example lists can be
    passed to skip reading and segmenting the manifests again.
    """
    train_cfg.validate()
    model_cfg.validate()
    if train_examples is None:
        train_examples = load_examples(train_manifest, model_cfg, train_cfg)
    model_cfg = resolve_model_config(model_cfg, train_cfg, train_examples)
    if val_examples is None:
        val_examples = load_examples(val_manifest, model_cfg, train_cfg)

    model = build_model(train_cfg, model_cfg)
    optimizer = make_optimizer(model, train_cfg)
    shuffle_rng = np.random.default_rng(data_io.derive_seed(train_cfg.seed, 2))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(
            {"train": asdict(train_cfg), "model": asdict(model_cfg)}, indent=2) + "\n")
        (out / "epochs.jsonl").write_text("")

    result = RunResult(model)
    seen = 0
    step = 0

    def record(report):
        result.reports.append(report)
        log.info("epoch %d: %s", report["epoch"], json.dumps(report))
        if out is not None:
            with open(out / "epochs.jsonl", "a") as fh:
                fh.write(json.dumps(report) + "\n")

    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_examples))
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [train_examples[i] for i in order[start:start + train_cfg.batch_size]]
            lr = lr_schedule(seen, train_cfg)
            losses.append(train_step(model, batch, lr, optimizer, step))
            seen += len(batch)
            step += 1
        if not optimizer.state_finite():
            raise TrainingAbort(f"optimizer state went non-finite in epoch {epoch}")
        report = {"epoch": epoch, "examples_seen": seen, "lr": lr_schedule(seen, train_cfg),
                  "train_loss": float(np.mean(losses)), **evaluate(model, val_examples)}
        if out is not None:
            save_checkpoint(out / f"checkpoint_epoch{epoch}.dcgm", model.named_params())
        record(report)

    if train_cfg.epochs == 0:
        record({"epoch": 0, "examples_seen": 0, "lr": lr_schedule(0, train_cfg),
                "train_loss": None, **evaluate(model, val_examples)})
    if out is not None:
        save_checkpoint(out / "model.dcgm", model.named_params())
    return result


def load_model(checkpoint) -> object:
    """Rebuild a model from a checkpoint and the ``config.json`` beside it."""
    checkpoint = Path(checkpoint)
    cfg_path = checkpoint.parent / "config.json"
    if not cfg_path.exists():
        raise CheckpointError(f"{cfg_path} not found next to checkpoint")
    raw = json.loads(cfg_path.read_text())
    train_cfg = TrainConfig(**raw["train"])
    model_cfg = ModelConfig(**raw["model"])
    model = build_model(train_cfg, model_cfg)
    load_into(model, read_checkpoint(checkpoint))
    return model
