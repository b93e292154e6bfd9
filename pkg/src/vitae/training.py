"""AdamW, cosine learning-rate schedule, and a small deterministic training loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import NumericError, ShapeError
from .nn import Module
from .rng import make_rng
from .tensor import Tensor

LR_ANCHOR = 5e-4
BATCH_ANCHOR = 512


def scaled_lr(batch_size: int, base: float = LR_ANCHOR) -> float:
    """Linear batch-size scaling against ``base`` at batch 512."""
    return base * batch_size / BATCH_ANCHOR


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_base: float = 1e-3
    weight_decay: float = 0.05

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "OptimState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: OptimState, lr_t: float,
               decay_mask: Sequence[bool] | None = None, lr_scales: Sequence[float] | None = None) -> None:
    """In-place AdamW update.

    Decoupled decay ``p <- p (1 - lr wd)`` is applied first, then the
    bias-corrected Adam step. ``grads`` entries of None count as zero.
    """
    if lr_t <= 0:
        raise ValueError(f"learning rate must be positive, got {lr_t}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("params, grads and optimizer state have different lengths")
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        if m.shape != p.shape or (g is not None and g.shape != p.shape):
            raise ShapeError(f"parameter {i}: shape {p.shape} vs grad/state {None if g is None else g.shape}/{m.shape}")
        lr = lr_t * (1.0 if lr_scales is None else lr_scales[i])
        if state.weight_decay and (decay_mask is None or decay_mask[i]):
            p *= 1.0 - lr * state.weight_decay
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    """AdamW over a module's parameters; decay skips 1-D tensors (biases, norms) by default."""

    def __init__(self, model: Module, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05, decay_1d: bool = False, lr_scales: dict[str, float] | None = None):
        named = list(model.named_parameters())
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.state = OptimState.for_params([p.data for p in self.params], beta1=betas[0], beta2=betas[1], eps=eps,
                                           lr_base=lr, weight_decay=weight_decay)
        self.decay_mask = [decay_1d or p.ndim >= 2 for p in self.params]
        self.lr_scales = None if lr_scales is None else [lr_scales.get(n, 1.0) for n in self.names]
        self.lr = lr

    def step(self, lr: float | None = None) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                   self.lr if lr is None else lr, self.decay_mask, self.lr_scales)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(step: int, total_steps: int, lr_base: float, lr_min: float = 0.0, warmup_steps: int = 0) -> float:
    """Linear warmup reaching ``lr_base`` at ``warmup_steps``, then cosine decay to ``lr_min``."""
    if total_steps <= warmup_steps:
        raise ValueError(f"total_steps ({total_steps}) must exceed warmup_steps ({warmup_steps})")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return lr_base * (step + 1) / (warmup_steps + 1)
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_min + 0.5 * (lr_base - lr_min) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

@dataclass
class OptimConfig:
    lr: float | None = None  # None: scaled from the batch size
    lr_min: float = 1e-6
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_frac: float = 0.05
    batch_size: int = 64
    layer_decay: float | None = None


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records if "loss" in r]

    @property
    def accuracies(self) -> list[float]:
        return [r["acc"] for r in self.records if "acc" in r]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def evaluate(model: Module, dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode (BN running statistics, no graph)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    was_training = model.training
    model.eval()
    correct = 0
    try:
        with T.no_grad():
            for images, labels in dataset.batches(batch_size):
                logits, _ = model(Tensor(images.astype(model.dtype, copy=False)))
                correct += int((logits.data.argmax(axis=1) == labels).sum())
    finally:
        model.train(was_training)
    return correct / len(dataset)


def fit(model: Module, dataset, epochs: int, seed: int = 0, optim: OptimConfig | None = None, eval_set=None,
        augment: Callable[[np.ndarray, int], np.ndarray] | None = None, log_path: str | None = None,
        on_record: Callable[[dict], None] | None = None) -> TrainLog:
    """Train with cross-entropy, AdamW, and a per-step cosine schedule.

    Shuffling and augmentation draw from streams keyed by ``seed`` and the
    epoch/step, so equal seeds give identical loss sequences.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    optim = optim or OptimConfig()
    size = model.config.input_size
    if dataset.images.shape[2:] != (size, size):
        raise ShapeError(f"dataset images {dataset.images.shape[2:]} do not match model input {size}")
    lr_base = optim.lr if optim.lr is not None else scaled_lr(optim.batch_size)
    scales = None
    if optim.layer_decay:
        from .mim import layer_decay_scales
        scales = layer_decay_scales(model, optim.layer_decay)
    opt = AdamW(model, lr=lr_base, betas=optim.betas, eps=optim.eps, weight_decay=optim.weight_decay, lr_scales=scales)
    steps_per_epoch = math.ceil(len(dataset) / optim.batch_size)
    total = steps_per_epoch * epochs
    warmup = int(optim.warmup_frac * total)
    log = TrainLog()
    sink = open(log_path, "w") if log_path else None

    def emit(rec):
        log.records.append(rec)
        if sink:
            sink.write(json.dumps(rec, sort_keys=True) + "\n")
            sink.flush()
        if on_record:
            on_record(rec)

    model.train()
    step = 0
    try:
        for epoch in range(epochs):
            rng = make_rng(seed, 10, epoch)
            for images, labels in dataset.batches(optim.batch_size, rng):
                if augment is not None:
                    images = augment(images, (seed << 32) | step)
                lr = cosine_lr(step, total, lr_base, min(optim.lr_min, lr_base), warmup)
                logits, _ = model(Tensor(images.astype(model.dtype, copy=False)))
                loss = T.cross_entropy(logits, labels)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at step {step}")
                T.backward(loss)
                opt.step(lr)
                opt.zero_grad()
                emit({"step": step, "lr": lr, "loss": value})
                step += 1
            if eval_set is not None:
                emit({"step": step, "epoch": epoch + 1, "acc": evaluate(model, eval_set)})
    finally:
        if sink:
            sink.close()
    return log
