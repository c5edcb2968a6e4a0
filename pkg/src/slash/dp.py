"""Differentially private finetuning: per-sample clipping plus Gaussian noise.

Privacy accounting is not done here. The noise multiplier is an input.
Lots are fixed-size and drawn without replacement each epoch, which is not
the Poisson sampling most accountants assume.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng as crng
from .tensor import Tensor
from .trainer import (EncodedDataset, HistoryRecord, TaskModule, TrainConfig, per_sample_gradients, train)
from .transformer import TransformerWeights

# Noise multipliers reported for a target privacy budget, keyed by task.
NOISE_PRESETS = {"mnli": 0.643, "qqp": 0.651, "qnli": 0.831, "sst2": 0.925}


@dataclass(frozen=True)
class DPConfig:
    clip: float
    noise_multiplier: float
    lot_size: int
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.clip > 0:
            raise ValueError("clip threshold must be positive")
        if self.noise_multiplier < 0 or not math.isfinite(self.noise_multiplier):
            raise ValueError("noise multiplier must be finite and non-negative")
        if self.lot_size < 1:
            raise ValueError("lot size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if math.isinf(self.clip) and self.noise_multiplier > 0:
            raise ValueError("an infinite clip threshold only makes sense without noise")


@dataclass
class AuditRecord:
    step: int
    max_pre_clip_norm: float
    max_post_clip_norm: float
    clipped_fraction: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def clip_per_sample(grad: np.ndarray, clip: float) -> np.ndarray:
    """Scale ``grad`` down to L2 norm ``clip`` if it is longer; otherwise return it unchanged."""
    norm = _norm(grad)
    if norm <= clip:
        return grad
    factor = clip / norm
    out = grad * grad.dtype.type(factor)
    # Rounding can leave the result a few ulps above the threshold.
    while _norm(out) > clip:
        factor = math.nextafter(factor * (1 - 2 * float(np.finfo(grad.dtype).eps)), 0.0)
        out = grad * grad.dtype.type(factor)
    return out


def _norm(g: np.ndarray) -> float:
    return math.sqrt(float(np.square(g, dtype=np.float64).sum()))


def gaussian_noise(seed: int, step: int, size: int, std: float) -> np.ndarray:
    """Noise for one update, reproducible from ``(seed, step)``."""
    return std * crng.normal_block(seed, crng.STREAM_NOISE, step, np.zeros(1, dtype=np.int64), size)[0]


def dp_step(per_sample: np.ndarray | Sequence[np.ndarray], dp: DPConfig, step: int = 0,
            audit: list[AuditRecord] | None = None) -> np.ndarray:
    """``(sum of clipped rows + N(0, (sigma * clip)^2 I)) / lot_size``.

    ``per_sample`` holds one flattened gradient per row. Rows are summed in
    order, so the result is deterministic for a fixed ``(dp.seed, step)``.
    """
    rows = list(per_sample)
    if not rows:
        raise ValueError("empty lot")
    total = None
    pre, post, n_clipped = [], [], 0
    for g in rows:
        c = clip_per_sample(g, dp.clip)
        n_clipped += c is not g
        if audit is not None:
            pre.append(_norm(g))
            post.append(_norm(c))
        total = c.copy() if total is None else total + c
    if dp.noise_multiplier > 0:
        noise = gaussian_noise(dp.seed, step, total.size, dp.noise_multiplier * dp.clip)
        total = total + noise.astype(total.dtype).reshape(total.shape)
    if audit is not None:
        audit.append(AuditRecord(step, max(pre), max(post), n_clipped / len(rows)))
    return total / dp.lot_size


def _flatten(grads: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.reshape(-1) for g in grads])


def _unflatten(flat: np.ndarray, like: list[Tensor]) -> list[np.ndarray]:
    out, start = [], 0
    for p in like:
        out.append(flat[start:start + p.data.size].reshape(p.shape))
        start += p.data.size
    return out


def dp_train(
    dp: DPConfig,
    weights: TransformerWeights,
    task: TaskModule,
    train_data: EncodedDataset,
    dev_data: EncodedDataset | None = None,
    *,
    base: TrainConfig | None = None,
    on_record: Callable[[HistoryRecord], None] | None = None,
    on_audit: Callable[[AuditRecord], None] | None = None,
) -> tuple[TaskModule, list[HistoryRecord], list[AuditRecord]]:
    """Private finetuning on top of ``train``.

    Takes ``lr``, ``metric`` and ``select_best`` from ``base``; forces a
    constant learning rate, no global clipping and full lots of ``dp.lot_size``.
    """
    if dp.lot_size > len(train_data):
        raise ValueError(f"lot size {dp.lot_size} exceeds the {len(train_data)} training examples")
    config = dataclasses.replace(base or TrainConfig(), epochs=dp.epochs, batch_size=dp.lot_size, schedule="constant",
                                 grad_clip=None, drop_last=True, seed=dp.seed)
    audit: list[AuditRecord] = []

    def gradient_fn(task_, data, idx, params, step):
        losses, rows = [], []
        for loss_i, g_i in per_sample_gradients(weights, task_, data, idx, params):
            losses.append(loss_i)
            rows.append(_flatten(g_i))
        update = dp_step(rows, dp, step, audit)
        if on_audit:
            on_audit(audit[-1])
        return float(np.mean(losses)), _unflatten(update, params)

    task, history = train(config, weights, task, train_data, dev_data, gradient_fn=gradient_fn, on_record=on_record)
    return task, history, audit
