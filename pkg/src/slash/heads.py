"""Task heads and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import rng as crng
from . import tensor as T
from .tensor import Tensor


class TaskKind(str, Enum):
    CLASSIFY = "classify"
    REGRESS = "regress"
    TOKEN_CLASSIFY = "token_classify"


@dataclass
class ClassifierHead:
    weight: Tensor  # (C, hidden)
    bias: Tensor  # (C,)
    kind: TaskKind = TaskKind.CLASSIFY

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"head weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if self.kind is TaskKind.REGRESS and self.n_classes != 1:
            raise ValueError("a regression head has exactly one output")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def hidden(self) -> int:
        return self.weight.shape[1]

    @property
    def n_params(self) -> int:
        return self.weight.data.size + self.bias.data.size

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    @classmethod
    def initialize(cls, n_classes: int, hidden: int, seed: int, kind=TaskKind.CLASSIFY, dtype=None) -> ClassifierHead:
        dtype = dtype or T.default_dtype()
        w = 0.02 * crng.normal_block(seed, crng.STREAM_HEAD, 0, np.arange(n_classes), hidden)
        return cls(Tensor(w.astype(dtype), name="head.weight"),
                   Tensor(np.zeros(n_classes, dtype=dtype), name="head.bias"), kind)


def predict(head: ClassifierHead, hidden: Tensor) -> Tensor:
    """Affine map over the last axis; per position for (B, S, h) input."""
    if hidden.shape[-1] != head.hidden:
        raise ValueError(f"head expects features of size {head.hidden}, got {hidden.shape}")
    if hidden.ndim == 1:
        out = predict(head, T.reshape(hidden, (1, head.hidden)))
        return T.reshape(out, (head.n_classes,))
    return T.add(T.matmul(hidden, T.transpose(head.weight)), head.bias)


# ---------------------------------------------------------------------------
# metrics


def _pair(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    if p.size == 0:
        raise ValueError("metrics need at least one sample")
    return p.ravel(), y.ravel()


def accuracy(predictions, labels) -> float:
    p, y = _pair(predictions, labels)
    return float((p == y).mean())


def f1_binary(predictions, labels, positive=1) -> float:
    p, y = _pair(predictions, labels)
    tp = int(((p == positive) & (y == positive)).sum())
    fp = int(((p == positive) & (y != positive)).sum())
    fn = int(((p != positive) & (y == positive)).sum())
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def f1_micro(predictions, labels, ignore=()) -> float:
    """Micro-averaged F1 over every class not listed in ``ignore``.

    With nothing ignored this equals accuracy.
    """
    p, y = _pair(predictions, labels)
    ignored = np.isin(p, list(ignore)) if ignore else np.zeros(p.shape, dtype=bool)
    gold_ignored = np.isin(y, list(ignore)) if ignore else np.zeros(y.shape, dtype=bool)
    tp = int(((p == y) & ~ignored).sum())
    n_pred = int((~ignored).sum())
    n_gold = int((~gold_ignored).sum())
    if tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_gold
    return 2 * precision * recall / (precision + recall)


def matthews(predictions, labels) -> float:
    """Matthews correlation (multiclass form); 0 when the denominator vanishes."""
    p, y = _pair(predictions, labels)
    classes = np.union1d(p, y)
    pi = np.searchsorted(classes, p)
    yi = np.searchsorted(classes, y)
    k = classes.size
    conf = np.zeros((k, k), dtype=np.float64)
    np.add.at(conf, (yi, pi), 1.0)
    t_k, p_k = conf.sum(axis=1), conf.sum(axis=0)
    c, s = np.trace(conf), conf.sum()
    denom = math.sqrt(s * s - p_k @ p_k) * math.sqrt(s * s - t_k @ t_k)
    if denom == 0.0:
        return 0.0
    return float((c * s - t_k @ p_k) / denom)


def pearson(predictions, labels) -> float:
    p, y = _pair(predictions, labels)
    p, y = p.astype(np.float64), y.astype(np.float64)
    pc, yc = p - p.mean(), y - y.mean()
    denom = math.sqrt(float(pc @ pc) * float(yc @ yc))
    if denom == 0.0:
        return 0.0
    return float(np.clip((pc @ yc) / denom, -1.0, 1.0))


METRICS = {
    "accuracy": accuracy,
    "f1": f1_binary,
    "f1_micro": f1_micro,
    "matthews": matthews,
    "pearson": pearson,
}
