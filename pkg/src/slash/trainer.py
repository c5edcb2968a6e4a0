"""Finetuning and toy pretraining loops.

Methods and what they train:

  slash    z (projected to per-block shifts) + head
  jrwarp   z (projected to per-layer prompts) + head
  warp     one prompt vector at the embedding layer + head
  bitfit   every backbone bias + head
  linear   head only
  full     the whole backbone + head
  outbias  the output-dense biases + head
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import heads as H
from . import tensor as T
from .data import SPECIALS, Batch, Example, ModelInput, Vocab, build_input, collate
from .heads import ClassifierHead, TaskKind
from .reparam import (
    Distribution,
    InitDistribution,
    Method,
    ProjectionSpec,
    TaskVector,
    derive_prompts,
    derive_shifts,
)
from .tensor import Tensor
from .transformer import (
    Hooks,
    MLMBatch,
    Pooling,
    ShiftPosition,
    TransformerConfig,
    TransformerWeights,
    block_name,
    encode,
    init_weights,
    mlm_pretrain_step,
    pool,
)

log = logging.getLogger(__name__)

REPARAMETRIZED = (Method.SLASH, Method.JRWARP, Method.WARP)


class TrainingDiverged(FloatingPointError):
    pass


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_ratio: float = 0.06) -> float:
    """Linear warmup from 0 to ``base_lr``, then linear decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(math.ceil(warmup_ratio * total_steps))
    if warmup and step < warmup:
        return base_lr * step / warmup
    if total_steps == warmup:
        return base_lr
    return base_lr * max(0.0, (total_steps - step) / (total_steps - warmup))


class Adam:
    """Adam with decoupled weight decay; state only for the tensors it owns."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = g.astype(p.dtype, copy=False)
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * (g * g)
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)


def clip_global_norm(grads: list[np.ndarray], max_norm: float | None) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return [g * factor for g in grads], norm


# ---------------------------------------------------------------------------
# task modules


@dataclass
class TaskModule:
    """Everything a task adds on top of the frozen model."""

    method: Method
    head: ClassifierHead
    position: ShiftPosition = ShiftPosition.OUTPUT
    pooling: Pooling = Pooling.MASK
    vector: TaskVector | None = None
    overrides: dict[str, Tensor] = field(default_factory=dict)
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.method = Method(self.method)
        self.position = ShiftPosition(self.position)
        self.pooling = Pooling(self.pooling)

    @property
    def kind(self) -> TaskKind:
        return self.head.kind

    def trainables(self) -> list[tuple[str, Tensor]]:
        out = []
        if self.vector is not None:
            out.append(("z", self.vector.z))
        out += sorted(self.overrides.items())
        out += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return out

    def n_trainable(self) -> int:
        return sum(t.data.size for _, t in self.trainables())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.trainables()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, t in self.trainables():
            t.data = snap[name].copy()

    def prompt_count(self) -> int:
        return 1 if self.method in (Method.JRWARP, Method.WARP) else 0


def create_task_module(
    method: Method | str,
    weights: TransformerWeights,
    n_classes: int,
    *,
    d: int | None = None,
    seed: int = 0,
    distribution: Distribution | str = Distribution.GAUSSIAN,
    init: InitDistribution | str = InitDistribution.GAUSSIAN,
    position: ShiftPosition | str = ShiftPosition.OUTPUT,
    pooling: Pooling | str = Pooling.MASK,
    kind: TaskKind | str = TaskKind.CLASSIFY,
) -> TaskModule:
    method = Method(method)
    config = weights.config
    dtype = weights["embed.token"].dtype
    head = ClassifierHead.initialize(n_classes, config.hidden, seed, kind, dtype)
    for p in head.parameters():
        p.requires_grad = True
    vector = None
    overrides: dict[str, Tensor] = {}
    position = ShiftPosition(position)
    if method is Method.SLASH:
        dims = (config.site_dim(position),) * config.n_layers
        d = 1024 if d is None else d
        vector = TaskVector.initialize(ProjectionSpec(seed, distribution, d, dims), init, dtype)
    elif method is Method.JRWARP:
        dims = (config.hidden,) * (config.n_layers + 1)
        d = 1024 if d is None else d
        vector = TaskVector.initialize(ProjectionSpec(seed, distribution, d, dims), init, dtype)
    elif method is Method.WARP:
        spec = ProjectionSpec(seed, Distribution.IDENTITY, config.hidden, (config.hidden,))
        vector = TaskVector.initialize(spec, init, dtype)
    elif method in (Method.BITFIT, Method.FULL, Method.OUTBIAS):
        if method is Method.BITFIT:
            names = weights.bias_names()
        elif method is Method.FULL:
            names = weights.backbone_names()
        else:
            names = [block_name(l, "ffn.out.bias") for l in range(config.n_layers)]
        overrides = {n: Tensor(weights[n].data.copy(), requires_grad=True, name=n) for n in names}
    return TaskModule(method, head, position, pooling, vector, overrides)


def select_trainables(method: Method | str, weights: TransformerWeights, task: TaskModule) -> list[tuple[str, Tensor]]:
    """The tensors ``method`` updates; everything else stays frozen."""
    method = Method(method)
    if method is not task.method:
        raise ValueError(f"task module was built for {task.method.value}, not {method.value}")
    params = task.trainables()
    names = {n for n, _ in params}
    expected_backbone = {
        Method.BITFIT: set(weights.bias_names()),
        Method.FULL: set(weights.backbone_names()),
        Method.OUTBIAS: {block_name(l, "ffn.out.bias") for l in range(weights.config.n_layers)},
    }.get(method, set())
    if names - {"z", "head.weight", "head.bias"} != expected_backbone:
        raise ValueError(f"{method.value}: unexpected trainable set {sorted(names)}")
    if (method in REPARAMETRIZED) != ("z" in names):
        raise ValueError(f"{method.value}: trainable vector presence is inconsistent")
    return params


def hooks_for(task: TaskModule) -> Hooks:
    if task.method is Method.SLASH:
        return Hooks(shifts=derive_shifts(task.vector, task.position))
    if task.method is Method.JRWARP:
        return Hooks(prompts=derive_prompts(task.vector))
    if task.method is Method.WARP:
        return Hooks(prompts=derive_prompts(task.vector, embedding_only=True))
    return Hooks()


def task_forward(weights: TransformerWeights, task: TaskModule, batch: Batch, *,
                 dropout: float = 0.0, rng=None, fused: bool = False) -> Tensor:
    """Logits (B, C) for sequence tasks or (B, S[+1], C) for token tasks.

    ``fused=True`` means the task's shifts already live in ``weights``.
    """
    w = weights.with_overrides(task.overrides) if task.overrides else weights
    hooks = Hooks() if fused else hooks_for(task)
    hidden = encode(w, batch.tokens, batch.mask, hooks, dropout=dropout, rng=rng)
    if task.kind is TaskKind.TOKEN_CLASSIFY:
        return H.predict(task.head, hidden)
    return H.predict(task.head, pool(hidden, task.pooling, batch.mask_index))


def task_loss(logits: Tensor, batch: Batch, kind: TaskKind) -> Tensor:
    if kind is TaskKind.CLASSIFY:
        return T.cross_entropy(logits, batch.labels)
    if kind is TaskKind.REGRESS:
        return T.mse(logits, np.asarray(batch.labels, dtype=logits.dtype).reshape(-1, 1))
    b, s, c = logits.shape
    valid = batch.label_mask
    tags = batch.labels
    if valid.shape[1] < s:  # appended prompt position carries no tag
        pad = s - valid.shape[1]
        valid = np.pad(valid, ((0, 0), (0, pad)))
        tags = np.pad(tags, ((0, 0), (0, pad)))
    return T.cross_entropy(T.reshape(logits, (b * s, c)), tags.reshape(-1), valid.reshape(-1))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class EncodedDataset:
    inputs: list[ModelInput]
    labels: list
    kind: TaskKind = TaskKind.CLASSIFY

    def __len__(self) -> int:
        return len(self.inputs)

    def batch(self, indices: Sequence[int]) -> Batch:
        items = [self.inputs[i] for i in indices]
        labels = [self.labels[i] for i in indices]
        if self.kind is TaskKind.TOKEN_CLASSIFY:
            return collate(items, token_labels=labels)
        return collate(items, labels=labels)


def encode_dataset(examples: Sequence[Example], vocab: Vocab, pooling: Pooling | str, max_len: int,
                   kind: TaskKind | str = TaskKind.CLASSIFY, reserve: int = 0) -> EncodedDataset:
    inputs = [build_input(ex, vocab, pooling, max_len, reserve) for ex in examples]
    kind = TaskKind(kind)
    labels = []
    for ex, x in zip(examples, inputs):
        if kind is TaskKind.TOKEN_CLASSIFY:
            labels.append(list(ex.label)[: len(x.token_positions)])
        else:
            labels.append(ex.label)
    return EncodedDataset(inputs, labels, kind)


# ---------------------------------------------------------------------------
# evaluation


def predict_dataset(weights, task: TaskModule, data: EncodedDataset, batch_size: int = 64, fused: bool = False):
    """Predictions plus gold labels (flattened over tagged positions for token tasks)."""
    preds, golds, all_logits = [], [], []
    for start in range(0, len(data), batch_size):
        batch = data.batch(range(start, min(start + batch_size, len(data))))
        with T.no_grad():
            logits = task_forward(weights, task, batch, fused=fused).data
        all_logits.append(logits.reshape(-1, logits.shape[-1]) if task.kind is not TaskKind.TOKEN_CLASSIFY
                          else logits[:, : batch.label_mask.shape[1]][batch.label_mask])
        if task.kind is TaskKind.TOKEN_CLASSIFY:
            preds.append(logits[:, : batch.label_mask.shape[1]].argmax(-1)[batch.label_mask])
            golds.append(batch.labels[batch.label_mask])
        elif task.kind is TaskKind.REGRESS:
            preds.append(logits[:, 0])
            golds.append(np.asarray(batch.labels, dtype=np.float64))
        else:
            preds.append(logits.argmax(-1))
            golds.append(np.asarray(batch.labels))
    return np.concatenate(preds), np.concatenate(golds), np.concatenate(all_logits)


def default_metrics(kind: TaskKind) -> list[str]:
    if kind is TaskKind.REGRESS:
        return ["pearson"]
    if kind is TaskKind.TOKEN_CLASSIFY:
        return ["accuracy", "f1_micro"]
    return ["accuracy", "f1", "matthews"]


def evaluate(weights, task: TaskModule, data: EncodedDataset, metrics: Sequence[str] | None = None,
             fused: bool = False) -> dict[str, float]:
    preds, golds, _ = predict_dataset(weights, task, data, fused=fused)
    names = metrics or default_metrics(task.kind)
    return {name: H.METRICS[name](preds, golds) for name in names}


# ---------------------------------------------------------------------------
# finetuning


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 8
    warmup_ratio: float = 0.06
    grad_clip: float | None = 1.0
    seed: int = 0
    schedule: str = "linear"  # or "constant"
    dropout: float = 0.0
    metric: str = "accuracy"
    select_best: bool = True
    microbatch: bool = False
    drop_last: bool = False
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup ratio must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        if self.schedule not in ("linear", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class HistoryRecord:
    epoch: int
    step: int
    loss: float
    lr: float
    metric: float
    train_metric: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator, drop_last: bool) -> list[np.ndarray]:
    order = rng.permutation(n)
    stop = n - (n % batch_size) if drop_last else n
    return [order[i: i + batch_size] for i in range(0, stop, batch_size)]


def steps_per_epoch(n: int, batch_size: int, drop_last: bool) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)


def per_sample_gradients(weights, task: TaskModule, data: EncodedDataset, indices, params: list[Tensor]):
    """One backward pass per sample; yields (loss, list of grads) in index order."""
    for i in indices:
        for p in params:
            p.grad = None
        batch = data.batch([i])
        loss = task_loss(task_forward(weights, task, batch), batch, task.kind)
        T.backward(loss)
        yield loss.item(), [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


GradientHook = Callable[[TaskModule, EncodedDataset, np.ndarray, list[Tensor], int], tuple[float, list[np.ndarray]]]


def train(config: TrainConfig, weights: TransformerWeights, task: TaskModule, train_data: EncodedDataset,
          dev_data: EncodedDataset | None = None, *, gradient_fn: GradientHook | None = None,
          on_record: Callable[[HistoryRecord], None] | None = None) -> tuple[TaskModule, list[HistoryRecord]]:
    """Finetune ``task`` on top of frozen ``weights``.

    Only the task's trainables change; frozen weights are never written.
    ``gradient_fn`` replaces the batch gradient computation (used by DP
    training) and returns ``(loss, grads)`` for a list of sample indices.
    """
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    weights.freeze()
    dropout = 0.0 if task.method in REPARAMETRIZED else config.dropout
    params_named = select_trainables(task.method, weights, task)
    params = [p for _, p in params_named]
    for p in params:
        p.requires_grad = True
    dev = dev_data if dev_data is not None else train_data
    history: list[HistoryRecord] = []
    if config.epochs == 0:
        return task, history

    rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng([config.seed, 1])
    n_steps = config.epochs * steps_per_epoch(len(train_data), config.batch_size, config.drop_last)
    if n_steps == 0:
        raise ValueError("no full batch fits in the training set")
    opt = Adam(params, weight_decay=config.weight_decay)
    best_metric, best = -math.inf, task.snapshot()
    step = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in epoch_batches(len(train_data), config.batch_size, rng, config.drop_last):
            lr = config.lr if config.schedule == "constant" else lr_schedule(step, n_steps, config.lr, config.warmup_ratio)
            if gradient_fn is not None:
                loss_value, grads = gradient_fn(task, train_data, idx, params, step)
            elif config.microbatch:
                total_loss, sums = 0.0, None
                for loss_i, g_i in per_sample_gradients(weights, task, train_data, idx, params):
                    total_loss += loss_i
                    sums = [g.copy() for g in g_i] if sums is None else [s + g for s, g in zip(sums, g_i)]
                loss_value, grads = total_loss / len(idx), [s / len(idx) for s in sums]
            else:
                for p in params:
                    p.grad = None
                batch = train_data.batch(idx)
                loss = task_loss(task_forward(weights, task, batch, dropout=dropout, rng=dropout_rng), batch, task.kind)
                T.backward(loss)
                loss_value = loss.item()
                grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
            if not math.isfinite(loss_value) or not all(np.isfinite(g).all() for g in grads):
                raise TrainingDiverged(f"non-finite loss/gradient at epoch {epoch}, step {step}")
            grads, _ = clip_global_norm(grads, config.grad_clip)
            opt.step(grads, lr)
            losses.append(loss_value)
            step += 1
        metric = evaluate(weights, task, dev, [config.metric])[config.metric]
        record = HistoryRecord(epoch, step, float(np.mean(losses)), float(lr), float(metric))
        history.append(record)
        if on_record:
            on_record(record)
        log.info("epoch %d step %d loss %.5f dev %s %.4f", epoch, step, record.loss, config.metric, metric)
        if metric > best_metric:
            best_metric, best = metric, task.snapshot()
    for p in params:
        p.grad = None
    if config.select_best:
        task.restore(best)
    return task, history


# ---------------------------------------------------------------------------
# toy pretraining


@dataclass
class PretrainConfig:
    model: TransformerConfig = field(default_factory=TransformerConfig)
    corpus_size: int = 4000
    steps: int = 2500
    batch_size: int = 32
    lr: float = 2e-3
    warmup_ratio: float = 0.06
    grad_clip: float = 1.0
    mask_prob: float = 0.15
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> PretrainConfig:
        raw = dict(raw)
        model = TransformerConfig.from_dict(raw.pop("model", {}))
        return cls(model=model, **raw)

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["model"] = self.model.to_dict()
        return out


def mlm_batches(corpus_ids: list[list[int]], vocab: Vocab, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(len(corpus_ids))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            seqs = [[vocab.cls_id] + corpus_ids[i] + [vocab.sep_id] for i in order[start:start + batch_size]]
            width = max(map(len, seqs))
            tokens = np.full((batch_size, width), vocab.pad_id, dtype=np.int64)
            mask = np.zeros((batch_size, width), dtype=bool)
            for row, s in enumerate(seqs):
                tokens[row, : len(s)] = s
                mask[row, : len(s)] = True
            maskable = mask & (tokens >= len(SPECIALS))
            yield MLMBatch(tokens, mask, maskable, vocab.mask_id, n_special=len(SPECIALS), vocab_size=len(vocab))


def pretrain(config: PretrainConfig, corpus: Sequence[str], vocab: Vocab,
             on_step: Callable[[int, float], None] | None = None) -> tuple[TransformerWeights, list[float]]:
    """Masked-LM pretraining from scratch on ``corpus``."""
    if len(vocab) > config.model.vocab:
        raise ValueError(f"vocabulary of {len(vocab)} tokens does not fit model vocab {config.model.vocab}")
    weights = init_weights(config.model, config.seed)
    params = [weights[n] for n in weights]
    for p in params:
        p.requires_grad = True
    opt = Adam(params)
    rng = np.random.default_rng([config.seed, 7])
    ids = [vocab.encode(s)[: config.model.max_len - 2] for s in corpus]
    batches = mlm_batches(ids, vocab, config.batch_size, rng)
    losses = []
    for step in range(config.steps):
        for p in params:
            p.grad = None
        loss = mlm_pretrain_step(weights, next(batches), config.mask_prob, rng)
        T.backward(loss)
        grads, _ = clip_global_norm([p.grad if p.grad is not None else np.zeros_like(p.data) for p in params],
                                    config.grad_clip)
        opt.step(grads, lr_schedule(step, config.steps, config.lr, config.warmup_ratio))
        losses.append(loss.item())
        if on_step:
            on_step(step, losses[-1])
    weights.freeze()
    return weights, losses
