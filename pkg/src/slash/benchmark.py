"""The pinned synthetic benchmark: pretrain once, then compare finetuning methods.

All seeds and hyperparameters live in ``BenchmarkConfig`` defaults. Each
method gets a small learning-rate grid and is scored by its best dev epoch.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .data import Vocab
from .synthetic import WORDS, synthetic_cls, synthetic_corpus
from .trainer import (EncodedDataset, PretrainConfig, TrainConfig, create_task_module, encode_dataset, evaluate,
                      pretrain, train)
from .transformer import TransformerWeights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MethodRun:
    method: str
    lrs: tuple[float, ...]
    epochs: int
    d: int | None = None


@dataclass(frozen=True)
class BenchmarkConfig:
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    corpus_seed: int = 11
    train_seed: int = 1
    dev_seed: int = 2
    n_train: int = 1000
    n_dev: int = 500
    difficulty: int = 0
    mood_agreement: float = 0.7
    finetune_seed: int = 0
    runs: tuple[MethodRun, ...] = (
        MethodRun("linear", (3e-3, 1e-2, 3e-2), 20),
        # d = 256 is the sum of the four 64-wide output shifts of the toy model.
        MethodRun("slash", (1e-2,), 10, d=256),
        MethodRun("full", (1e-4,), 5),
    )


@dataclass
class MethodResult:
    method: str
    lr: float
    dev_accuracy: float
    train_accuracy: float
    history: list[float]
    seconds: float


def pretrained_model(config: BenchmarkConfig) -> tuple[TransformerWeights, Vocab]:
    vocab = Vocab.build([" ".join(WORDS)])
    corpus = synthetic_corpus(config.corpus_seed, config.pretrain.corpus_size)
    weights, _ = pretrain(config.pretrain, corpus, vocab)
    return weights, vocab


def datasets(config: BenchmarkConfig, vocab: Vocab, max_len: int) -> tuple[EncodedDataset, EncodedDataset]:
    train_ex, _ = synthetic_cls(config.train_seed, config.n_train, config.difficulty, config.mood_agreement)
    dev_ex, _ = synthetic_cls(config.dev_seed, config.n_dev, config.difficulty, config.mood_agreement)
    return encode_dataset(train_ex, vocab, "mask", max_len), encode_dataset(dev_ex, vocab, "mask", max_len)


def run_method(run: MethodRun, weights: TransformerWeights, train_data, dev_data, seed: int) -> MethodResult:
    best = None
    for lr in run.lrs:
        start = time.perf_counter()
        task = create_task_module(run.method, weights, 2, d=run.d, seed=seed)
        task, history = train(TrainConfig(lr=lr, epochs=run.epochs, seed=seed), weights, task, train_data, dev_data)
        result = MethodResult(run.method, lr, max(h.metric for h in history),
                              evaluate(weights, task, train_data, ["accuracy"])["accuracy"],
                              [h.metric for h in history], time.perf_counter() - start)
        log.info("%s lr=%g dev=%.3f train=%.3f", run.method, lr, result.dev_accuracy, result.train_accuracy)
        if best is None or result.dev_accuracy > best.dev_accuracy:
            best = result
    return best


def run_benchmark(config: BenchmarkConfig | None = None, weights: TransformerWeights | None = None,
                  vocab: Vocab | None = None) -> dict[str, MethodResult]:
    config = config or BenchmarkConfig()
    if weights is None:
        weights, vocab = pretrained_model(config)
    train_data, dev_data = datasets(config, vocab, weights.config.max_len)
    return {run.method: run_method(run, weights, train_data, dev_data, config.finetune_seed) for run in config.runs}
