"""Central finite-difference checks for the tape engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward

FD_STEP = 1e-5


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6, scale_floor: float = 1e-3) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor, scale_floor * max|a|)``.

    Both floors keep gradients below finite-difference resolution from being
    judged against roundoff. At 64-bit with an O(1) loss and a 1e-5 step the
    central difference resolves about 1e-11, so an absolute floor of 1e-6
    still flags any discrepancy above 1e-11 at a 1e-5 tolerance. The
    scale-relative floor does the same for entries many orders below the
    tensor's largest gradient.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if not a.size:
        return 0.0
    floor = max(floor, scale_floor * float(np.abs(a).max()))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def numerical_gradient(f: Callable[[], float], param: Tensor, indices=None, step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``param.data``, perturbing in place.

    The step for element ``x`` is ``step * (|x| + 1)``. ``indices`` restricts
    the check to a subset of flat positions; unchecked entries come back 0.
    """
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        h = step * (abs(float(orig)) + 1.0)
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(param.shape)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    *,
    names: Sequence[str] | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    step: float = FD_STEP,
) -> list[GradCheckResult]:
    """Compare tape gradients of ``loss_fn()`` with finite differences.

    ``max_entries`` caps the number of perturbed entries per parameter
    (sampled without replacement by ``rng``) to keep large checks cheap.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]

    def value() -> float:
        return float(loss_fn().data)

    results = []
    rng = rng or np.random.default_rng(0)
    for k, p in enumerate(params):
        size = p.data.size
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, size=max_entries, replace=False))
        else:
            idx = np.arange(size)
        numeric = numerical_gradient(value, p, idx, step).reshape(-1)[idx]
        err = relative_error(analytic[k].reshape(-1)[idx], numeric)
        label = names[k] if names else (p.name or f"param{k}")
        results.append(GradCheckResult(label, err, int(idx.size)))
    return results


# ---------------------------------------------------------------------------
# toy-model suite


def toy_suite(seed: int = 0, d: int = 96, max_entries: int = 6, n_examples: int = 3) -> list[GradCheckResult]:
    """Check every trainable path of the toy model; call under ``precision(64)``.

    Covers ``z`` for SLaSh at all three sites and for JR-WARP, the head, and
    a sample of entries from every backbone tensor (full finetuning). The
    inputs have unequal lengths so padding masks are exercised.
    """
    from .data import Vocab
    from .synthetic import WORDS, synthetic_cls
    from .trainer import create_task_module, encode_dataset, task_forward, task_loss
    from .transformer import TransformerConfig, init_weights

    config = TransformerConfig(dropout=0.0)
    # A wider init than pretraining's keeps attention gradients well above finite-difference roundoff.
    weights = init_weights(config, seed, std=0.3, bias_std=0.1)
    weights.freeze()
    vocab = Vocab.build([" ".join(WORDS)])
    examples, _ = synthetic_cls(seed, n_examples)
    data = encode_dataset(examples, vocab, "mask", config.max_len)
    batch = data.batch(range(len(data)))
    rng = np.random.default_rng(seed)

    cases = [("slash", dict(position=p)) for p in ("attention", "intermediate", "output")]
    cases += [("jrwarp", {}), ("full", {})]
    results = []
    for method, extra in cases:
        task = create_task_module(method, weights, 2, d=d, seed=seed, **extra)
        named = task.trainables()
        label = method + (f"[{extra['position']}]" if extra else "")

        def loss_fn():
            return task_loss(task_forward(weights, task, batch), batch, task.kind)

        limit = None if method != "full" else max_entries
        results += check_gradients(loss_fn, [p for _, p in named], names=[f"{label}:{n}" for n, _ in named],
                                   max_entries=limit, rng=rng)
    return results
