"""A small post-LN masked-language-model encoder with shift and prompt hooks.

Block layout (per block ``l``)::

    a  = attn_out(self_attention(x))        <- "attention" shift site
    x1 = LN(x + a)
    f  = gelu(ffn_in(x1))                   <- "intermediate" site (pre-activation)
    o  = ffn_out(f)                         <- "output" site
    x2 = LN(x1 + o)

Every shift sits right after a dense layer's bias, so a hooked forward pass
is algebraically the same as an unhooked pass with that bias edited.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ShiftPosition(str, Enum):
    ATTENTION = "attention"
    INTERMEDIATE = "intermediate"
    OUTPUT = "output"


# Bias each site's shift folds into.
SITE_BIAS = {
    ShiftPosition.ATTENTION: "attn.out.bias",
    ShiftPosition.INTERMEDIATE: "ffn.in.bias",
    ShiftPosition.OUTPUT: "ffn.out.bias",
}


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 4
    hidden: int = 64
    ffn: int = 128
    heads: int = 4
    vocab: int = 1000
    max_len: int = 64
    dropout: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be at least 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.ffn < self.hidden:
            raise ValueError("ffn size must be at least the hidden size")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def site_dim(self, position: ShiftPosition | str) -> int:
        position = ShiftPosition(position)
        return self.ffn if position is ShiftPosition.INTERMEDIATE else self.hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> TransformerConfig:
        return cls(**raw)


def block_name(layer: int, suffix: str) -> str:
    return f"block{layer}.{suffix}"


def parameter_shapes(config: TransformerConfig) -> dict[str, tuple[int, ...]]:
    """Canonical (ordered) parameter names and shapes."""
    h, f = config.hidden, config.ffn
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (config.vocab, h),
        "embed.position": (config.max_len, h),
        "embed.ln.gain": (h,),
        "embed.ln.bias": (h,),
    }
    for layer in range(config.n_layers):
        for proj in ("query", "key", "value", "out"):
            shapes[block_name(layer, f"attn.{proj}.weight")] = (h, h)
            shapes[block_name(layer, f"attn.{proj}.bias")] = (h,)
        shapes[block_name(layer, "attn.ln.gain")] = (h,)
        shapes[block_name(layer, "attn.ln.bias")] = (h,)
        shapes[block_name(layer, "ffn.in.weight")] = (h, f)
        shapes[block_name(layer, "ffn.in.bias")] = (f,)
        shapes[block_name(layer, "ffn.out.weight")] = (f, h)
        shapes[block_name(layer, "ffn.out.bias")] = (h,)
        shapes[block_name(layer, "out.ln.gain")] = (h,)
        shapes[block_name(layer, "out.ln.bias")] = (h,)
    shapes["mlm.bias"] = (config.vocab,)
    return shapes


def is_bias(name: str) -> bool:
    return name.endswith(".bias")


class TransformerWeights:
    """Ordered mapping of parameter name to tensor.

    ``mlm.bias`` belongs to the pretraining decoder (tied to the token
    embedding) and is ignored by finetuning.
    """

    def __init__(self, tensors: dict[str, Tensor], config: TransformerConfig):
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            if missing or extra:
                raise ValueError(f"weight names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
            tensors = {name: tensors[name] for name in expected}
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.tensors = tensors
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self, dtype=None) -> TransformerWeights:
        return TransformerWeights(
            {k: Tensor(v.data.astype(dtype or v.dtype, copy=True), name=k) for k, v in self.tensors.items()},
            self.config,
        )

    def with_overrides(self, overrides: dict[str, Tensor]) -> TransformerWeights:
        """A view with some tensors replaced (no copying of the rest)."""
        unknown = set(overrides) - set(self.tensors)
        if unknown:
            raise KeyError(f"unknown weight names {sorted(unknown)}")
        merged = dict(self.tensors)
        merged.update(overrides)
        return TransformerWeights(merged, self.config)

    def backbone_names(self) -> list[str]:
        return [n for n in self.tensors if n != "mlm.bias"]

    def bias_names(self) -> list[str]:
        return [n for n in self.backbone_names() if is_bias(n)]

    def n_backbone_params(self) -> int:
        return sum(self.tensors[n].data.size for n in self.backbone_names())

    def freeze(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None


def init_weights(config: TransformerConfig, seed: int, dtype=None, std: float = 0.02,
                 bias_std: float = 0.0) -> TransformerWeights:
    """Normal(0, ``std``) matrices, unit LN gains, Normal(0, ``bias_std``) biases."""
    rng = np.random.default_rng(seed)
    dtype = dtype or T.default_dtype()
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("ln.gain"):
            arr = np.ones(shape)
        elif is_bias(name):
            arr = rng.normal(0.0, bias_std, size=shape) if bias_std else np.zeros(shape)
        else:
            arr = rng.normal(0.0, std, size=shape)
        tensors[name] = Tensor(arr.astype(dtype), name=name)
    return TransformerWeights(tensors, config)


# ---------------------------------------------------------------------------
# hooks


@dataclass
class ShiftSet:
    """Per-block shift vectors ``z_l`` for one activation site."""

    vectors: list[Tensor]
    position: ShiftPosition = ShiftPosition.OUTPUT

    def __post_init__(self):
        self.position = ShiftPosition(self.position)


@dataclass
class PromptSet:
    """Length-1 prompt vectors.

    ``vectors[0]`` is appended at the embedding layer; ``vectors[l]`` for
    ``l >= 1`` is added to the prompt position entering block ``l``. In
    ``embedding_only`` mode (plain WARP) only ``vectors[0]`` is used.
    """

    vectors: list[Tensor]
    embedding_only: bool = False


@dataclass
class Hooks:
    shifts: ShiftSet | None = None
    prompts: PromptSet | None = None


def apply_shift(activations: Tensor, z_l: Tensor, position: ShiftPosition | str, config: TransformerConfig) -> Tensor:
    """Add ``z_l`` at every sequence position of a site's activations."""
    dim = config.site_dim(position)
    if z_l.shape != (dim,) or activations.shape[-1] != dim:
        raise ValueError(
            f"{ShiftPosition(position).value} shift expects dimension {dim}, "
            f"got shift {z_l.shape} for activations {activations.shape}"
        )
    return T.add(activations, z_l)


def attach_prompt(x: Tensor, mask: np.ndarray, prompts: PromptSet, config: TransformerConfig):
    """Append ``p_0`` as one extra position after the embedding layer.

    The prompt carries no position embedding and sits after every token,
    so existing positions keep their embeddings. Returns the extended
    activations, the extended attention mask and the prompt index.
    """
    b, s, h = x.shape
    if s + 1 > config.max_len:
        raise ValueError(f"prompt would push sequence length {s} past max_len={config.max_len}")
    if not prompts.vectors or prompts.vectors[0].shape != (h,):
        raise ValueError(f"prompt vectors must have shape ({h},)")
    out = T.append_position(x, prompts.vectors[0])
    new_mask = np.concatenate([mask, np.ones((b, 1), dtype=bool)], axis=1)
    return out, new_mask, s


# ---------------------------------------------------------------------------
# forward


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _attention(x: Tensor, mask: np.ndarray, weights: TransformerWeights, layer: int, config: TransformerConfig) -> Tensor:
    b, s, h = x.shape
    nh, dh = config.heads, h // config.heads

    def heads(name: str) -> Tensor:
        proj = _linear(x, weights[block_name(layer, f"attn.{name}.weight")], weights[block_name(layer, f"attn.{name}.bias")])
        return T.transpose(T.reshape(proj, (b, s, nh, dh)), (0, 2, 1, 3))

    q, k, v = heads("query"), heads("key"), heads("value")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = T.softmax_masked(scores, mask[:, None, None, :])
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, s, h))
    return _linear(ctx, weights[block_name(layer, "attn.out.weight")], weights[block_name(layer, "attn.out.bias")])


def _block(x, mask, weights, layer, config, shifts: ShiftSet | None, dropout: float, rng):
    def shifted(act: Tensor, site: ShiftPosition) -> Tensor:
        if shifts is not None and shifts.position is site:
            return apply_shift(act, shifts.vectors[layer], site, config)
        return act

    eps = config.ln_eps
    a = shifted(_attention(x, mask, weights, layer, config), ShiftPosition.ATTENTION)
    a = T.dropout(a, dropout, rng)
    x1 = T.layer_norm(T.add(x, a), weights[block_name(layer, "attn.ln.gain")], weights[block_name(layer, "attn.ln.bias")], eps)
    f = shifted(_linear(x1, weights[block_name(layer, "ffn.in.weight")], weights[block_name(layer, "ffn.in.bias")]),
                ShiftPosition.INTERMEDIATE)
    o = _linear(T.gelu(f), weights[block_name(layer, "ffn.out.weight")], weights[block_name(layer, "ffn.out.bias")])
    o = T.dropout(shifted(o, ShiftPosition.OUTPUT), dropout, rng)
    return T.layer_norm(T.add(x1, o), weights[block_name(layer, "out.ln.gain")], weights[block_name(layer, "out.ln.bias")], eps)


def embed(weights: TransformerWeights, tokens: np.ndarray, dropout: float = 0.0, rng=None) -> Tensor:
    config = weights.config
    b, s = tokens.shape
    if s > config.max_len:
        raise ValueError(f"sequence length {s} exceeds max_len={config.max_len}")
    tok = T.embedding_lookup(weights["embed.token"], tokens)
    pos = T.take_rows(weights["embed.position"], np.arange(s))
    x = T.add(tok, _broadcast_positions(tok, pos))
    x = T.layer_norm(x, weights["embed.ln.gain"], weights["embed.ln.bias"], config.ln_eps)
    return T.dropout(x, dropout, rng)


def _broadcast_positions(tok: Tensor, pos: Tensor) -> Tensor:
    # (S, h) position table repeated over the batch axis.
    b = tok.shape[0]
    return T.take_rows(T.reshape(pos, (1,) + pos.shape), np.zeros(b, dtype=np.int64))


def encode(
    weights: TransformerWeights,
    tokens,
    mask=None,
    hooks: Hooks | None = None,
    *,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Hidden states for a batch (B, S) or a single sequence (S,).

    With a prompt attached the output has one extra position at the end.
    """
    config = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
    mask = np.ones(tokens.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != tokens.shape:
        raise ValueError("mask must match the token array shape")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab):
        raise ValueError(f"token ids must lie in [0, {config.vocab})")
    hooks = hooks or Hooks()
    shifts, prompts = hooks.shifts, hooks.prompts
    if shifts is not None and len(shifts.vectors) != config.n_layers:
        raise ValueError(f"expected {config.n_layers} shift vectors, got {len(shifts.vectors)}")
    if prompts is not None and not prompts.embedding_only and len(prompts.vectors) != config.n_layers + 1:
        raise ValueError(f"expected {config.n_layers + 1} prompt vectors, got {len(prompts.vectors)}")

    x = embed(weights, tokens, dropout, rng)
    prompt_index = None
    if prompts is not None:
        x, mask, prompt_index = attach_prompt(x, mask, prompts, config)
    for layer in range(config.n_layers):
        if prompts is not None and not prompts.embedding_only:
            x = T.add_at_position(x, prompts.vectors[layer + 1], prompt_index)
        x = _block(x, mask, weights, layer, config, shifts, dropout, rng)
    if single:
        x = T.reshape(x, x.shape[1:])
    return x


class Pooling(str, Enum):
    CLS = "cls"
    MASK = "mask"


def pool(hidden: Tensor, strategy: Pooling | str, mask_index=None) -> Tensor:
    """Pick one position per sequence: index 0 for CLS, ``mask_index`` for MASK."""
    strategy = Pooling(strategy)
    single = hidden.ndim == 2
    if single:
        hidden = T.reshape(hidden, (1,) + hidden.shape)
    b, s, h = hidden.shape
    if strategy is Pooling.CLS:
        idx = np.zeros(b, dtype=np.int64)
    else:
        if mask_index is None:
            raise ValueError("MASK pooling needs the [MASK] position recorded at input construction")
        idx = np.atleast_1d(np.asarray(mask_index, dtype=np.int64))
        if idx.shape != (b,) or (idx < 0).any() or (idx >= s).any():
            raise ValueError(f"invalid mask_index {mask_index!r} for {b} sequences of length {s}")
    flat = T.reshape(hidden, (b * s, h))
    out = T.take_rows(flat, np.arange(b) * s + idx)
    return T.reshape(out, (h,)) if single else out


# ---------------------------------------------------------------------------
# masked-LM pretraining


@dataclass
class MLMBatch:
    tokens: np.ndarray
    mask: np.ndarray
    maskable: np.ndarray  # positions eligible for masking (no specials/padding)
    mask_token_id: int
    n_special: int = 0  # ids below this are never used as random replacements
    vocab_size: int | None = None  # random replacements are drawn below this (default: model vocab)


def mlm_logits(weights: TransformerWeights, hidden: Tensor) -> Tensor:
    """Tied decoder: hidden @ token_embeddingᵀ + mlm bias."""
    return T.add(T.matmul(hidden, T.transpose(weights["embed.token"])), weights["mlm.bias"])


def mlm_pretrain_step(weights: TransformerWeights, batch: MLMBatch, mask_prob: float = 0.15,
                      rng: np.random.Generator | None = None, dropout: float | None = None) -> Tensor:
    """Masked-token cross entropy for one batch (BERT 80/10/10 corruption)."""
    config = weights.config
    if batch.tokens.size == 0 or batch.tokens.shape[0] == 0:
        raise ValueError("empty batch")
    rng = rng or np.random.default_rng(0)
    tokens = np.asarray(batch.tokens, dtype=np.int64)
    eligible = np.asarray(batch.maskable, dtype=bool) & np.asarray(batch.mask, dtype=bool)
    targets_mask = eligible & (rng.random(tokens.shape) < mask_prob)
    if not targets_mask.any():
        raise ValueError("no positions were selected for masking; nothing to predict")
    corrupted = tokens.copy()
    roll = rng.random(tokens.shape)
    to_mask = targets_mask & (roll < 0.8)
    to_random = targets_mask & (roll >= 0.8) & (roll < 0.9)
    corrupted[to_mask] = batch.mask_token_id
    corrupted[to_random] = rng.integers(batch.n_special, batch.vocab_size or config.vocab, size=int(to_random.sum()))
    p = config.dropout if dropout is None else dropout
    hidden = encode(weights, corrupted, batch.mask, dropout=p, rng=rng)
    b, s, h = hidden.shape
    flat_idx = np.flatnonzero(targets_mask.reshape(-1))
    picked = T.take_rows(T.reshape(hidden, (b * s, h)), flat_idx)
    return T.cross_entropy(mlm_logits(weights, picked), tokens.reshape(-1)[flat_idx])
