"""Joint reparametrization of per-layer task parameters.

One trainable vector ``z`` (length ``d``) is mapped to a vector per layer
by a fixed random matrix ``W_l`` of shape ``(d'_l, d)``. The matrices are
never stored: rows are regenerated from ``(seed, layer, row)`` in chunks,
both for ``W_l @ z`` in the forward pass and for ``W_lᵀ @ g`` in the
backward pass.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import rng as crng
from . import tensor as T
from .tensor import Tensor
from .transformer import (
    SITE_BIAS,
    PromptSet,
    ShiftPosition,
    ShiftSet,
    TransformerConfig,
    TransformerWeights,
    attach_prompt,
    block_name,
    parameter_shapes,
)

__all__ = [
    "CHUNK_ROWS", "Distribution", "InitDistribution", "Method", "ProjectionSpec", "TaskVector",
    "PromptSet", "ShiftSet", "attach_prompt", "backprop_z", "count_params", "derive_prompts",
    "derive_shifts", "fuse", "generate_projection_row_block", "materialize", "max_d", "project",
]

CHUNK_ROWS = 256


class Distribution(str, Enum):
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"
    IDENTITY = "identity"
    SELECTOR = "selector"  # rows of a permuted identity; needs d == sum of layer dims


class InitDistribution(str, Enum):
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"
    ZEROS = "zeros"


class Method(str, Enum):
    SLASH = "slash"
    JRWARP = "jrwarp"
    WARP = "warp"
    BITFIT = "bitfit"
    LINEAR = "linear"
    FULL = "full"
    OUTBIAS = "outbias"  # free output-dense biases + head (reference for the max-d reduction)


def uniform_half_width(d: int) -> float:
    """Half-width of the zero-centred uniform law with variance ``1/d``."""
    return math.sqrt(3.0 / d)


@dataclass(frozen=True)
class ProjectionSpec:
    seed: int
    distribution: Distribution
    d: int
    per_layer_dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "distribution", Distribution(self.distribution))
        object.__setattr__(self, "per_layer_dims", tuple(int(x) for x in self.per_layer_dims))
        if self.d < 1:
            raise ValueError("d must be at least 1")
        if not self.per_layer_dims or min(self.per_layer_dims) < 1:
            raise ValueError("per_layer_dims must be a non-empty list of positive sizes")
        crng.seed_key(self.seed)
        total = sum(self.per_layer_dims)
        if self.distribution is Distribution.IDENTITY and any(x != self.d for x in self.per_layer_dims):
            raise ValueError(f"identity projections need d == every layer dimension, got d={self.d} "
                             f"and dims={self.per_layer_dims}")
        if self.distribution is Distribution.SELECTOR and self.d != total:
            raise ValueError(f"selector projections need d == sum of layer dims ({total}), got {self.d}")
        if self.d > total:
            warnings.warn(
                f"d={self.d} exceeds the sum of shift dimensions ({total}); extra capacity "
                "behaves like independent biases",
                stacklevel=2,
            )

    @property
    def n_layers(self) -> int:
        return len(self.per_layer_dims)

    @property
    def max_d(self) -> int:
        return sum(self.per_layer_dims)


def max_d(per_layer_dims) -> int:
    return int(sum(per_layer_dims))


def _selector_permutation(spec: ProjectionSpec) -> np.ndarray:
    return crng.permutation(spec.seed, crng.STREAM_PERMUTATION, 0, spec.d)


def generate_projection_row_block(spec: ProjectionSpec, layer: int, rows: range | tuple[int, int]) -> np.ndarray:
    """Rows ``[start, stop)`` of ``W_layer`` as a float64 array of shape (rows, d).

    Entries depend only on ``(seed, layer, row, column)``, so any block
    equals the corresponding slice of the full matrix.
    """
    start, stop = (rows.start, rows.stop) if isinstance(rows, range) else rows
    if not 0 <= layer < spec.n_layers:
        raise IndexError(f"layer {layer} out of range for {spec.n_layers} layers")
    n_rows = spec.per_layer_dims[layer]
    if not 0 <= start <= stop <= n_rows:
        raise IndexError(f"rows [{start}, {stop}) outside layer of {n_rows} rows")
    dist = spec.distribution
    if dist is Distribution.IDENTITY:
        if stop > spec.d:
            raise IndexError("identity projection rows exceed d")
        return np.eye(spec.d, dtype=np.float64)[start:stop]
    if dist is Distribution.SELECTOR:
        offset = sum(spec.per_layer_dims[:layer])
        cols = _selector_permutation(spec)[offset + start: offset + stop]
        block = np.zeros((stop - start, spec.d), dtype=np.float64)
        block[np.arange(stop - start), cols] = 1.0
        return block
    row_ids = np.arange(start, stop)
    if dist is Distribution.GAUSSIAN:
        return crng.normal_block(spec.seed, crng.STREAM_PROJECTION, layer, row_ids, spec.d) / math.sqrt(spec.d)
    u = crng.uniform_block(spec.seed, crng.STREAM_PROJECTION, layer, row_ids, spec.d)
    return (2.0 * u - 1.0) * uniform_half_width(spec.d)


def _chunks(n_rows: int, chunk: int):
    for start in range(0, n_rows, chunk):
        yield start, min(start + chunk, n_rows)


def materialize(spec: ProjectionSpec, layer: int) -> np.ndarray:
    """The full ``W_layer`` (testing and inspection only)."""
    return generate_projection_row_block(spec, layer, (0, spec.per_layer_dims[layer]))


def project_array(spec: ProjectionSpec, layer: int, z: np.ndarray, chunk: int = CHUNK_ROWS) -> np.ndarray:
    z64 = np.asarray(z, dtype=np.float64)
    if z64.shape != (spec.d,):
        raise ValueError(f"z must have shape ({spec.d},), got {z64.shape}")
    out = np.empty(spec.per_layer_dims[layer], dtype=np.float64)
    for start, stop in _chunks(spec.per_layer_dims[layer], chunk):
        out[start:stop] = generate_projection_row_block(spec, layer, (start, stop)) @ z64
    return out


def project_transpose_array(spec: ProjectionSpec, layer: int, g: np.ndarray, chunk: int = CHUNK_ROWS) -> np.ndarray:
    g64 = np.asarray(g, dtype=np.float64)
    if g64.shape != (spec.per_layer_dims[layer],):
        raise ValueError(f"layer {layer} gradient must have shape ({spec.per_layer_dims[layer]},), got {g64.shape}")
    out = np.zeros(spec.d, dtype=np.float64)
    for start, stop in _chunks(spec.per_layer_dims[layer], chunk):
        out += generate_projection_row_block(spec, layer, (start, stop)).T @ g64[start:stop]
    return out


def project(z: Tensor, spec: ProjectionSpec, layer: int) -> Tensor:
    """Tape op ``W_layer @ z``; the backward pass regenerates the rows."""
    out = project_array(spec, layer, z.data).astype(z.dtype)

    def backward(g):
        return (project_transpose_array(spec, layer, g).astype(z.dtype),)

    return T._node(out, (z,), backward, "project")


def backprop_z(grad_shifts, spec: ProjectionSpec) -> np.ndarray:
    """``sum_l W_lᵀ g_l`` for per-layer gradients ``g_l``."""
    if len(grad_shifts) != spec.n_layers:
        raise ValueError(f"expected {spec.n_layers} layer gradients, got {len(grad_shifts)}")
    total = np.zeros(spec.d, dtype=np.float64)
    for layer, g in enumerate(grad_shifts):
        total += project_transpose_array(spec, layer, g)
    return total


@dataclass
class TaskVector:
    z: Tensor
    init_distribution: InitDistribution
    spec: ProjectionSpec

    @classmethod
    def initialize(cls, spec: ProjectionSpec, init: InitDistribution | str = InitDistribution.GAUSSIAN,
                   dtype=None, requires_grad: bool = True) -> TaskVector:
        """Gaussian or uniform entries with variance ``1/d``, keyed by the projection seed."""
        init = InitDistribution(init)
        d = spec.d
        if init is InitDistribution.GAUSSIAN:
            values = crng.normal_block(spec.seed, crng.STREAM_INIT, 0, [0], d)[0] / math.sqrt(d)
        elif init is InitDistribution.UNIFORM:
            values = (2.0 * crng.uniform_block(spec.seed, crng.STREAM_INIT, 0, [0], d)[0] - 1.0) * uniform_half_width(d)
        else:
            values = np.zeros(d)
        z = Tensor(values.astype(dtype or T.default_dtype()), requires_grad=requires_grad, name="z")
        return cls(z, init, spec)


def derive_shifts(tv: TaskVector, position: ShiftPosition | str = ShiftPosition.OUTPUT,
                  config: TransformerConfig | None = None) -> ShiftSet:
    position = ShiftPosition(position)
    if config is not None:
        expected = (config.site_dim(position),) * config.n_layers
        if tv.spec.per_layer_dims != expected:
            raise ValueError(f"{position.value} shifts need layer dims {expected}, spec has {tv.spec.per_layer_dims}")
    return ShiftSet([project(tv.z, tv.spec, layer) for layer in range(tv.spec.n_layers)], position)


def derive_prompts(tv: TaskVector, config: TransformerConfig | None = None, embedding_only: bool = False) -> PromptSet:
    """``p_l = W_l z`` for l = 0..L (or just ``p_0`` in embedding-only mode)."""
    dims = tv.spec.per_layer_dims
    if len(set(dims)) != 1:
        raise ValueError("every prompt layer must share the hidden dimension")
    if config is not None:
        n_expected = 1 if embedding_only else config.n_layers + 1
        if dims != (config.hidden,) * n_expected:
            raise ValueError(f"prompts need {n_expected} layers of size {config.hidden}, spec has {dims}")
    return PromptSet([project(tv.z, tv.spec, layer) for layer in range(tv.spec.n_layers)], embedding_only)


def fuse(weights: TransformerWeights, shifts: ShiftSet) -> TransformerWeights:
    """Fold shift vectors into the bias of their site; returns new weights."""
    config = weights.config
    if len(shifts.vectors) != config.n_layers:
        raise ValueError(f"expected {config.n_layers} shift vectors, got {len(shifts.vectors)}")
    fused = weights.copy()
    for layer, vec in enumerate(shifts.vectors):
        name = block_name(layer, SITE_BIAS[shifts.position])
        target = fused[name]
        if vec.shape != target.shape:
            raise ValueError(f"{name}: shift shape {vec.shape} does not match bias {target.shape}")
        target.data = target.data + np.asarray(vec.data, dtype=target.dtype)
    return fused


def head_params(n_classes: int, hidden: int) -> int:
    return n_classes * (hidden + 1)


def count_params(method: Method | str, d: int, n_classes: int, hidden: int,
                 config: TransformerConfig | None = None) -> int:
    """Trainable elements per task: ``d + C * (d'_L + 1)`` for the reparametrized methods."""
    method = Method(method)
    if n_classes < 1:
        raise ValueError("need at least one output class")
    head = head_params(n_classes, hidden)
    if method in (Method.SLASH, Method.JRWARP):
        return d + head
    if method is Method.WARP:
        return hidden + head
    if method is Method.LINEAR:
        return head
    if config is None:
        raise ValueError(f"{method.value} parameter count needs the model config")
    shapes = {k: v for k, v in parameter_shapes(config).items() if k != "mlm.bias"}
    if method is Method.OUTBIAS:
        return config.n_layers * config.hidden + head
    if method is Method.BITFIT:
        return sum(math.prod(s) for k, s in shapes.items() if k.endswith(".bias")) + head
    return sum(math.prod(s) for s in shapes.values()) + head
