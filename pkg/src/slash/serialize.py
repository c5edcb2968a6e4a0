"""Binary file formats. Everything is little-endian with fixed-width integers.

Raw tensor block::

    u32 rank | u32 extent * rank | f32 element * prod(extents)   (row-major)

Checkpoint (``SLTF1``)::

    b"SLTF1" | u32 meta_len | meta (canonical JSON: config, vocab, fused, names)
    | per tensor, in ``names`` order: u16 name_len | name (utf-8) | raw tensor block

Task module (``SLSH1``)::

    b"SLSH1" | u8 method | u32 d | u32 n_layers | u32 layer_dim * n_layers
    | u64 seed | u8 distribution | u8 position | u8 pooling
    | u8 task_kind | u8 init | u32 n_classes | u32 hidden
    | f32 z * d | f32 head_weight * (n_classes * hidden) | f32 head_bias * n_classes
    | u32 n_backbone | per backbone tensor: u16 name_len | name | raw tensor block
    | u32 n_labels | per label name: u16 name_len | name

Projection matrices are never written; they are regenerated from
``(seed, distribution, d, layer dims)``. ``d`` and ``n_layers`` are 0 for
methods without a task vector. The backbone section is empty except for
methods that train backbone tensors (bitfit, full, outbias).
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .data import Vocab
from .heads import ClassifierHead, TaskKind
from .reparam import Distribution, InitDistribution, Method, ProjectionSpec, TaskVector
from .tensor import Tensor
from .trainer import TaskModule
from .transformer import Pooling, ShiftPosition, TransformerConfig, TransformerWeights, parameter_shapes

CHECKPOINT_MAGIC = b"SLTF1"
TASK_MAGIC = b"SLSH1"

METHOD_TAGS = [Method.SLASH, Method.JRWARP, Method.WARP, Method.BITFIT, Method.LINEAR, Method.FULL, Method.OUTBIAS]
DISTRIBUTION_TAGS = [Distribution.GAUSSIAN, Distribution.UNIFORM, Distribution.IDENTITY, Distribution.SELECTOR]
POSITION_TAGS = [ShiftPosition.ATTENTION, ShiftPosition.INTERMEDIATE, ShiftPosition.OUTPUT]
POOLING_TAGS = [Pooling.CLS, Pooling.MASK]
KIND_TAGS = [TaskKind.CLASSIFY, TaskKind.REGRESS, TaskKind.TOKEN_CLASSIFY]
INIT_TAGS = [InitDistribution.GAUSSIAN, InitDistribution.UNIFORM, InitDistribution.ZEROS]


class FormatError(ValueError):
    """A file does not match the expected format or model."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("unexpected end of file")
    return buf


def _unpack(f: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt)))


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    (rank,) = _unpack(f, "<I")
    shape = _unpack(f, f"<{rank}I") if rank else ()
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4")
    return data.astype(np.float32).reshape(shape)


def _write_name(f: BinaryIO, name: str) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def _read_name(f: BinaryIO) -> str:
    (n,) = _unpack(f, "<H")
    return _read_exact(f, n).decode("utf-8")


def _check_magic(f: BinaryIO, magic: bytes, what: str) -> None:
    found = f.read(len(magic))
    if found != magic:
        raise FormatError(f"not a {what} file (magic {found!r}, expected {magic!r})")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, weights: TransformerWeights, vocab: Vocab, fused: dict | None = None) -> None:
    names = list(weights)
    meta = {"config": weights.config.to_dict(), "vocab": vocab.tokens, "fused": fused, "names": names}
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    raw_meta = canonical_json(meta)
    buf.write(struct.pack("<I", len(raw_meta)))
    buf.write(raw_meta)
    for name in names:
        _write_name(buf, name)
        write_tensor(buf, weights[name].data)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[TransformerWeights, Vocab, dict | None]:
    with open(path, "rb") as f:
        _check_magic(f, CHECKPOINT_MAGIC, "checkpoint")
        (n,) = _unpack(f, "<I")
        try:
            meta = json.loads(_read_exact(f, n).decode("utf-8"))
            config = TransformerConfig.from_dict(meta["config"])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"corrupt checkpoint header: {exc}") from None
        expected = parameter_shapes(config)
        tensors = {}
        for name in meta["names"]:
            if _read_name(f) != name:
                raise FormatError(f"tensor block out of order, expected {name}")
            arr = read_tensor(f)
            if name not in expected or arr.shape != expected[name]:
                raise FormatError(f"{name}: shape {arr.shape} does not match the config")
            tensors[name] = Tensor(arr.astype(dtype), name=name)
        if f.read(1):
            raise FormatError("trailing bytes after the last tensor block")
    return TransformerWeights(tensors, config), Vocab(meta["vocab"]), meta.get("fused")


# ---------------------------------------------------------------------------
# task modules


def task_header_size(n_layers: int) -> int:
    return len(TASK_MAGIC) + 1 + 4 + 4 + 4 * n_layers + 8 + 1 + 1 + 1 + 1 + 1 + 4 + 4


def save_task_module(path: str | Path, task: TaskModule) -> None:
    buf = io.BytesIO()
    buf.write(TASK_MAGIC)
    tv = task.vector
    spec = tv.spec if tv is not None else None
    dims = spec.per_layer_dims if spec else ()
    buf.write(struct.pack("<BII", METHOD_TAGS.index(task.method), spec.d if spec else 0, len(dims)))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))
    buf.write(struct.pack("<Q", spec.seed if spec else 0))
    buf.write(struct.pack(
        "<BBBBB",
        DISTRIBUTION_TAGS.index(spec.distribution) if spec else 0,
        POSITION_TAGS.index(task.position),
        POOLING_TAGS.index(task.pooling),
        KIND_TAGS.index(task.kind),
        INIT_TAGS.index(tv.init_distribution) if tv else 0,
    ))
    buf.write(struct.pack("<II", task.head.n_classes, task.head.hidden))
    if tv is not None:
        buf.write(np.ascontiguousarray(tv.z.data, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(task.head.weight.data, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(task.head.bias.data, dtype="<f4").tobytes())
    buf.write(struct.pack("<I", len(task.overrides)))
    for name in sorted(task.overrides):
        _write_name(buf, name)
        write_tensor(buf, task.overrides[name].data)
    buf.write(struct.pack("<I", len(task.label_names)))
    for name in task.label_names:
        _write_name(buf, name)
    Path(path).write_bytes(buf.getvalue())


def _tag(table, index: int, what: str):
    if index >= len(table):
        raise FormatError(f"unknown {what} tag {index}")
    return table[index]


def load_task_module(path: str | Path, config: TransformerConfig | None = None, dtype=np.float32) -> TaskModule:
    """Read a task module; with ``config`` given, check it fits that model."""
    with open(path, "rb") as f:
        _check_magic(f, TASK_MAGIC, "task module")
        method_tag, d, n_layers = _unpack(f, "<BII")
        method = _tag(METHOD_TAGS, method_tag, "method")
        dims = _unpack(f, f"<{n_layers}I") if n_layers else ()
        (seed,) = _unpack(f, "<Q")
        dist_tag, pos_tag, pool_tag, kind_tag, init_tag = _unpack(f, "<BBBBB")
        n_classes, hidden = _unpack(f, "<II")
        z = np.frombuffer(_read_exact(f, 4 * d), dtype="<f4").astype(dtype) if d else None
        weight = np.frombuffer(_read_exact(f, 4 * n_classes * hidden), dtype="<f4").astype(dtype)
        bias = np.frombuffer(_read_exact(f, 4 * n_classes), dtype="<f4").astype(dtype)
        (n_over,) = _unpack(f, "<I")
        overrides = {}
        for _ in range(n_over):
            name = _read_name(f)
            overrides[name] = Tensor(read_tensor(f).astype(dtype), name=name)
        (n_labels,) = _unpack(f, "<I")
        label_names = [_read_name(f) for _ in range(n_labels)]
        if f.read(1):
            raise FormatError("trailing bytes after task module payload")
    position = _tag(POSITION_TAGS, pos_tag, "position")
    head = ClassifierHead(Tensor(weight.reshape(n_classes, hidden), name="head.weight"),
                          Tensor(bias, name="head.bias"), _tag(KIND_TAGS, kind_tag, "task kind"))
    vector = None
    if d:
        spec = ProjectionSpec(seed, _tag(DISTRIBUTION_TAGS, dist_tag, "distribution"), d, dims)
        vector = TaskVector(Tensor(z, name="z"), _tag(INIT_TAGS, init_tag, "init"), spec)
    task = TaskModule(method, head, position, _tag(POOLING_TAGS, pool_tag, "pooling"), vector, overrides, label_names)
    if config is not None:
        check_task_fits(task, config)
    return task


def check_task_fits(task: TaskModule, config: TransformerConfig) -> None:
    if task.head.hidden != config.hidden:
        raise FormatError(f"task head expects hidden size {task.head.hidden}, model has {config.hidden}")
    spec = task.vector.spec if task.vector else None
    if task.method is Method.SLASH:
        expected = (config.site_dim(task.position),) * config.n_layers
    elif task.method is Method.JRWARP:
        expected = (config.hidden,) * (config.n_layers + 1)
    elif task.method is Method.WARP:
        expected = (config.hidden,)
    else:
        expected = None
    if expected is not None and (spec is None or spec.per_layer_dims != expected):
        raise FormatError(f"task layer dims {spec.per_layer_dims if spec else None} do not fit the model ({expected})")
    shapes = parameter_shapes(config)
    for name, t in task.overrides.items():
        if shapes.get(name) != t.shape:
            raise FormatError(f"backbone tensor {name} shape {t.shape} does not fit the model")
