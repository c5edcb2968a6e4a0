"""``slash`` command line.

Exit codes: 0 success, 1 a check ran and failed, 2 usage error, 3 data or
file-format error, 4 numerical failure. ``SLASH_THREADS`` caps BLAS threads
and must be read before numpy loads, hence the placement below.
"""

from __future__ import annotations

import os

_threads = os.environ.get("SLASH_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from importlib import metadata  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import reparam  # noqa: E402
from .data import DataError, TsvSchema, Vocab, load_tsv, write_tsv  # noqa: E402
from .dp import NOISE_PRESETS, DPConfig, dp_train  # noqa: E402
from .gradcheck import toy_suite  # noqa: E402
from .heads import TaskKind  # noqa: E402
from .reparam import Method  # noqa: E402
from .serialize import (FormatError, canonical_json, load_checkpoint, load_task_module, save_checkpoint,  # noqa: E402
                        save_task_module, sha256_file)
from .synthetic import WORDS, synthetic_cls, synthetic_corpus  # noqa: E402
from .tensor import NumericalError, Tensor, precision  # noqa: E402
from .trainer import (PretrainConfig, TaskModule, TrainConfig, TrainingDiverged, create_task_module,  # noqa: E402
                      encode_dataset, evaluate, hooks_for, pretrain, train)
from .transformer import TransformerConfig, TransformerWeights, parameter_shapes  # noqa: E402

log = logging.getLogger("slash")

EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3, 4
PROMPT_METHODS = (Method.JRWARP, Method.WARP)


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(out: str | Path, command: str, args: argparse.Namespace, inputs: dict[str, str],
                   outputs: list[str | Path], extra: dict | None = None) -> Path:
    """Write ``<out>.manifest.json`` with the arguments and the input/output hashes."""
    def plain(v):
        return str(v) if isinstance(v, Path) else v

    manifest = {
        "command": command,
        "version": _version(),
        "args": {k: plain(v) for k, v in sorted(vars(args).items()) if k != "func"},
        "seed": getattr(args, "seed", None),
        "inputs": {role: {"path": str(p), "sha256": sha256_file(p)} for role, p in sorted(inputs.items())},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    path = Path(f"{out}.manifest.json")
    path.write_bytes(canonical_json(manifest) + b"\n")
    return path


def _emit(obj) -> None:
    sys.stdout.write(canonical_json(obj).decode("utf-8") + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain_toy(args) -> int:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    corpus_seed = raw.pop("corpus_seed", 11)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        config = PretrainConfig.from_dict(raw)
    except TypeError as exc:
        raise UsageError(f"bad pretraining config: {exc}") from None
    vocab = Vocab.build([" ".join(WORDS)])
    corpus = synthetic_corpus(corpus_seed, config.corpus_size)

    def on_step(step, loss):
        if step % 100 == 0 or step == config.steps - 1:
            log.info("step %d loss %.4f", step, loss)

    weights, losses = pretrain(config, corpus, vocab, on_step)
    save_checkpoint(args.out, weights, vocab)
    inputs = {"config": args.config} if args.config else {}
    write_manifest(args.out, "pretrain-toy", args, inputs, [args.out],
                   {"pretrain_config": config.to_dict(), "corpus_seed": corpus_seed,
                    "final_loss": float(np.mean(losses[-50:]))})
    _emit({"final_loss": float(np.mean(losses[-50:])), "steps": config.steps})
    return 0


def cmd_make_synthetic(args) -> int:
    examples, description = synthetic_cls(args.seed, args.n, args.difficulty, args.mood_agreement)
    write_tsv(args.out, examples, ["neg", "pos"])
    write_manifest(args.out, "make-synthetic", args, {}, [args.out], {"grammar": description.to_dict()})
    return 0


def _schema(args, labels=None) -> TsvSchema:
    return TsvSchema(pair=args.pair, kind=args.kind, labels=labels)


def _load_examples(path, args, labels=None):
    examples, names = load_tsv(path, _schema(args, labels))
    return examples, names or []


def _encode(examples, vocab, task_or_method, pooling, config, kind):
    method = task_or_method.method if isinstance(task_or_method, TaskModule) else Method(task_or_method)
    reserve = 1 if method in PROMPT_METHODS else 0
    return encode_dataset(examples, vocab, pooling, config.max_len, kind, reserve)


def _n_outputs(kind: TaskKind, label_names: list[str]) -> int:
    if kind is TaskKind.REGRESS:
        return 1
    if len(label_names) < 2:
        raise DataError(f"need at least two distinct labels, found {label_names}")
    return len(label_names)


def _default_metric(kind: TaskKind) -> str:
    return {TaskKind.CLASSIFY: "accuracy", TaskKind.REGRESS: "pearson", TaskKind.TOKEN_CLASSIFY: "f1_micro"}[kind]


def _prepare_finetune(args):
    """Load and validate everything before any training starts."""
    kind = TaskKind(args.kind)
    method = Method(args.method)
    if method in (Method.SLASH, Method.JRWARP) and args.d is not None and args.d < 1:
        raise UsageError("--d must be positive")
    weights, vocab, fused = load_checkpoint(args.model)
    if fused:
        raise UsageError("cannot finetune on a fused checkpoint")
    train_ex, label_names = _load_examples(args.data, args)
    dev_ex = None
    if args.dev:
        dev_ex, _ = _load_examples(args.dev, args, label_names if kind is not TaskKind.REGRESS else None)
    n_out = _n_outputs(kind, label_names)
    task = create_task_module(method, weights, n_out, d=args.d, seed=args.seed, distribution=args.distribution,
                              init=args.init, position=args.position, pooling=args.pooling, kind=kind)
    task.label_names = list(label_names)
    train_data = _encode(train_ex, vocab, method, args.pooling, weights.config, kind)
    dev_data = _encode(dev_ex, vocab, method, args.pooling, weights.config, kind) if dev_ex else None
    metric = args.metric or _default_metric(kind)
    base = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, warmup_ratio=args.warmup,
                       grad_clip=args.grad_clip, seed=args.seed, metric=metric)
    return weights, task, train_data, dev_data, base


def _history_writer(path: Path):
    path.write_text("")

    def on_record(record):
        with path.open("a") as f:
            f.write(canonical_json(record.to_dict()).decode("utf-8") + "\n")

    return on_record


def _finish_finetune(args, command, weights, task, train_data, dev_data, history_path, extra_outputs, extra):
    save_task_module(args.out, task)
    metrics = evaluate(weights, task, dev_data or train_data)
    inputs = {"model": args.model, "data": args.data}
    if args.dev:
        inputs["dev"] = args.dev
    extra = {"trainable_params": task.n_trainable(), "final_metrics": metrics, **extra}
    write_manifest(args.out, command, args, inputs, [args.out, history_path, *extra_outputs], extra)
    _emit(metrics)
    return 0


def cmd_finetune(args) -> int:
    weights, task, train_data, dev_data, base = _prepare_finetune(args)
    history_path = Path(f"{args.out}.history.jsonl")
    task, _ = train(base, weights, task, train_data, dev_data, on_record=_history_writer(history_path))
    return _finish_finetune(args, "finetune", weights, task, train_data, dev_data, history_path, [],
                            {"train_config": base.__dict__})


def _parse_sigma(text: str) -> float:
    if text.startswith("preset:"):
        name = text.split(":", 1)[1]
        if name not in NOISE_PRESETS:
            raise UsageError(f"unknown sigma preset {name!r}; choose from {sorted(NOISE_PRESETS)}")
        return NOISE_PRESETS[name]
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"--sigma expects a number or preset:<task>, got {text!r}") from None


def cmd_dp_finetune(args) -> int:
    sigma = _parse_sigma(args.sigma)
    clip = float("inf") if args.clip == "inf" else float(args.clip)
    try:
        dp = DPConfig(clip, sigma, args.lot, args.epochs, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    weights, task, train_data, dev_data, base = _prepare_finetune(args)
    if dp.lot_size > len(train_data):
        raise UsageError(f"--lot {dp.lot_size} exceeds the {len(train_data)} training examples")
    history_path = Path(f"{args.out}.history.jsonl")
    audit_path = Path(f"{args.out}.audit.jsonl")
    audit_path.write_text("")

    def on_audit(record):
        with audit_path.open("a") as f:
            f.write(canonical_json(record.to_dict()).decode("utf-8") + "\n")

    task, _, audit = dp_train(dp, weights, task, train_data, dev_data, base=base,
                              on_record=_history_writer(history_path), on_audit=on_audit)
    return _finish_finetune(args, "dp-finetune", weights, task, train_data, dev_data, history_path, [audit_path],
                            {"dp_config": dp.__dict__, "max_post_clip_norm": max(a.max_post_clip_norm for a in audit)})


def _task_fused_into(fused_marker: dict | None, task_path: str) -> bool:
    if not fused_marker:
        return False
    if fused_marker.get("task_sha256") != sha256_file(task_path):
        raise DataError("checkpoint was fused with a different task module")
    return True


def cmd_eval(args) -> int:
    weights, vocab, fused_marker = load_checkpoint(args.model)
    task = load_task_module(args.task, weights.config)
    fused = _task_fused_into(fused_marker, args.task)
    kind = task.kind
    args.kind = kind.value
    labels = task.label_names if kind is not TaskKind.REGRESS else None
    examples, _ = _load_examples(args.data, args, labels or None)
    data = _encode(examples, vocab, task, task.pooling, weights.config, kind)
    metrics = evaluate(weights, task, data, fused=fused)
    Path(args.metrics).write_bytes(canonical_json(metrics) + b"\n")
    write_manifest(args.metrics, "eval", args, {"model": args.model, "task": args.task, "data": args.data},
                   [args.metrics], {"fused": fused})
    _emit(metrics)
    return 0


def cmd_fuse(args) -> int:
    weights, vocab, fused_marker = load_checkpoint(args.model)
    if fused_marker:
        raise UsageError("checkpoint is already fused")
    task = load_task_module(args.task, weights.config)
    if task.method in PROMPT_METHODS:
        raise UsageError(f"{task.method.value} adds a prompt position and cannot be folded into biases")
    if task.method is Method.SLASH:
        fused = reparam.fuse(weights, hooks_for(task).shifts)
    else:
        fused = weights.with_overrides(task.overrides)
    marker = {"method": task.method.value, "position": task.position.value, "task_sha256": sha256_file(args.task)}
    save_checkpoint(args.out, fused, vocab, marker)
    write_manifest(args.out, "fuse", args, {"model": args.model, "task": args.task}, [args.out])
    return 0


def cmd_count_params(args) -> int:
    config = TransformerConfig(n_layers=args.layers, hidden=args.hidden, ffn=args.ffn or 4 * args.hidden,
                               heads=1, vocab=args.vocab, max_len=8, dropout=0.0)
    method = Method(args.method)
    d = args.d if method in (Method.SLASH, Method.JRWARP) else None
    formula = reparam.count_params(method, d or 0, args.classes, args.hidden, config)
    enumerated = create_task_module(method, _shape_only_weights(config), args.classes, d=d).n_trainable()
    _emit({"enumerated": enumerated, "formula": formula, "method": method.value})
    return 0 if formula == enumerated else EXIT_CHECK_FAILED


def _shape_only_weights(config: TransformerConfig):
    # np.zeros pages are not touched unless written, so large configs stay cheap.
    tensors = {n: Tensor(np.zeros(s, dtype=np.float32), name=n) for n, s in parameter_shapes(config).items()}
    return TransformerWeights(tensors, config)


def cmd_grad_check(args) -> int:
    with precision(args.bits):
        results = toy_suite(seed=args.seed, max_entries=args.max_entries)
    worst = max(r.max_rel_err for r in results)
    failed = [r.name for r in results if not r.passed(args.tol)]
    _emit({"checked": len(results), "failed": failed, "max_rel_err": worst, "tolerance": args.tol})
    return 0 if not failed else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# argument parsing


def _add_finetune_args(p: argparse.ArgumentParser, dp: bool) -> None:
    p.add_argument("--method", choices=[m.value for m in Method], default="slash")
    p.add_argument("--d", type=int, default=None, help="length of the shared vector (default 1024)")
    p.add_argument("--position", choices=["attention", "intermediate", "output"], default="output")
    p.add_argument("--pooling", choices=["cls", "mask"], default="mask")
    p.add_argument("--init", choices=["gaussian", "uniform", "zeros"], default="gaussian")
    p.add_argument("--distribution", choices=["gaussian", "uniform", "identity", "selector"], default="gaussian")
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--warmup", type=float, default=0.06)
    p.add_argument("--grad-clip", type=float, default=1.0)
    p.add_argument("--metric", choices=["accuracy", "f1", "f1_micro", "matthews", "pearson"], default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", required=True, help="training TSV")
    p.add_argument("--dev", default=None, help="dev TSV used for best-epoch selection")
    p.add_argument("--pair", action="store_true", help="TSV has a second text column")
    p.add_argument("--kind", choices=[k.value for k in TaskKind], default="classify")
    p.add_argument("--model", required=True, help="pretrained checkpoint")
    p.add_argument("--out", required=True, help="task module to write")
    if dp:
        p.add_argument("--clip", default="1.0", help="per-sample clip threshold (or 'inf' without noise)")
        p.add_argument("--sigma", default="preset:sst2", help="noise multiplier or preset:{mnli|qqp|qnli|sst2}")
        p.add_argument("--lot", type=int, default=2048)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slash", description="Shared-vector finetuning of a toy encoder.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-toy", help="masked-LM pretraining on the synthetic grammar")
    p.add_argument("--config", default=None, help="JSON with pretraining fields and optional corpus_seed")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_toy)

    p = sub.add_parser("make-synthetic", help="write a labelled synthetic TSV")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--difficulty", type=int, choices=[0, 1], default=0)
    p.add_argument("--mood-agreement", type=float, default=0.7,
                   help="probability a polar word matches the sentence mood (benchmark value 0.7)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("finetune", help="train a task module on a frozen checkpoint")
    _add_finetune_args(p, dp=False)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("dp-finetune", help="differentially private finetuning")
    _add_finetune_args(p, dp=True)
    p.set_defaults(func=cmd_dp_finetune)

    p = sub.add_parser("eval", help="score a task module on a TSV")
    p.add_argument("--model", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pair", action="store_true")
    p.add_argument("--metrics", required=True, help="JSON file to write")
    p.set_defaults(func=cmd_eval, kind="classify")

    p = sub.add_parser("fuse", help="fold a task's shifts into the checkpoint biases")
    p.add_argument("--model", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("count-params", help="trainable parameters per task")
    p.add_argument("--method", choices=[m.value for m in Method], required=True)
    p.add_argument("--d", type=int, default=1024)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--ffn", type=int, default=None, help="default 4 x hidden")
    p.add_argument("--vocab", type=int, default=1000)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("grad-check", help="finite-difference check of every trainable path")
    p.add_argument("--scale", choices=["toy"], default="toy")
    p.add_argument("--bits", type=int, choices=[64], default=64)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-entries", type=int, default=6, help="sampled entries per backbone tensor")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with code 2
    except (DataError, FormatError, FileNotFoundError, IsADirectoryError, UnicodeDecodeError) as exc:
        print(f"slash: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TrainingDiverged, FloatingPointError) as exc:
        print(f"slash: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"slash: invalid arguments: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
