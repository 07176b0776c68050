"""Command line entry points.

Exit codes: 0 success, 1 usage problems, 2 unreadable or inconsistent data,
3 numeric failure (a training loss stopped being finite).

Every artifact-producing subcommand drops a JSON run manifest next to its
primary output recording the resolved configuration, seed, and phase
timings, which is enough to reproduce the artifact with the same binary.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import (CheckpointError, MergeSpec, load_checkpoint,
                         model_from_checkpoint, save_checkpoint, wise_ft_merge)
from .data import DataError, generate_dataset, load_split, retrieval_tokens
from .evaluation import (eval_captioning, eval_classification, eval_grounding,
                         eval_retrieval, eval_vqa)
from .infer import (EmbeddingIndexError, build_image_index, build_text_index,
                    generate, ground, load_index, retrieve, save_index)
from .losses import write_loss_csv
from .metrics import MetricError
from .model import FULL_SCALE, ModelConfig, param_count
from .scenes import read_ppm
from .train import (NumericFailure, StageConfig, select_samples,
                    train_retrieval_only, train_stage1_vg,
                    train_stage2_multitask)
from .vocab import UnknownTokenError, Vocabulary

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; usage problems must map to 1 here
    def error(self, message):
        raise UsageError(message)


def _write_json_atomic(path: Path, payload: dict) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_run_manifest(path, command: str, config: dict, seed: int | None,
                        timings: dict[str, float], outputs: list[str]) -> None:
    _write_json_atomic(Path(path), {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
        "outputs": outputs,
        "finished_unix": round(time.time(), 3),
    })


# ---------------------------------------------------------------------------
# config files: one `key = value` per line, '#' comments


STAGE_KEYS = {
    "epochs": int, "batch_size": int, "learning_rate": float,
    "warmup_epochs": int, "seed": int, "dataset": str, "p_mask": float,
    "gamma": float, "grad_clip": float, "weight_decay": float,
}


def read_config_file(path) -> dict:
    out = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in STAGE_KEYS:
            raise UsageError(f"{path}:{line_no}: unknown config key {key!r}")
        try:
            out[key] = STAGE_KEYS[key](value)
        except ValueError as e:
            raise UsageError(f"{path}:{line_no}: bad value for {key!r}: {e}") from e
    return out


def _stage_config(args) -> StageConfig:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    defaults = {"epochs": 10, "batch_size": 16, "learning_rate": 1e-3,
                "warmup_epochs": 1, "seed": 0, "dataset": _default_selector(args.stage),
                "p_mask": 0.3, "gamma": 2.0, "grad_clip": 1.0, "weight_decay": 0.01}
    if args.config:
        defaults.update(read_config_file(args.config))
    for key in STAGE_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            defaults[key] = flag
    try:
        return StageConfig(**defaults)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _default_selector(stage: str) -> str:
    return {"vg": "grounding", "retrieval": "retrieval", "multitask": "all"}[stage]


def _dtype(name: str):
    return {"float32": np.float32, "float64": np.float64}[name]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    t0 = time.time()
    counts = generate_dataset(args.out, args.train, args.test, args.seed,
                              questions_per_scene=args.questions)
    for split, n in counts.items():
        print(f"{split}: {n} samples")
    _write_run_manifest(
        Path(args.out) / "run_manifest.json", "gen-data",
        {"train": args.train, "test": args.test, "questions": args.questions},
        args.seed,
        {"generate": time.time() - t0},
        [str(Path(args.out) / f"{s}.jsonl") for s in counts])
    return EXIT_OK


def cmd_train(args) -> int:
    stage_cfg = _stage_config(args)
    t0 = time.time()
    vocab = Vocabulary.load(Path(args.data) / "vocab.txt")
    samples = select_samples(load_split(args.data, args.split, vocab), stage_cfg.dataset)
    load_s = time.time() - t0
    init = load_checkpoint(args.init) if args.init else None
    model_cfg = None
    if init is None:
        model_cfg = ModelConfig(
            vocab_size=len(vocab), layers=args.layers, hidden_dim=args.hidden_dim,
            heads=args.heads, vl_expert_layers=args.vl_expert_layers, pool=args.pool)
    dtype = _dtype(args.dtype)
    runner = {"vg": train_stage1_vg, "retrieval": train_retrieval_only,
              "multitask": train_stage2_multitask}[args.stage]
    t0 = time.time()
    ckpt, rows = runner(stage_cfg, samples, model_config=model_cfg, init=init, dtype=dtype)
    train_s = time.time() - t0
    save_checkpoint(ckpt, args.out)
    if args.loss_csv:
        write_loss_csv(args.loss_csv, rows)
    last = rows[-1]
    print(f"stage={args.stage} epochs={stage_cfg.epochs} samples={len(samples)}")
    print(f"final losses: mlm={last.mlm} infonce={last.infonce}")
    print(f"checkpoint: {args.out}")
    _write_run_manifest(
        f"{args.out}.run.json", f"train:{args.stage}",
        {**asdict(stage_cfg), "data": str(args.data), "split": args.split,
         "init": args.init, "dtype": args.dtype,
         "model": asdict(ckpt.config)},
        stage_cfg.seed, {"load": load_s, "train": train_s}, [str(args.out)])
    return EXIT_OK


def cmd_merge(args) -> int:
    t0 = time.time()
    a = load_checkpoint(args.a)
    b = load_checkpoint(args.b)
    merged = wise_ft_merge(a, b, MergeSpec(alpha=args.alpha))
    save_checkpoint(merged, args.out)
    print(f"merged {args.a} (alpha={args.alpha}) with {args.b} -> {args.out}")
    _write_run_manifest(
        f"{args.out}.run.json", "merge",
        {"a": str(args.a), "b": str(args.b), "alpha": args.alpha}, None,
        {"merge": time.time() - t0}, [str(args.out)])
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.time()
    vocab = Vocabulary.load(Path(args.data) / "vocab.txt")
    samples = load_split(args.data, args.split, vocab)
    model = model_from_checkpoint(load_checkpoint(args.ckpt), dtype=_dtype(args.dtype))
    caption_task = f"caption_{args.caption_task}"
    if args.task == "captioning":
        report, preds = eval_captioning(model, vocab, samples, task=caption_task)
    elif args.task == "retrieval":
        report, preds = eval_retrieval(model, vocab, samples, task=caption_task,
                                       limit=args.limit)
    elif args.task == "grounding":
        report, preds = eval_grounding(model, vocab, samples)
    elif args.task == "vqa":
        report, preds = eval_vqa(model, vocab, samples)
    else:
        report, preds = eval_classification(model, vocab, samples)
    width = max(len(k) for k in report)
    for key, value in report.items():
        if isinstance(value, float):
            print(f"{key:<{width}}  {value:.4f}")
        else:
            print(f"{key:<{width}}  {value}")
    payload = {
        "task": args.task, "split": args.split, "checkpoint": str(args.ckpt),
        "data": str(args.data), "caption_task": caption_task, "limit": args.limit,
        "metrics": report, "version": __version__,
        "timings_s": {"evaluate": round(time.time() - t0, 3)},
    }
    if args.report:
        _write_json_atomic(Path(args.report), payload)
    if args.preds:
        with open(args.preds, "w", encoding="utf-8") as f:
            for rec in preds:
                f.write(json.dumps(rec) + "\n")
    return EXIT_OK


def cmd_generate(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    model = model_from_checkpoint(load_checkpoint(args.ckpt), dtype=_dtype(args.dtype))
    image = read_ppm(args.image)
    if args.task == "grounding":
        if not args.text:
            raise UsageError("grounding needs --text with the referring expression")
        box = ground(model, vocab, image, args.text)
        print(" ".join(str(v) for v in box))
        return EXIT_OK
    emitted = generate(model, vocab, image, task=args.task, prompt_text=args.text)
    print(vocab.decode(emitted))
    return EXIT_OK


def cmd_index(args) -> int:
    t0 = time.time()
    vocab = Vocabulary.load(Path(args.data) / "vocab.txt")
    samples = load_split(args.data, args.split, vocab)
    model = model_from_checkpoint(load_checkpoint(args.ckpt), dtype=_dtype(args.dtype))
    if args.kind == "image":
        seen = {}
        for s in samples:
            seen.setdefault(s.id.rsplit("_", 1)[0], s.image)
        index = build_image_index(model, seen.items())
    else:
        items = [(s.id, s.retrieval_tokens) for s in samples if s.retrieval_eligible]
        index = build_text_index(model, items)
    save_index(index, args.out)
    print(f"indexed {len(index)} {args.kind} items -> {args.out}")
    _write_run_manifest(
        f"{args.out}.run.json", "index",
        {"data": str(args.data), "split": args.split, "kind": args.kind,
         "ckpt": str(args.ckpt)},
        None, {"index": time.time() - t0}, [str(args.out)])
    return EXIT_OK


def cmd_retrieve(args) -> int:
    if bool(args.text) == bool(args.image):
        raise UsageError("pass exactly one of --text or --image")
    vocab = Vocabulary.load(args.vocab)
    model = model_from_checkpoint(load_checkpoint(args.ckpt), dtype=_dtype(args.dtype))
    index = load_index(args.index)
    if args.text:
        query = model.encode_text(retrieval_tokens(vocab, args.text)).data
    else:
        query = model.encode_image(read_ppm(args.image)).data
    for item_id, score in retrieve(index, query, args.k):
        print(f"{item_id}\t{score:.6f}")
    return EXIT_OK


def cmd_param_count(args) -> int:
    if args.ckpt:
        config = load_checkpoint(args.ckpt).config
    else:
        config = ModelConfig(vocab_size=args.vocab_size)
    if args.full_scale:
        config = ModelConfig(vocab_size=config.vocab_size, **FULL_SCALE)
    print(f"config: {config}")
    print(f"parameters: {param_count(config)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="multiway",
                     description="train and run the multiway image-text encoder")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=64, help="training scenes")
    p.add_argument("--test", type=int, default=16, help="test scenes")
    p.add_argument("--questions", type=int, default=1, help="questions per scene")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=("vg", "retrieval", "multitask"))
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--loss-csv", help="write per-epoch losses and weights here")
    for key, typ in STAGE_KEYS.items():
        p.add_argument(f"--{key.replace('_', '-')}", type=typ, default=None)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--vl-expert-layers", type=int, default=3)
    p.add_argument("--pool", choices=("cls", "mean"), default="cls")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("merge", help="interpolate two checkpoints in weight space")
    p.add_argument("--a", required=True, help="first checkpoint (weight alpha)")
    p.add_argument("--b", required=True, help="second checkpoint (weight 1-alpha)")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_merge)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--task", required=True,
                   choices=("captioning", "retrieval", "grounding", "vqa", "classify"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--caption-task", choices=("short", "long"), default="short")
    p.add_argument("--limit", type=int, default=None,
                   help="cap the number of retrieval pairs")
    p.add_argument("--report", help="write metrics JSON here")
    p.add_argument("--preds", help="write per-sample predictions JSONL here")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="decode text for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--image", required=True, help="PPM raster")
    p.add_argument("--task", default="caption_short",
                   choices=("caption_short", "caption_long", "vqa", "grounding"))
    p.add_argument("--text", help="question or referring expression")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("index", help="embed a split into a retrieval index")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--kind", required=True, choices=("image", "text"))
    p.add_argument("--out", required=True)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("retrieve", help="query an embedding index")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--text", help="text query")
    p.add_argument("--image", help="image query (PPM)")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    p.set_defaults(fn=cmd_retrieve)

    p = sub.add_parser("param-count", help="report model size for a config")
    p.add_argument("--ckpt")
    p.add_argument("--vocab-size", type=int, default=149)
    p.add_argument("--full-scale", action="store_true",
                   help="use the publication-scale dimensions")
    p.set_defaults(fn=cmd_param_count)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, UnknownTokenError, CheckpointError, EmbeddingIndexError,
            MetricError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
