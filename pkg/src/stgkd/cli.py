"""Command-line entry point: generate, train, evaluate, ablate, inspect-graph.

Configuration is a flat ``key = value`` file whose keys are the fields of
``TrainConfig`` and ``WorldConfig`` (``seed`` is shared). Values are Python
literals; a bare word is read as a string and a comma list as a tuple.
``--set key=value`` overrides the file, and ``--seed`` overrides both.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import ast
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from importlib import resources
from pathlib import Path

from . import __version__
from .graph import build_video_graph, graph_to_json
from .model import TABLE_NAMES, VARIANTS, check_variant
from .trainer import TrainConfig, format_table, run_ablation_suite, train
from .world import WorldConfig, corpus_hash, generate_corpus, read_corpus, split_corpus, write_corpus

TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
WORLD_KEYS = {f.name for f in fields(WorldConfig)}
DESK_DEFAULTS = {"batch_size": 16, "d_model": 64}
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ config


def _parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if "," in text:
            return tuple(p.strip() for p in text.split(",") if p.strip())
        return text


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


def resolve_config(path=None, overrides=(), seed=None) -> dict:
    """Merge file, ``--set`` pairs and ``--seed``; unknown keys are rejected."""
    cfg = parse_config_text(Path(path).read_text()) if path else {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = _parse_value(value)
    if seed is not None:
        cfg["seed"] = seed
    unknown = sorted(set(cfg) - TRAIN_KEYS - WORLD_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    return cfg


def world_config(cfg: dict) -> WorldConfig:
    return WorldConfig(**{k: v for k, v in cfg.items() if k in WORLD_KEYS})


def train_config(cfg: dict, **extra) -> TrainConfig:
    values = {**DESK_DEFAULTS, **{k: v for k, v in cfg.items() if k in TRAIN_KEYS}, **extra}
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ------------------------------------------------------------------ manifest


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, config: dict, seed, outputs: dict, started: float, **extra) -> dict:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "outputs": {k: str(v) for k, v in outputs.items()},
        "tool_version": __version__,
        "duration_seconds": time.perf_counter() - started,
        **extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, default=str))
    os.replace(tmp, path)
    return manifest


def _load_splits(corpus_path) -> dict:
    samples = read_corpus(corpus_path)
    if not samples:
        raise ValueError(f"{corpus_path}: empty corpus")
    return split_corpus(samples, SPLIT_FRACTIONS)


# ------------------------------------------------------------------ commands


def cmd_generate(args) -> int:
    started = time.perf_counter()
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    cfg = resolve_config(args.config, args.set, args.seed)
    world = world_config(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    samples = generate_corpus(world, args.n)
    write_corpus(samples, out)
    splits = split_corpus(samples, SPLIT_FRACTIONS)
    split_record = {name: [s.id for s in part] for name, part in splits.items()}
    write_manifest(
        out.with_name(out.name + ".manifest.json"), "generate", asdict(world), world.seed,
        {"corpus": out}, started,
        n=args.n,
        split={name: len(ids) for name, ids in split_record.items()},
        split_ids=split_record,
        corpus_sha256=_file_sha256(out),
        content_hash=corpus_hash(samples),
    )
    print(f"wrote {len(samples)} videos to {out} (train/val/test {'/'.join(str(len(v)) for v in splits.values())})")
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = resolve_config(args.config, args.set, args.seed)
    config = train_config(cfg, variant=args.variant or cfg.get("variant", "full"))
    splits = _load_splits(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = train(config, splits, out_dir=out, resume=args.resume, log=print)
    (out / "history.json").write_text(json.dumps(run.history, indent=2))
    write_manifest(
        out / "manifest.json", "train", asdict(config), config.seed,
        {"best": out / "best", "last": out / "last", "history": out / "history.json"}, started,
        corpus=str(args.corpus), best_epoch=run.best_epoch,
    )
    print(f"best epoch {run.best_epoch}: val BLEU@4 {run.best['val_bleu4']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_model

    started = time.perf_counter()
    splits = _load_splits(args.corpus)
    samples = splits[args.split] or splits["val"] or splits["train"]
    out = Path(args.out) if args.out else Path(args.checkpoint) / f"report_{args.branch}_{args.split}.json"
    report = evaluate_model(args.checkpoint, samples, args.branch, out_path=out)
    write_manifest(
        out.with_name(out.stem + ".manifest.json"), "evaluate",
        {"branch": args.branch, "split": args.split, "checkpoint": str(args.checkpoint)}, None,
        {"report": out}, started,
    )
    m = report.to_json()["metric"]
    print(f"{args.branch} branch on {len(samples)} videos: BLEU@4 {m['bleu4']:.4f} ROUGE-L {m['rouge_l']:.4f} TokAcc {m['token_accuracy']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    cfg = resolve_config(args.config, args.set, None)
    variants = list(TABLE_NAMES) if args.variant in (None, "all") else [v.strip() for v in args.variant.split(",")]
    for v in variants:
        try:
            check_variant(v)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed if args.seed is not None else cfg.get("seed", 0)]
    base = train_config(cfg)
    splits = _load_splits(args.corpus)
    table = run_ablation_suite(splits, variants, base, seeds, args.split, log=print)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / "ablation.json.tmp"
    tmp.write_text(json.dumps(table, indent=2))
    os.replace(tmp, out / "ablation.json")
    text = format_table(table)
    (out / "ablation.txt").write_text(text + "\n")
    write_manifest(
        out / "manifest.json", "ablate", asdict(base), seeds,
        {"json": out / "ablation.json", "text": out / "ablation.txt"}, started,
        corpus=str(args.corpus), variants=variants,
    )
    print(text)
    return 0


def cmd_inspect_graph(args) -> int:
    samples = read_corpus(args.corpus)
    matches = [s for s in samples if s.id == args.video] if args.video else samples[args.index:args.index + 1]
    if not matches:
        raise UsageError(f"no video {args.video or args.index!r} in {args.corpus}")
    sample = matches[0]
    g = build_video_graph(sample.frames, args.mode)
    payload = {"id": sample.id, "mode": args.mode, **graph_to_json(sample.frames, g)}
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def schema_path() -> Path:
    """Location of the JSON schema that ``inspect-graph`` output satisfies."""
    return Path(str(resources.files("stgkd") / "schemas" / "inspect_graph.schema.json"))


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stgkd", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("generate", help="write a synthetic corpus as JSONL")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one variant")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/last")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--branch", choices=("scene", "object"), default="scene")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score several variants over seeds")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--variant", help="comma list or 'all' (default)")
    p.add_argument("--seeds", help="comma list of training seeds")
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-graph", help="dump one video's graph as JSON")
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--video", help="video id; overrides --index")
    p.add_argument("--mode", choices=("full", "spatial", "temporal", "dense"), default="full")
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_graph)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stgkd {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"stgkd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
