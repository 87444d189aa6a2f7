"""Losses, the training loop with early stopping, checkpoints and the ablation suite."""

from __future__ import annotations

import copy
import json
import logging
import shutil
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from .decoder import PAD, Vocabulary, language_loss, tokenize
from .errors import StructuralError
from .metrics import bleu4, corpus_rouge_l, token_counts
from .model import TABLE_NAMES, VARIANTS, TwoBranchCaptioner, VideoBatch, check_variant, make_batch
from .world import VideoSample

logger = logging.getLogger(__name__)


# ------------------------------------------------------------------ losses


def distill_loss(logits_s: torch.Tensor, logits_o: torch.Tensor, targets: torch.Tensor | None = None) -> torch.Tensor:
    """KL(P_s || P_o) per position, averaged over non-PAD positions.

    ``targets`` marks PAD positions to skip; without it every position counts.
    Gradients reach both logits tensors.
    """
    if logits_s.shape != logits_o.shape:
        raise StructuralError(f"logit shapes differ: {tuple(logits_s.shape)} vs {tuple(logits_o.shape)}")
    log_ps = F.log_softmax(logits_s, dim=-1)
    log_po = F.log_softmax(logits_o, dim=-1)
    ps = log_ps.exp()
    # 0 log 0 = 0 for words the student rules out entirely
    kl = torch.where(ps > 0, ps * (log_ps - log_po), torch.zeros_like(ps)).sum(-1)
    if targets is None:
        return kl.mean()
    keep = (targets != PAD).to(kl.dtype)
    return (kl * keep).sum() / keep.sum().clamp(min=1.0)


def l2_feature_loss(f_s: torch.Tensor, f_o: torch.Tensor) -> torch.Tensor:
    """Mean squared elementwise distance."""
    if f_s.shape != f_o.shape:
        raise StructuralError(f"feature shapes differ: {tuple(f_s.shape)} vs {tuple(f_o.shape)}")
    return ((f_s - f_o) ** 2).mean()


@dataclass
class LossBreakdown:
    l_o_lang: torch.Tensor | float
    l_s_lang: torch.Tensor | float
    l_distill: torch.Tensor | float
    total: torch.Tensor | float
    lambda_sl: float
    lambda_d: float

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def total_loss(l_o, l_s, l_d, lambda_sl: float = 1.0, lambda_d: float = 4.0) -> LossBreakdown:
    if lambda_sl < 0 or lambda_d < 0:
        raise ValueError("loss weights must be nonnegative")
    return LossBreakdown(l_o, l_s, l_d, l_o + lambda_sl * l_s + lambda_d * l_d, lambda_sl, lambda_d)


def compute_losses(model: TwoBranchCaptioner, batch: VideoBatch, lambda_sl: float, lambda_d: float) -> LossBreakdown:
    """Variant-dependent objective.

    scene_only and concat train a single decoder, whose loss sits in the
    scene slot; l2 puts the feature distance in the distillation slot.
    """
    out = model(batch)
    ref = batch.targets[:, 1:]
    l_s = language_loss(out.logits_s, ref)
    zero = l_s.new_zeros(())
    if model.coupling in ("none", "concat"):
        return total_loss(zero, l_s, zero, lambda_sl, lambda_d)
    l_o = language_loss(out.logits_o, ref)
    if model.coupling == "l2":
        l_d = l2_feature_loss(out.f_s, out.f_o.values)
    else:
        l_d = distill_loss(out.logits_s, out.logits_o, ref)
    return total_loss(l_o, l_s, l_d, lambda_sl, lambda_d)


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    variant: str = "full"
    batch_size: int = 64
    epochs: int = 50
    learning_rate: float = 1e-4
    patience: int | None = None
    seed: int = 0
    d_model: int = 512
    n_heads: int = 8
    n_layers: int = 2
    d_ff: int = 1024
    dropout: float = 0.3
    gcn_layers: int = 3
    lambda_sl: float = 1.0
    lambda_d: float = 4.0
    max_len: int = 20
    num_threads: int = 1
    freeze_object_branch: bool = False

    def __post_init__(self) -> None:
        check_variant(self.variant)
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """CPU-sized defaults used by tests and the acceptance run."""
        return cls(**{"batch_size": 16, "d_model": 64, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainRun:
    config: TrainConfig
    state_dict: dict
    history: list[dict]
    best_epoch: int
    vocab: Vocabulary
    dims: dict
    model: TwoBranchCaptioner | None = field(default=None, repr=False)

    @property
    def best(self) -> dict:
        return next(h for h in self.history if h["epoch"] == self.best_epoch)


def build_model(config: TrainConfig, vocab_size: int, dims: dict) -> TwoBranchCaptioner:
    return TwoBranchCaptioner(
        config.variant, vocab_size, dims["d_obj"], dims["d_2d"], dims["d_3d"],
        d_model=config.d_model, n_heads=config.n_heads, n_layers=config.n_layers,
        d_ff=config.d_ff, dropout=config.dropout, gcn_layers=config.gcn_layers,
    )


def corpus_dims(samples: Sequence[VideoSample]) -> dict:
    s = samples[0]
    return {"d_obj": int(s.frames[0].features.shape[1]), "d_2d": int(s.f2d.shape[1]), "d_3d": int(s.f3d.shape[1])}


def trainable_parameters(model: TwoBranchCaptioner, freeze_object_branch: bool = False):
    frozen = set()
    if freeze_object_branch:
        for mod in (model.object_encoder, model.object_decoder):
            if mod is not None:
                frozen.update(id(p) for p in mod.parameters())
    return [p for p in model.parameters() if id(p) not in frozen]


# ------------------------------------------------------------------ validation


def decode_batch(model: TwoBranchCaptioner, batch: VideoBatch, vocab: Vocabulary, branch: str = "scene", max_len: int = 20, chunk: int = 256) -> list[str]:
    out = []
    for start in range(0, len(batch), chunk):
        part = batch.index(range(start, min(start + chunk, len(batch))))
        out.extend(vocab.decode(ids) for ids in model.generate(part, branch, max_len))
    return out


def teacher_forced_accuracy(model: TwoBranchCaptioner, batch: VideoBatch, branch: str = "scene") -> float:
    was_training = model.training
    model.eval()
    hits = total = 0
    for start in range(0, len(batch), 256):
        part = batch.index(range(start, min(start + 256, len(batch))))
        h, n = token_counts(model.teacher_forced(part, branch), part.targets[:, 1:])
        hits, total = hits + h, total + n
    model.train(was_training)
    return hits / total if total else 0.0


def score_batch(model: TwoBranchCaptioner, batch: VideoBatch, vocab: Vocabulary, branch: str = "scene", max_len: int = 20) -> dict:
    was_training = model.training
    model.eval()
    captions = decode_batch(model, batch, vocab, branch, max_len)
    model.train(was_training)
    cands = [tokenize(c) for c in captions]
    refs = [[tokenize(r) for r in rs] for rs in batch.refs]
    return {
        "bleu4": bleu4(cands, refs),
        "rouge_l": corpus_rouge_l(cands, refs),
        "token_accuracy": teacher_forced_accuracy(model, batch, branch),
        "captions": captions,
    }


# ------------------------------------------------------------------ checkpoints


def _atomic_dir_write(target: Path, files: dict[str, object]) -> None:
    """Write ``files`` into a fresh directory and swap it in place of ``target``."""
    target = Path(target)
    tmp = target.with_name(target.name + ".tmp")
    old = target.with_name(target.name + ".old")
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    for name, payload in files.items():
        if name.endswith(".pt"):
            torch.save(payload, tmp / name)
        else:
            (tmp / name).write_text(payload if isinstance(payload, str) else json.dumps(payload, indent=2))
    shutil.rmtree(old, ignore_errors=True)
    if target.exists():
        target.rename(old)
    tmp.rename(target)
    shutil.rmtree(old, ignore_errors=True)


def save_checkpoint(path, model_state: dict, config: TrainConfig, epoch: int, val_metric: float, vocab: Vocabulary, dims: dict, history: list[dict], extra_state: dict | None = None) -> None:
    meta = {
        "config": asdict(config),
        "epoch": epoch,
        "val_metric": val_metric,
        "vocab_hash": vocab.hash(),
        "seed": config.seed,
        "dims": dims,
    }
    blob = {"model": model_state}
    if extra_state:
        blob.update(extra_state)
    _atomic_dir_write(Path(path), {
        "params.pt": blob,
        "meta.json": meta,
        "vocab.json": vocab.to_json(),
        "history.json": history,
    })


def load_checkpoint(path) -> tuple[TwoBranchCaptioner, dict, Vocabulary, dict]:
    """Returns (model in eval mode, meta, vocab, raw blob)."""
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    vocab = Vocabulary.from_json((path / "vocab.json").read_text())
    if vocab.hash() != meta["vocab_hash"]:
        raise StructuralError(f"{path}: vocabulary file does not match its recorded hash")
    config = TrainConfig.from_dict(meta["config"])
    model = build_model(config, len(vocab), meta["dims"])
    blob = torch.load(path / "params.pt", weights_only=False)
    model.load_state_dict(blob["model"])
    model.eval()
    return model, meta, vocab, blob


# ------------------------------------------------------------------ training


class NonFiniteLossError(FloatingPointError):
    pass


def _select_best(history: list[dict]) -> int:
    """Epoch with the highest validation BLEU@4; token accuracy then earliest epoch break ties."""
    best = max(history, key=lambda h: (h["val_bleu4"], h["val_token_accuracy"], -h["epoch"]))
    return best["epoch"]


def train(
    config: TrainConfig,
    dataset: dict[str, Sequence[VideoSample]],
    out_dir=None,
    vocab: Vocabulary | None = None,
    resume: bool = False,
    max_batches: int | None = None,
    log=None,
) -> TrainRun:
    """Train one variant; returns the history and the best-epoch parameters.

    ``dataset`` needs ``train`` and ``val`` splits. With ``out_dir`` the last
    completed epoch (including optimizer and RNG state) is checkpointed to
    ``out_dir/last`` after every epoch and the best one to ``out_dir/best``;
    ``resume`` continues from ``out_dir/last``. ``max_batches`` caps the
    number of optimizer steps per epoch.
    """
    train_set, val_set = list(dataset.get("train", [])), list(dataset.get("val", []))
    if not train_set:
        raise ValueError("empty training set")
    if not val_set:
        val_set = train_set
    torch.set_num_threads(config.num_threads)
    if vocab is None:
        vocab = Vocabulary.build(r for s in train_set + val_set for r in s.refs)
    dims = corpus_dims(train_set)
    graph_mode, _ = check_variant(config.variant)
    train_batch = make_batch(train_set, vocab, graph_mode)
    val_batch = make_batch(val_set, vocab, graph_mode)

    torch.manual_seed(config.seed)
    model = build_model(config, len(vocab), dims)
    params = trainable_parameters(model, config.freeze_object_branch)
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    shuffler = torch.Generator().manual_seed(config.seed)
    history: list[dict] = []
    best_state = None
    start_epoch = 1

    if resume:
        if out_dir is None:
            raise ValueError("resume needs out_dir")
        _, meta, ck_vocab, blob = load_checkpoint(Path(out_dir) / "last")
        if ck_vocab != vocab:
            raise StructuralError("resume vocabulary differs from the corpus vocabulary")
        model.load_state_dict(blob["model"])
        optimizer.load_state_dict(blob["optimizer"])
        history = json.loads((Path(out_dir) / "last" / "history.json").read_text())
        start_epoch = meta["epoch"] + 1
        best_dir = Path(out_dir) / "best"
        if best_dir.exists():
            best_state = load_checkpoint(best_dir)[0].state_dict()
        # restore RNG last: rebuilding models above draws from it
        torch.set_rng_state(blob["torch_rng"])
        shuffler.set_state(blob["shuffle_rng"])

    n = len(train_batch)
    # epochs since the best one, so patience carries across a resume
    stale = sum(h["epoch"] > _select_best(history) for h in history) if history else 0
    for epoch in range(start_epoch, config.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = torch.randperm(n, generator=shuffler)
        sums = {"l_o_lang": 0.0, "l_s_lang": 0.0, "l_distill": 0.0, "total": 0.0}
        steps = 0
        for start in range(0, n, config.batch_size):
            if max_batches is not None and steps >= max_batches:
                break
            batch = train_batch.index(order[start:start + config.batch_size])
            losses = compute_losses(model, batch, config.lambda_sl, config.lambda_d)
            if not torch.isfinite(losses.total):
                raise NonFiniteLossError(f"epoch {epoch} step {steps}: non-finite loss {losses.as_floats()}")
            optimizer.zero_grad()
            losses.total.backward()
            optimizer.step()
            for k in sums:
                sums[k] += float(getattr(losses, k).detach())
            steps += 1
        val = score_batch(model, val_batch, vocab, "scene", config.max_len)
        record = {
            "epoch": epoch,
            **{k: v / steps for k, v in sums.items()},
            "val_bleu4": val["bleu4"],
            "val_rouge_l": val["rouge_l"],
            "val_token_accuracy": val["token_accuracy"],
            "val_object_token_accuracy": (
                teacher_forced_accuracy(model, val_batch, "object") if "object" in model.branches else None
            ),
            "seconds": time.perf_counter() - t0,
        }
        history.append(record)
        best_epoch = _select_best(history)
        if best_epoch == epoch:
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
        msg = (
            f"[{config.variant}] epoch {epoch:3d} total={record['total']:.4f} "
            f"l_o={record['l_o_lang']:.4f} l_s={record['l_s_lang']:.4f} l_d={record['l_distill']:.4f} "
            f"val_bleu4={val['bleu4']:.4f} val_tok={val['token_accuracy']:.4f}"
        )
        if record["val_object_token_accuracy"] is not None:
            msg += f" val_obj_tok={record['val_object_token_accuracy']:.4f}"
        (log or logger.info)(msg)
        if out_dir is not None:
            if best_epoch == epoch:
                save_checkpoint(Path(out_dir) / "best", best_state, config, epoch, val["bleu4"], vocab, dims, history)
            save_checkpoint(
                Path(out_dir) / "last", model.state_dict(), config, epoch, val["bleu4"], vocab, dims, history,
                {"optimizer": optimizer.state_dict(), "torch_rng": torch.get_rng_state(), "shuffle_rng": shuffler.get_state()},
            )
        if config.patience is not None and stale >= config.patience:
            logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    if not history:
        raise ValueError("no epochs left to run")
    best_epoch = _select_best(history)
    model.load_state_dict(best_state)
    model.eval()
    return TrainRun(config, best_state, history, best_epoch, vocab, dims, model)


# ------------------------------------------------------------------ ablation


def run_ablation_suite(
    dataset: dict[str, Sequence[VideoSample]],
    variants: Sequence[str],
    base_config: TrainConfig | None = None,
    seeds: Sequence[int] = (0,),
    eval_split: str = "test",
    log=None,
) -> dict:
    """Train every variant for every seed and score the scene branch on ``eval_split``.

    Returns a table with one row per variant holding per-seed scores and
    their mean and sample standard deviation.
    """
    for v in variants:
        check_variant(v)
    base = base_config or TrainConfig()
    eval_set = list(dataset.get(eval_split) or dataset["val"])
    vocab = Vocabulary.build(r for split in dataset.values() for s in split for r in s.refs)
    rows = []
    for v in variants:
        per_seed = []
        for seed in seeds:
            cfg = TrainConfig(**{**asdict(base), "variant": v, "seed": seed})
            run = train(cfg, dataset, vocab=vocab, log=log)
            batch = make_batch(eval_set, vocab, VARIANTS[v][0])
            scores = score_batch(run.model, batch, vocab, "scene", cfg.max_len)
            per_seed.append({
                "seed": seed,
                "best_epoch": run.best_epoch,
                "bleu4": scores["bleu4"],
                "rouge_l": scores["rouge_l"],
                "token_accuracy": scores["token_accuracy"],
                "val_bleu4": run.best["val_bleu4"],
                "val_token_accuracy": run.best["val_token_accuracy"],
            })
        row = {"variant": v, "method": TABLE_NAMES[v], "runs": per_seed}
        for metric in ("bleu4", "rouge_l", "token_accuracy"):
            vals = [r[metric] for r in per_seed]
            row[metric] = statistics.fmean(vals)
            row[f"{metric}_std"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
        rows.append(row)
    return {"eval_split": eval_split, "seeds": list(seeds), "rows": rows}


def format_table(table: dict) -> str:
    """Aligned text rendering, percentages like the published ablation table."""
    header = f"{'Method':<22} {'BLEU@4':>14} {'ROUGE-L':>14} {'TokAcc':>14}"
    lines = [header, "-" * len(header)]
    for row in table["rows"]:
        cells = []
        for m in ("bleu4", "rouge_l", "token_accuracy"):
            cells.append(f"{100 * row[m]:6.1f} ±{100 * row[m + '_std']:5.1f}")
        lines.append(f"{row['method']:<22} " + " ".join(f"{c:>14}" for c in cells))
    return "\n".join(lines)
