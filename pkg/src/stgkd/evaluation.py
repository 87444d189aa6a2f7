"""Checkpoint evaluation: greedy captions, corpus metrics and a JSON report."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .decoder import Vocabulary, tokenize
from .errors import StructuralError
from .metrics import bleu4, corpus_rouge_l
from .model import make_batch
from .trainer import decode_batch, load_checkpoint, teacher_forced_accuracy
from .world import VideoSample


class VocabMismatchError(StructuralError):
    """The dataset uses tokens the checkpoint's vocabulary does not know."""


@dataclass
class MetricReport:
    bleu4: float
    rouge_l: float
    token_accuracy: float
    per_video: list[dict] = field(default_factory=list)
    checkpoint: str = ""
    branch: str = "scene"

    @property
    def corpus_size(self) -> int:
        return len(self.per_video)

    def to_json(self) -> dict:
        return {
            "metric": {"bleu4": self.bleu4, "rouge_l": self.rouge_l, "token_accuracy": self.token_accuracy},
            "per_video": self.per_video,
            "checkpoint": self.checkpoint,
            "branch": self.branch,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MetricReport":
        return cls(**d["metric"], per_video=list(d["per_video"]), checkpoint=d["checkpoint"], branch=d["branch"])

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), indent=2))
        os.replace(tmp, path)

    @classmethod
    def read(cls, path) -> "MetricReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def check_vocabulary(vocab: Vocabulary, samples: Sequence[VideoSample]) -> None:
    """Every reference token must be in ``vocab``; otherwise scores would silently count UNK."""
    missing = sorted({t for s in samples for r in s.refs for t in tokenize(r)} - set(vocab.token_to_id))
    if missing:
        raise VocabMismatchError(f"tokens missing from checkpoint vocabulary (hash {vocab.hash()}): {missing[:10]}")


def score_captions(candidates: Sequence[str], samples: Sequence[VideoSample]) -> tuple[float, float, list[dict]]:
    cands = [tokenize(c) for c in candidates]
    refs = [[tokenize(r) for r in s.refs] for s in samples]
    per_video = [
        {"id": s.id, "candidate": c, "refs": list(s.refs), "bleu4": bleu4([ct], [rt])}
        for s, c, ct, rt in zip(samples, candidates, cands, refs)
    ]
    return bleu4(cands, refs), corpus_rouge_l(cands, refs), per_video


def evaluate_model(checkpoint, samples: Sequence[VideoSample], branch: str = "scene", out_path=None, max_len: int | None = None) -> MetricReport:
    """Greedy-decode ``samples`` through one branch of a saved model.

    Raises ``VocabMismatchError`` for unknown tokens and ``ValueError`` when
    the variant has no such branch.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty evaluation set")
    model, meta, vocab, _ = load_checkpoint(checkpoint)
    if branch not in model.branches:
        raise ValueError(f"checkpoint variant {model.variant!r} has no {branch!r} branch")
    check_vocabulary(vocab, samples)
    batch = make_batch(samples, vocab, model.graph_mode)
    captions = decode_batch(model, batch, vocab, branch, max_len or meta["config"]["max_len"])
    b4, rl, per_video = score_captions(captions, samples)
    report = MetricReport(
        bleu4=b4,
        rouge_l=rl,
        token_accuracy=teacher_forced_accuracy(model, batch, branch),
        per_video=per_video,
        checkpoint=str(checkpoint),
        branch=branch,
    )
    if out_path is not None:
        report.write(out_path)
    return report


__all__ = ["MetricReport", "VocabMismatchError", "check_vocabulary", "evaluate_model", "score_captions"]
