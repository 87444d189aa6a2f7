"""Caption metrics implemented from scratch: corpus BLEU@4, ROUGE-L, token accuracy."""

from __future__ import annotations

import logging
import math
from collections import Counter
from typing import Sequence

import torch

from .decoder import PAD

logger = logging.getLogger(__name__)

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> float:
    """Corpus BLEU with clipped 1-4-gram precisions, uniform weights and no smoothing.

    The brevity penalty uses, per candidate, the closest reference length
    (shorter wins ties).
    """
    if len(candidates) == 0:
        raise ValueError("bleu4 needs a nonempty corpus")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} reference sets")
    matched = [0] * 4
    total = [0] * 4
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            counts = ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0 or min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / 4
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, references: Sequence[Tokens]) -> float:
    """Max over references of the LCS F1 score."""
    if not candidate or not references or any(len(r) == 0 for r in references):
        raise ValueError("rouge_l needs a nonempty candidate and nonempty references")
    best = 0.0
    for ref in references:
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(candidate), lcs / len(ref)
        best = max(best, 2 * p * r / (p + r))
    return best


def corpus_rouge_l(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> float:
    """Mean sentence ROUGE-L; an empty candidate scores 0."""
    scores = [rouge_l(c, r) if c else 0.0 for c, r in zip(candidates, references)]
    return sum(scores) / len(scores)


def token_accuracy(logits: torch.Tensor, targets: torch.Tensor) -> float:
    """Fraction of non-PAD positions whose argmax logit equals the target token."""
    keep = targets != PAD
    n = int(keep.sum())
    if n == 0:
        logger.warning("token_accuracy called with no non-PAD positions; returning 0")
        return 0.0
    hits = (logits.argmax(-1) == targets) & keep
    return int(hits.sum()) / n


def token_counts(logits: torch.Tensor, targets: torch.Tensor) -> tuple[int, int]:
    keep = targets != PAD
    return int(((logits.argmax(-1) == targets) & keep).sum()), int(keep.sum())
