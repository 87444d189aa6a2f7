"""Transformer encoder-decoder that turns a feature sequence into caption tokens."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import StructuralError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


def tokenize(caption: str) -> list[str]:
    return caption.lower().split()


class Vocabulary:
    """Token/id mapping with PAD, BOS, EOS, UNK reserved as ids 0-3."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    @classmethod
    def build(cls, captions: Iterable[str], min_freq: int = 1) -> "Vocabulary":
        counts = Counter(tok for c in captions for tok in tokenize(c))
        return cls(sorted(t for t, n in counts.items() if n >= min_freq))

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def encode(self, caption: str) -> list[int]:
        """BOS + token ids + EOS."""
        ids = [self.token_to_id.get(t, UNK) for t in tokenize(caption)]
        return [BOS] + ids + [EOS]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.id_to_token[i])
        return " ".join(words)

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        mapping = json.loads(text)
        ordered = sorted(mapping, key=mapping.__getitem__)
        if ordered[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS) or [
            mapping[t] for t in ordered
        ] != list(range(len(ordered))):
            raise StructuralError("vocabulary ids must be contiguous with reserved specials first")
        return cls(ordered[len(SPECIAL_TOKENS):])

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def sinusoidal_positions(length: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, d_model, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d_model)
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d_model // 2])
    return pe


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        if d_model % n_heads:
            raise StructuralError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query, key, value, allowed: torch.Tensor) -> torch.Tensor:
        """``allowed`` broadcasts to (B, 1, Lq, Lk); False entries get zero weight."""
        q, k, v = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(value))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~allowed, float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        return self.out(ctx)


class FeedForward(nn.Sequential):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__(
            nn.Linear(d_model, d_ff), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d_ff, d_model)
        )


class EncoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, dropout):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, allowed):
        x = self.norm1(x + self.drop(self.attn(x, x, x, allowed)))
        return self.norm2(x + self.drop(self.ff(x)))


class DecoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, dropout):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, y, memory, causal, mem_allowed):
        y = self.norm1(y + self.drop(self.self_attn(y, y, y, causal)))
        y = self.norm2(y + self.drop(self.cross_attn(y, memory, memory, mem_allowed)))
        return self.norm3(y + self.drop(self.ff(y)))


class CaptionTransformer(nn.Module):
    """Post-norm encoder-decoder Transformer with sinusoidal positions.

    Defaults follow the published setup: 2+2 layers, 8 heads, feed-forward
    width 1024, dropout 0.3.
    """

    def __init__(
        self,
        vocab_size: int,
        d_model: int = 512,
        n_heads: int = 8,
        n_layers: int = 2,
        d_ff: int = 1024,
        dropout: float = 0.3,
        max_positions: int = 64,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.embed = nn.Embedding(vocab_size, d_model)
        self.encoder = nn.ModuleList(
            [EncoderLayer(d_model, n_heads, d_ff, dropout) for _ in range(n_layers)]
        )
        self.decoder = nn.ModuleList(
            [DecoderLayer(d_model, n_heads, d_ff, dropout) for _ in range(n_layers)]
        )
        self.proj = nn.Linear(d_model, vocab_size)
        self.drop = nn.Dropout(dropout)
        self.register_buffer("pe", sinusoidal_positions(max_positions, d_model).float(), persistent=False)

    def _positions(self, length: int, like: torch.Tensor) -> torch.Tensor:
        if length > self.pe.shape[0]:
            raise StructuralError(f"sequence length {length} exceeds {self.pe.shape[0]} positions")
        return self.pe[:length].to(like.dtype)

    def encode_sequence(self, features: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Self-attention encoding of (B, T, d_model) features; masked steps are never attended."""
        if features.dim() == 2:
            features = features.unsqueeze(0)
            mask = None if mask is None else mask.unsqueeze(0)
        b, t, _ = features.shape
        if mask is None:
            mask = torch.ones(b, t, dtype=torch.bool, device=features.device)
        if not mask.any(dim=-1).all():
            raise StructuralError("every sequence needs at least one unmasked step")
        allowed = mask[:, None, None, :]
        x = self.drop(features + self._positions(t, features))
        for layer in self.encoder:
            x = layer(x, allowed)
        return x

    def teacher_forced_logits(
        self, memory: torch.Tensor, memory_mask: torch.Tensor | None, target_ids: torch.Tensor
    ) -> torch.Tensor:
        """Logits (B, S, |V|); row s is the next-token distribution after ``target_ids[:s+1]``."""
        if target_ids.dim() == 1:
            target_ids = target_ids.unsqueeze(0)
        if memory.dim() == 2:
            memory = memory.unsqueeze(0)
            memory_mask = None if memory_mask is None else memory_mask.unsqueeze(0)
        if target_ids.numel() and (target_ids.min() < 0 or target_ids.max() >= self.vocab_size):
            raise StructuralError("target id outside the vocabulary")
        b, s = target_ids.shape
        if memory_mask is None:
            memory_mask = torch.ones(memory.shape[:2], dtype=torch.bool, device=memory.device)
        causal = torch.ones(s, s, dtype=torch.bool, device=memory.device).tril()[None, None]
        mem_allowed = memory_mask[:, None, None, :]
        y = self.embed(target_ids) * math.sqrt(self.d_model)
        y = self.drop(y + self._positions(s, y))
        for layer in self.decoder:
            y = layer(y, memory, causal, mem_allowed)
        return self.proj(y)

    def forward(self, features, mask, target_ids):
        memory = self.encode_sequence(features, mask)
        return self.teacher_forced_logits(memory, mask, target_ids)

    @torch.no_grad()
    def generate_greedy(
        self, memory: torch.Tensor, memory_mask: torch.Tensor | None = None, max_len: int = 20
    ) -> list[list[int]]:
        """Argmax decoding from BOS until EOS or ``max_len`` tokens.

        Returned sequences exclude BOS and EOS. Ties go to the lowest id.
        """
        if memory.dim() == 2:
            memory = memory.unsqueeze(0)
            memory_mask = None if memory_mask is None else memory_mask.unsqueeze(0)
        b = memory.shape[0]
        seq = torch.full((b, 1), BOS, dtype=torch.long, device=memory.device)
        done = torch.zeros(b, dtype=torch.bool, device=memory.device)
        out: list[list[int]] = [[] for _ in range(b)]
        for _ in range(max_len):
            logits = self.teacher_forced_logits(memory, memory_mask, seq)[:, -1]
            nxt = logits.argmax(dim=-1)
            for i in range(b):
                if not done[i]:
                    if nxt[i].item() == EOS:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
            if done.all():
                break
            seq = torch.cat([seq, nxt.unsqueeze(1)], dim=1)
        return out


def language_loss(logits: torch.Tensor, reference_ids: torch.Tensor) -> torch.Tensor:
    """Mean token cross-entropy over non-PAD reference positions."""
    if reference_ids.numel() == 0 or not (reference_ids != PAD).any():
        raise StructuralError("empty reference")
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), reference_ids.reshape(-1), ignore_index=PAD
    )


def pad_sequences(seqs: Sequence[Sequence[int]], length: int | None = None) -> torch.Tensor:
    length = length or max(len(s) for s in seqs)
    out = torch.full((len(seqs), length), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s)[:length], dtype=torch.long)
    return out
