"""Two-branch captioner and the tensor view of a corpus it consumes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .decoder import CaptionTransformer, Vocabulary, pad_sequences
from .gcn import ObjectEncoder, ObjectSequence
from .graph import build_video_graph, valid_node_mask
from .scene import SceneEncoder, expand_3d
from .world import VideoSample

# variant -> (graph mode or None when no object branch, how the branches interact)
VARIANTS: dict[str, tuple[str | None, str]] = {
    "full": ("full", "distill"),
    "scene_only": (None, "none"),
    "concat": ("full", "concat"),
    "l2": ("full", "l2"),
    "spatial_only": ("spatial", "distill"),
    "temporal_only": ("temporal", "distill"),
    "dense": ("dense", "distill"),
}

TABLE_NAMES = {
    "scene_only": "Scene Branch Only",
    "concat": "Two Branch + Concat",
    "l2": "Two Branch + L2",
    "spatial_only": "Spatial Graph Only",
    "temporal_only": "Temporal Graph Only",
    "dense": "Dense Graph",
    "full": "Full Model",
}


def check_variant(variant: str) -> tuple[str | None, str]:
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None


@dataclass
class VideoBatch:
    """Stacked tensors for a list of videos. ``targets`` is BOS ... EOS, PAD-filled."""

    ids: list[str]
    obj_features: torch.Tensor  # (B, T*n_max, d_obj)
    g_norm: torch.Tensor | None  # (B, T*n_max, T*n_max)
    node_mask: torch.Tensor  # (B, T*n_max)
    f2d: torch.Tensor  # (B, T, d_2d)
    f3d: torch.Tensor  # (B, T, d_3d), already aligned to sampled frames
    targets: torch.Tensor  # (B, S+1)
    refs: list[list[str]]
    T: int

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, idx) -> "VideoBatch":
        idx_list = idx.tolist() if torch.is_tensor(idx) else list(idx)
        t = self.targets[idx]
        keep = int((t != 0).sum(1).max())
        return VideoBatch(
            ids=[self.ids[i] for i in idx_list],
            obj_features=self.obj_features[idx],
            g_norm=None if self.g_norm is None else self.g_norm[idx],
            node_mask=self.node_mask[idx],
            f2d=self.f2d[idx],
            f3d=self.f3d[idx],
            targets=t[:, :keep],
            refs=[self.refs[i] for i in idx_list],
            T=self.T,
        )

    def to(self, dtype: torch.dtype) -> "VideoBatch":
        cast = lambda x: None if x is None else x.to(dtype)  # noqa: E731
        return VideoBatch(
            self.ids, cast(self.obj_features), cast(self.g_norm), self.node_mask,
            cast(self.f2d), cast(self.f3d), self.targets, self.refs, self.T,
        )


def make_batch(
    samples: Sequence[VideoSample],
    vocab: Vocabulary,
    graph_mode: str | None = "full",
    dtype: torch.dtype = torch.float32,
) -> VideoBatch:
    """Tensorize videos; graphs are fixed functions of the detections so they are built once here."""
    T = len(samples[0].frames)
    feats, graphs, masks, f3d = [], [], [], []
    for s in samples:
        feats.append(np.concatenate([f.features for f in s.frames], axis=0))
        masks.append(valid_node_mask(T, s.frames[0].n_max, [f.valid_count for f in s.frames]))
        if graph_mode is not None:
            graphs.append(build_video_graph(s.frames, graph_mode).normalized)
        f3d.append(expand_3d(s.f3d, s.total_frames, s.sample_indices))
    targets = pad_sequences([vocab.encode(s.refs[0]) for s in samples])
    return VideoBatch(
        ids=[s.id for s in samples],
        obj_features=torch.tensor(np.stack(feats), dtype=dtype),
        g_norm=torch.tensor(np.stack(graphs), dtype=dtype) if graphs else None,
        node_mask=torch.tensor(np.stack(masks)),
        f2d=torch.tensor(np.stack([s.f2d for s in samples]), dtype=dtype),
        f3d=torch.tensor(np.stack(f3d), dtype=dtype),
        targets=targets,
        refs=[list(s.refs) for s in samples],
        T=T,
    )


@dataclass
class BranchOutputs:
    logits_s: torch.Tensor
    logits_o: torch.Tensor | None
    f_s: torch.Tensor
    f_o: ObjectSequence | None


class TwoBranchCaptioner(nn.Module):
    """Scene branch plus (depending on the variant) an object branch.

    Scene modules are created before object modules, so for a fixed seed the
    scene branch starts from the same weights in every variant.
    """

    def __init__(
        self,
        variant: str,
        vocab_size: int,
        d_obj: int,
        d_2d: int,
        d_3d: int,
        d_model: int = 512,
        n_heads: int = 8,
        n_layers: int = 2,
        d_ff: int = 1024,
        dropout: float = 0.3,
        gcn_layers: int = 3,
    ):
        super().__init__()
        self.variant = variant
        self.graph_mode, self.coupling = check_variant(variant)
        dec = dict(d_model=d_model, n_heads=n_heads, n_layers=n_layers, d_ff=d_ff, dropout=dropout)
        self.scene_encoder = SceneEncoder(d_2d, d_3d, d_model)
        self.scene_decoder = CaptionTransformer(vocab_size, **dec)
        self.object_encoder = None
        self.object_decoder = None
        self.concat_proj = None
        if self.graph_mode is not None:
            self.object_encoder = ObjectEncoder(d_obj, d_model, gcn_layers)
        if self.coupling in ("distill", "l2"):
            self.object_decoder = CaptionTransformer(vocab_size, **dec)
        if self.coupling == "concat":
            self.concat_proj = nn.Linear(2 * d_model, d_model)

    @property
    def branches(self) -> tuple[str, ...]:
        return ("scene", "object") if self.object_decoder is not None else ("scene",)

    def scene_features(self, batch: VideoBatch) -> torch.Tensor:
        return self.scene_encoder(batch.f2d, batch.f3d)

    def object_features(self, batch: VideoBatch) -> ObjectSequence:
        if self.object_encoder is None:
            raise RuntimeError(f"variant {self.variant!r} has no object branch")
        return self.object_encoder(batch.obj_features, batch.g_norm, batch.node_mask, batch.T)

    def memory_inputs(self, batch: VideoBatch, branch: str = "scene"):
        """Encoder inputs and step mask for the decoder of ``branch``."""
        if branch not in self.branches:
            raise ValueError(f"variant {self.variant!r} has no {branch!r} branch")
        if branch == "object":
            f_o = self.object_features(batch)
            return f_o.values, f_o.mask
        f_s = self.scene_features(batch)
        mask = torch.ones(f_s.shape[:2], dtype=torch.bool)
        if self.coupling == "concat":
            f_o = self.object_features(batch)
            f_s = self.concat_proj(torch.cat([f_s, f_o.values], dim=-1))
        return f_s, mask

    def forward(self, batch: VideoBatch) -> BranchOutputs:
        tgt_in = batch.targets[:, :-1]
        f_s = self.scene_features(batch)
        s_mask = torch.ones(f_s.shape[:2], dtype=torch.bool)
        f_o = None
        if self.object_encoder is not None:
            f_o = self.object_features(batch)
        s_input = f_s
        if self.coupling == "concat":
            s_input = self.concat_proj(torch.cat([f_s, f_o.values], dim=-1))
        logits_s = self.scene_decoder(s_input, s_mask, tgt_in)
        logits_o = None
        if self.object_decoder is not None:
            logits_o = self.object_decoder(f_o.values, f_o.mask, tgt_in)
        return BranchOutputs(logits_s, logits_o, f_s, f_o)

    @torch.no_grad()
    def generate(self, batch: VideoBatch, branch: str = "scene", max_len: int = 20) -> list[list[int]]:
        feats, mask = self.memory_inputs(batch, branch)
        dec = self.scene_decoder if branch == "scene" else self.object_decoder
        memory = dec.encode_sequence(feats, mask)
        return dec.generate_greedy(memory, mask, max_len)

    @torch.no_grad()
    def teacher_forced(self, batch: VideoBatch, branch: str = "scene") -> torch.Tensor:
        feats, mask = self.memory_inputs(batch, branch)
        dec = self.scene_decoder if branch == "scene" else self.object_decoder
        return dec(feats, mask, batch.targets[:, :-1])
