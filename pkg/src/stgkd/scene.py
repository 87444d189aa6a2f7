"""Scene branch: align clip-level 3D features with sampled frames and fuse with 2D features."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .errors import StructuralError

CLIP_LEN = 16


def uniform_sample_indices(total_frames: int, T: int) -> np.ndarray:
    """Centres of T equal segments of ``total_frames`` source frames."""
    return np.floor((np.arange(T) + 0.5) * total_frames / T).astype(int)


def expand_3d(f3d_clips: np.ndarray, total_frames: int, sample_indices) -> np.ndarray:
    """Pick, for every sampled frame, the feature of the 16-frame clip covering it.

    Indices beyond the last clip use the last clip.
    """
    f3d_clips = np.asarray(f3d_clips)
    if f3d_clips.ndim != 2 or f3d_clips.shape[0] == 0:
        raise StructuralError("expand_3d needs at least one clip")
    idx = np.asarray(sample_indices, dtype=int)
    clip = np.minimum(idx // CLIP_LEN, f3d_clips.shape[0] - 1)
    return f3d_clips[clip]


def fuse_scene(
    f2d: torch.Tensor,
    f3d: torch.Tensor,
    w_2d: torch.Tensor,
    w_3d: torch.Tensor,
    w_fuse: torch.Tensor,
) -> torch.Tensor:
    """[F2D W2D ; F3D W3D] W_fuse, linear throughout."""
    if f2d.shape[:-1] != f3d.shape[:-1]:
        raise StructuralError(f"row mismatch {tuple(f2d.shape)} vs {tuple(f3d.shape)}")
    if f2d.shape[-1] != w_2d.shape[0] or f3d.shape[-1] != w_3d.shape[0]:
        raise StructuralError("feature width does not match projection")
    if w_fuse.shape[0] != w_2d.shape[1] + w_3d.shape[1]:
        raise StructuralError("fusion matrix must take both projected halves")
    return torch.cat([f2d @ w_2d, f3d @ w_3d], dim=-1) @ w_fuse


def _uniform_init(rows: int, cols: int) -> torch.Tensor:
    # U(-a, a) with std 1/sqrt(fan_in)
    bound = math.sqrt(3.0 / rows)
    return torch.empty(rows, cols).uniform_(-bound, bound)


class SceneEncoder(nn.Module):
    def __init__(self, d_2d: int, d_3d: int, d_model: int):
        super().__init__()
        self.w_2d = nn.Parameter(_uniform_init(d_2d, d_model))
        self.w_3d = nn.Parameter(_uniform_init(d_3d, d_model))
        self.w_fuse = nn.Parameter(_uniform_init(2 * d_model, d_model))

    def forward(self, f2d: torch.Tensor, f3d_expanded: torch.Tensor) -> torch.Tensor:
        return fuse_scene(f2d, f3d_expanded, self.w_2d, self.w_3d, self.w_fuse)
