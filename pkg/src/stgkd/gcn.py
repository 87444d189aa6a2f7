"""Object branch: feature projection, residual graph convolutions and per-frame pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import NumericError, StructuralError


@dataclass
class ObjectSequence:
    values: torch.Tensor  # (..., T, d_model)
    mask: torch.Tensor  # (..., T) bool, True where the frame has objects


def _check_finite(*tensors: torch.Tensor) -> None:
    for x in tensors:
        if not torch.isfinite(x).all():
            raise NumericError("non-finite value in graph convolution input")


def project_objects(features: torch.Tensor, w_in: torch.Tensor) -> torch.Tensor:
    """Stacked object features (..., N, d_obj) times W_o. No bias, so zero rows stay zero."""
    if features.shape[-1] != w_in.shape[0]:
        raise StructuralError(f"feature width {features.shape[-1]} != projection rows {w_in.shape[0]}")
    return features @ w_in


def gcn_layer(h: torch.Tensor, g_norm: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """ReLU(H + G H W)."""
    if h.shape[-2] != g_norm.shape[-1] or h.shape[-1] != w.shape[0]:
        raise StructuralError(f"shapes H{tuple(h.shape)} G{tuple(g_norm.shape)} W{tuple(w.shape)}")
    _check_finite(h, g_norm, w)
    return torch.relu(h + g_norm @ (h @ w))


def pool_frames(h: torch.Tensor, node_mask: torch.Tensor, T: int) -> ObjectSequence:
    """Average node features per frame over valid objects only.

    ``h`` is (..., T*n_max, d); ``node_mask`` is (..., T*n_max).
    """
    n_max = h.shape[-2] // T
    h = h.reshape(*h.shape[:-2], T, n_max, h.shape[-1])
    m = node_mask.reshape(*node_mask.shape[:-1], T, n_max).to(h.dtype)
    counts = m.sum(-1)
    summed = (h * m.unsqueeze(-1)).sum(-2)
    values = summed / counts.clamp(min=1.0).unsqueeze(-1)
    return ObjectSequence(values=values, mask=counts > 0)


def encode_objects(
    features: torch.Tensor,
    g_norm: torch.Tensor,
    node_mask: torch.Tensor,
    w_in: torch.Tensor,
    layers: list[torch.Tensor] | nn.ParameterList,
    T: int,
) -> ObjectSequence:
    h = project_objects(features, w_in)
    for w in layers:
        h = gcn_layer(h, g_norm, w)
    return pool_frames(h, node_mask, T)


def _uniform_init(rows: int, cols: int) -> torch.Tensor:
    # U(-a, a) with std 1/sqrt(fan_in)
    bound = math.sqrt(3.0 / rows)
    return torch.empty(rows, cols).uniform_(-bound, bound)


class ObjectEncoder(nn.Module):
    """Holds W_o and the stack of W^(l); ``forward`` runs the full object branch."""

    def __init__(self, d_obj: int, d_model: int, n_layers: int = 3):
        super().__init__()
        self.w_in = nn.Parameter(_uniform_init(d_obj, d_model))
        self.layers = nn.ParameterList(
            [nn.Parameter(_uniform_init(d_model, d_model)) for _ in range(n_layers)]
        )

    def forward(
        self, features: torch.Tensor, g_norm: torch.Tensor, node_mask: torch.Tensor, T: int
    ) -> ObjectSequence:
        return encode_objects(features, g_norm, node_mask, self.w_in, self.layers, T)
