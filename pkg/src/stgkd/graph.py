"""Spatial, temporal and merged spatio-temporal adjacency over detected objects.

Everything here is plain numpy in float64. Objects of a video are indexed
frame-major: node ``t * n_max + j`` is slot ``j`` of frame ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import StructuralError


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    is_padding: bool = False

    @classmethod
    def padding(cls) -> "BoundingBox":
        return cls(0.0, 0.0, 0.0, 0.0, True)

    @property
    def area(self) -> float:
        if self.is_padding:
            return 0.0
        return max(0.0, self.x_max - self.x_min) * max(0.0, self.y_max - self.y_min)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass
class FrameDetections:
    """Detections of one frame, padded to ``n_max`` slots.

    Slots at index ``>= valid_count`` hold padding boxes and zero features.
    """

    t: int
    boxes: list[BoundingBox]
    features: np.ndarray
    valid_count: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.boxes):
            raise StructuralError(
                f"features {self.features.shape} do not match {len(self.boxes)} boxes"
            )
        if not 0 <= self.valid_count <= len(self.boxes):
            raise StructuralError(f"valid_count {self.valid_count} out of range")

    @property
    def n_max(self) -> int:
        return len(self.boxes)

    @classmethod
    def from_objects(
        cls,
        t: int,
        boxes: Sequence[BoundingBox],
        features: np.ndarray,
        n_max: int,
    ) -> "FrameDetections":
        """Pad (or truncate to the first ``n_max``) a list of detections."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            features = features.reshape(len(boxes), -1)
        d = features.shape[1]
        k = min(len(boxes), n_max)
        padded = np.zeros((n_max, d))
        padded[:k] = features[:k]
        kept = [b for b in boxes[:k]] + [BoundingBox.padding()] * (n_max - k)
        return cls(t=t, boxes=kept, features=padded, valid_count=k)


@dataclass
class STGraph:
    blocks_spatial: list[np.ndarray]
    blocks_temporal: list[np.ndarray]
    merged: np.ndarray
    degree: np.ndarray
    normalized: np.ndarray | None = field(default=None)

    @property
    def n_max(self) -> int:
        return self.blocks_spatial[0].shape[0]

    @property
    def T(self) -> int:
        return len(self.blocks_spatial)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 when either box has zero area."""
    area_a, area_b = a.area, b.area
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    inter = w * h
    return inter / (area_a + area_b - inter)


def _masked_row_softmax(scores: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Softmax over the leading ``cols`` columns of the leading ``rows`` rows.

    Everything outside the valid ``rows x cols`` block is zero.
    """
    out = np.zeros_like(scores, dtype=np.float64)
    if rows == 0 or cols == 0:
        return out
    block = scores[:rows, :cols]
    block = block - block.max(axis=1, keepdims=True)
    e = np.exp(block)
    out[:rows, :cols] = e / e.sum(axis=1, keepdims=True)
    return out


def iou_matrix(frame: FrameDetections) -> np.ndarray:
    """Pairwise IoU over valid slots, with unit diagonal; zero elsewhere."""
    n = frame.n_max
    k = frame.valid_count
    sigma = np.zeros((n, n))
    for i in range(k):
        sigma[i, i] = 1.0
        for j in range(i + 1, k):
            sigma[i, j] = sigma[j, i] = iou(frame.boxes[i], frame.boxes[j])
    return sigma


def spatial_adjacency(frame: FrameDetections) -> np.ndarray:
    """Row-softmax of IoU among the valid objects of one frame.

    An empty frame gives an all-zero matrix.
    """
    k = frame.valid_count
    return _masked_row_softmax(iou_matrix(frame), k, k)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of rows; pairs involving a zero vector get 0."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dots = a @ b.T
    denom = np.outer(na, nb)
    out = np.zeros_like(dots)
    np.divide(dots, denom, out=out, where=denom > 0)
    return out


def temporal_adjacency(src: FrameDetections, dst: FrameDetections) -> np.ndarray:
    """Directed edges from frame t (rows) to frame t+1 (columns)."""
    if src.n_max != dst.n_max:
        raise StructuralError("frames padded to different n_max")
    cos = cosine_matrix(src.features, dst.features)
    return _masked_row_softmax(cos, src.valid_count, dst.valid_count)


def assemble_st_graph(spatial: Sequence[np.ndarray], temporal: Sequence[np.ndarray]) -> STGraph:
    """Place spatial blocks on the diagonal and temporal blocks one above it."""
    T = len(spatial)
    if T == 0:
        raise StructuralError("need at least one frame")
    if len(temporal) != T - 1:
        raise StructuralError(f"expected {T - 1} temporal blocks, got {len(temporal)}")
    n = np.asarray(spatial[0]).shape[0]
    for blk in list(spatial) + list(temporal):
        if np.asarray(blk).shape != (n, n):
            raise StructuralError(f"block shape {np.asarray(blk).shape} != {(n, n)}")
    merged = np.zeros((T * n, T * n))
    for t in range(T):
        merged[t * n:(t + 1) * n, t * n:(t + 1) * n] = spatial[t]
        if t < T - 1:
            merged[t * n:(t + 1) * n, (t + 1) * n:(t + 2) * n] = temporal[t]
    return STGraph(
        blocks_spatial=[np.asarray(b, dtype=np.float64) for b in spatial],
        blocks_temporal=[np.asarray(b, dtype=np.float64) for b in temporal],
        merged=merged,
        degree=merged.sum(axis=1),
    )


def normalize_adjacency(merged: np.ndarray, degree: np.ndarray | None = None) -> np.ndarray:
    """Symmetric degree scaling D^-1/2 A D^-1/2 with zero-degree nodes mapped to 0."""
    if degree is None:
        degree = merged.sum(axis=1)
    inv_sqrt = np.zeros_like(degree, dtype=np.float64)
    pos = degree > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(degree[pos])
    return inv_sqrt[:, None] * merged * inv_sqrt[None, :]


def normalize_st_graph(g: STGraph) -> np.ndarray:
    g.normalized = normalize_adjacency(g.merged, g.degree)
    return g.normalized


def valid_node_mask(T: int, n_max: int, valid_counts: Sequence[int]) -> np.ndarray:
    mask = np.zeros((T, n_max), dtype=bool)
    for t, k in enumerate(valid_counts):
        mask[t, :k] = True
    return mask.reshape(-1)


def dense_graph(T: int, n_max: int, valid_counts: Sequence[int]) -> STGraph:
    """Uniform all-ones graph over every pair of valid objects in the video."""
    if len(valid_counts) != T:
        raise StructuralError(f"{len(valid_counts)} valid counts for T={T}")
    valid = valid_node_mask(T, n_max, valid_counts).astype(np.float64)
    merged = np.outer(valid, valid)
    blocks = lambda r, c: merged[r * n_max:(r + 1) * n_max, c * n_max:(c + 1) * n_max]  # noqa: E731
    g = STGraph(
        blocks_spatial=[blocks(t, t).copy() for t in range(T)],
        blocks_temporal=[blocks(t, t + 1).copy() for t in range(T - 1)],
        merged=merged,
        degree=merged.sum(axis=1),
    )
    normalize_st_graph(g)
    return g


GRAPH_MODES = ("full", "spatial", "temporal", "dense")


def build_video_graph(frames: Sequence[FrameDetections], mode: str = "full") -> STGraph:
    """Build and normalize the graph of one video.

    ``mode`` selects the ablation: ``spatial`` zeroes the temporal blocks,
    ``temporal`` zeroes the spatial blocks, ``dense`` connects every pair of
    valid objects with weight 1.
    """
    if mode not in GRAPH_MODES:
        raise ValueError(f"unknown graph mode {mode!r}")
    T = len(frames)
    n = frames[0].n_max
    if mode == "dense":
        return dense_graph(T, n, [f.valid_count for f in frames])
    zero = np.zeros((n, n))
    spatial = [spatial_adjacency(f) if mode != "temporal" else zero for f in frames]
    temporal = [
        temporal_adjacency(frames[t], frames[t + 1]) if mode != "spatial" else zero
        for t in range(T - 1)
    ]
    g = assemble_st_graph(spatial, temporal)
    normalize_st_graph(g)
    return g


def graph_to_json(frames: Sequence[FrameDetections], g: STGraph) -> dict:
    """Inspection dump of one video's graph."""
    rows, cols = np.nonzero(g.merged)
    return {
        "T": g.T,
        "n_max": g.n_max,
        "valid_counts": [int(f.valid_count) for f in frames],
        "spatial": [b.tolist() for b in g.blocks_spatial],
        "temporal": [b.tolist() for b in g.blocks_temporal],
        "merged_nnz": [
            {"i": int(i), "j": int(j), "v": float(g.merged[i, j])} for i, j in zip(rows, cols)
        ],
        "degree": g.degree.tolist(),
    }
