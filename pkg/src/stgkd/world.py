"""Procedural grid-world videos with exact boxes, oracle features and template captions.

A video scripts one two-object event (subject, verb, object) plus a few
distractors moving on their own. Object features expose class identity
cleanly; scene features mix all objects through a fixed random nonlinear
map and add heavy Gaussian noise, so fine-grained class identity is only
weakly recoverable from the scene stream.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import BoundingBox, FrameDetections
from .scene import CLIP_LEN, uniform_sample_indices

VERB_PHRASES = {
    "moves-into": ("moves into", "goes into"),
    "jumps-over": ("jumps over", "leaps over"),
    "pushes": ("pushes", "shoves"),
    "leaves": ("leaves", "moves away from"),
}

ASPECT = {"bar": (1.8, 0.6), "wedge": (1.3, 0.8), "ring": (1.1, 1.1)}


@dataclass(frozen=True)
class WorldConfig:
    grid_size: float = 16.0
    nouns: tuple = ("disc", "box", "bar", "blob", "ring", "wedge")
    agents: tuple = ("disc", "blob", "wedge")
    containers: tuple = ("box", "ring")
    verbs: tuple = ("moves-into", "jumps-over", "pushes", "leaves")
    T: int = 10
    n_max: int = 5
    total_frames: int = 160
    max_distractors: int = 3
    distractor_saliency: float = 0.25
    distractor_speed: float = 3.0
    sigma_scene: float = 0.5
    scene_signal: float = 1.0 / 6.0
    object_noise: float = 0.05
    d_obj: int = 64
    d_2d: int = 64
    d_3d: int = 32
    d_geometry: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "nouns", tuple(self.nouns))
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "containers", tuple(self.containers))
        object.__setattr__(self, "verbs", tuple(self.verbs))
        unknown = [v for v in self.verbs if v not in VERB_PHRASES]
        if unknown:
            raise ValueError(f"no script for verbs {unknown}")
        if self.d_geometry % 4 or self.d_geometry >= self.d_obj:
            raise ValueError("d_geometry must be a multiple of 4 and smaller than d_obj")
        if self.n_max < 2 + self.max_distractors:
            raise ValueError("n_max must fit the two event objects and all distractors")


@dataclass
class VideoSample:
    id: str
    event: dict
    frames: list[FrameDetections]
    f2d: np.ndarray
    f3d: np.ndarray
    refs: list[str]
    # ground-truth object identity per slot (-1 for padding); not serialized
    track_ids: list[list[int]] = field(default_factory=list, repr=False)

    @property
    def total_frames(self) -> int:
        return CLIP_LEN * self.f3d.shape[0]

    @property
    def sample_indices(self) -> np.ndarray:
        return uniform_sample_indices(self.total_frames, len(self.frames))


@dataclass
class _Track:
    cls: str
    centers: np.ndarray  # (total_frames, 2)
    size: np.ndarray  # (2,)

    def box(self, f: int) -> BoundingBox:
        (cx, cy), (w, h) = self.centers[f], self.size
        return BoundingBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


class FeatureOracle:
    """Fixed per-corpus tables: class embeddings and the scene projections."""

    def __init__(self, config: WorldConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 7919])
        d_cls = config.d_obj - config.d_geometry
        # unit variance per coordinate
        self.class_embedding = rng.standard_normal((len(config.nouns), d_cls))
        self.p2d = rng.standard_normal((config.d_obj, config.d_2d)) * (1.5 / math.sqrt(config.d_obj))
        # clip features respond mostly to motion, weakly to appearance
        self.p3d = np.concatenate([
            rng.standard_normal((d_cls, config.d_3d)) * (0.5 / math.sqrt(d_cls)),
            rng.standard_normal((MOTION_DIM, config.d_3d)) * (2.0 / math.sqrt(MOTION_DIM)),
        ])

    def class_index(self, cls: str) -> int:
        return self.config.nouns.index(cls)

    def geometry(self, box: BoundingBox) -> np.ndarray:
        g = self.config.grid_size
        v = np.array([
            (box.x_min + box.x_max) / g - 1.0,
            (box.y_min + box.y_max) / g - 1.0,
            2 * (box.x_max - box.x_min) / g - 0.5,
            2 * (box.y_max - box.y_min) / g - 0.5,
        ])
        reps = self.config.d_geometry // 4
        parts = [v] + [np.sin((k + 1) * math.pi * v / 2) for k in range(reps - 1)]
        return 1.5 * np.concatenate(parts)

    def clean_object(self, cls: str, box: BoundingBox) -> np.ndarray:
        return np.concatenate([self.class_embedding[self.class_index(cls)], self.geometry(box)])

    def object_features(self, cls: str | None, box: BoundingBox, noise_seed) -> np.ndarray:
        """Class embedding + box geometry + N(0, object_noise); zeros for padding."""
        if cls is None or box.is_padding:
            return np.zeros(self.config.d_obj)
        rng = np.random.default_rng(noise_seed)
        return self.clean_object(cls, box) + rng.normal(0.0, self.config.object_noise, self.config.d_obj)

    def frame_feature(self, objects: Sequence[np.ndarray], saliency: Sequence[float]) -> np.ndarray:
        """Saliency-weighted mean of a fixed nonlinear map of each object, scaled by ``scene_signal``."""
        if not objects:
            return np.zeros(self.config.d_2d)
        w = np.asarray(saliency, dtype=np.float64)
        return self.config.scene_signal * (w[:, None] * np.tanh(np.stack(objects) @ self.p2d)).sum(0) / w.sum()

    def clip_feature(self, starts: Sequence[np.ndarray], ends: Sequence[np.ndarray], motion: np.ndarray, saliency: Sequence[float]) -> np.ndarray:
        """Like ``frame_feature`` but each object also carries a motion descriptor over the clip."""
        if not starts:
            return np.zeros(self.config.d_3d)
        d_cls = self.config.d_obj - self.config.d_geometry
        rows = [np.concatenate([a[:d_cls], m]) for a, m in zip(starts, motion)]
        w = np.asarray(saliency, dtype=np.float64)
        return self.config.scene_signal * (w[:, None] * np.tanh(np.stack(rows) @ self.p3d)).sum(0) / w.sum()


def _center_distance(a: BoundingBox, b: BoundingBox) -> float:
    return math.hypot((a.x_min + a.x_max - b.x_min - b.x_max) / 2, (a.y_min + a.y_max - b.y_min - b.y_max) / 2)


def motion_descriptor(starts: Sequence[BoundingBox], ends: Sequence[BoundingBox], grid_size: float) -> np.ndarray:
    """Direction-free motion of each object over a clip, relative to its nearest neighbour.

    Columns: speed, distance at start and end, change in distance, largest
    IoU with another object at start and end, vertical travel, and a bias.
    """
    from .graph import iou

    n = len(starts)
    out = np.zeros((n, MOTION_DIM))
    for i in range(n):
        speed = _center_distance(starts[i], ends[i]) / grid_size
        others = [j for j in range(n) if j != i]
        if others:
            d0 = min(_center_distance(starts[i], starts[j]) for j in others) / grid_size
            d1 = min(_center_distance(ends[i], ends[j]) for j in others) / grid_size
            o0 = max(iou(starts[i], starts[j]) for j in others)
            o1 = max(iou(ends[i], ends[j]) for j in others)
        else:
            d0 = d1 = 1.0
            o0 = o1 = 0.0
        dy = ((ends[i].y_min + ends[i].y_max) - (starts[i].y_min + starts[i].y_max)) / (2 * grid_size)
        out[i] = [speed, d0, d1, d1 - d0, o0, o1, dy, 1.0]
    return 4.0 * out


MOTION_DIM = 8


def oracle_object_features(oracle: FeatureOracle, class_id: int | None, box: BoundingBox, t: int, noise_seed) -> np.ndarray:
    cls = None if class_id is None else oracle.config.nouns[class_id]
    return oracle.object_features(cls, box, [*np.atleast_1d(noise_seed), t])


def event_triples(config: WorldConfig) -> list[tuple[str, str, str]]:
    """All (subject, verb, object) triples the scripts can render.

    Subjects are agents, objects are the remaining nouns; moves-into needs a
    container as its object.
    """
    landmarks = [n for n in config.nouns if n not in config.agents]
    out = []
    for verb in config.verbs:
        for obj in landmarks:
            if verb == "moves-into" and obj not in config.containers:
                continue
            for subj in config.agents:
                out.append((subj, verb, obj))
    return out


def _size(rng, cls: str) -> np.ndarray:
    s = rng.uniform(1.6, 2.4)
    ax, ay = ASPECT.get(cls, (1.0, 1.0))
    return np.array([s * ax, s * ay])


def _script(config: WorldConfig, rng, subj: str, verb: str, obj: str) -> tuple[_Track, _Track]:
    n = config.total_frames
    g = config.grid_size
    u = np.linspace(0.0, 1.0, n)[:, None]
    s_size = _size(rng, subj)
    o_size = _size(rng, obj)
    o_c = rng.uniform(0.35 * g, 0.65 * g, size=2)
    angle = rng.uniform(0, 2 * math.pi)
    direction = np.array([math.cos(angle), math.sin(angle)])
    o_path = np.repeat(o_c[None], n, axis=0)

    if verb == "moves-into":
        o_size = s_size * 1.25
        start = o_c + direction * rng.uniform(5.0, 6.5)
        k = np.clip(u / 0.7, 0.0, 1.0)
        s_path = start + (o_c - start) * k
    elif verb == "leaves":
        start = o_c + direction * rng.uniform(0.2, 0.6)
        end = o_c + direction * rng.uniform(5.5, 7.0)
        k = np.clip((u - 0.2) / 0.8, 0.0, 1.0)
        s_path = start + (end - start) * k
    elif verb == "jumps-over":
        side = rng.choice([-1.0, 1.0])
        span = rng.uniform(4.5, 6.0)
        x = o_c[0] + side * span * (1 - 2 * u[:, 0])
        y = o_c[1] + (o_size[1] + s_size[1]) * 1.3 * np.sin(math.pi * u[:, 0])
        s_path = np.stack([x, y], axis=1)
    elif verb == "pushes":
        axis = rng.integers(2)
        side = rng.choice([-1.0, 1.0])
        gap = (s_size[axis] + o_size[axis]) / 2 - 0.2
        contact = 0.4
        push = rng.uniform(3.5, 4.5)
        shift = np.zeros((n, 2))
        shift[:, axis] = -side * push * np.clip((u[:, 0] - contact) / (1 - contact), 0.0, 1.0)
        o_path = o_c + shift
        s_contact = o_c.copy()
        s_contact[axis] += side * gap
        s_start = s_contact.copy()
        s_start[axis] += side * rng.uniform(4.0, 5.0)
        k = np.clip(u / contact, 0.0, 1.0)
        s_path = s_start + (s_contact - s_start) * k + shift
    else:  # pragma: no cover - guarded by WorldConfig
        raise ValueError(verb)
    return _Track(subj, s_path, s_size), _Track(obj, o_path, o_size)


def _distractor(config: WorldConfig, rng, cls: str) -> _Track:
    n = config.total_frames
    g = config.grid_size
    size = _size(rng, cls)
    start = rng.uniform(0.1 * g, 0.9 * g, size=2)
    vel = rng.normal(0.0, config.distractor_speed, size=2)
    u = np.linspace(0.0, 1.0, n)[:, None]
    path = np.clip(start + vel * u, 0.0, g)
    return _Track(cls, path, size)


def captions_for(subj: str, verb: str, obj: str) -> list[str]:
    return [f"a {subj} {vp} a {obj}" for vp in VERB_PHRASES[verb]]


def generate_video(
    config: WorldConfig,
    seed: int,
    event: tuple[str, str, str] | None = None,
    oracle: FeatureOracle | None = None,
) -> VideoSample:
    """One video, fully determined by ``(config, seed, event)``."""
    oracle = oracle or FeatureOracle(config)
    rng = np.random.default_rng([config.seed, seed])
    if event is None:
        triples = event_triples(config)
        event = triples[rng.integers(len(triples))]
    subj, verb, obj = event
    tracks = list(_script(config, rng, subj, verb, obj))
    spare = [c for c in config.nouns if c not in (subj, obj)]
    n_distract = int(rng.integers(0, config.max_distractors + 1))
    for cls in rng.permutation(spare)[:n_distract]:
        tracks.append(_distractor(config, rng, str(cls)))

    sample_idx = uniform_sample_indices(config.total_frames, config.T)
    frames, track_ids, clean_by_frame = [], [], []
    for t, f in enumerate(sample_idx):
        order = rng.permutation(len(tracks))
        boxes, feats, clean = [], [], []
        for k in order:
            box = tracks[k].box(int(f))
            boxes.append(box)
            feats.append(oracle.object_features(tracks[k].cls, box, [config.seed, seed, t, int(k)]))
            clean.append(oracle.clean_object(tracks[k].cls, box))
        frame = FrameDetections.from_objects(t, boxes, np.array(feats), config.n_max)
        frames.append(frame)
        ids = [int(k) for k in order][: config.n_max]
        track_ids.append(ids + [-1] * (config.n_max - len(ids)))
        clean_by_frame.append(clean)

    noise = np.random.default_rng([config.seed, seed, 104729])
    saliency = [1.0, 1.0] + [config.distractor_saliency] * (len(tracks) - 2)
    # clean_by_frame rows follow the per-frame shuffled order
    f2d = np.stack([
        oracle.frame_feature(c, [saliency[k] for k in ids if k >= 0])
        for c, ids in zip(clean_by_frame, track_ids)
    ])
    f2d = f2d + noise.normal(0.0, config.sigma_scene, f2d.shape)
    n_clips = max(1, math.ceil(config.total_frames / CLIP_LEN))
    f3d = []
    for clip in range(n_clips):
        a = clip * CLIP_LEN
        b = min(a + CLIP_LEN, config.total_frames) - 1
        starts = [oracle.clean_object(tr.cls, tr.box(a)) for tr in tracks]
        ends = [oracle.clean_object(tr.cls, tr.box(b)) for tr in tracks]
        motion = motion_descriptor([tr.box(a) for tr in tracks], [tr.box(b) for tr in tracks], config.grid_size)
        f3d.append(oracle.clip_feature(starts, ends, motion, saliency))
    f3d = np.stack(f3d)
    f3d = f3d + noise.normal(0.0, config.sigma_scene, f3d.shape)

    return VideoSample(
        id=f"vid{seed:05d}",
        event={"subject": subj, "verb": verb, "object": obj},
        frames=frames,
        f2d=f2d,
        f3d=f3d,
        refs=captions_for(subj, verb, obj),
        track_ids=track_ids,
    )


def generate_corpus(config: WorldConfig, n: int, seed: int | None = None) -> list[VideoSample]:
    """``n`` videos with events dealt round-robin from a shuffled triple list.

    Every renderable triple appears either ``n // k`` or ``n // k + 1`` times.
    """
    base = config.seed if seed is None else seed
    if seed is not None and seed != config.seed:
        config = WorldConfig(**{**asdict(config), "seed": seed})
    oracle = FeatureOracle(config)
    triples = event_triples(config)
    rng = np.random.default_rng([base, 31337])
    deck: list[tuple[str, str, str]] = []
    while len(deck) < n:
        deck.extend(triples[i] for i in rng.permutation(len(triples)))
    # shuffle the dealt prefix so splits by index stay balanced
    events = [deck[i] for i in rng.permutation(n)]
    return [generate_video(config, i, events[i], oracle) for i in range(n)]


def split_corpus(samples: Sequence[VideoSample], fractions=(0.8, 0.1, 0.1)) -> dict[str, list[VideoSample]]:
    """Split by index order into train/val/test."""
    n = len(samples)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": list(samples[:n_train]),
        "val": list(samples[n_train:n_train + n_val]),
        "test": list(samples[n_train + n_val:]),
    }


# ---------------------------------------------------------------- JSONL I/O


def sample_to_json(s: VideoSample) -> dict:
    return {
        "id": s.id,
        "event": dict(s.event),
        "frames": [
            {
                "boxes": [b.as_list() for b in f.boxes],
                "features": f.features.tolist(),
                "valid": int(f.valid_count),
            }
            for f in s.frames
        ],
        "f2d": s.f2d.tolist(),
        "f3d": s.f3d.tolist(),
        "refs": list(s.refs),
    }


def sample_from_json(d: dict) -> VideoSample:
    frames = []
    for t, fr in enumerate(d["frames"]):
        k = int(fr["valid"])
        boxes = [
            BoundingBox(*map(float, b)) if j < k else BoundingBox.padding()
            for j, b in enumerate(fr["boxes"])
        ]
        frames.append(FrameDetections(t=t, boxes=boxes, features=np.array(fr["features"], dtype=np.float64), valid_count=k))
    return VideoSample(
        id=str(d["id"]),
        event=dict(d["event"]),
        frames=frames,
        f2d=np.array(d["f2d"], dtype=np.float64),
        f3d=np.array(d["f3d"], dtype=np.float64),
        refs=list(d["refs"]),
    )


def write_corpus(samples: Iterable[VideoSample], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        for s in samples:
            # json writes floats with repr(), which round-trips float64 exactly
            fh.write(json.dumps(sample_to_json(s)) + "\n")
    tmp.replace(path)


class CorpusFormatError(ValueError):
    pass


def read_corpus(path) -> list[VideoSample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(sample_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed sample ({exc})") from exc
    return out


def corpus_hash(samples: Iterable[VideoSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(json.dumps(sample_to_json(s), sort_keys=True).encode())
    return h.hexdigest()
