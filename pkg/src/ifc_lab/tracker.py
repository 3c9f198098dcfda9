"""Stitch per-clip predictions into video-level tracks.

Association between existing tracks and a new clip's candidates uses the
space-time soft IoU pooled over all voxels of the frames the two share,
followed by Hungarian maximisation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matching import hungarian_max
from .tensor import ContractError


@dataclass
class ClipPrediction:
    """One query's output for one clip, already filtered of no-object queries."""

    category_dist: np.ndarray  # (K+1,) on the simplex, last entry is no-object
    masks: np.ndarray  # (F, H', W') probabilities for the clip's valid frames
    frames: range  # video frame indices covered by ``masks``
    query: int = -1


@dataclass
class Track:
    track_id: int
    frames: dict[int, np.ndarray] = field(default_factory=dict)
    category_history: list[np.ndarray] = field(default_factory=list)
    score_history: list[float] = field(default_factory=list)

    def frame_indices(self) -> list[int]:
        return sorted(self.frames)

    def masks_at(self, frames) -> np.ndarray:
        return np.stack([self.frames[f] for f in frames])

    @property
    def mean_category(self) -> np.ndarray:
        return np.mean(self.category_history, axis=0)


@dataclass
class TrackerConfig:
    T: int = 5
    S: int = 1
    tau: float = 0.5
    min_confidence: float = 0.05
    overlap_fusion: str = "keep"  # "keep" | "average"

    def __post_init__(self):
        if not 1 <= self.S <= self.T:
            raise ContractError(f"need 1 <= S <= T, got S={self.S}, T={self.T}")
        if self.overlap_fusion not in ("keep", "average"):
            raise ContractError(f"unknown overlap fusion {self.overlap_fusion!r}")


@dataclass
class TrackStore:
    config: TrackerConfig = field(default_factory=TrackerConfig)
    tracks: list[Track] = field(default_factory=list)
    next_id: int = 0
    last_start: int = -1
    clips_seen: int = 0

    def new_track(self, cand: ClipPrediction) -> Track:
        tr = Track(self.next_id)
        self.next_id += 1
        for k, f in enumerate(cand.frames):
            tr.frames[f] = cand.masks[k]
        tr.category_history.append(cand.category_dist)
        tr.score_history.append(float(cand.category_dist[:-1].max()))
        self.tracks.append(tr)
        return tr


def soft_iou_spacetime(a: np.ndarray, b: np.ndarray) -> float:
    """sum(ab) / (sum(a) + sum(b) - sum(ab)) pooled over every voxel of the shared frames."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ContractError(f"soft IoU shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0 or a.shape[0] == 0:
        raise ContractError("soft IoU over an empty set of intersecting frames")
    inter = float((a * b).sum())
    union = float(a.sum() + b.sum()) - inter
    return inter / union if union > 0 else 0.0


def soft_iou_frame_averaged(a: np.ndarray, b: np.ndarray) -> float:
    """Per-frame soft IoU averaged over frames; kept for comparison only."""
    return float(np.mean([soft_iou_spacetime(a[i:i + 1], b[i:i + 1]) for i in range(len(a))]))


def select_candidates(class_probs: np.ndarray, mask_probs: np.ndarray, frames: range,
                      min_confidence: float = 0.05) -> list[ClipPrediction]:
    """Drop queries whose argmax is the no-object class or whose best class is too weak."""
    no_obj = class_probs.shape[1] - 1
    out = []
    for q in range(class_probs.shape[0]):
        dist = class_probs[q]
        if int(np.argmax(dist)) == no_obj or dist[:-1].max() < min_confidence:
            continue
        out.append(ClipPrediction(dist, mask_probs[q, :len(frames)], frames, q))
    return out


def association_scores(store: TrackStore, candidates: list[ClipPrediction]) -> np.ndarray:
    S = np.zeros((len(store.tracks), len(candidates)))
    for i, tr in enumerate(store.tracks):
        for j, cand in enumerate(candidates):
            shared = [f for f in cand.frames if f in tr.frames]
            if not shared:
                continue
            offset = cand.frames.start
            b = cand.masks[[f - offset for f in shared]]
            S[i, j] = soft_iou_spacetime(tr.masks_at(shared), b)
    return S


def stitch(store: TrackStore, candidates: list[ClipPrediction], clip_frames: range) -> TrackStore:
    if clip_frames.start < store.last_start:
        raise ContractError(f"clip starting at {clip_frames.start} arrived after one starting at "
                            f"{store.last_start}")
    store.last_start = clip_frames.start
    store.clips_seen += 1
    scores = association_scores(store, candidates)
    matched_cands: set[int] = set()
    if scores.size:
        assignment = hungarian_max(scores)
        for i, j in assignment.positives:
            if scores[i, j] < store.config.tau:
                continue
            tr, cand = store.tracks[i], candidates[j]
            for k, f in enumerate(cand.frames):
                if f not in tr.frames:
                    tr.frames[f] = cand.masks[k]
                elif store.config.overlap_fusion == "average":
                    tr.frames[f] = 0.5 * (tr.frames[f] + cand.masks[k])
            tr.category_history.append(cand.category_dist)
            tr.score_history.append(float(cand.category_dist[:-1].max()))
            matched_cands.add(j)
    for j, cand in enumerate(candidates):
        if j not in matched_cands:
            store.new_track(cand)
    return store


@dataclass
class VideoInstance:
    track_id: int
    category: int
    confidence: float
    masks: np.ndarray  # (N, H', W') probabilities, zeros where the track is absent


def finalize(store: TrackStore, num_frames: int, mask_shape: tuple[int, int] | None = None) -> list[VideoInstance]:
    out = []
    for tr in store.tracks:
        dist = tr.mean_category
        cat = int(np.argmax(dist[:-1]))
        shape = mask_shape or next(iter(tr.frames.values())).shape
        masks = np.zeros((num_frames,) + tuple(shape))
        for f, m in tr.frames.items():
            masks[f] = m
        out.append(VideoInstance(tr.track_id, cat, float(dist[cat]), masks))
    return out


def track_video(clip_outputs, num_frames: int, config: TrackerConfig) -> list[VideoInstance]:
    """``clip_outputs``: iterable of (class_probs, mask_probs, frame range) in clip order.

    A single clip covering the whole video skips association entirely.
    """
    store = TrackStore(config)
    clip_outputs = list(clip_outputs)
    if len(clip_outputs) == 1:
        probs, masks, frames = clip_outputs[0]
        for cand in select_candidates(probs, masks, frames, config.min_confidence):
            store.new_track(cand)
        return finalize(store, num_frames, masks.shape[-2:])
    for probs, masks, frames in clip_outputs:
        stitch(store, select_candidates(probs, masks, frames, config.min_confidence), frames)
    shape = clip_outputs[0][1].shape[-2:] if clip_outputs else None
    return finalize(store, num_frames, shape)
