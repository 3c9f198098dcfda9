"""Synthetic moving-shape videos with exact, occlusion-resolved instance masks.

On disk a video is a directory::

    meta.json          scene spec, categories, frame count
    frames/00000.png   8-bit RGB
    annotations.json   per instance: category and an RLE over the whole
                       (T, H, W) volume, row-major within a frame, frames
                       concatenated, alternating zero/one runs starting with zeros
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import ContractError

CATEGORIES = ("disk", "rectangle", "triangle")


@dataclass
class InstanceSpec:
    kind: str
    size: float
    position: tuple[float, float]  # (x, y) centre in pixels
    velocity: tuple[float, float]  # pixels per frame
    depth: int  # smaller is nearer
    color: tuple[int, int, int]

    @property
    def category(self) -> int:
        return CATEGORIES.index(self.kind)


@dataclass
class SceneSpec:
    height: int = 96
    width: int = 96
    num_frames: int = 36
    instances: list[InstanceSpec] = field(default_factory=list)
    seed: int = 0
    margin: float = 0.0  # motion box extends this far past the canvas edges
    blur: bool = False
    background: tuple[int, int, int] = (40, 40, 40)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["instances"] = [InstanceSpec(**{**i, "position": tuple(i["position"]),
                                          "velocity": tuple(i["velocity"]), "color": tuple(i["color"])})
                          for i in d.get("instances", [])]
        d["background"] = tuple(d.get("background", (40, 40, 40)))
        return cls(**d)


@dataclass
class InstanceTrack:
    category: int
    masks: np.ndarray  # bool (N, H, W)


@dataclass
class AnnotatedVideo:
    frames: np.ndarray  # uint8 (N, H, W, 3)
    instances: list[InstanceTrack]
    spec: SceneSpec | None = None

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def _reflect(p: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    if span <= 0:
        return np.full_like(p, lo)
    q = np.mod(p - lo, 2 * span)
    return lo + np.where(q > span, 2 * span - q, q)


def trajectory(inst: InstanceSpec, spec: SceneSpec) -> np.ndarray:
    """(N, 2) centres under linear motion with elastic bounce off the motion box."""
    t = np.arange(spec.num_frames, dtype=float)
    x = inst.position[0] + inst.velocity[0] * t
    y = inst.position[1] + inst.velocity[1] * t
    m = spec.margin
    return np.stack([_reflect(x, -m, spec.width + m), _reflect(y, -m, spec.height + m)], axis=1)


def rasterize(kind: str, size: float, cx: float, cy: float, H: int, W: int) -> np.ndarray:
    ys, xs = np.mgrid[0:H, 0:W]
    px, py = xs + 0.5 - cx, ys + 0.5 - cy
    if kind == "disk":
        return px * px + py * py <= size * size
    if kind == "rectangle":
        return (np.abs(px) <= size) & (np.abs(py) <= 0.7 * size)
    if kind == "triangle":
        # apex up; base at y = +size, apex at y = -size
        inside_base = py <= size
        left = 2 * px + py + size >= 0
        right = -2 * px + py + size >= 0
        return inside_base & left & right
    raise ContractError(f"unknown shape kind {kind!r}")


def _background(spec: SceneSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed + 7919)
    H, W = spec.height, spec.width
    base = np.array(spec.background, dtype=float)
    # static low-frequency texture, identical in every frame
    coarse = rng.normal(0.0, 10.0, size=(H // 8 + 1, W // 8 + 1, 3))
    tex = np.repeat(np.repeat(coarse, 8, axis=0), 8, axis=1)[:H, :W]
    return np.clip(base + tex, 0, 255)


def _box_blur(frames: np.ndarray) -> np.ndarray:
    f = frames.astype(float)
    p = np.pad(f, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    acc = sum(p[:, i:i + f.shape[1], j:j + f.shape[2]] for i in range(3) for j in range(3))
    return np.round(acc / 9.0).astype(np.uint8)


def generate(spec: SceneSpec) -> AnnotatedVideo:
    N, H, W = spec.num_frames, spec.height, spec.width
    if N <= 0:
        raise ContractError("a video needs at least one frame")
    for inst in spec.instances:
        if inst.size <= 0 or inst.size > 2 * max(H, W):
            raise ContractError(f"instance size {inst.size} does not fit the canvas bounds")
    depths = [i.depth for i in spec.instances]
    if len(set(depths)) != len(depths):
        raise ContractError("instance depths must be distinct (total order)")

    frames = np.empty((N, H, W, 3), dtype=np.uint8)
    bg = np.round(_background(spec)).astype(np.uint8)
    raw = np.zeros((len(spec.instances), N, H, W), dtype=bool)
    for k, inst in enumerate(spec.instances):
        centres = trajectory(inst, spec)
        for t in range(N):
            raw[k, t] = rasterize(inst.kind, inst.size, centres[t, 0], centres[t, 1], H, W)

    order = sorted(range(len(spec.instances)), key=lambda k: spec.instances[k].depth)  # near first
    visible = np.zeros_like(raw)
    covered = np.zeros((N, H, W), dtype=bool)
    for k in order:
        visible[k] = raw[k] & ~covered
        covered |= raw[k]

    frames[:] = bg
    for k, inst in enumerate(spec.instances):
        frames[visible[k]] = np.array(inst.color, dtype=np.uint8)
    if spec.blur:
        frames = _box_blur(frames)
    instances = [InstanceTrack(inst.category, visible[k]) for k, inst in enumerate(spec.instances)]
    return AnnotatedVideo(frames, instances, spec)


# hue centre of each category's colour family (HSV, fraction of a turn)
CATEGORY_HUES = {"disk": 0.0, "rectangle": 1 / 3, "triangle": 2 / 3}


def _family_colors(rng: np.random.Generator, kinds: list[str], background) -> list[tuple[int, int, int]]:
    """One colour per instance from its category's hue family, pairwise distinct and off-background."""
    colors: list[np.ndarray] = []
    bg = np.array(background, dtype=float)
    for kind in kinds:
        while True:
            h = (CATEGORY_HUES[kind] + rng.uniform(-0.07, 0.07)) % 1.0
            c = 255 * np.array(colorsys.hsv_to_rgb(h, rng.uniform(0.55, 1.0), rng.uniform(0.65, 1.0)))
            c = np.round(c)
            if np.abs(c - bg).sum() >= 120 and all(np.abs(c - o).sum() >= 60 for o in colors):
                break
        colors.append(c)
    return [tuple(int(v) for v in c) for c in colors]


def random_scene(seed: int, height: int = 96, width: int = 96, num_frames: int = 36,
                 min_instances: int = 1, max_instances: int = 4, occlusion_heavy: bool = False,
                 margin: float | None = None, blur: bool = False) -> SceneSpec:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(min_instances, max_instances + 1))
    kinds = [CATEGORIES[int(i)] for i in rng.integers(len(CATEGORIES), size=n)]
    colors = _family_colors(rng, kinds, (40, 40, 40))
    depths = rng.permutation(n)
    insts = []
    for k, kind in enumerate(kinds):
        if occlusion_heavy:
            size = float(rng.uniform(10, 18))
            pos = (float(width / 2 + rng.uniform(-18, 18)), float(height / 2 + rng.uniform(-18, 18)))
            speed = rng.uniform(1.0, 3.0)
        else:
            size = float(rng.uniform(7, 14))
            pos = (float(rng.uniform(size, width - size)), float(rng.uniform(size, height - size)))
            speed = rng.uniform(0.5, 2.5)
        ang = rng.uniform(0, 2 * np.pi)
        vel = (float(speed * np.cos(ang)), float(speed * np.sin(ang)))
        insts.append(InstanceSpec(kind, round(size, 3), pos, vel, int(depths[k]), colors[k]))
    if margin is None:
        margin = 0.0
    return SceneSpec(height, width, num_frames, insts, seed, margin, blur)


# ---------------------------------------------------------------------------- clips
@dataclass(frozen=True)
class ClipRange:
    start: int
    indices: tuple[int, ...]  # frame index per clip slot (padding repeats the last frame)
    num_valid: int

    @property
    def padded(self) -> bool:
        return self.num_valid < len(self.indices)

    @property
    def stop(self) -> int:
        return self.start + self.num_valid

    @property
    def valid_frames(self) -> range:
        return range(self.start, self.stop)


def split_clips(num_frames: int, T: int, S: int) -> list[ClipRange]:
    """Clip k covers frames [kS, kS + T); the last one is padded with the final frame."""
    if not (1 <= S <= T <= num_frames):
        raise ContractError(f"need 1 <= S <= T <= num_frames, got S={S}, T={T}, N={num_frames}")
    clips = []
    start = 0
    while True:
        stop = min(start + T, num_frames)
        idx = tuple(range(start, stop)) + (num_frames - 1,) * (start + T - stop)
        clips.append(ClipRange(start, idx, stop - start))
        if start + T >= num_frames:
            break
        start += S
    return clips


def clip_of(video: AnnotatedVideo, clip: ClipRange) -> tuple[np.ndarray, list[InstanceTrack]]:
    idx = list(clip.indices)
    return video.frames[idx], [InstanceTrack(i.category, i.masks[idx]) for i in video.instances]


# ---------------------------------------------------------------------------- RLE / IO
def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs, shape) -> np.ndarray:
    total = int(np.prod(shape))
    if sum(runs) != total:
        raise ContractError(f"RLE covers {sum(runs)} voxels, expected {total}")
    vals = np.arange(len(runs)) % 2 == 1
    return np.repeat(vals, runs).reshape(shape)


def save_video(video: AnnotatedVideo, path) -> None:
    path = Path(path)
    try:
        (path / "frames").mkdir(parents=True, exist_ok=True)
        N, H, W, _ = video.frames.shape
        meta = {
            "num_frames": N, "height": H, "width": W,
            "categories": list(CATEGORIES),
            "spec": video.spec.to_dict() if video.spec is not None else None,
        }
        (path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        for t in range(N):
            Image.fromarray(video.frames[t], mode="RGB").save(path / "frames" / f"{t:05d}.png")
        ann = {"num_frames": N, "height": H, "width": W,
               "instances": [{"id": k, "category": inst.category, "rle": rle_encode(inst.masks)}
                             for k, inst in enumerate(video.instances)]}
        (path / "annotations.json").write_text(json.dumps(ann, sort_keys=True))
    except OSError as e:
        raise OSError(f"cannot write video to {path}: {e}") from e


def load_annotations(path) -> dict:
    path = Path(path)
    try:
        return json.loads((path / "annotations.json").read_text())
    except OSError as e:
        raise OSError(f"cannot read annotations in {path}: {e}") from e


def load_video(path) -> AnnotatedVideo:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
        N = meta["num_frames"]
        frames = np.stack([np.asarray(Image.open(path / "frames" / f"{t:05d}.png").convert("RGB"))
                           for t in range(N)])
    except OSError as e:
        raise OSError(f"cannot read video from {path}: {e}") from e
    ann = load_annotations(path)
    shape = (ann["num_frames"], ann["height"], ann["width"])
    instances = [InstanceTrack(i["category"], rle_decode(i["rle"], shape)) for i in ann["instances"]]
    spec = SceneSpec.from_dict(meta["spec"]) if meta.get("spec") else None
    return AnnotatedVideo(frames, instances, spec)


serialize = save_video
deserialize = load_video


def downsample_masks(masks: np.ndarray, factor: int) -> np.ndarray:
    """Area-average pooling by ``factor`` on the last two axes, thresholded at 1/2."""
    if factor == 1:
        return np.asarray(masks, dtype=bool)
    *lead, H, W = masks.shape
    m = np.asarray(masks, dtype=float).reshape(*lead, H // factor, factor, W // factor, factor)
    return m.mean(axis=(-3, -1)) >= 0.5
