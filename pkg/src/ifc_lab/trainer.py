"""Toy end-to-end training: clip sampling, matching + loss, AdamW, checkpoints, evaluation."""
from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .evaluation import EvalConfig, EvalResult, GTInstance, PredictedInstance, evaluate
from .matching import GroundTruthInstance, LossWeights, clip_loss, hungarian_max, similarity_matrix
from .model import IFCModel, ModelConfig
from .synth import AnnotatedVideo, downsample_masks, split_clips
from .tensor import ContractError, Tensor
from .tracker import TrackerConfig, track_video

CKPT_MAGIC = b"IFCL"
CKPT_VERSION = 1


class NumericAbort(RuntimeError):
    def __init__(self, message: str, clip_id=None):
        super().__init__(message)
        self.clip_id = clip_id


@dataclass
class TrainConfig:
    clip_length: int = 5
    batch_size: int = 8
    lr_transformer: float = 1e-4
    lr_stem: float = 1e-5
    weight_decay: float = 1e-4
    total_steps: int = 20000
    decay_step: int | None = None  # default: 75% of total_steps
    grad_clip: float = 0.1
    seed: int = 0
    match_mode: str = "mask"
    hflip: bool = True
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    log_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.lr_transformer <= 0 or self.lr_stem < 0:
            raise ContractError("learning rates must be positive")
        if self.decay_step is None:
            self.decay_step = int(0.75 * self.total_steps)
        if self.total_steps > 0 and not 0 <= self.decay_step < self.total_steps:
            raise ContractError("decay_step must lie before total_steps")
        if self.match_mode not in ("mask", "box"):
            raise ContractError(f"unknown match mode {self.match_mode!r}")
        if self.batch_size < 1 or self.clip_length < 1:
            raise ContractError("batch_size and clip_length must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def lr_scale(self, step: int) -> float:
        return 0.1 if step >= self.decay_step else 1.0


class AdamW:
    """Adam with weight decay applied directly to the weights, outside the moments."""

    def __init__(self, groups: list[tuple[list[Tensor], float]], weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = [(list(ps), lr) for ps, lr in groups]
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for ps, _ in self.groups for p in ps}
        self.v = {id(p): np.zeros_like(p.data) for ps, _ in self.groups for p in ps}

    def params(self) -> list[Tensor]:
        return [p for ps, _ in self.groups for p in ps]

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for ps, base_lr in self.groups:
            lr = base_lr * lr_scale
            for p in ps:
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                m, v = self.m[id(p)], self.v[id(p)]
                p.data *= 1.0 - lr * self.weight_decay
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = np.zeros_like(p.data)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    norm = T.parameters_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def make_optimizer(model: IFCModel, cfg: TrainConfig) -> AdamW:
    return AdamW([(model.stem_parameters(), cfg.lr_stem),
                  (model.transformer_parameters(), cfg.lr_transformer)], cfg.weight_decay)


# ------------------------------------------------------------------------- data
@dataclass
class TrainClip:
    frames: np.ndarray  # uint8 (T, H0, W0, 3)
    gts: list[GroundTruthInstance]
    clip_id: str = ""


def clip_targets(instances, mask_factor: int) -> list[GroundTruthInstance]:
    """Ground truth for one clip: instances absent from every frame are dropped."""
    out = []
    for inst in instances:
        m = downsample_masks(inst.masks, mask_factor)
        if m.any():
            out.append(GroundTruthInstance(inst.category, m))
    return out


class ClipSampler:
    def __init__(self, videos: list[AnnotatedVideo], T: int, seed: int, hflip: bool = True,
                 mask_factor: int = 2):
        if not videos:
            raise ContractError("no training videos")
        self.videos = videos
        self.T = T
        self.rng = np.random.default_rng(seed)
        self.hflip = hflip
        self.mask_factor = mask_factor

    def sample(self) -> TrainClip:
        while True:
            vi = int(self.rng.integers(len(self.videos)))
            video = self.videos[vi]
            start = int(self.rng.integers(video.num_frames - self.T + 1))
            flip = bool(self.hflip and self.rng.random() < 0.5)
            sl = slice(start, start + self.T)
            frames = video.frames[sl]
            masks = [(i.category, i.masks[sl]) for i in video.instances]
            if flip:
                frames = frames[:, :, ::-1]
                masks = [(c, m[:, :, ::-1]) for c, m in masks]
            gts = []
            for c, m in masks:
                dm = downsample_masks(m, self.mask_factor)
                if dm.any():
                    gts.append(GroundTruthInstance(c, dm))
            if gts:
                return TrainClip(np.ascontiguousarray(frames), gts, f"v{vi}:f{start}:{'flip' if flip else 'id'}")

    def batch(self, n: int) -> list[TrainClip]:
        return [self.sample() for _ in range(n)]


# ------------------------------------------------------------------------- steps
def clip_forward_loss(model: IFCModel, clip: TrainClip, cfg: TrainConfig):
    pred = model(clip.frames)
    probs = pred.class_probs
    scores = similarity_matrix(clip.gts, probs, pred.mask_logits, cfg.loss, cfg.match_mode)
    assignment = hungarian_max(scores)
    loss, terms = clip_loss(clip.gts, pred.class_logits, pred.mask_logits, assignment, cfg.loss)
    return loss, terms


def train_step(batch: list[TrainClip], model: IFCModel, optimizer: AdamW, cfg: TrainConfig,
               step: int = 0) -> float:
    if not batch:
        raise ContractError("empty batch")
    model.train()
    optimizer.zero_grad()
    total = 0.0
    for clip in batch:
        try:
            loss, _ = clip_forward_loss(model, clip, cfg)
        except T.NonFiniteError as e:
            raise NumericAbort(f"non-finite value on clip {clip.clip_id}: {e}", clip.clip_id) from e
        value = loss.item()
        if not np.isfinite(value):
            raise NumericAbort(f"non-finite loss on clip {clip.clip_id}", clip.clip_id)
        (loss * (1.0 / len(batch))).backward()
        total += value
    clip_grad_norm(optimizer.params(), cfg.grad_clip)
    optimizer.step(cfg.lr_scale(step))
    return total / len(batch)


@dataclass
class TrainState:
    model: IFCModel
    optimizer: AdamW
    sampler: ClipSampler
    cfg: TrainConfig
    step: int = 0
    history: list[float] = field(default_factory=list)


def init_training(videos: list[AnnotatedVideo], cfg: TrainConfig) -> TrainState:
    model = IFCModel(cfg.model)
    opt = make_optimizer(model, cfg)
    sampler = ClipSampler(videos, cfg.clip_length, cfg.seed + 1000, cfg.hflip)
    return TrainState(model, opt, sampler, cfg)


def run_training(state: TrainState, steps: int | None = None, log_path=None,
                 on_log: Callable[[dict], None] | None = None,
                 checkpoint_dir=None) -> TrainState:
    cfg = state.cfg
    end = cfg.total_steps if steps is None else min(cfg.total_steps, state.step + steps)
    t0 = time.time()
    log_fh = open(log_path, "a") if log_path else None
    try:
        while state.step < end:
            batch = state.sampler.batch(cfg.batch_size)
            loss = train_step(batch, state.model, state.optimizer, cfg, state.step)
            state.history.append(loss)
            state.step += 1
            if state.step % cfg.log_every == 0 or state.step == end:
                rec = {"step": state.step, "loss": loss,
                       "lr": cfg.lr_transformer * cfg.lr_scale(state.step - 1),
                       "wall_time": round(time.time() - t0, 3)}
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                if on_log:
                    on_log(rec)
            if checkpoint_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"step{state.step:06d}.ckpt", state)
    finally:
        if log_fh:
            log_fh.close()
    return state


# ------------------------------------------------------------------------- checkpoints
def _rng_state(g: np.random.Generator) -> dict:
    return g.bit_generator.state


def save_checkpoint(path, state: TrainState) -> None:
    model, opt = state.model, state.optimizer
    arrays: list[tuple[str, np.ndarray]] = []
    named = list(model.named_parameters())
    for name, p in named:
        arrays.append((f"param/{name}", p.data))
    for name, p in named:
        if id(p) in opt.m:
            arrays.append((f"adam_m/{name}", opt.m[id(p)]))
            arrays.append((f"adam_v/{name}", opt.v[id(p)]))
    entries, offset = [], 0
    for name, arr in arrays:
        nbytes = arr.size * 8
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    manifest = {
        "version": CKPT_VERSION, "step": state.step, "adam_t": opt.t,
        "config": state.cfg.to_dict(), "tensors": entries,
        "rng": {"dropout": _rng_state(model.dropout_rng), "sampler": _rng_state(state.sampler.rng)},
        "history": state.history,
    }
    blob = json.dumps(manifest).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ContractError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CKPT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n])
    base = 16 + n
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        tensors[e["name"]] = np.frombuffer(raw[start:start + e["nbytes"]], dtype="<f8").reshape(e["shape"]).copy()
    return manifest, tensors


def load_checkpoint(path, videos: list[AnnotatedVideo] | None = None) -> TrainState:
    manifest, tensors = read_checkpoint(path)
    cfg = TrainConfig.from_dict(manifest["config"])
    model = IFCModel(cfg.model)
    model.load_state_dict({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
    opt = make_optimizer(model, cfg)
    opt.t = manifest["adam_t"]
    for name, p in model.named_parameters():
        if f"adam_m/{name}" in tensors:
            opt.m[id(p)] = tensors[f"adam_m/{name}"]
            opt.v[id(p)] = tensors[f"adam_v/{name}"]
    model.dropout_rng.bit_generator.state = manifest["rng"]["dropout"]
    sampler = ClipSampler(videos or [_placeholder_video()], cfg.clip_length, 0, cfg.hflip)
    sampler.rng.bit_generator.state = manifest["rng"]["sampler"]
    return TrainState(model, opt, sampler, cfg, manifest["step"], list(manifest.get("history", [])))


def _placeholder_video() -> AnnotatedVideo:
    return AnnotatedVideo(np.zeros((1, 8, 8, 3), np.uint8), [])


# ------------------------------------------------------------------------- evaluation
ClipPredictor = Callable[[AnnotatedVideo, object], tuple[np.ndarray, np.ndarray]]


def model_predictor(model: IFCModel) -> ClipPredictor:
    def predict(video: AnnotatedVideo, clip):
        model.eval()
        with T.no_grad(), T.flops_disabled():
            pred = model(video.frames[list(clip.indices)])
        return pred.class_probs, pred.mask_probs
    return predict


def gt_predictor(num_classes: int) -> ClipPredictor:
    """Ground truth as a perfect per-clip prediction; bypasses the model."""
    def predict(video: AnnotatedVideo, clip):
        idx = list(clip.indices)
        present = [i for i in video.instances if i.masks[idx].any()]
        probs = np.zeros((max(len(present), 1), num_classes + 1))
        masks = np.zeros((max(len(present), 1), len(idx)) + video.frames.shape[1:3])
        probs[:, -1] = 1.0
        for q, inst in enumerate(present):
            probs[q] = 0.0
            probs[q, inst.category] = 1.0
            masks[q] = inst.masks[idx]
        return probs, masks
    return predict


def upsample_masks(masks: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    H, W = masks.shape[-2:]
    fy, fx = shape[0] // H, shape[1] // W
    if (fy, fx) == (1, 1):
        return masks
    return masks.repeat(fy, axis=-2).repeat(fx, axis=-1)


def predict_video(predict: ClipPredictor, video: AnnotatedVideo, tracker: TrackerConfig):
    clips = split_clips(video.num_frames, tracker.T, tracker.S)
    outputs = []
    for clip in clips:
        probs, masks = predict(video, clip)
        outputs.append((probs, masks[:, :clip.num_valid], clip.valid_frames))
    return track_video(outputs, video.num_frames, tracker)


def evaluate_videos(predict: ClipPredictor, videos: Iterable[AnnotatedVideo], tracker: TrackerConfig,
                    eval_cfg: EvalConfig = EvalConfig()) -> EvalResult:
    preds, gts = [], []
    for vi, video in enumerate(videos):
        vid = f"{vi:05d}"
        for inst in predict_video(predict, video, tracker):
            masks = upsample_masks(inst.masks, video.frames.shape[1:3]) > 0.5
            preds.append(PredictedInstance(vid, inst.category, inst.confidence, masks, inst.track_id))
        for inst in video.instances:
            if inst.masks.any():
                gts.append(GTInstance(vid, inst.category, inst.masks))
    return evaluate(preds, gts, eval_cfg)


def evaluate_checkpoint(model: IFCModel, videos, T_: int = 5, S: int = 1, tau: float = 0.5,
                        eval_cfg: EvalConfig | None = None) -> EvalResult:
    eval_cfg = eval_cfg or EvalConfig(num_classes=model.cfg.num_classes)
    videos = list(videos)
    tr = TrackerConfig(T=min(T_, min(v.num_frames for v in videos)), S=S, tau=tau)
    return evaluate_videos(model_predictor(model), videos, tr, eval_cfg)
