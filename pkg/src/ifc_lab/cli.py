"""``ifc-lab`` command line: gen-data, profile, train, infer, eval, calibrate.

Exit codes: 0 success, 2 configuration error, 3 IO error, 4 numeric abort.
Heavy imports happen inside commands so ``--threads`` can take effect before
numpy loads its BLAS.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import subprocess
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ manifests
def version_string() -> str:
    from . import __version__
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclasses.dataclass
class RunManifest:
    command: str
    config_path: str | None
    config: dict
    outputs: dict
    version: str = dataclasses.field(default_factory=version_string)
    extra: dict = dataclasses.field(default_factory=dict)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=str))
        return path


def manifest_path_for(out: Path) -> Path:
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.name + ".manifest.json")


# ------------------------------------------------------------------ schema validation
def _check_type(name: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (tuple, list)):
        ok = isinstance(value, (list, tuple))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key {name!r}: expected {type(default).__name__}, got {value!r}")


def validate_against(cls, data: dict, prefix: str = "") -> dict:
    """Reject unknown keys and wrongly typed values; return the fully resolved dict."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys {[prefix + k for k in unknown]}")
    resolved = {}
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if f.name not in data:
            resolved[f.name] = _plain(default)
            continue
        value = data[f.name]
        if dataclasses.is_dataclass(default):
            resolved[f.name] = validate_against(type(default), value, prefix + f.name + ".")
        elif value is None:
            resolved[f.name] = None
        else:
            _check_type(prefix + f.name, value, default)
            resolved[f.name] = value
    return resolved


def _plain(v):
    if dataclasses.is_dataclass(v):
        return {k: _plain(x) for k, x in dataclasses.asdict(v).items()}
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def read_json(path) -> object:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e


# ------------------------------------------------------------------ gen-data
@dataclasses.dataclass
class DataSpec:
    num_train: int = 200
    num_eval: int = 50
    height: int = 96
    width: int = 96
    num_frames: int = 36
    min_instances: int = 1
    max_instances: int = 4
    occlusion_heavy_eval: bool = False
    blur: bool = False

    def validate(self):
        if self.num_train < 0 or self.num_eval < 0 or self.num_train + self.num_eval == 0:
            raise ConfigError("dataset spec must request at least one video")
        if self.height % 8 or self.width % 8:
            raise ConfigError("height and width must be multiples of 8")
        if self.num_frames < 1 or not 1 <= self.min_instances <= self.max_instances:
            raise ConfigError("need num_frames >= 1 and 1 <= min_instances <= max_instances")


def scene_seed(seed: int, video_index: int) -> int:
    """Videos are numbered train first, then eval; each gets ``seed + index``."""
    return seed + video_index


def build_dataset(spec: DataSpec, seed: int):
    """Yield (split name, video name, AnnotatedVideo) deterministically from ``seed``."""
    from .synth import generate, random_scene
    for split, first, n in (("train", 0, spec.num_train), ("eval", spec.num_train, spec.num_eval)):
        for i in range(n):
            scene = random_scene(scene_seed(seed, first + i), spec.height, spec.width, spec.num_frames,
                                 spec.min_instances, spec.max_instances,
                                 occlusion_heavy=spec.occlusion_heavy_eval and split == "eval",
                                 blur=spec.blur)
            yield split, f"{i:05d}", generate(scene)


def cmd_gen_data(args) -> int:
    from .synth import save_video
    raw = read_json(args.spec) if args.spec else {}
    resolved = validate_against(DataSpec, raw)
    spec = DataSpec(**resolved)
    spec.validate()
    out = Path(args.out)
    counts = {"train": 0, "eval": 0}
    for split, name, video in build_dataset(spec, args.seed):
        save_video(video, out / split / name)
        counts[split] += 1
    RunManifest("gen-data", args.spec, {**resolved, "seed": args.seed},
                {"train": str(out / "train"), "eval": str(out / "eval")},
                extra={"counts": counts}).write(out / "manifest.json")
    print(f"wrote {counts['train']} train and {counts['eval']} eval videos to {out}")
    return EXIT_OK


def list_videos(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise OSError(f"no such dataset directory: {root}")
    if (root / "meta.json").exists() or (root / "annotations.json").exists():
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "annotations.json").exists())


# ------------------------------------------------------------------ profile
def _parse_grid(path):
    from .complexity import EncoderDims, reference_grid
    if path is None or path == "reference":
        return reference_grid()
    raw = read_json(path)
    if not isinstance(raw, list) or not raw:
        raise ConfigError("grid must be a non-empty JSON list")
    grid = []
    for entry in raw:
        if not isinstance(entry, dict):
            raise ConfigError("grid entries must be objects")
        entry = {"C": 256, **entry}
        try:
            if "height" in entry:
                h, w, t = entry.pop("height"), entry.pop("width"), entry.pop("T")
                grid.append(EncoderDims.from_resolution(h, w, t, **entry))
            else:
                grid.append(EncoderDims(**entry))
        except TypeError as e:
            raise ConfigError(f"bad grid entry {entry}: {e}") from e
    return grid


def cmd_profile(args) -> int:
    from .complexity import EncoderDims, rows_to_csv, sweep, validate_against_instrumented
    from .encoder import VARIANTS
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise ConfigError("empty variant list")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {list(VARIANTS)}")
    grid = _parse_grid(args.grid)
    text = rows_to_csv(sweep(variants, grid))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    extra = {}
    if args.validate:
        toy = EncoderDims(C=16, T=3, H=4, W=4, M=4, num_layers=2, ffn_dim=32, heads=4)
        checks = {}
        for v in variants:
            err, analytic, measured = validate_against_instrumented(v, toy)
            checks[v] = {"rel_error": err, "analytic": analytic, "measured": measured}
            print(f"validate {v}: analytic={analytic} measured={measured} rel_error={err:.2e}")
        extra["validation"] = {"dims": dataclasses.asdict(toy), "checks": checks}
    RunManifest("profile", args.grid, {"variants": variants, "grid": [dataclasses.asdict(g) for g in grid]},
                {"csv": str(out)}, extra=extra).write(manifest_path_for(out))
    print(f"wrote {len(grid) * len(variants)} rows to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ train
@dataclasses.dataclass
class EvalSection:
    T: int = 5
    S: int = 1
    tau: float = 0.5
    max_videos: int = 0  # 0 = all


def _load_split(root, split, limit=0):
    from .synth import load_video
    base = Path(root) / split
    paths = list_videos(base)
    if limit:
        paths = paths[:limit]
    if not paths:
        raise OSError(f"no videos found in {base}")
    return [load_video(p) for p in paths]


def parse_train_config(raw: dict):
    from .trainer import TrainConfig
    raw = dict(raw)
    ev = validate_against(EvalSection, raw.pop("eval", {}), "eval.")
    resolved = validate_against(TrainConfig, raw)
    try:
        cfg = TrainConfig.from_dict(resolved)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return cfg, EvalSection(**ev), {**cfg.to_dict(), "eval": ev}


def cmd_train(args) -> int:
    from .trainer import evaluate_checkpoint, init_training, load_checkpoint, run_training, save_checkpoint
    raw = read_json(args.config) if args.config else {}
    cfg, ev, snapshot = parse_train_config(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = _load_split(args.data, "train")
    if args.resume:
        state = load_checkpoint(args.resume, train)
    else:
        state = init_training(train, cfg)
    if args.steps is not None:
        state.cfg.total_steps = min(state.cfg.total_steps, args.steps)
    log_path = out / "train_log.jsonl"
    run_training(state, log_path=log_path, checkpoint_dir=out / "checkpoints",
                 on_log=lambda r: print(json.dumps(r), flush=True) if not args.quiet else None)
    final = out / "final.ckpt"
    save_checkpoint(final, state)
    outputs = {"checkpoint": str(final), "log": str(log_path)}
    if not args.no_eval:
        eval_videos = _load_split(args.data, "eval", ev.max_videos)
        res = evaluate_checkpoint(state.model, eval_videos, ev.T, ev.S, ev.tau)
        res.write(out / "eval.json", out / "eval_per_category.csv")
        outputs["eval"] = str(out / "eval.json")
        print(f"AP={res.AP:.4f} AP50={res.AP50:.4f} AP75={res.AP75:.4f}")
    RunManifest("train", args.config, snapshot, outputs,
                extra={"resume": args.resume, "steps": state.step}).write(out / "manifest.json")
    return EXIT_OK


# ------------------------------------------------------------------ infer
def _attention_maps(model, frames, H: int, W: int):
    """Memory-token -> frame-token attention of every Encode-Receive layer: (L, T, M, H', W')."""
    from . import tensor as Tn
    layers = model.encoder.spatial
    for layer in layers:
        layer.attn.keep_weights = True
    try:
        with Tn.no_grad(), Tn.flops_disabled():
            pred = model(frames)
        maps = []
        for layer in layers:
            w = layer.attn.last_weights  # (T, heads, HW+M, HW+M)
            HW = H * W
            maps.append(w[:, :, HW:, :HW].mean(axis=1).reshape(w.shape[0], -1, H, W))
    finally:
        for layer in layers:
            layer.attn.keep_weights = False
            layer.attn.last_weights = None
    import numpy as np
    return pred, np.stack(maps)


def cmd_infer(args) -> int:
    import numpy as np
    from .synth import load_video, rle_encode, split_clips
    from .tracker import TrackerConfig
    from .trainer import load_checkpoint, model_predictor, predict_video, upsample_masks
    if not args.T >= args.S >= 1:
        raise ConfigError(f"need T >= S >= 1, got T={args.T}, S={args.S}")
    state = load_checkpoint(args.ckpt)
    model = state.model
    model.eval()
    if model.cfg.variant != "ifc" and args.dump_attn:
        raise ConfigError("--dump-attn needs a model with memory tokens (variant ifc)")
    out = Path(args.out)
    videos = list_videos(args.video)
    if not videos:
        raise OSError(f"no videos under {args.video}")
    modes = {}
    for vp in videos:
        video = load_video(vp)
        N, H0, W0 = video.frames.shape[:3]
        T = min(args.T, N)
        S = min(args.S, T)
        tracker = TrackerConfig(T=T, S=S, tau=args.tau)
        instances = predict_video(model_predictor(model), video, tracker)
        name = vp.name
        vdir = out / name
        vdir.mkdir(parents=True, exist_ok=True)
        records = []
        for inst in instances:
            m = upsample_masks(inst.masks, (H0, W0)) > 0.5
            records.append({"id": inst.track_id, "category": inst.category,
                            "confidence": inst.confidence, "rle": rle_encode(m)})
        doc = {"num_frames": N, "height": H0, "width": W0, "instances": records}
        (vdir / "tracks.json").write_text(json.dumps(doc, sort_keys=True))
        modes[name] = {"mode": "offline" if T >= N else "near-online", "T": T, "S": S, "overlap": T - S}
        if args.dump_attn:
            arrays = {}
            for k, clip in enumerate(split_clips(N, T, S)):
                h, w = H0 // 8, W0 // 8
                _, maps = _attention_maps(model, video.frames[list(clip.indices)], h, w)
                arrays[f"clip{k:04d}_start{clip.start:05d}"] = maps
            np.savez_compressed(vdir / "memory_attention.npz", **arrays)
    distinct = {json.dumps({k: v for k, v in m.items()}, sort_keys=True) for m in modes.values()}
    summary = json.loads(next(iter(distinct))) if len(distinct) == 1 else {"mode": "mixed"}
    RunManifest("infer", None, {"ckpt": args.ckpt, "video": args.video, "T": args.T, "S": args.S,
                                "tau": args.tau, "dump_attn": args.dump_attn},
                {"tracks": str(out)}, extra={**summary, "per_video": modes}).write(out / "manifest.json")
    print(f"wrote tracks for {len(videos)} video(s) to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ eval
def read_tracks(path: Path):
    import numpy as np
    from .synth import rle_decode
    doc = read_json(path)
    try:
        shape = (doc["num_frames"], doc["height"], doc["width"])
        out = []
        for inst in doc["instances"]:
            out.append((int(inst["category"]), float(inst.get("confidence", 1.0)),
                        rle_decode(inst["rle"], shape), int(inst.get("id", len(out)))))
    except (KeyError, TypeError) as e:
        raise ConfigError(f"{path} does not follow the track schema: {e}") from e
    return shape, out


def cmd_eval(args) -> int:
    from .evaluation import EvalConfig, GTInstance, PredictedInstance, evaluate
    gt_dirs = list_videos(args.gt)
    if not gt_dirs:
        raise OSError(f"no ground-truth videos under {args.gt}")
    gt_names = {p.name for p in gt_dirs}
    pred_root = Path(args.pred)
    if not pred_root.is_dir():
        raise OSError(f"no such prediction directory: {pred_root}")
    pred_dirs = {p.name: p for p in pred_root.iterdir() if p.is_dir() and (p / "tracks.json").exists()}
    stray = sorted(set(pred_dirs) - gt_names)
    if stray:
        raise ConfigError(f"predictions for videos absent from ground truth: {stray}")
    preds, gts = [], []
    num_classes = 0
    for gp in gt_dirs:
        gshape, ginst = read_tracks(gp / "annotations.json")
        for cat, _, m, _ in ginst:
            num_classes = max(num_classes, cat + 1)
            if m.any():
                gts.append(GTInstance(gp.name, cat, m))
        if gp.name in pred_dirs:
            pshape, pinst = read_tracks(pred_dirs[gp.name] / "tracks.json")
            if pshape != gshape:
                raise ConfigError(f"video {gp.name}: prediction extent {pshape} != ground truth {gshape}")
            for cat, score, m, tid in pinst:
                num_classes = max(num_classes, cat + 1)
                preds.append(PredictedInstance(gp.name, cat, score, m, tid))
    cfg = EvalConfig(num_classes=max(num_classes, args.num_classes))
    res = evaluate(preds, gts, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    res.write(out, out.with_suffix(".csv"))
    RunManifest("eval", None, {"pred": args.pred, "gt": args.gt, "num_classes": cfg.num_classes},
                {"json": str(out)}).write(manifest_path_for(out))
    print(f"AP={res.AP:.4f} AP50={res.AP50:.4f} AP75={res.AP75:.4f} AR1={res.AR1:.4f} AR10={res.AR10:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ calibrate
def cmd_calibrate(args) -> int:
    from .complexity import calibrate
    report = calibrate(args.C, args.ffn_dim, args.layers, args.M)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2))
    print(f"scale={report['scale']:.4f}")
    for r in report["rows"]:
        print(f"{r['height']}x{r['width']} T={r['T']:>2} {r['variant']:<15} published={r['published']:>8.2f} "
              f"fitted={r['fitted']:>8.2f} residual={r['rel_residual']:+.3f}")
    RunManifest("calibrate", None, vars(args) | {"func": None}, {"json": str(out)}).write(manifest_path_for(out))
    return EXIT_OK


# ------------------------------------------------------------------ entry
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ifc-lab", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads (fallback: IFC_LAB_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--spec", default=None, help="JSON dataset spec (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    pr = sub.add_parser("profile", help="analytic FLOP sweep")
    pr.add_argument("--variants", default="no_comm,full_thw,decompose_t_hw,ifc")
    pr.add_argument("--grid", default=None, help="JSON grid file or 'reference' (default)")
    pr.add_argument("--out", required=True)
    pr.add_argument("--validate", action="store_true", help="cross-check against the instrumented ledger")
    pr.set_defaults(func=cmd_profile)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--steps", type=int, default=None, help="cap on total steps")
    t.add_argument("--no-eval", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="track instances with a checkpoint")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--video", required=True, help="one video directory or a directory of videos")
    i.add_argument("--T", type=int, default=5)
    i.add_argument("--S", type=int, default=1)
    i.add_argument("--tau", type=float, default=0.5)
    i.add_argument("--out", required=True)
    i.add_argument("--dump-attn", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score tracks against annotations")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--num-classes", type=int, default=3)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("calibrate", help="fit the FLOP model to published encoder costs")
    c.add_argument("--out", required=True)
    c.add_argument("--C", type=int, default=256)
    c.add_argument("--ffn-dim", type=int, default=2048)
    c.add_argument("--layers", type=int, default=3)
    c.add_argument("--M", type=int, default=8)
    c.set_defaults(func=cmd_calibrate)
    return p


def resolve_threads(flag: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get("IFC_LAB_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"IFC_LAB_THREADS must be an integer, got {env!r}") from e
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = resolve_threads(args.threads)
        if threads is not None:
            if threads < 1:
                raise ConfigError("--threads must be >= 1")
            for var in THREAD_VARS:
                os.environ[var] = str(threads)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # classified below; anything else is a bug and re-raises
        from .tensor import ContractError, NonFiniteError
        from .trainer import NumericAbort
        if isinstance(e, (NumericAbort, NonFiniteError)):
            print(f"numeric abort: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(e, ContractError):
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
