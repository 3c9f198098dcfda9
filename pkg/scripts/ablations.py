"""Directional ablations on the occlusion-heavy held-out split, several training seeds.

Settings per seed:
    ifc       memory tokens, mask-based matching (evaluated at S=1 and, as ifc_S3, at S=3)
    no_comm   same model with frame-local encoding only
    ifc_box   memory tokens, box-based matching

    python3 scripts/ablations.py --config configs/toy.json --steps 800 --seeds 0 1 2 3 4 --out results/ablations.json

Finished runs are kept in the output file and skipped on restart.
"""
import argparse
import copy
import dataclasses
import json
import os
import time
from pathlib import Path

from ifc_lab.cli import DataSpec, build_dataset, parse_train_config
from ifc_lab.trainer import evaluate_checkpoint, init_training, run_training

SETTINGS = {
    "ifc": {},
    "no_comm": {"model": {"variant": "no_comm"}},
    "ifc_box": {"match_mode": "box"},
}


def merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = merge(out.get(k, {}), v) if isinstance(v, dict) else v
    return out


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/toy.json")
    ap.add_argument("--steps", type=int, default=800)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--eval-videos", type=int, default=25)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--out", default="results/ablations.json")
    args = ap.parse_args(argv)

    base = json.loads(Path(args.config).read_text()) if args.config and Path(args.config).exists() else {}
    base.pop("eval", None)
    spec = DataSpec(num_eval=args.eval_videos, occlusion_heavy_eval=True)
    train, held_out = [], []
    for split, _, video in build_dataset(spec, args.data_seed):
        (train if split == "train" else held_out).append(video)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rec = json.loads(out.read_text()) if out.exists() else {}
    meta = {"steps": args.steps, "eval_videos": args.eval_videos, "data": dataclasses.asdict(spec),
            "data_seed": args.data_seed, "base_config": base, "cpu_count": os.cpu_count()}
    if rec.get("meta", {}) != meta:
        rec = {"meta": meta, "runs": []}
    done = {(r["setting"], r["seed"]) for r in rec["runs"]}

    for seed in args.seeds:
        for name, over in SETTINGS.items():
            if (name, seed) in done:
                continue
            raw = merge(copy.deepcopy(base), over)
            raw["seed"] = seed
            raw["total_steps"] = args.steps
            raw.setdefault("model", {})["seed"] = seed
            cfg, _, snapshot = parse_train_config(raw)
            t0 = time.time()
            state = run_training(init_training(train, cfg))
            secs = time.time() - t0
            evals = [(name, 1)] + ([("ifc_S3", 3)] if name == "ifc" else [])
            for label, S in evals:
                res = evaluate_checkpoint(state.model, held_out, T_=cfg.clip_length, S=S)
                rec["runs"].append({"setting": label, "seed": seed, "S": S, "AP": res.AP, "AP50": res.AP50,
                                    "AP75": res.AP75, "final_loss": state.history[-1],
                                    "train_seconds": round(secs, 1)})
                print(f"seed {seed} {label:8s} AP={res.AP:.4f} AP50={res.AP50:.4f} "
                      f"loss={state.history[-1]:.3f} {secs / 60:.1f} min", flush=True)
            out.write_text(json.dumps(rec, indent=2))
    return rec


if __name__ == "__main__":
    main()
