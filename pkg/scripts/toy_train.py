"""End-to-end toy run: default synthetic dataset, train under a wall-clock budget, held-out AP.

    python3 scripts/toy_train.py --config configs/toy.json --minutes 60 --out results/toy_train.json

Writes a JSON record with the resolved config, steps reached, wall time, loss curve
and the held-out metrics. The acceptance suite reads that record.
"""
import argparse
import json
import os
import time
from pathlib import Path

from ifc_lab.cli import DataSpec, build_dataset, parse_train_config
from ifc_lab.trainer import evaluate_checkpoint, init_training, run_training, save_checkpoint


def load_data(seed: int, spec: DataSpec):
    train, held_out = [], []
    for split, _, video in build_dataset(spec, seed):
        (train if split == "train" else held_out).append(video)
    return train, held_out


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None, help="train config JSON (same schema as `ifc-lab train`)")
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--minutes", type=float, default=60.0, help="training wall-clock budget")
    ap.add_argument("--steps", type=int, default=None, help="cap on optimizer steps")
    ap.add_argument("--out", default="results/toy_train.json")
    ap.add_argument("--checkpoint", default=None)
    args = ap.parse_args(argv)

    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg, ev, snapshot = parse_train_config(raw)
    if args.steps is not None:
        cfg.total_steps = min(cfg.total_steps, args.steps)
    train, held_out = load_data(args.data_seed, DataSpec())

    state = init_training(train, cfg)
    curve = []
    t0 = time.time()
    budget = args.minutes * 60.0
    while state.step < cfg.total_steps and time.time() - t0 < budget:
        run_training(state, steps=cfg.log_every, on_log=lambda r: curve.append(r))
        print(f"step {state.step} loss {curve[-1]['loss']:.4f} t={time.time() - t0:.0f}s", flush=True)
    train_seconds = time.time() - t0
    if args.checkpoint:
        save_checkpoint(args.checkpoint, state)

    t1 = time.time()
    res = evaluate_checkpoint(state.model, held_out, ev.T, ev.S, ev.tau)
    record = {
        "config": snapshot,
        "data_seed": args.data_seed,
        "num_train": len(train),
        "num_eval": len(held_out),
        "steps": state.step,
        "train_seconds": round(train_seconds, 1),
        "eval_seconds": round(time.time() - t1, 1),
        "budget_minutes": args.minutes,
        "cpu_count": os.cpu_count(),
        "metrics": res.to_json(),
        "loss_curve": [(r["step"], r["loss"]) for r in curve],
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(record, indent=2))
    print(f"steps={state.step} train={train_seconds / 60:.1f} min AP50={res.AP50:.4f} AP={res.AP:.4f}")
    return record


if __name__ == "__main__":
    main()
