"""Analytic encoder cost at the two reference video resolutions, plus the one-constant calibration.

    python3 scripts/encoder_costs.py [--out results]
"""
import argparse
import json
from pathlib import Path

from ifc_lab.complexity import PUBLISHED_GFLOPS, calibrate, rows_to_csv, sweep, reference_grid
from ifc_lab.encoder import VARIANTS


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    grid = reference_grid()
    (out / "encoder_flops.csv").write_text(rows_to_csv(sweep(VARIANTS, grid)))
    cal = calibrate()
    (out / "encoder_calibration.json").write_text(json.dumps(cal, indent=2))

    print(f"scale (published GFLOPs per analytic GFLOP) = {cal['scale']:.4f}")
    print(f"{'res':>10} {'T':>3} {'variant':>15} {'published':>10} {'fitted':>10} {'resid':>8}")
    for r in cal["rows"]:
        print(f"{r['height']}x{r['width']:<5} {r['T']:>3} {r['variant']:>15} "
              f"{r['published']:>10.2f} {r['fitted']:>10.2f} {r['rel_residual']:>+8.1%}")


if __name__ == "__main__":
    main()
