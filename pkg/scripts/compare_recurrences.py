"""Desk-scale head-to-head: EMA vs ConvLSTM at the bottleneck.

Generates a synthetic dataset (unless --data-dir points at an existing
one), trains one model per recurrence under the same seed and protocol,
evaluates both, and prints the per-video NSS difference table plus an
inference-time alpha sweep for the EMA run.

    python scripts/compare_recurrences.py --work runs/compare --epochs 7
"""

import argparse
import sys
from pathlib import Path

from salrec import cli


def sh(*argv) -> None:
    code = cli.main([str(a) for a in argv])
    if code != 0:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/compare",
                    help="directory for datasets, checkpoints and reports")
    ap.add_argument("--data-dir", help="reuse an existing dataset instead of "
                    "synthesizing one")
    ap.add_argument("--videos", type=int, default=20)
    ap.add_argument("--frames", type=int, default=40)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--speed", type=float, default=0.25)
    ap.add_argument("--epochs", type=int, default=7)
    ap.add_argument("--alpha", type=float, default=0.1)
    ap.add_argument("--n-splits", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.work)
    if args.data_dir:
        ds = Path(args.data_dir)
    else:
        ds = work / "data"
        sh("synth", ds, "--videos", args.videos, "--frames", args.frames,
           "--size", args.size, "--speed", args.speed, "--seed", args.seed)

    runs = {}
    for tag, flags in [
            ("ema", ["--recurrence", "ema", "--alpha", args.alpha]),
            ("convlstm", ["--recurrence", "convlstm"])]:
        run_dir = work / f"train_{tag}"
        print(f"\n== training {tag} ==")
        sh("train", ds, run_dir, *flags, "--epochs", args.epochs,
           "--seed", args.seed)
        eval_dir = work / f"eval_{tag}"
        print(f"== evaluating {tag} ==")
        sh("eval", ds, eval_dir, "--checkpoint",
           run_dir / "checkpoint_final.salr", "--n-splits", args.n_splits,
           "--seed", args.seed)
        runs[tag] = eval_dir

    print("\n== per-video NSS, EMA minus ConvLSTM ==")
    sh("compare", runs["ema"] / "report.csv", runs["convlstm"] / "report.csv",
       "--metric", "NSS")

    print("\n== EMA alpha sensitivity (inference-time override) ==")
    sh("sweep-alpha", ds, work / "train_ema" / "checkpoint_final.salr",
       "--alphas", "0.05,0.1,0.2,0.3,1.0", "--n-splits", args.n_splits,
       "--out", work / "alpha_sweep.txt")


if __name__ == "__main__":
    main()
