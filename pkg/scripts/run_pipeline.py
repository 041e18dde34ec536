#!/usr/bin/env python3
"""Full dense -> prune -> transfer -> eval pipeline on one toy dataset.

Writes everything under --out (default runs/pipeline): the dense teacher,
the pruned student, the retrained student, samples from both, and a small
comparison table on stdout.
"""
import argparse
import json
import sys
from pathlib import Path

from sparsedm.cli import main as cli


def run(argv) -> None:
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--data", default="gauss8")
    ap.add_argument("--pattern", default="2:4")
    ap.add_argument("--dense-steps", type=int, default=2000)
    ap.add_argument("--transfer-steps", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-eval", type=int, default=2000)
    args = ap.parse_args()

    out = Path(args.out)
    dense = out / "dense"
    pruned = out / "pruned"
    sparse = out / "sparse"
    seed = str(args.seed)

    run(["train-dense", "--out", str(dense), "--data", args.data,
         "--steps", str(args.dense_steps), "--seed", seed])
    run(["prune", "--ckpt", str(dense), "--pattern", args.pattern,
         "--out", str(pruned), "--seed", seed])
    run(["train-sparse", "--student", str(pruned), "--teacher", str(dense),
         "--out", str(sparse), "--data", args.data,
         "--steps", str(args.transfer_steps), "--seed", seed])

    for name, ck in (("dense", dense), ("sparse", sparse)):
        run(["eval", "--ckpt", str(ck), "--data", args.data,
             "--n", str(args.n_eval), "--seed", seed,
             "--out", str(out / f"eval-{name}")])
        run(["sample", "--ckpt", str(ck), "--n", "2000", "--svg", "--seed", seed,
             "--out", str(out / f"samples-{name}")])

    print()
    print(f"{'model':<8} {'energy':<14} {'macs':<10} reduction")
    for name in ("dense", "sparse"):
        rep = json.loads((out / f"eval-{name}" / "report.json").read_text())
        print(f"{name:<8} {rep['energy_distance']:<14.6f} "
              f"{rep['macs_sparse']:<10} {rep['reduction']:.4f}")


if __name__ == "__main__":
    main()
