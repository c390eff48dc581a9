"""Desk-scale pretrain x fine-tune matrix over six glyph banks.

Banks differ in class count, exemplar count and distortion, ordered roughly
from simple to complex. Writes matrix_cells.csv / matrix_mean.csv /
matrix_std.csv plus one run directory per cell. The full 6 x 6 x 5 run takes
hours on one CPU; ``--banks`` and ``--reps`` shrink it.

    python3 scripts/pretrain_matrix.py --banks 3 --reps 2 --out runs/matrix
"""
import argparse
from pathlib import Path

from transinv import data as D
from transinv import protocol as P
from transinv import report as R

BANKS = [
    P.BankSpec(classes=2, exemplars=1, seed=11, name="glyph2"),
    P.BankSpec(classes=10, exemplars=1, seed=12, name="glyph10"),
    P.BankSpec(classes=10, exemplars=5, seed=13, name="glyph10x5"),
    P.BankSpec(classes=18, exemplars=1, seed=14, name="glyph18"),
    P.BankSpec(classes=10, exemplars=20, seed=15, affine=0.3, name="distort10x20"),
    P.BankSpec(classes=18, exemplars=10, seed=16, affine=0.3, name="distort18x10"),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--banks", type=int, default=6)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/matrix")
    args = ap.parse_args()
    banks = BANKS[:args.banks]
    base = P.ExperimentManifest(
        finetune=P.StageSpec(banks[0], D.FixedLocation(), P.StopCriterion(50, 0.99), 32, 320),
        pretrain=P.StageSpec(banks[0], D.FullyTranslated(), P.StopCriterion(30, 0.99), 32, 640),
        repetitions=args.reps, seed=args.seed, name="matrix")
    cells = []
    for i, (p, f, m) in enumerate(P.matrix_manifests(base, banks)):
        rec = P.run_experiment(m, jobs=args.jobs)
        cells.append(P.MatrixCell(p, f, rec))
        R.write_run_outputs(rec, Path(args.out) / f"cell{i:02d}")
        print(f"{p:>14s} -> {f:<14s} {rec.mean:6.1f} +/- {rec.std:4.1f}{'  (diagonal)' if p == f else ''}", flush=True)
    for path in R.write_matrix(cells, args.out):
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
