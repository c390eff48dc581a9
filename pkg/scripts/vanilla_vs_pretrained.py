"""Vanilla 1-location training versus fully-translated pretraining, at desk scale.

Runs the bundled ``vanilla`` and ``translated`` manifests and prints grid-mean
normalized accuracy plus max-displacement penultimate cosine per stage.

    python3 scripts/vanilla_vs_pretrained.py --reps 5 --out runs/vvp
"""
import argparse
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from transinv import protocol as P
from transinv import report as R


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/vanilla_vs_pretrained")
    args = ap.parse_args()
    for name in ("vanilla", "translated"):
        path = Path(str(resources.files("transinv").joinpath("manifests", f"{name}.yaml")))
        manifest, _ = R.load_manifest(path)
        manifest = replace(manifest, repetitions=args.reps, seed=args.seed)
        rec = P.run_experiment(manifest, jobs=args.jobs)
        for p in R.write_run_outputs(rec, Path(args.out) / name):
            print(f"wrote {p}")
        cos = {s: np.mean([r.profiles[s].mean[-1] for r in rec.repetitions if s in r.profiles])
               for s in ("vanilla", "pretrained", "finetuned") if any(s in r.profiles for r in rec.repetitions)}
        cos_txt = "  ".join(f"cos[{s}]={v:.3f}" for s, v in cos.items())
        print(f"{name:12s} normalized {rec.mean:6.1f} +/- {rec.std:4.1f}  {cos_txt}")


if __name__ == "__main__":
    main()
