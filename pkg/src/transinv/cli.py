"""``transinv`` command line: data generation, training, evaluation and experiment runs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from . import protocol as P
from . import report as R
from .tensor import ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
OUTPUT_ENV = "TRANSINV_OUTPUT_DIR"

log = logging.getLogger("transinv")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(paths) -> None:
    for p in paths:
        print(f"wrote {p}")


def _manifest(args) -> tuple[P.ExperimentManifest, dict]:
    manifest, raw = R.load_manifest(args.manifest)
    if args.seed is not None:
        manifest = manifest.with_seed(args.seed)
    return manifest, raw


def _provenance(args, manifest: P.ExperimentManifest) -> dict:
    return {"cli": {"command": args.command, "manifest_path": str(args.manifest), "seed_override": args.seed,
                    "effective_seed": manifest.seed}}


def _check_sources(banks) -> None:
    for b in banks:
        if b.kind == "idx":
            for p in (b.images, b.labels):
                if not Path(p).is_file():
                    raise D.DataError(f"dataset file {p} not found")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    bank = D.synth_glyph_bank(args.classes, args.exemplars, args.size, args.bank_seed, args.jitter,
                              affine=args.affine)
    name = args.name or bank.name
    img, lbl = out / f"{name}-images-idx3-ubyte", out / f"{name}-labels-idx1-ubyte"
    D.write_idx(np.rint(bank.items * 255), bank.labels, img, lbl)
    _echo([img, lbl])
    return EXIT_OK


def cmd_train(args) -> int:
    manifest, _ = _manifest(args)
    out = _out_dir(args)
    cfg = manifest.dataset
    stage = manifest.pretrain if args.stage == "pretrain" else manifest.finetune
    if stage is None:
        raise CliError("manifest has no pretrain stage", EXIT_CONFIG)
    _check_sources([stage.bank])
    bank = stage.bank.load()
    seed = manifest.seed
    if args.init:
        model, hist = P.fine_tune(M.load_checkpoint(args.init), bank, cfg, stage.policy, stage.stop, seed,
                                  stage.batch_size, stage.samples_per_epoch)
    else:
        spec = M.preset(manifest.preset, bank.num_classes, input_shape=(cfg.channels, cfg.canvas_size, cfg.canvas_size))
        model = M.build(spec, seed)
        stream = D.BatchStream(bank, stage.policy, cfg, stage.batch_size, seed, stage.samples_per_epoch)
        model, hist = P.train_to_criterion(model, stream, stop=stage.stop)
    ckpt = M.save_checkpoint(model, out / "model.ckpt")
    hist_path = out / "history.json"
    doc = {"stage": args.stage, "bank": bank.name, "loss": hist.loss, "accuracy": hist.accuracy, "steps": hist.steps}
    doc.update(_provenance(args, manifest))
    hist_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"{args.stage}: {hist.epochs} epochs, final train accuracy "
          f"{hist.accuracy[-1] if hist.accuracy else float('nan'):.4f}")
    _echo([ckpt, hist_path])
    return EXIT_OK


def cmd_eval_grid(args) -> int:
    manifest, _ = _manifest(args)
    out = _out_dir(args)
    _check_sources([manifest.finetune.bank])
    bank = manifest.finetune.bank.load()
    model = M.load_checkpoint(args.checkpoint)
    n = args.grid or manifest.evaluation.grid
    heat = P.evaluate_grid(model, bank, manifest.dataset, n, manifest.evaluation.per_class)
    rec = P.RunRecord(manifest.hash, manifest.to_dict(), [manifest.seed],
                      [P.Repetition(0, manifest.seed, heat, normalized=float(P.normalized_accuracy(heat.mean, bank.num_classes)))],
                      None, None)
    paths = [R.write_csv(out / "heatmap.csv", R.HEATMAP_COLUMNS, R.heatmap_rows(rec)),
             R.write_pgm(P.interpolate_heatmap(heat, R.raster_size(n)), out / "heatmap.pgm")]
    print(f"grid mean raw accuracy {heat.mean:.4f}, normalized {rec.repetitions[0].normalized:.2f}")
    _echo(paths)
    return EXIT_OK


def cmd_cosine(args) -> int:
    manifest, _ = _manifest(args)
    out = _out_dir(args)
    _check_sources([manifest.finetune.bank])
    bank = manifest.finetune.bank.load()
    model = M.load_checkpoint(args.checkpoint)
    disp = P.horizontal_sweep(manifest.dataset, manifest.evaluation.cosine_steps)
    prof = P.cosine_profile(model, bank, manifest.dataset, disp, args.stage)
    rec = P.RunRecord(manifest.hash, manifest.to_dict(), [manifest.seed],
                      [P.Repetition(0, manifest.seed, profiles={args.stage: prof})], None, None)
    path = R.write_csv(out / "cosine.csv", R.COSINE_COLUMNS, R.cosine_rows(rec))
    print(f"cosine at max displacement {prof.mean[-1]:.4f}")
    _echo([path])
    return EXIT_OK


def _summary(record: P.RunRecord) -> str:
    ok = sum(r.ok for r in record.repetitions)
    if record.mean is None:
        return f"0/{len(record.repetitions)} repetitions succeeded"
    return (f"normalized accuracy {record.mean:.2f} +/- {record.std:.2f} "
            f"({ok}/{len(record.repetitions)} repetitions)")


def cmd_experiment(args) -> int:
    manifest, _ = _manifest(args)
    out = _out_dir(args)
    _check_sources([s.bank for s in (manifest.pretrain, manifest.finetune) if s is not None])
    record = P.run_experiment(manifest, jobs=args.jobs)
    paths = R.write_run_outputs(record, out, _provenance(args, manifest))
    for rep in record.failures:
        print(f"repetition {rep.index} (seed {rep.seed}) failed: {rep.error}", file=sys.stderr)
    print(_summary(record))
    _echo(paths)
    return EXIT_OK if record.mean is not None else EXIT_RUNTIME


def cmd_matrix(args) -> int:
    manifest, raw = _manifest(args)
    if not raw.get("matrix"):
        raise CliError(f"{args.manifest}: field 'matrix' is required for the matrix command", EXIT_CONFIG)
    out = _out_dir(args)
    pre = [P.BankSpec(**_bank_args(b)) for b in raw["matrix"]["banks"]]
    fin = [P.BankSpec(**_bank_args(b)) for b in raw["matrix"].get("finetune_banks", raw["matrix"]["banks"])]
    _check_sources(pre + fin)
    paths, cells = [], []
    for i, (p, f, m) in enumerate(P.matrix_manifests(manifest, pre, fin)):
        record = P.run_experiment(m, jobs=args.jobs)
        cell = P.MatrixCell(p, f, record)
        cells.append(cell)
        print(f"{p} -> {f}: {_summary(record)}")
        paths += R.write_run_outputs(record, out / f"cell{i:02d}", _provenance(args, m))
    paths += R.write_matrix(cells, out)
    _echo(paths)
    return EXIT_OK


def _bank_args(b: dict) -> dict:
    b = dict(b)
    if b.get("class_filter") is not None:
        b["class_filter"] = tuple(b["class_filter"])
    return b


def cmd_report(args) -> int:
    out = _out_dir(args)
    src = Path(args.run)
    if not src.is_file():
        raise D.DataError(f"run record {src} not found")
    try:
        doc = json.loads(src.read_text())
        record = P.record_from_dict(doc)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise D.DataError(f"{src} is not a run record: {exc}") from None
    paths = [R.write_csv(out / "heatmap.csv", R.HEATMAP_COLUMNS, R.heatmap_rows(record)),
             R.write_csv(out / "cosine.csv", R.COSINE_COLUMNS, R.cosine_rows(record))]
    grid = R.mean_grid(record)
    if grid is not None:
        paths.append(R.write_pgm(P.interpolate_heatmap(grid, R.raster_size(len(grid))), out / "heatmap.pgm"))
    print(f"{doc['manifest'].get('name') or src.parent.name}: {_summary(record)}")
    _echo(paths)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-o", "--out", help=f"output directory (default ${OUTPUT_ENV} or ./runs)")
    common.add_argument("--seed", type=int, help="replace the manifest's base seed")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="transinv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a procedural glyph bank as an IDX pair")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--exemplars", type=int, default=1)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--bank-seed", type=int, default=0)
    g.add_argument("--jitter", type=float, default=0.06)
    g.add_argument("--affine", type=float, default=0.0)
    g.add_argument("--name", default="")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one stage of a manifest and save a checkpoint")
    t.add_argument("manifest")
    t.add_argument("--stage", choices=("pretrain", "finetune"), default="pretrain")
    t.add_argument("--init", help="checkpoint to fine-tune from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-grid", parents=[common], help="location-grid heatmap of a checkpoint")
    e.add_argument("manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--grid", type=int)
    e.set_defaults(func=cmd_eval_grid)

    c = sub.add_parser("cosine", parents=[common], help="penultimate cosine profile of a checkpoint")
    c.add_argument("manifest")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--stage", default="finetuned", choices=("vanilla", "pretrained", "finetuned"))
    c.set_defaults(func=cmd_cosine)

    x = sub.add_parser("experiment", parents=[common], help="run a full manifest")
    x.add_argument("manifest")
    x.add_argument("--jobs", type=int, default=1, help="concurrent repetitions")
    x.set_defaults(func=cmd_experiment)

    m = sub.add_parser("matrix", parents=[common], help="pretrain x fine-tune matrix from a manifest's matrix section")
    m.add_argument("manifest")
    m.add_argument("--jobs", type=int, default=1)
    m.set_defaults(func=cmd_matrix)

    r = sub.add_parser("report", parents=[common], help="re-emit CSV and graymap from a stored run.json")
    r.add_argument("run")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not hasattr(args, "manifest"):
        args.manifest = None
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (R.ManifestError, M.SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.DataError, M.CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (P.TrainingError, ShapeError, ValueError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
