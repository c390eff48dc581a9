"""Text and image artifacts: manifest loading, CSV tables, run archives and P5 graymaps.

All numbers are written with fixed dot-decimal formats so reruns are
byte-identical and no locale setting can introduce a decimal comma.
"""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np
import yaml

from .protocol import ExperimentManifest, MatrixCell, RunRecord, interpolate_heatmap

HEATMAP_COLUMNS = ("repetition", "seed", "row", "col", "x", "y", "accuracy", "count")
COSINE_COLUMNS = ("repetition", "seed", "stage", "dx", "dy", "mean", "std")
MATRIX_COLUMNS = ("pretrain", "finetune", "mean", "std", "succeeded", "diagonal")


class ManifestError(ValueError):
    """A manifest that fails to parse or validate; the message names the field and line."""


def schema() -> dict:
    return json.loads(resources.files("transinv").joinpath("manifest.schema.json").read_text())


def _node_at(node, path: Sequence) -> yaml.Node | None:
    """Walk a composed YAML node tree along a jsonschema error path; return the deepest node reached."""
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == key), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        else:
            nxt = None
        if nxt is None:
            break
        node = nxt
    return node


def _field(path: Sequence) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def parse_manifest(text: str, source: str = "<manifest>", base_dir: Path | None = None) -> dict:
    """Parse YAML text and validate it against the bundled schema; returns the plain dict."""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else "?"
        raise ManifestError(f"{source}:{line}: not valid YAML: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ManifestError(f"{source}:1: manifest must be a mapping")
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        path = list(err.absolute_path)
        node = _node_at(root, path)
        if err.validator == "additionalProperties" and isinstance(node, yaml.MappingNode):
            extra = [k for k, _ in node.value if k.value not in err.schema.get("properties", {})]
            if extra:  # point at the unexpected key itself
                path.append(extra[0].value)
                node = extra[0]
        line = node.start_mark.line + 1 if node is not None else 1
        raise ManifestError(f"{source}:{line}: field '{_field(path)}': {err.message}")
    if base_dir is not None:  # IDX paths are relative to the manifest file
        for stage in ("pretrain", "finetune"):
            bank = (data.get(stage) or {}).get("bank", {})
            for key in ("images", "labels"):
                if key in bank and not Path(bank[key]).is_absolute():
                    bank[key] = str((base_dir / bank[key]).resolve())
        for key in ("banks", "finetune_banks"):
            for bank in (data.get("matrix") or {}).get(key, []):
                for k in ("images", "labels"):
                    if k in bank and not Path(bank[k]).is_absolute():
                        bank[k] = str((base_dir / bank[k]).resolve())
    return data


def load_manifest(path) -> tuple[ExperimentManifest, dict]:
    """Read, validate and build a manifest; also returns the raw dict (for the optional matrix section)."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} not found")
    data = parse_manifest(path.read_text(), str(path), path.parent)
    try:
        manifest = ExperimentManifest.from_dict({k: v for k, v in data.items() if k != "matrix"})
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: {exc}") from None
    return manifest, data


# ---------------------------------------------------------------- CSV

def _fmt(v: float, digits: int = 6) -> str:
    return "nan" if v is None or not np.isfinite(v) else f"{v:.{digits}f}"


def heatmap_rows(record: RunRecord) -> list[list[str]]:
    rows = []
    for rep in record.repetitions:
        h = rep.heatmap
        if h is None:
            continue
        for r, y in enumerate(h.ys):
            for c, x in enumerate(h.xs):
                rows.append([str(rep.index), str(rep.seed), str(r), str(c), str(x), str(y),
                             _fmt(h.accuracy[r, c]), str(int(h.counts[r, c]))])
    return rows


def cosine_rows(record: RunRecord) -> list[list[str]]:
    rows = []
    for rep in record.repetitions:
        for stage in ("vanilla", "pretrained", "finetuned"):
            p = rep.profiles.get(stage)
            if p is None:
                continue
            for (dx, dy), m, s in zip(p.displacements, p.mean, p.std):
                rows.append([str(rep.index), str(rep.seed), stage, str(dx), str(dy), _fmt(m), _fmt(s)])
    return rows


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> Path:
    path = Path(path)
    lines = [",".join(header)] + [",".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="ascii", newline="")
    return path


def write_run_json(record: RunRecord, path, extra: dict | None = None) -> Path:
    doc = record.to_dict()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return Path(path)


def mean_grid(record: RunRecord) -> np.ndarray | None:
    """Cell-wise mean raw accuracy over the successful repetitions."""
    grids = [r.heatmap.accuracy for r in record.repetitions if r.heatmap is not None]
    return np.mean(grids, axis=0) if grids else None


def raster_size(n: int, per_cell: int = 8) -> int:
    """Raster side that puts every grid node exactly on a pixel."""
    return per_cell * (n - 1) + 1


# ---------------------------------------------------------------- P5 graymap

def quantize(raster: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(raster, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def write_pgm(raster: np.ndarray, path) -> Path:
    """8-bit binary graymap; accuracy 0 is black and 1 is white."""
    img = quantize(raster)
    if img.ndim != 2:
        raise ValueError(f"graymap needs a 2-d raster, got shape {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return Path(path)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"not a P5 graymap (magic {tokens[0]!r})")
    w, h, maxval = map(int, tokens[1:])
    if maxval != 255:
        raise ValueError(f"only 8-bit graymaps are supported, maxval {maxval}")
    data = raw[pos + 1:]
    if len(data) != w * h:
        raise ValueError(f"expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------- bundles

def write_run_outputs(record: RunRecord, out_dir, extra: dict | None = None) -> list[Path]:
    """run.json, heatmap.csv, cosine.csv and heatmap.pgm for one RunRecord."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_run_json(record, out / "run.json", extra),
             write_csv(out / "heatmap.csv", HEATMAP_COLUMNS, heatmap_rows(record)),
             write_csv(out / "cosine.csv", COSINE_COLUMNS, cosine_rows(record))]
    grid = mean_grid(record)
    if grid is not None:
        paths.append(write_pgm(interpolate_heatmap(grid, raster_size(len(grid))), out / "heatmap.pgm"))
    return paths


def write_matrix(cells: Sequence[MatrixCell], out_dir) -> list[Path]:
    """Long table with std and diagonal flags, plus a wide mean table (rows pretrain, columns fine-tune)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    long_rows = [[c.pretrain, c.finetune, _fmt(c.record.mean, 4), _fmt(c.record.std, 4),
                  str(sum(r.ok for r in c.record.repetitions)), "1" if c.diagonal else "0"] for c in cells]
    pres = list(dict.fromkeys(c.pretrain for c in cells))
    fins = list(dict.fromkeys(c.finetune for c in cells))
    table = {(c.pretrain, c.finetune): c for c in cells}

    def wide(attr):
        rows = []
        for p in pres:
            row = [p]
            for f in fins:
                cell = table.get((p, f))
                row.append(_fmt(getattr(cell.record, attr), 4) if cell else "")
            rows.append(row)
        return rows

    return [write_csv(out / "matrix_cells.csv", MATRIX_COLUMNS, long_rows),
            write_csv(out / "matrix_mean.csv", ["pretrain"] + fins, wide("mean")),
            write_csv(out / "matrix_std.csv", ["pretrain"] + fins, wide("std"))]
