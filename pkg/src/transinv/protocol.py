"""Training pipelines and the translation-invariance measurements."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .data import (AreaSegregated, BatchStream, DatasetConfig, FixedLocation, FullyTranslated, ItemBank,
                   PlacementPolicy, center_range, compose_batch, leftmost_center)
from .optim import Adam

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class StopCriterion:
    max_epochs: int = 50
    target_accuracy: float = 0.99


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    steps: int = 0

    @property
    def epochs(self) -> int:
        return len(self.loss)


def train_step(model: M.Model, x: np.ndarray, y: np.ndarray, opt: Adam) -> tuple[float, int]:
    model.zero_grad()
    logits = M.forward(model, x)
    loss = T.softmax_cross_entropy(logits, y)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {opt.t + 1}")
    T.backward(loss)
    opt.step(model.params)
    return value, int((logits.data.argmax(axis=1) == y).sum())


def train_to_criterion(model: M.Model, stream: BatchStream, optimizer: Adam | None = None,
                       stop: StopCriterion = StopCriterion()) -> tuple[M.Model, History]:
    """Train in place until an epoch's running accuracy reaches the target or epochs run out."""
    if stream.config.channels != model.spec.channels or stream.config.canvas_size != model.spec.height:
        raise T.ShapeError(f"stream geometry ({stream.config.channels}, {stream.config.canvas_size}) "
                           f"does not match model input {model.spec.input_shape}")
    optimizer = optimizer or Adam()
    hist = History()
    for epoch in range(stop.max_epochs):
        total_loss, correct, seen = 0.0, 0, 0
        for x, y, _ in stream.epoch():
            loss, hits = train_step(model, x, y, optimizer)
            total_loss += loss * len(y)
            correct += hits
            seen += len(y)
            hist.steps += 1
        hist.loss.append(total_loss / seen)
        hist.accuracy.append(correct / seen)
        log.debug("epoch %d loss %.4f acc %.4f", epoch, hist.loss[-1], hist.accuracy[-1])
        if hist.accuracy[-1] >= stop.target_accuracy:
            break
    model.zero_grad()
    return model, hist


def reinit_head(model: M.Model, num_classes: int, seed: int) -> M.Model:
    """Copy ``model`` with its classifier replaced by a fresh ``num_classes``-way layer."""
    if num_classes == model.spec.num_classes:
        return model.copy()
    spec = model.spec.with_classes(num_classes)
    fresh = M.build(spec, seed, dtype=model.dtype)
    params = {}
    for name, p in fresh.params.items():
        old = model.params.get(name)
        params[name] = T.Tensor(old.data.copy(), requires_grad=True) if old is not None and old.shape == p.shape else p
    return M.Model(spec, params, seed=model.seed)


def fine_tune(checkpoint, bank: ItemBank, config: DatasetConfig, policy: FixedLocation | None = None,
              stop: StopCriterion = StopCriterion(), seed: int = 0, batch_size: int = 32,
              samples_per_epoch: int | None = None, lr: float = 1e-3) -> tuple[M.Model, History]:
    """Continue training a checkpoint (Model or path) on a 1-location bank; all layers train."""
    base = M.load_checkpoint(checkpoint) if not isinstance(checkpoint, M.Model) else checkpoint
    if base.spec.channels != config.channels or base.spec.height != config.canvas_size:
        raise T.ShapeError(f"checkpoint input {base.spec.input_shape} incompatible with "
                           f"{config.channels}x{config.canvas_size}x{config.canvas_size} canvases")
    policy = policy or FixedLocation()
    if not isinstance(policy, FixedLocation):
        raise ValueError("fine-tuning uses a FixedLocation policy")
    model = reinit_head(base, bank.num_classes, seed)
    stream = BatchStream(bank, policy, config, batch_size, seed, samples_per_epoch)
    return train_to_criterion(model, stream, Adam(lr=lr), stop)


# ---------------------------------------------------------------- evaluation

@dataclass
class HeatmapResult:
    accuracy: np.ndarray  # [n, n], row = y index, col = x index
    counts: np.ndarray  # [n, n]
    xs: list[int]
    ys: list[int]
    per_class: np.ndarray | None = None  # [K, n, n]
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(self.accuracy.mean())

    def cell_of(self, center: tuple[int, int]) -> tuple[int, int]:
        """(row, col) of the grid node nearest to ``center``."""
        col = int(np.argmin(np.abs(np.asarray(self.xs) - center[0])))
        row = int(np.argmin(np.abs(np.asarray(self.ys) - center[1])))
        return row, col


def grid_centers(n: int, item_size: int, canvas_size: int) -> list[int]:
    """``n`` equally spaced integer centres spanning the no-crop range."""
    if n < 2:
        raise ValueError("grid needs n >= 2")
    lo, hi = center_range(item_size, canvas_size)
    return [int(v) for v in np.rint(np.linspace(lo, hi, n))]


def evaluate_grid(model, bank: ItemBank, config: DatasetConfig, n: int = 9,
                  per_class: bool = False, batch_size: int = 256) -> HeatmapResult:
    """Classify every bank item centred at every node of an n x n grid.

    ``model`` is a :class:`Model` or any callable mapping a [N, C, H, W]
    batch to [N, K] logits.
    """
    bank = bank.resized(config.item_size)
    coords = grid_centers(n, config.item_size, config.canvas_size)
    acc = np.zeros((n, n))
    counts = np.zeros((n, n), dtype=np.int64)
    k = bank.num_classes
    pc = np.zeros((k, n, n)) if per_class else None
    class_sizes = np.bincount(bank.labels, minlength=k)
    for r, y in enumerate(coords):
        for c, x in enumerate(coords):
            preds = []
            for s in range(0, len(bank), batch_size):
                batch = compose_batch(bank.items[s:s + batch_size], [(x, y)] * len(bank.items[s:s + batch_size]), config)
                logits = model(batch)
                logits = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
                preds.append(logits.argmax(axis=1))
            hit = np.concatenate(preds) == bank.labels
            acc[r, c] = hit.mean()
            counts[r, c] = len(hit)
            if per_class:
                pc[:, r, c] = np.bincount(bank.labels, weights=hit, minlength=k) / class_sizes
    return HeatmapResult(acc, counts, coords, coords, pc, {"bank": bank.name})


def normalized_accuracy(raw, num_classes: int):
    """Rescale accuracy so chance (1/K) maps to 0 and perfect to 100."""
    if num_classes < 2:
        raise ValueError(f"normalized accuracy needs K >= 2, got {num_classes}")
    chance = 1.0 / num_classes
    return 100.0 * (np.asarray(raw, dtype=np.float64) - chance) / (1.0 - chance) if np.ndim(raw) \
        else 100.0 * (raw - chance) / (1.0 - chance)


def interpolate_heatmap(result: HeatmapResult | np.ndarray, size: int) -> np.ndarray:
    """Bilinear raster over the grid; raster corners sit exactly on the corner nodes."""
    grid = np.asarray(result.accuracy if isinstance(result, HeatmapResult) else result, dtype=np.float64)
    if size < 2:
        raise ValueError("raster size must be >= 2")
    n_r, n_c = grid.shape

    def axis(n):
        u = np.arange(size) * (n - 1) / (size - 1)
        i0 = np.minimum(np.floor(u).astype(int), n - 2)
        return i0, u - i0

    r0, fr = axis(n_r)
    c0, fc = axis(n_c)
    a = grid[r0][:, c0]
    b = grid[r0][:, c0 + 1]
    c = grid[r0 + 1][:, c0]
    d = grid[r0 + 1][:, c0 + 1]
    fr, fc = fr[:, None], fc[None, :]
    top = a * (1 - fc) + b * fc
    bot = c * (1 - fc) + d * fc
    out = top * (1 - fr) + bot * fr
    return np.clip(out, grid.min(), grid.max())


# ---------------------------------------------------------------- cosine probes

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Cosine of two vectors; returns (0, True) when either vector is all zeros."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = float(a @ a), float(b @ b)
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    if np.array_equal(a, b):
        return 1.0, False
    return float(np.clip((a @ b) / math.sqrt(na * nb), -1.0, 1.0)), False


@dataclass
class CosineProfile:
    displacements: list[tuple[int, int]]
    mean: list[float]
    std: list[float]
    stage: str = ""
    bank: str = ""
    flagged: list[int] = field(default_factory=list)  # items with a zero activation vector somewhere

    def at(self, d: tuple[int, int]) -> float:
        return self.mean[self.displacements.index(tuple(d))]

    def to_dict(self) -> dict:
        return {"stage": self.stage, "bank": self.bank, "displacements": [list(d) for d in self.displacements],
                "mean": self.mean, "std": self.std, "flagged": self.flagged}


def horizontal_sweep(config: DatasetConfig, steps: int = 8) -> list[tuple[int, int]]:
    """(0,0) plus ``steps`` equally spaced rightward shifts up to the far no-crop edge."""
    lo, hi = center_range(config.item_size, config.canvas_size)
    return [(int(dx), 0) for dx in np.rint(np.linspace(0, hi - lo, steps + 1))]


def penultimate(model: M.Model, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(batch), batch_size):
        out.append(M.forward(model, batch[s:s + batch_size], capture_penultimate=True)[1])
    return np.concatenate(out)


def cosine_profile(model, bank: ItemBank, config: DatasetConfig,
                   displacements: Sequence[tuple[int, int]] | None = None, stage: str = "",
                   features=None) -> CosineProfile:
    """Penultimate-layer cosine similarity between leftmost-centred and displaced items.

    ``features`` overrides the activation extractor (a callable from a canvas
    batch to [N, P]); by default the model's penultimate layer is used.
    """
    bank = bank.resized(config.item_size)
    displacements = [tuple(int(v) for v in d) for d in (displacements or horizontal_sweep(config))]
    ref = leftmost_center(config.item_size, config.canvas_size)
    lo, hi = center_range(config.item_size, config.canvas_size)
    bad = [d for d in displacements if not (lo <= ref[0] + d[0] <= hi and lo <= ref[1] + d[1] <= hi)]
    if bad:
        raise ValueError(f"displacements {bad} move the item off the no-crop range [{lo}, {hi}] from {ref}")
    extract = features or (lambda b: penultimate(model, b))
    base = extract(compose_batch(bank.items, [ref] * len(bank), config))
    means, stds, flagged = [], [], set()
    for dx, dy in displacements:
        moved = extract(compose_batch(bank.items, [(ref[0] + dx, ref[1] + dy)] * len(bank), config))
        sims = []
        for i in range(len(bank)):
            s, zero = cosine_similarity(base[i], moved[i])
            if zero:
                flagged.add(i)
            sims.append(s)
        means.append(float(np.mean(sims)))
        stds.append(float(np.std(sims)))
    return CosineProfile(displacements, means, stds, stage, bank.name, sorted(flagged))


# ---------------------------------------------------------------- experiments

@dataclass(frozen=True)
class BankSpec:
    """Where a stage's items come from: a procedural glyph bank or an IDX pair on disk."""

    kind: str = "glyph"  # "glyph" | "idx"
    classes: int = 10
    exemplars: int = 1
    seed: int = 0
    size: int = 32
    jitter: float = 0.06
    affine: float = 0.0
    images: str | None = None
    labels: str | None = None
    class_filter: tuple[int, ...] | None = None
    limit_per_class: int | None = None
    transpose: bool = False
    name: str = ""

    @property
    def id(self) -> str:
        if self.name:
            return self.name
        if self.kind == "idx":
            return f"idx:{self.images}"
        return f"glyph{self.classes}x{self.exemplars}-s{self.seed}"

    def load(self) -> ItemBank:
        if self.kind == "idx":
            from .data import load_idx
            bank = load_idx(self.images, self.labels, self.class_filter, self.transpose, self.limit_per_class)
        elif self.kind == "glyph":
            from .data import synth_glyph_bank
            bank = synth_glyph_bank(self.classes, self.exemplars, self.size, self.seed, self.jitter,
                                    affine=self.affine)
        else:
            raise ValueError(f"unknown bank kind {self.kind!r}")
        bank.name = self.id
        return bank


def policy_from_dict(d: dict) -> PlacementPolicy:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "fixed":
        c = d.pop("center", None)
        return FixedLocation(tuple(c) if c is not None else None, **d)
    if kind == "fully-translated":
        return FullyTranslated(**d)
    if kind == "area-segregated":
        if d.get("assignment") is not None:
            d["assignment"] = tuple(d["assignment"])
        return AreaSegregated(**d)
    raise ValueError(f"unknown policy kind {kind!r}")


def policy_to_dict(p: PlacementPolicy) -> dict:
    if isinstance(p, FixedLocation):
        return {"kind": "fixed", "center": list(p.center) if p.center is not None else None}
    if isinstance(p, FullyTranslated):
        return {"kind": "fully-translated"}
    return {"kind": "area-segregated", "area_size": p.area_size, "grid": p.grid, "per_area": p.per_area,
            "assignment": list(p.assignment) if p.assignment is not None else None}


@dataclass(frozen=True)
class StageSpec:
    bank: BankSpec
    policy: PlacementPolicy = FixedLocation()
    stop: StopCriterion = StopCriterion()
    batch_size: int = 32
    samples_per_epoch: int | None = None


@dataclass(frozen=True)
class EvalSpec:
    grid: int = 9
    cosine_steps: int = 8
    per_class: bool = False


@dataclass(frozen=True)
class ExperimentManifest:
    """A pretrain (optional) -> fine-tune -> evaluate pipeline, repeated with seeds base+r."""

    finetune: StageSpec
    pretrain: StageSpec | None = None
    evaluation: EvalSpec = EvalSpec()
    repetitions: int = 5
    seed: int = 0
    preset: str = "vgg-mini"
    dataset: DatasetConfig = DatasetConfig(64, 16)
    name: str = ""

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.evaluation.grid < 2:
            raise ValueError(f"evaluation.grid must be >= 2, got {self.evaluation.grid}")
        if not isinstance(self.finetune.policy, FixedLocation):
            raise ValueError("finetune.policy must be fixed (the 1-location condition)")

    @property
    def vanilla(self) -> bool:
        return self.pretrain is None

    def with_seed(self, seed: int) -> "ExperimentManifest":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        def stage(s: StageSpec | None):
            if s is None:
                return None
            bank = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(s.bank).items()}
            return {"bank": bank, "policy": policy_to_dict(s.policy), "stop": asdict(s.stop),
                    "batch_size": s.batch_size, "samples_per_epoch": s.samples_per_epoch}

        return {"name": self.name, "preset": self.preset, "seed": self.seed, "repetitions": self.repetitions,
                "dataset": asdict(self.dataset), "pretrain": stage(self.pretrain),
                "finetune": stage(self.finetune), "evaluation": asdict(self.evaluation)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentManifest":
        def stage(s):
            if s is None:
                return None
            bank = dict(s["bank"])
            if bank.get("class_filter") is not None:
                bank["class_filter"] = tuple(bank["class_filter"])
            pol = s.get("policy", {"kind": "fixed"})
            return StageSpec(BankSpec(**bank), policy_from_dict(pol), StopCriterion(**s.get("stop", {})),
                             s.get("batch_size", 32), s.get("samples_per_epoch"))

        return cls(finetune=stage(d["finetune"]), pretrain=stage(d.get("pretrain")),
                   evaluation=EvalSpec(**d.get("evaluation", {})), repetitions=d.get("repetitions", 5),
                   seed=d.get("seed", 0), preset=d.get("preset", "vgg-mini"),
                   dataset=DatasetConfig(**d.get("dataset", {"canvas_size": 64, "item_size": 16})),
                   name=d.get("name", ""))

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Repetition:
    index: int
    seed: int
    heatmap: HeatmapResult | None = None
    profiles: dict[str, CosineProfile] = field(default_factory=dict)
    histories: dict[str, History] = field(default_factory=dict)
    normalized: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class RunRecord:
    manifest_hash: str
    manifest: dict
    seeds: list[int]
    repetitions: list[Repetition]
    mean: float | None
    std: float | None

    @property
    def failures(self) -> list[Repetition]:
        return [r for r in self.repetitions if not r.ok]

    def to_dict(self) -> dict:
        reps = []
        for r in self.repetitions:
            h = r.heatmap
            reps.append({
                "index": r.index, "seed": r.seed, "error": r.error, "normalized_accuracy": r.normalized,
                "heatmap": None if h is None else {
                    "xs": h.xs, "ys": h.ys, "accuracy": h.accuracy.tolist(), "counts": h.counts.tolist(),
                    "per_class": None if h.per_class is None else h.per_class.tolist(), "meta": h.meta},
                "profiles": {k: p.to_dict() for k, p in r.profiles.items()},
                "histories": {k: asdict(v) for k, v in r.histories.items()},
            })
        return {"manifest_hash": self.manifest_hash, "manifest": self.manifest, "seeds": self.seeds,
                "aggregate": {"mean_normalized_accuracy": self.mean, "std_normalized_accuracy": self.std,
                              "succeeded": sum(r.ok for r in self.repetitions)},
                "repetitions": reps}


def record_from_dict(doc: dict) -> RunRecord:
    """Inverse of :meth:`RunRecord.to_dict` (used to re-emit reports from a stored run.json)."""
    reps = []
    for r in doc["repetitions"]:
        h = r["heatmap"]
        heat = None if h is None else HeatmapResult(
            np.array(h["accuracy"], dtype=np.float64), np.array(h["counts"], dtype=np.int64), h["xs"], h["ys"],
            None if h["per_class"] is None else np.array(h["per_class"]), h["meta"])
        profiles = {k: CosineProfile([tuple(d) for d in p["displacements"]], p["mean"], p["std"], p["stage"],
                                     p["bank"], p["flagged"]) for k, p in r["profiles"].items()}
        hists = {k: History(**v) for k, v in r["histories"].items()}
        reps.append(Repetition(r["index"], r["seed"], heat, profiles, hists, r["normalized_accuracy"], r["error"]))
    agg = doc["aggregate"]
    return RunRecord(doc["manifest_hash"], doc["manifest"], doc["seeds"], reps,
                     agg["mean_normalized_accuracy"], agg["std_normalized_accuracy"])


def aggregate(values: Sequence[float]) -> tuple[float | None, float | None]:
    """Mean and population std (ddof=0); (None, None) if there is nothing to aggregate."""
    if not len(values):
        return None, None
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def run_repetition(manifest: ExperimentManifest, index: int, banks: dict | None = None) -> Repetition:
    """One seeded pass: init -> (pretrain) -> fine-tune -> heatmap, with cosine probes between stages."""
    seed = manifest.seed + index
    rep = Repetition(index, seed)
    cfg = manifest.dataset
    stage = "setup"
    try:
        banks = banks or load_banks(manifest)
        ft_bank = banks["finetune"]
        steps = manifest.evaluation.cosine_steps
        disp = horizontal_sweep(cfg, steps)
        k0 = banks["pretrain"].num_classes if manifest.pretrain else ft_bank.num_classes
        spec = M.preset(manifest.preset, k0, input_shape=(cfg.channels, cfg.canvas_size, cfg.canvas_size))
        model = M.build(spec, seed)
        stage = "vanilla-cosine"
        rep.profiles["vanilla"] = cosine_profile(model, ft_bank, cfg, disp, "vanilla")
        if manifest.pretrain is not None:
            stage = "pretrain"
            p = manifest.pretrain
            stream = BatchStream(banks["pretrain"], p.policy, cfg, p.batch_size, seed, p.samples_per_epoch)
            model, rep.histories["pretrain"] = train_to_criterion(model, stream, Adam(), p.stop)
            stage = "pretrained-cosine"
            rep.profiles["pretrained"] = cosine_profile(model, ft_bank, cfg, disp, "pretrained")
        stage = "finetune"
        f = manifest.finetune
        model, rep.histories["finetune"] = fine_tune(model, ft_bank, cfg, f.policy, f.stop, seed,
                                                     f.batch_size, f.samples_per_epoch)
        stage = "finetuned-cosine"
        rep.profiles["finetuned"] = cosine_profile(model, ft_bank, cfg, disp, "finetuned")
        stage = "evaluate"
        rep.heatmap = evaluate_grid(model, ft_bank, cfg, manifest.evaluation.grid, manifest.evaluation.per_class)
        rep.heatmap.meta.update({"stage": "finetuned", "repetition": index})
        rep.normalized = float(normalized_accuracy(rep.heatmap.mean, ft_bank.num_classes))
    except Exception as exc:  # recorded, not raised: other repetitions still run
        log.warning("repetition %d failed during %s: %s", index, stage, exc)
        rep.error = f"{stage}: {type(exc).__name__}: {exc}"
    return rep


def load_banks(manifest: ExperimentManifest) -> dict[str, ItemBank]:
    banks = {"finetune": manifest.finetune.bank.load()}
    if manifest.pretrain is not None:
        banks["pretrain"] = manifest.pretrain.bank.load()
    return banks


def _run_one(args):
    return run_repetition(*args)


def run_experiment(manifest: ExperimentManifest, jobs: int = 1) -> RunRecord:
    """Run every repetition (optionally in ``jobs`` worker processes) and aggregate in index order.

    Banks are loaded once up front, so a missing dataset fails before any training.
    """
    banks = load_banks(manifest)
    indices = range(manifest.repetitions)
    if jobs > 1 and manifest.repetitions > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, manifest.repetitions)) as pool:
            reps = list(pool.map(_run_one, [(manifest, i, banks) for i in indices]))
    else:
        reps = [run_repetition(manifest, i, banks) for i in indices]
    mean, std = aggregate([r.normalized for r in reps if r.ok])
    return RunRecord(manifest.hash, manifest.to_dict(), [r.seed for r in reps], reps, mean, std)


@dataclass
class MatrixCell:
    pretrain: str
    finetune: str
    record: RunRecord

    @property
    def diagonal(self) -> bool:
        return self.pretrain == self.finetune


def matrix_manifests(base: ExperimentManifest, pretrain_banks: Sequence[BankSpec],
                     finetune_banks: Sequence[BankSpec] | None = None) -> list[tuple[str, str, ExperimentManifest]]:
    """One manifest per (pretrain, fine-tune) pair; pretraining is fully translated unless ``base`` says otherwise."""
    finetune_banks = finetune_banks if finetune_banks is not None else pretrain_banks
    pre_template = base.pretrain or StageSpec(pretrain_banks[0], FullyTranslated())
    out = []
    for pb in pretrain_banks:
        for fb in finetune_banks:
            m = replace(base, pretrain=replace(pre_template, bank=pb), finetune=replace(base.finetune, bank=fb),
                        name=f"{pb.id}->{fb.id}")
            out.append((pb.id, fb.id, m))
    return out


def run_matrix(base: ExperimentManifest, pretrain_banks: Sequence[BankSpec],
               finetune_banks: Sequence[BankSpec] | None = None, jobs: int = 1) -> list[MatrixCell]:
    return [MatrixCell(p, f, run_experiment(m, jobs)) for p, f, m in matrix_manifests(base, pretrain_banks, finetune_banks)]
