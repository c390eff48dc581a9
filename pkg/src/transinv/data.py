"""Item banks, placement policies and canvas composition."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class ItemBank:
    """Class-labelled square grayscale items with values in [0, 1]."""

    items: np.ndarray  # [M, S, S] float32
    labels: np.ndarray  # [M] int64, dense 0..K-1
    num_classes: int
    provenance: str = "synthetic"
    name: str = ""

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.items.ndim != 3 or self.items.shape[1] != self.items.shape[2]:
            raise DataError(f"items must be [M, S, S] squares, got {self.items.shape}")
        if len(self.items) != len(self.labels):
            raise DataError(f"{len(self.items)} items but {len(self.labels)} labels")
        present = np.bincount(self.labels, minlength=self.num_classes)
        if len(present) != self.num_classes or (present == 0).any():
            raise DataError(f"every class in 0..{self.num_classes - 1} needs at least one item")
        if self.items.size and (self.items.min() < 0 or self.items.max() > 1):
            raise DataError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def item_size(self) -> int:
        return self.items.shape[1]

    def of_class(self, k: int) -> np.ndarray:
        return self.items[self.labels == k]

    def resized(self, size: int) -> "ItemBank":
        if size == self.item_size:
            return self
        items = np.stack([resize_item(im, size) for im in self.items]) if len(self) else \
            np.zeros((0, size, size), np.float32)
        return ItemBank(items, self.labels, self.num_classes, self.provenance, self.name)


def _open(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim:]
    if len(body) < count:
        raise DataError(f"{path}: truncated IDX payload, header promises {count} bytes but {len(body)} present")
    return np.frombuffer(body, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path, labels_path, class_filter: Sequence[int] | None = None,
             transpose: bool = False, limit_per_class: int | None = None) -> ItemBank:
    """Read an MNIST-family IDX image/label pair into an ItemBank.

    With ``class_filter`` only the listed original labels are kept and are
    remapped, in the listed order, to 0..K-1. ``transpose`` swaps the pixel
    axes (EMNIST ships column-major glyphs).
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
    if len(images) != len(labels):
        raise DataError(f"count mismatch: {len(images)} images in {images_path} but {len(labels)} labels in {labels_path}")
    if images.shape[1] != images.shape[2]:
        raise DataError(f"{images_path}: items must be square, got {images.shape[1]}x{images.shape[2]}")
    classes = list(class_filter) if class_filter is not None else sorted(np.unique(labels).tolist())
    remap = {c: i for i, c in enumerate(classes)}
    keep = np.isin(labels, classes)
    if limit_per_class is not None:
        for c in classes:
            where = np.flatnonzero(labels == c)
            keep[where[limit_per_class:]] = False
    items = images[keep].astype(np.float32) / 255.0
    if transpose:
        items = items.transpose(0, 2, 1)
    dense = np.array([remap[c] for c in labels[keep]], dtype=np.int64)
    return ItemBank(np.ascontiguousarray(items), dense, len(classes), "idx-file", Path(images_path).stem)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images [M, H, W] and labels [M] as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


# ---------------------------------------------------------------- glyphs

def _render_strokes(segments: np.ndarray, width: float, size: int, supersample: int = 4) -> np.ndarray:
    """Rasterize thick line segments (coords in [0,1]) with box-filter antialiasing."""
    s = size * supersample
    c = (np.arange(s) + 0.5) / s
    py, px = np.meshgrid(c, c, indexing="ij")
    img = np.zeros((s, s), dtype=bool)
    for (x0, y0, x1, y1) in segments:
        dx, dy = x1 - x0, y1 - y0
        denom = dx * dx + dy * dy
        t = np.clip(((px - x0) * dx + (py - y0) * dy) / denom, 0, 1) if denom > 0 else 0.0
        d2 = (px - x0 - t * dx) ** 2 + (py - y0 - t * dy) ** 2
        img |= d2 <= (width / 2) ** 2
    return img.reshape(size, supersample, size, supersample).mean(axis=(1, 3)).astype(np.float32)


def _random_strokes(rng: np.random.Generator) -> np.ndarray:
    n = rng.integers(2, 5)
    pts = rng.uniform(0.12, 0.88, size=(n + 1, 2))
    segs = [np.r_[pts[i], pts[i + 1]] for i in range(n)]
    if rng.random() < 0.5:  # a detached stroke breaks the polyline topology
        segs.append(rng.uniform(0.12, 0.88, size=4))
    return np.array(segs)


def _overlap(a: np.ndarray, b: np.ndarray) -> float:
    ma, mb = a > 0.5, b > 0.5
    union = (ma | mb).sum()
    return float((ma & mb).sum() / union) if union else 1.0


def _affine(segs: np.ndarray, rng: np.random.Generator, mag: float) -> np.ndarray:
    ang = rng.normal(0, mag)
    sx, sy = np.exp(rng.normal(0, mag / 2, size=2))
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    a = rot @ np.array([[sx, rng.normal(0, mag / 2)], [0.0, sy]])
    pts = (segs.reshape(-1, 2) - 0.5) @ a.T + 0.5
    return pts.reshape(segs.shape)


def synth_glyph_bank(num_classes: int, exemplars_per_class: int = 1, size: int = 32, seed: int = 0,
                     jitter: float = 0.06, max_overlap: float = 0.35, name: str = "",
                     affine: float = 0.0) -> ItemBank:
    """Procedural stroke glyphs: one prototype per class, exemplars are jittered copies.

    Prototypes are resampled until every pair overlaps (IoU of the inked
    masks) by less than ``max_overlap``. With one exemplar per class the
    prototype itself is the only item. ``affine`` > 0 additionally applies a
    random rotation/scale/shear of that rough magnitude to each exemplar.
    """
    if num_classes < 2:
        raise DataError("a glyph bank needs at least 2 classes")
    rng = np.random.default_rng(seed)
    protos: list[np.ndarray] = []
    images: list[np.ndarray] = []
    width = 0.11
    attempts = 0
    while len(protos) < num_classes:
        attempts += 1
        if attempts > 1000 * num_classes:
            raise DataError(f"could not find {num_classes} separable glyphs (max_overlap={max_overlap})")
        segs = _random_strokes(rng)
        img = _render_strokes(segs, width, size)
        if img.sum() < 0.08 * size * size:
            continue
        if all(_overlap(img, images[j]) < max_overlap for j in range(len(images))):
            protos.append(segs)
            images.append(img)
    items, labels = [], []
    for k, segs in enumerate(protos):
        for e in range(exemplars_per_class):
            if e == 0:
                items.append(images[k])
            else:
                moved = segs
                if affine > 0:
                    moved = _affine(moved, rng, affine)
                moved = np.clip(moved + rng.normal(0, jitter, size=segs.shape), 0.05, 0.95)
                items.append(_render_strokes(moved, width * rng.uniform(0.8, 1.25), size))
            labels.append(k)
    return ItemBank(np.stack(items), np.array(labels), num_classes, "synthetic",
                    name or f"glyph{num_classes}x{exemplars_per_class}-s{seed}")


# ---------------------------------------------------------------- resize

def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    # half-pixel centres, edge-clamped
    m = np.zeros((dst, src), dtype=np.float64)
    pos = (np.arange(dst) + 0.5) * src / dst - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m[np.arange(dst), lo] += 1 - frac
    m[np.arange(dst), hi] += frac
    return m


def resize_item(item: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resample of a square image to ``size`` x ``size``."""
    item = np.asarray(item, dtype=np.float64)
    if item.shape == (size, size):
        return item.astype(np.float32)
    ry = _bilinear_matrix(item.shape[0], size)
    rx = _bilinear_matrix(item.shape[1], size)
    return np.clip(ry @ item @ rx.T, 0, 1).astype(np.float32)


# ---------------------------------------------------------------- placement

@dataclass(frozen=True)
class DatasetConfig:
    canvas_size: int = 224
    item_size: int = 50
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.item_size < self.canvas_size:
            raise DataError(f"item size {self.item_size} must be positive and smaller than canvas {self.canvas_size}")
        if self.channels not in (1, 3):
            raise DataError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def center_range(self) -> tuple[int, int]:
        return center_range(self.item_size, self.canvas_size)


DESK = DatasetConfig(canvas_size=64, item_size=16)


def center_range(item_size: int, canvas_size: int) -> tuple[int, int]:
    """Inclusive range of item centres that keep the item fully on the canvas."""
    half = item_size // 2
    return half, canvas_size - item_size + half


def leftmost_center(item_size: int, canvas_size: int) -> tuple[int, int]:
    return center_range(item_size, canvas_size)[0], canvas_size // 2


@dataclass(frozen=True)
class FixedLocation:
    center: tuple[int, int] | None = None  # None means leftmost-centred

    def resolve(self, item_size: int, canvas_size: int) -> tuple[int, int]:
        return tuple(self.center) if self.center is not None else leftmost_center(item_size, canvas_size)


@dataclass(frozen=True)
class FullyTranslated:
    pass


@dataclass(frozen=True)
class AreaSegregated:
    """3x3 grid of square areas centred as a block; class ``c`` lives in area ``c // per_area``."""

    area_size: int = 58
    grid: int = 3
    per_area: int = 2
    assignment: tuple | None = None  # explicit class -> area list

    def area_of(self, cls: int) -> int:
        if self.assignment is not None:
            if not 0 <= cls < len(self.assignment):
                raise DataError(f"class {cls} has no area assignment")
            return int(self.assignment[cls])
        area = cls // self.per_area
        if area >= self.grid * self.grid:
            raise DataError(f"class {cls} has no area assignment ({self.grid ** 2} areas x {self.per_area} classes)")
        return area

    def area_bounds(self, area: int, canvas_size: int) -> tuple[int, int, int, int]:
        """Inclusive (x0, x1, y0, y1) pixel bounds of an area."""
        origin = (canvas_size - self.grid * self.area_size) // 2
        row, col = divmod(area, self.grid)
        x0 = origin + col * self.area_size
        y0 = origin + row * self.area_size
        return x0, x0 + self.area_size - 1, y0, y0 + self.area_size - 1

    def validate(self, num_classes: int) -> None:
        counts = np.bincount([self.area_of(c) for c in range(num_classes)], minlength=self.grid ** 2)
        if counts.max() > 2 or len(counts) > self.grid ** 2:
            raise DataError(f"area assignment puts more than 2 classes in an area: {counts.tolist()}")


PlacementPolicy = Union[FixedLocation, FullyTranslated, AreaSegregated]


def sample_center(policy: PlacementPolicy, cls: int, item_size: int, canvas_size: int,
                  rng: np.random.Generator) -> tuple[int, int]:
    lo, hi = center_range(item_size, canvas_size)
    if hi < lo:
        raise DataError(f"item {item_size} does not fit canvas {canvas_size}")
    if isinstance(policy, FixedLocation):
        c = policy.resolve(item_size, canvas_size)
        if not (lo <= c[0] <= hi and lo <= c[1] <= hi):
            raise DataError(f"fixed centre {c} would crop a {item_size}px item on a {canvas_size}px canvas")
        return c
    if isinstance(policy, FullyTranslated):
        x, y = rng.integers(lo, hi + 1, size=2)
        return int(x), int(y)
    if isinstance(policy, AreaSegregated):
        x0, x1, y0, y1 = policy.area_bounds(policy.area_of(cls), canvas_size)
        x = int(rng.integers(x0, x1 + 1))
        y = int(rng.integers(y0, y1 + 1))
        return int(np.clip(x, lo, hi)), int(np.clip(y, lo, hi))
    raise DataError(f"unknown placement policy {policy!r}")


@dataclass
class CanvasSample:
    canvas: np.ndarray  # [C, H, W]
    label: int
    center: tuple[int, int]


def place(item: np.ndarray, center: tuple[int, int], canvas_size: int, out: np.ndarray | None = None) -> np.ndarray:
    """Paste ``item`` onto a black [H, W] canvas with its top-left at centre - floor(size/2)."""
    s = item.shape[0]
    x0 = center[0] - s // 2
    y0 = center[1] - s // 2
    if x0 < 0 or y0 < 0 or x0 + s > canvas_size or y0 + s > canvas_size:
        raise DataError(f"placing a {s}px item at {tuple(center)} would crop it on a {canvas_size}px canvas")
    canvas = np.zeros((canvas_size, canvas_size), dtype=np.float32) if out is None else out
    canvas[y0:y0 + s, x0:x0 + s] = item
    return canvas


def compose_canvas(item: np.ndarray, center: tuple[int, int], config: DatasetConfig, label: int = -1) -> CanvasSample:
    if item.shape[0] != config.item_size:
        item = resize_item(item, config.item_size)
    plane = place(item, center, config.canvas_size)
    canvas = np.repeat(plane[None], config.channels, axis=0)
    return CanvasSample(canvas, label, (int(center[0]), int(center[1])))


def compose_batch(items: np.ndarray, centers: Sequence[tuple[int, int]], config: DatasetConfig) -> np.ndarray:
    """Compose pre-resized items at the given centres into a [N, C, H, W] batch."""
    n = len(items)
    out = np.zeros((n, config.channels, config.canvas_size, config.canvas_size), dtype=np.float32)
    for i in range(n):
        place(items[i], centers[i], config.canvas_size, out[i, 0])
    if config.channels == 3:
        out[:, 1] = out[:, 0]
        out[:, 2] = out[:, 0]
    return out


class BatchStream:
    """Deterministic shuffled stream of canvas batches over an ItemBank.

    An epoch visits every bank item once in a fresh random order; when
    ``samples_per_epoch`` exceeds the bank size, further permutations are
    appended, each item getting an independently sampled placement.
    """

    def __init__(self, bank: ItemBank, policy: PlacementPolicy, config: DatasetConfig,
                 batch_size: int = 32, seed: int = 0, samples_per_epoch: int | None = None):
        self.bank = bank.resized(config.item_size)
        self.policy = policy
        self.config = config
        self.batch_size = batch_size
        self.samples_per_epoch = max(samples_per_epoch or len(bank), len(bank))
        self.rng = np.random.default_rng(seed)
        if isinstance(policy, AreaSegregated):
            policy.validate(bank.num_classes)

    def epoch_indices(self) -> np.ndarray:
        parts, total = [], 0
        while total < self.samples_per_epoch:
            parts.append(self.rng.permutation(len(self.bank)))
            total += len(self.bank)
        return np.concatenate(parts)[:self.samples_per_epoch]

    def epoch(self) -> Iterator[tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]]:
        idx = self.epoch_indices()
        cfg = self.config
        for s in range(0, len(idx), self.batch_size):
            sel = idx[s:s + self.batch_size]
            labels = self.bank.labels[sel]
            centers = [sample_center(self.policy, int(c), cfg.item_size, cfg.canvas_size, self.rng) for c in labels]
            yield compose_batch(self.bank.items[sel], centers, cfg), labels, centers

    def __iter__(self):
        return self.epoch()


def batch_stream(bank: ItemBank, policy: PlacementPolicy, config: DatasetConfig, batch_size: int = 32,
                 seed: int = 0, samples_per_epoch: int | None = None) -> BatchStream:
    return BatchStream(bank, policy, config, batch_size, seed, samples_per_epoch)
