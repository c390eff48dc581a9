"""VGG-style model specs, Kaiming init, forward pass and checkpoints."""
from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class MaxPool:
    k: int = 2
    stride: int = 2


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    out_features: int


Layer = Union[Conv, MaxPool, ReLU, Flatten, Linear]
_LAYER_TYPES = {"conv": Conv, "maxpool": MaxPool, "relu": ReLU, "flatten": Flatten, "linear": Linear}


class SpecError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    channels: int
    height: int
    width: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()  # validates the chain

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape after every layer; raises SpecError on any inconsistency."""
        if min(self.channels, self.height, self.width, self.num_classes) < 1:
            raise SpecError("input geometry and class count must be positive")
        if not self.layers:
            raise SpecError("model has no layers")
        shape: tuple[int, ...] = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise SpecError(f"layer {i} (conv) needs a feature map, got shape {shape}")
                if layer.out_channels < 1 or layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
                    raise SpecError(f"layer {i} (conv) has invalid parameters {layer}")
                c, h, w = shape
                if layer.kernel > h + 2 * layer.padding or layer.kernel > w + 2 * layer.padding:
                    raise SpecError(f"layer {i} (conv) kernel {layer.kernel} exceeds padded input {h}x{w}")
                shape = (layer.out_channels,
                         T.conv_output_size(h, layer.kernel, layer.stride, layer.padding),
                         T.conv_output_size(w, layer.kernel, layer.stride, layer.padding))
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise SpecError(f"layer {i} (maxpool) needs a feature map, got shape {shape}")
                if layer.k < 1 or layer.stride < 1:
                    raise SpecError(f"layer {i} (maxpool) has invalid parameters {layer}")
                c, h, w = shape
                if layer.k > h or layer.k > w:
                    raise SpecError(f"layer {i} (maxpool) window {layer.k} exceeds input {h}x{w}")
                shape = (c, (h - layer.k) // layer.stride + 1, (w - layer.k) // layer.stride + 1)
            elif isinstance(layer, Flatten):
                if len(shape) != 3:
                    raise SpecError(f"layer {i} (flatten) applied twice or to a vector")
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Linear):
                if len(shape) != 1:
                    raise SpecError(f"layer {i} (linear) needs a flattened input, got shape {shape}")
                if layer.out_features < 1:
                    raise SpecError(f"layer {i} (linear) has invalid out_features {layer.out_features}")
                shape = (layer.out_features,)
            elif isinstance(layer, ReLU):
                pass
            else:
                raise SpecError(f"layer {i} has unknown type {type(layer).__name__}")
            out.append(shape)
        last = self.layers[-1]
        if not isinstance(last, Linear) or last.out_features != self.num_classes:
            raise SpecError(f"final layer must be linear with out_features == {self.num_classes}")
        self._penultimate_index()
        return out

    def _penultimate_index(self) -> int:
        linears = [i for i, l in enumerate(self.layers) if isinstance(l, Linear)]
        if len(linears) < 2:
            raise SpecError("spec needs a hidden linear layer before the classifier (penultimate layer)")
        i = linears[-2]
        if i + 1 < len(self.layers) and isinstance(self.layers[i + 1], ReLU):
            return i + 1
        return i

    @property
    def penultimate_index(self) -> int:
        """Index of the layer whose output is the penultimate representation."""
        return self._penultimate_index()

    @property
    def penultimate_width(self) -> int:
        return self.shapes()[self.penultimate_index][0]

    def with_classes(self, k: int) -> "ModelSpec":
        layers = list(self.layers[:-1]) + [Linear(k)]
        return ModelSpec(tuple(layers), self.channels, self.height, self.width, k)

    def with_input(self, channels: int, height: int, width: int) -> "ModelSpec":
        return ModelSpec(self.layers, channels, height, width, self.num_classes)

    def to_dict(self) -> dict:
        return {
            "input": [self.channels, self.height, self.width],
            "num_classes": self.num_classes,
            "layers": [{"type": _type_name(l), **asdict(l)} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            layers = []
            for entry in d["layers"]:
                entry = dict(entry)
                kind = entry.pop("type")
                layers.append(_LAYER_TYPES[kind](**entry))
            c, h, w = d["input"]
            return cls(tuple(layers), int(c), int(h), int(w), int(d["num_classes"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"malformed model spec: {exc!r}") from exc


def _type_name(layer) -> str:
    for name, cls in _LAYER_TYPES.items():
        if isinstance(layer, cls):
            return name
    raise SpecError(f"unknown layer {layer!r}")


_TOKEN = re.compile(r"^(?:conv(\d+)-(\d+)(?:/s(\d+))?(?:/p(\d+))?|pool(\d+)(?:/s(\d+))?|relu|flatten|fc(\d*))$")


def parse_layers(text: str, num_classes: int) -> tuple:
    """Parse a compact layer string such as ``"conv3-16 relu pool2 flatten fc256 relu fc"``.

    ``convK-C`` is a KxK conv with C output channels (stride 1, same padding
    unless ``/sN`` or ``/pN`` is given); ``poolK`` is KxK max pooling with
    stride K; a bare ``fc`` is the classifier with ``num_classes`` outputs.
    """
    layers = []
    for tok in text.replace(",", " ").split():
        m = _TOKEN.match(tok)
        if not m:
            raise SpecError(f"cannot parse layer token {tok!r}")
        if tok.startswith("conv"):
            k, c = int(m.group(1)), int(m.group(2))
            layers.append(Conv(c, k, int(m.group(3) or 1), int(m.group(4) if m.group(4) is not None else k // 2)))
        elif tok.startswith("pool"):
            k = int(m.group(5))
            layers.append(MaxPool(k, int(m.group(6) or k)))
        elif tok == "relu":
            layers.append(ReLU())
        elif tok == "flatten":
            layers.append(Flatten())
        else:
            layers.append(Linear(int(m.group(7)) if m.group(7) else num_classes))
    return tuple(layers)


VGG_MINI = "conv3-16 relu pool2 conv3-32 relu pool2 conv3-64 relu conv3-64 relu pool2 flatten fc256 relu fc"
VGG16 = ("conv3-64 relu conv3-64 relu pool2 "
         "conv3-128 relu conv3-128 relu pool2 "
         "conv3-256 relu conv3-256 relu conv3-256 relu pool2 "
         "conv3-512 relu conv3-512 relu conv3-512 relu pool2 "
         "conv3-512 relu conv3-512 relu conv3-512 relu pool2 "
         "flatten fc4096 relu fc4096 relu fc")
PRESETS = {"vgg-mini": (VGG_MINI, (1, 64, 64)), "vgg16": (VGG16, (3, 224, 224))}


def preset(name: str, num_classes: int = 10, layers: str | None = None,
           input_shape: tuple[int, int, int] | None = None) -> ModelSpec:
    """Named model spec. ``"custom"`` parses ``layers`` with :func:`parse_layers`."""
    if name == "custom":
        if layers is None or input_shape is None:
            raise SpecError("custom preset needs both `layers` and `input_shape`")
        text, geom = layers, input_shape
    elif name in PRESETS:
        text, geom = PRESETS[name]
        geom = input_shape or geom
    else:
        raise SpecError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS) + ['custom'])}")
    return ModelSpec(parse_layers(text, num_classes), *geom, num_classes)


class Model:
    """A ModelSpec plus named parameter tensors (``weight{i}``/``bias{i}`` per layer index)."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor] | None = None, seed: int | None = None,
                 dtype=None):
        self.spec = spec
        self.seed = seed
        dtype = dtype or T.default_dtype()
        if params is None:
            params = {name: Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
                      for name, shape in self.param_shapes().items()}
        expected = self.param_shapes()
        if list(params) != list(expected):
            raise SpecError(f"parameter names {list(params)} do not match spec {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise SpecError(f"parameter {name} has shape {params[name].shape}, spec needs {shape}")
        self.params = params

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        prev = self.spec.input_shape
        for i, (layer, out) in enumerate(zip(self.spec.layers, self.spec.shapes())):
            if isinstance(layer, Conv):
                shapes[f"weight{i}"] = (layer.out_channels, prev[0], layer.kernel, layer.kernel)
                shapes[f"bias{i}"] = (layer.out_channels,)
            elif isinstance(layer, Linear):
                shapes[f"weight{i}"] = (layer.out_features, prev[0])
                shapes[f"bias{i}"] = (layer.out_features,)
            prev = out
        return shapes

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "Model":
        return Model(self.spec, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()},
                     seed=self.seed)

    def astype(self, dtype) -> "Model":
        return Model(self.spec, {k: Tensor(v.data.astype(dtype), requires_grad=True)
                                 for k, v in self.params.items()}, seed=self.seed)

    def forward(self, batch, capture_penultimate: bool = False):
        return forward(self, batch, capture_penultimate)

    __call__ = forward


def kaiming_init(model: Model, seed: int) -> Model:
    """Draw weights from N(0, 2/fan_in) and zero the biases, in place."""
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if name.startswith("weight"):
            fan_in = int(np.prod(p.shape[1:]))
            p.data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=p.shape)
        else:
            p.data[...] = 0
        p.grad = None
    model.seed = seed
    return model


def build(spec: ModelSpec, seed: int, dtype=None) -> Model:
    return kaiming_init(Model(spec, dtype=dtype), seed)


def forward(model: Model, batch, capture_penultimate: bool = False):
    """Run the model on ``batch`` [N, C, H, W]; optionally also return penultimate activations."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    if x.data.ndim != 4 or x.shape[1:] != model.spec.input_shape:
        raise T.ShapeError(f"batch geometry {x.shape[1:] if x.data.ndim == 4 else x.shape} "
                           f"does not match model input {model.spec.input_shape}")
    pen_idx = model.spec.penultimate_index
    pen = None
    for i, layer in enumerate(model.spec.layers):
        if isinstance(layer, Conv):
            x = T.conv2d(x, model.params[f"weight{i}"], model.params[f"bias{i}"], layer.stride, layer.padding)
        elif isinstance(layer, MaxPool):
            x = T.maxpool2d(x, layer.k, layer.stride)
        elif isinstance(layer, ReLU):
            x = T.relu(x)
        elif isinstance(layer, Flatten):
            x = T.flatten(x)
        elif isinstance(layer, Linear):
            x = T.linear(x, model.params[f"weight{i}"], model.params[f"bias{i}"])
        if i == pen_idx:
            pen = x.data.copy()
    if capture_penultimate:
        return x, pen
    return x


def predict(model: Model, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per sample (first index on ties), evaluated in chunks."""
    out = []
    for s in range(0, len(batch), batch_size):
        out.append(forward(model, batch[s:s + batch_size]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


# Checkpoint layout (all integers little-endian):
#   8 bytes   magic b"TINVCKPT"
#   u32       format version
#   u32       length L of the UTF-8 JSON header
#   L bytes   header: {"version", "spec", "dtype", "seed", "params": [[name, shape], ...]}
#   raw little-endian parameter arrays, in header order
MAGIC = b"TINVCKPT"
VERSION = 1


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    dtype = np.dtype(model.dtype).newbyteorder("<")
    header = {
        "version": VERSION,
        "spec": model.spec.to_dict(),
        "dtype": dtype.str,
        "seed": model.seed,
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for v in model.params.values():
            f.write(np.ascontiguousarray(v.data, dtype=dtype).tobytes())
    return path


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:8]!r}, expected {MAGIC!r})")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version} unsupported (reader is version {VERSION})")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        dtype = np.dtype(header["dtype"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header in version {version} checkpoint: {exc}") from exc
    offset = 16 + hlen
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated parameter data at {name} (version {version})")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape)
        params[name] = Tensor(arr.astype(dtype.newbyteorder("=")), requires_grad=True)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes (version {version})")
    return Model(spec, params, seed=header.get("seed"))
