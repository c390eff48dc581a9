"""Dense tensors with a reverse-mode autodiff tape and the CNN layer ops.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
the graph in reverse topological order and accumulates gradients.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPES = {"single": np.float32, "double": np.float64}
_default_dtype = np.float32
# when a list, relu/maxpool append their switch patterns (used to detect kink crossings)
_kink_log: list | None = None


class ShapeError(ValueError):
    pass


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    global _default_dtype
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    prev = _default_dtype
    _default_dtype = _DTYPES[mode]
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    """An n-d array plus the graph bookkeeping needed for backprop.

    ``grad`` is allocated lazily during :func:`backward`. ``op`` names the
    operation that produced the tensor (``"leaf"`` for inputs/parameters).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                               and data.dtype.kind == "f" else _default_dtype))
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # small elementwise algebra, same-shape only (no broadcasting)
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return tsum(self)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.op = op
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.shape != like.shape:
            raise ShapeError(f"shape mismatch {x.shape} vs {like.shape} (no broadcasting)")
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), "sum", (a,),
                 lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)
    return _make(np.maximum(x.data, 0), "relu", (x,), lambda g: (g * mask,))


def flatten(x: Tensor) -> Tensor:
    n = x.shape[0]
    return _make(x.data.reshape(n, -1), "flatten", (x,), lambda g: (g.reshape(x.shape),))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, "linear", (x, weight, bias), backward)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> contiguous (N, C*kh*kw, Ho*Wo) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def _correlate(xp: np.ndarray, wmat: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    return np.matmul(wmat, cols), cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, realized as im2col + GEMM."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input {x.shape} has {cin} channels but weight {weight.shape} expects {wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wmat = weight.data.reshape(cout, -1)
    out, cols = _correlate(xp, wmat, kh, kw, stride, ho, wo)
    out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        gflat = g.reshape(n, cout, ho * wo)
        gw = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gb = gflat.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            if stride == 1 and padding < kh and padding < kw:
                # full correlation of the output gradient with the flipped, channel-swapped kernel
                gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - padding, kh - 1 - padding),
                                (kw - 1 - padding, kw - 1 - padding)))
                wflip = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(cin, -1)
                gx = _correlate(gp, wflip, kh, kw, 1, h, w)[0].reshape(n, cin, h, w)
            else:
                dcols = np.matmul(wmat.T, gflat).reshape(n, cin, kh, kw, ho, wo)
                gxp = np.zeros(xp.shape, dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gw, gb

    return _make(out, "conv2d", (x, weight, bias), backward)


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max pooling; gradient goes to the first maximal element of each window."""
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ValueError(f"maxpool2d: k and stride must be positive, got k={k}, stride={stride}")
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d: window {k} larger than input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1

    def window(idx):
        i, j = divmod(idx, k)
        return (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))

    out = x.data[window(0)].copy()
    for idx in range(1, k * k):
        np.maximum(out, x.data[window(idx)], out=out)
    if _kink_log is not None:
        _kink_log.append(np.stack([x.data[window(i)] for i in range(k * k)]).argmax(axis=0))

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        # row-major scan: the first element equal to the max claims the gradient
        for idx in range(k * k):
            hit = (x.data[window(idx)] == out) & ~taken
            taken |= hit
            gx[window(idx)] += g * hit
        return (gx,)

    return _make(out, "maxpool2d", (x,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}); got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((logsum - z[rows, labels]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return ((g / n) * p,)

    return _make(loss, "softmax_cross_entropy", (logits,), backward)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every node reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones(loss.shape, dtype=loss.dtype)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.dtype).reshape(parent.shape)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int  # coordinates whose difference quotient straddled a ReLU/max-pool switch


def _eval_logged(f, data):
    global _kink_log
    _kink_log = []
    try:
        value = float(f(Tensor(data.copy())).data)
        return value, _kink_log
    finally:
        _kink_log = None


def grad_check_detail(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4,
                      samples: int | None = None, seed: int = 0, skip_kinks: bool = False) -> GradCheckResult:
    """Compare backprop against central differences, elementwise.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``. With ``samples`` set,
    only that many randomly chosen coordinates are differenced. With
    ``skip_kinks`` a coordinate is left out when any ReLU mask or max-pool
    winner differs between the ``x + eps`` and ``x - eps`` evaluations,
    since the difference quotient then spans a non-differentiable point;
    such a coordinate is first retried with a step of ``eps / 100``.
    """
    x = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    loss = f(x)
    backward(loss)
    analytic = x.grad.reshape(-1)
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if samples is not None and samples < flat.size:
        idx = np.sort(np.random.default_rng(seed).choice(flat.size, samples, replace=False))
    worst, checked, skipped = 0.0, 0, 0
    steps = (eps, eps * 1e-2) if skip_kinks else (eps,)
    for i in idx:
        orig = flat[i]
        num = None
        for h in steps:
            flat[i] = orig + h
            up, log_up = _eval_logged(f, x.data)
            flat[i] = orig - h
            down, log_down = _eval_logged(f, x.data)
            flat[i] = orig
            if not skip_kinks or all(np.array_equal(a, b) for a, b in zip(log_up, log_down)):
                num = (up - down) / (2 * h)
                break
        if num is None:
            skipped += 1
            continue
        a = float(analytic[i])
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
        checked += 1
    return GradCheckResult(worst, checked, skipped)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4,
               samples: int | None = None, seed: int = 0, skip_kinks: bool = False) -> float:
    """Max elementwise relative error between analytic and central-difference gradients."""
    return grad_check_detail(f, x, eps, samples, seed, skip_kinks).max_rel_error
