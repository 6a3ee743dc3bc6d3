"""Dense tensors with reverse-mode automatic differentiation.

The op set is deliberately small and closed: elementwise arithmetic,
sigmoid, clamped log, per-axis max, reductions, 2-D convolution with
optional bias, bilinear upsampling, and the batching helpers
``stack`` / ``index0`` / ``reshape``.  That set is exactly what the
segmentation losses and the toy encoder-decoder need; there is no
general broadcasting beyond tensor-scalar.

Gradients are accumulated by walking a topologically ordered tape of
the recorded ops in reverse.  Everything is backed by numpy buffers
(float64 by default, float32 permitted for training), and every op is
deterministic: running the same graph twice yields bit-identical
forward values and gradients.
"""

from __future__ import annotations

import math
import struct
import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatchError",
    "RankError",
    "no_grad",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "minimum",
    "neg",
    "absolute",
    "relu",
    "sigmoid",
    "safe_log",
    "axis_max",
    "reduce",
    "reduce_sum",
    "reduce_mean",
    "conv2d",
    "upsample_bilinear",
    "stack",
    "index0",
    "reshape",
    "save_tensor",
    "load_tensor",
    "LOG_EPS",
]

LOG_EPS = 1e-7
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
DEFAULT_DTYPE = np.float64

Scalar = Union[int, float]


class ShapeMismatchError(ValueError):
    """An op received operands whose shapes cannot be combined."""

    def __init__(self, op: str, left, right):
        super().__init__(
            f"{op}: operand shapes {tuple(left)} and {tuple(right)} do not match"
        )
        self.left = tuple(left)
        self.right = tuple(right)


class RankError(ValueError):
    """An op received a tensor of unsupported rank."""


_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    prev = _grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    """N-dimensional array of reals with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable | None, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values outside the autodiff graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode pass from this scalar; accumulates into ``.grad``."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar output, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        Tape(self).backward()

    # Operator sugar; scalars are allowed on either side.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )


class Tape:
    """Topologically ordered record of the ops feeding one scalar output.

    Parents always precede the nodes that consume them; the backward
    walk visits every recorded node exactly once, in reverse order.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order
        self.root = root

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self) -> None:
        root = self.root
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if vjp is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                vjp(g, parent.grad)


def _from_op(data: np.ndarray, parents: Sequence[Tensor], vjps: Sequence) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    return out


def _second_operand(op: str, a: Tensor, b):
    """Split a tensor-or-scalar right operand into (tensor|None, ndarray|scalar)."""
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeMismatchError(op, a.data.shape, b.data.shape)
        return b, b.data
    return None, a.data.dtype.type(b)


def add(a: Tensor, b) -> Tensor:
    bt, bd = _second_operand("add", a, b)
    def vjp(g, acc):
        acc += g
    parents, vjps = [a], [vjp]
    if bt is not None:
        parents.append(bt)
        vjps.append(vjp)
    return _from_op(a.data + bd, parents, vjps)


def sub(a: Tensor, b) -> Tensor:
    bt, bd = _second_operand("sub", a, b)
    def vjp_a(g, acc):
        acc += g
    def vjp_b(g, acc):
        acc -= g
    parents, vjps = [a], [vjp_a]
    if bt is not None:
        parents.append(bt)
        vjps.append(vjp_b)
    return _from_op(a.data - bd, parents, vjps)


def mul(a: Tensor, b) -> Tensor:
    bt, bd = _second_operand("mul", a, b)
    ad = a.data
    def vjp_a(g, acc):
        acc += g * bd
    def vjp_b(g, acc):
        acc += g * ad
    parents, vjps = [a], [vjp_a]
    if bt is not None:
        parents.append(bt)
        vjps.append(vjp_b)
    return _from_op(ad * bd, parents, vjps)


def div(a: Tensor, b) -> Tensor:
    bt, bd = _second_operand("div", a, b)
    out = a.data / bd
    def vjp_a(g, acc):
        acc += g / bd
    def vjp_b(g, acc):
        acc -= g * out / bd
    parents, vjps = [a], [vjp_a]
    if bt is not None:
        parents.append(bt)
        vjps.append(vjp_b)
    return _from_op(out, parents, vjps)


def minimum(a: Tensor, b) -> Tensor:
    """Elementwise min; the gradient follows the smaller operand, the
    first operand on exact ties."""
    bt, bd = _second_operand("min", a, b)
    take_a = a.data <= bd
    def vjp_a(g, acc):
        acc += g * take_a
    def vjp_b(g, acc):
        acc += g * ~take_a
    parents, vjps = [a], [vjp_a]
    if bt is not None:
        parents.append(bt)
        vjps.append(vjp_b)
    return _from_op(np.minimum(a.data, bd), parents, vjps)


def neg(a: Tensor) -> Tensor:
    def vjp(g, acc):
        acc -= g
    return _from_op(-a.data, [a], [vjp])


def absolute(a: Tensor) -> Tensor:
    """Elementwise |x|; subgradient 0 at the origin."""
    sign = np.sign(a.data)
    def vjp(g, acc):
        acc += g * sign
    return _from_op(np.abs(a.data), [a], [vjp])


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    def vjp(g, acc):
        acc += g * pos
    return _from_op(a.data * pos, [a], [vjp])


_ELEMENTWISE = {}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Uniform entry point for the elementwise kinds.

    Binary kinds (add, sub, mul, div, min) accept a tensor or scalar
    second operand; unary kinds (neg, abs, relu) take none.
    """
    try:
        fn, unary = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if unary:
        if b is not None:
            raise ValueError(f"elementwise {kind!r} takes no second operand")
        return fn(a)
    if b is None:
        raise ValueError(f"elementwise {kind!r} needs a second operand")
    return fn(a, b)


_ELEMENTWISE.update(
    {
        "add": (add, False),
        "sub": (sub, False),
        "mul": (mul, False),
        "div": (div, False),
        "min": (minimum, False),
        "neg": (neg, True),
        "abs": (absolute, True),
        "relu": (relu, True),
    }
)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, clamped into the open interval (0, 1).

    The clamp keeps downstream logs finite even when the input
    saturates; the gradient is y * (1 - y) of the clamped output.
    """
    x = a.data
    z = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    fi = np.finfo(x.dtype)
    y = np.clip(y, fi.tiny, np.nextafter(x.dtype.type(1), x.dtype.type(0)))
    def vjp(g, acc):
        acc += g * (y * (1.0 - y))
    return _from_op(y, [a], [vjp])


def safe_log(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """log(max(x, eps)); the gradient is 1/max(x, eps), zero where clamped."""
    if eps <= 0:
        raise ValueError("safe_log eps must be positive")
    x = a.data
    eps = x.dtype.type(eps)
    clamped = np.maximum(x, eps)
    def vjp(g, acc):
        acc += np.where(x >= eps, g / clamped, 0.0)
    return _from_op(np.log(clamped), [a], [vjp])


def axis_max(a: Tensor, axis: str) -> Tensor:
    """Max-projection of a 2-D map onto one axis.

    axis="rows" collapses the rows, giving the per-column max (1 x W);
    axis="cols" collapses the columns, giving the per-row max (H x 1).
    The gradient routes to the first (lowest-index) maximal element
    along the collapsed axis.
    """
    if a.data.ndim != 2:
        raise RankError(f"axis_max expects a 2-D tensor, got rank {a.data.ndim}")
    h, w = a.data.shape
    if axis == "rows":
        arg = a.data.argmax(axis=0)
        cols = np.arange(w)
        def vjp(g, acc):
            acc[arg, cols] += g[0]
        return _from_op(a.data.max(axis=0, keepdims=True), [a], [vjp])
    if axis == "cols":
        arg = a.data.argmax(axis=1)
        rows = np.arange(h)
        def vjp(g, acc):
            acc[rows, arg] += g[:, 0]
        return _from_op(a.data.max(axis=1, keepdims=True), [a], [vjp])
    raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")


def reduce(a: Tensor, kind: str) -> Tensor:
    """Collapse to a scalar: exact sum or arithmetic mean."""
    if kind == "sum":
        def vjp(g, acc):
            acc += g
        return _from_op(np.asarray(a.data.sum()), [a], [vjp])
    if kind == "mean":
        n = a.data.size
        if n == 0:
            raise ValueError("mean of an empty tensor")
        def vjp(g, acc):
            acc += g / n
        return _from_op(np.asarray(a.data.mean()), [a], [vjp])
    raise ValueError(f"reduce kind must be 'sum' or 'mean', got {kind!r}")


def reduce_sum(a: Tensor) -> Tensor:
    return reduce(a, "sum")


def reduce_mean(a: Tensor) -> Tensor:
    return reduce(a, "mean")


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """2-D cross-correlation with a square odd kernel.

    Accepts a single (C, H, W) map or a batch (N, C, H, W); weights are
    (C_out, C_in, k, k) with an optional per-channel bias.  Implemented
    as im2col plus one GEMM; the column buffer is kept for the weight
    gradient, the input gradient is scattered back with k*k slice-adds.
    """
    xd = x.data
    squeeze = xd.ndim == 3
    if squeeze:
        xd = xd[None]
    elif xd.ndim != 4:
        raise RankError(f"conv2d expects a 3-D or 4-D input, got rank {x.data.ndim}")
    if w.data.ndim != 4:
        raise RankError(f"conv2d weights must be 4-D, got rank {w.data.ndim}")
    n, cin, h, wd = xd.shape
    cout, cw, kh, kw = w.data.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d kernel must be square with odd size, got {kh}x{kw}")
    k = kh
    if cw != cin:
        raise ShapeMismatchError("conv2d channels", xd.shape, w.data.shape)
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    if pad not in (0, (k - 1) // 2):
        raise ValueError(f"conv2d pad must be 0 or {(k - 1) // 2} for k={k}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeMismatchError("conv2d bias", bias.data.shape, (cout,))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output would be empty for input {h}x{wd}, k={k}")

    # Channel-major column layout (cin*k*k, n*oh*ow): one transpose per
    # call, k*k axis-aligned slice copies, and a single GEMM for the
    # whole batch in each of the three directions.
    hp, wp = h + 2 * pad, wd + 2 * pad
    if pad:
        xpt = np.zeros((cin, n, hp, wp), dtype=xd.dtype)
        xpt[:, :, pad : pad + h, pad : pad + wd] = xd.transpose(1, 0, 2, 3)
    else:
        xpt = np.ascontiguousarray(xd.transpose(1, 0, 2, 3))
    cols = np.empty((cin, k, k, n, oh, ow), dtype=xd.dtype)
    for di in range(k):
        ie = di + stride * (oh - 1) + 1
        for dj in range(k):
            je = dj + stride * (ow - 1) + 1
            cols[:, di, dj] = xpt[:, :, di:ie:stride, dj:je:stride]
    cols2 = cols.reshape(cin * k * k, n * oh * ow)
    wmat = w.data.reshape(cout, cin * k * k)
    out = wmat @ cols2
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, oh, ow).transpose(1, 0, 2, 3))

    gcache: dict = {}

    def _gmat(g):
        if gcache.get("id") != id(g):
            g4 = g[None] if squeeze else g
            gcache["id"] = id(g)
            gcache["val"] = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(
                cout, n * oh * ow
            )
        return gcache["val"]

    def vjp_x(g, acc):
        dcols = (wmat.T @ _gmat(g)).reshape(cin, k, k, n, oh, ow)
        dxpt = np.zeros((cin, n, hp, wp), dtype=acc.dtype)
        for di in range(k):
            ie = di + stride * (oh - 1) + 1
            for dj in range(k):
                je = dj + stride * (ow - 1) + 1
                dxpt[:, :, di:ie:stride, dj:je:stride] += dcols[:, di, dj]
        acc4 = acc[None] if squeeze else acc
        acc4 += dxpt[:, :, pad : pad + h, pad : pad + wd].transpose(1, 0, 2, 3)

    def vjp_w(g, acc):
        acc += (_gmat(g) @ cols2.T).reshape(w.data.shape)

    parents = [x, w]
    vjps = [vjp_x, vjp_w]
    if bias is not None:
        def vjp_b(g, acc):
            g4 = g[None] if squeeze else g
            acc += g4.sum(axis=(0, 2, 3))
        parents.append(bias)
        vjps.append(vjp_b)
    return _from_op(out[0] if squeeze else out, parents, vjps)


@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    """Dense 1-D bilinear interpolation operator with half-pixel centers.

    Source coordinate for destination i is (i + 0.5) * n_in/n_out - 0.5,
    clamped to the borders; each output row holds the two (or one, at
    borders) interpolation weights.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        x0 = math.floor(src)
        t = src - x0
        i0 = min(max(x0, 0), n_in - 1)
        i1 = min(max(x0 + 1, 0), n_in - 1)
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m.astype(np.dtype(dtype_name))


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear upsampling of the trailing two axes; exact adjoint gradient."""
    xd = x.data
    if xd.ndim < 2:
        raise RankError(f"upsample_bilinear expects rank >= 2, got {xd.ndim}")
    h, w = xd.shape[-2], xd.shape[-1]
    if out_h < h or out_w < w:
        raise ValueError(
            f"upsample target {out_h}x{out_w} smaller than input {h}x{w}"
        )
    mh = _interp_matrix(h, out_h, xd.dtype.name)
    mw = _interp_matrix(w, out_w, xd.dtype.name)
    out = np.matmul(mh, xd @ mw.T)
    def vjp(g, acc):
        acc += np.matmul(mh.T, g) @ mw
    return _from_op(out, [x], [vjp])


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not tensors:
        raise ValueError("stack of no tensors")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise ShapeMismatchError("stack", shape, t.data.shape)
    data = np.stack([t.data for t in tensors])
    vjps = []
    for i in range(len(tensors)):
        def vjp(g, acc, i=i):
            acc += g[i]
        vjps.append(vjp)
    return _from_op(data, list(tensors), vjps)


def index0(x: Tensor, i: int) -> Tensor:
    """Select one slot along the leading axis."""
    if x.data.ndim < 1:
        raise RankError("index0 needs rank >= 1")
    n = x.data.shape[0]
    if not 0 <= i < n:
        raise IndexError(f"index0 index {i} out of range for leading extent {n}")
    def vjp(g, acc):
        acc[i] += g
    return _from_op(x.data[i].copy(), [x], [vjp])


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.data.size:
        raise ShapeMismatchError("reshape", x.data.shape, shape)
    in_shape = x.data.shape
    def vjp(g, acc):
        acc += g.reshape(in_shape)
    return _from_op(x.data.reshape(shape), [x], [vjp])


# ---------------------------------------------------------------------------
# Raw tensor file format, used for checkpoints and golden files:
# 8-byte magic "MXTENSOR", u8 dtype code (1=f32, 2=f64), u8 rank,
# little-endian u32 extents, then the little-endian payload.

_MAGIC = b"MXTENSOR"
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class TensorFileError(ValueError):
    """Malformed or truncated raw tensor file."""


def save_tensor(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise TensorFileError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise TensorFileError("rank exceeds format limit")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise TensorFileError(f"{path}: bad magic")
    off = len(_MAGIC)
    if len(blob) < off + 2:
        raise TensorFileError(f"{path}: truncated header")
    code, rank = struct.unpack_from("<BB", blob, off)
    off += 2
    if code not in _CODE_DTYPES:
        raise TensorFileError(f"{path}: unknown dtype code {code}")
    extents = []
    for _ in range(rank):
        if len(blob) < off + 4:
            raise TensorFileError(f"{path}: truncated extents")
        (e,) = struct.unpack_from("<I", blob, off)
        extents.append(e)
        off += 4
    dtype = _CODE_DTYPES[code]
    count = math.prod(extents) if extents else 1
    expected = off + count * dtype.itemsize
    if len(blob) != expected:
        raise TensorFileError(
            f"{path}: payload size {len(blob) - off} does not match extents {extents}"
        )
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
    return arr.reshape(extents).astype(dtype.newbyteorder("=")).copy()
