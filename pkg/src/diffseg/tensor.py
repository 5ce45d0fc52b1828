"""Dense N-d arrays with tape-free reverse-mode differentiation.

Every differentiable operation is a small function ``fn(*arrays) -> (out, vjp)``.
The output tensor keeps references to its parents, the vector-Jacobian
product closure, and ``fn`` itself so that a recorded graph can be replayed
from its leaves.
"""

from __future__ import annotations

import contextlib
import io
import json
import threading
import zipfile
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_state = threading.local()


class DomainError(ValueError):
    """Raised when an elementwise op is evaluated outside its domain."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording a graph (per thread)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_fn", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._fn = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{grad})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype.kind == "f":
        dtype = x.dtype
    return Tensor(np.asarray(x), dtype=dtype or DEFAULT_DTYPE)


def _apply(op: str, fn: Callable, *parents: Tensor) -> Tensor:
    out, vjp = fn(*(p.data for p in parents))
    t = Tensor.__new__(Tensor)
    t.data = out
    t.op = op
    t.name = None
    t._fn = fn
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._vjp = vjp
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(op: str, a, b, forward, grads) -> Tensor:
    a_is_t, b_is_t = isinstance(a, Tensor), isinstance(b, Tensor)
    ref = a if a_is_t else b
    if not a_is_t:
        a = Tensor(np.asarray(a, dtype=ref.dtype), dtype=ref.dtype)
    if not b_is_t:
        b = Tensor(np.asarray(b, dtype=ref.dtype), dtype=ref.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None

    def fn(x, y):
        out = forward(x, y)

        def vjp(g):
            gx, gy = grads(g, x, y, out)
            return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

        return out, vjp

    return _apply(op, fn, a, b)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y, o: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y, o: (g, -g))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y, o: (g * y, g * x))


def div(a, b) -> Tensor:
    return _binary("div", a, b, np.divide, lambda g, x, y, o: (g / y, -g * o / y))


def _unary(op: str, x: Tensor, forward, backward) -> Tensor:
    x = as_tensor(x)

    def fn(a):
        out = forward(a)
        return out, lambda g: (backward(g, a, out),)

    return _apply(op, fn, x)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant; ``scale(x, 1.0)`` returns the same values."""
    x = as_tensor(x)
    c = x.dtype.type(c)
    return _unary("scale", x, lambda a: a * c, lambda g, a, o: g * c)


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    def backward(g, a, o):
        mask = np.ones_like(a, dtype=bool)
        if lo is not None:
            mask &= a >= lo
        if hi is not None:
            mask &= a <= hi
        return g * mask

    return _unary("clamp", x, lambda a: np.clip(a, lo, hi), backward)


def exp(x: Tensor) -> Tensor:
    return _unary("exp", x, np.exp, lambda g, a, o: g * o)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive input")
    return _unary("log", x, np.log, lambda g, a, o: g / a)


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative input")
    return _unary("sqrt", x, np.sqrt, lambda g, a, o: g * 0.5 / o)


def silu(x: Tensor) -> Tensor:
    def forward(a):
        return a / (1.0 + np.exp(-a))

    def backward(g, a, o):
        s = 1.0 / (1.0 + np.exp(-a))
        return g * (s + o * (1.0 - s))

    return _unary("silu", x, forward, backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity whose output is detached from the graph."""
    x = as_tensor(x)
    out = Tensor(x.data, dtype=x.dtype)
    out.op = "stop_gradient"
    return out


# ---------------------------------------------------------------- structural


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axis = tuple(_norm_axis(a, x.ndim) for a in np.atleast_1d(axis))

    def fn(a):
        out = np.sum(a, axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

        return np.asarray(out, dtype=a.dtype), vjp

    return _apply("sum", fn, x)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        n = int(np.prod([x.shape[_norm_axis(a, x.ndim)] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)

    def fn(a):
        return a.reshape(shape), lambda g: (g.reshape(a.shape),)

    return _apply("reshape", fn, x)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(_norm_axis(a, x.ndim) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"invalid permutation {axes}")
    inverse = tuple(np.argsort(axes))

    def fn(a):
        return a.transpose(axes), lambda g: (g.transpose(inverse),)

    return _apply("transpose", fn, x)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = _norm_axis(axis, ref.ndim)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ValueError(f"concat: mismatched shapes {ref.shape} and {t.shape} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def fn(*arrays):
        out = np.concatenate(arrays, axis=axis)

        def vjp(g):
            idx = [slice(None)] * g.ndim
            parts = []
            for lo, hi in zip(bounds[:-1], bounds[1:]):
                idx[axis] = slice(lo, hi)
                parts.append(g[tuple(idx)])
            return tuple(parts)

        return out, vjp

    return _apply("concat", fn, *tensors)


def upsample2x(x: Tensor, axes: tuple[int, int] = (-2, -1)) -> Tensor:
    """Nearest-neighbour ×2 upsampling along two adjacent spatial axes."""
    x = as_tensor(x)
    a0, a1 = (_norm_axis(a, x.ndim) for a in axes)
    if a1 != a0 + 1:
        raise ValueError("upsample axes must be adjacent")

    def fn(a):
        out = a.repeat(2, axis=a0).repeat(2, axis=a1)

        def vjp(g):
            s = g.shape
            folded = g.reshape(s[:a0] + (s[a0] // 2, 2, s[a1] // 2, 2) + s[a1 + 1 :])
            return (folded.sum(axis=(a0 + 1, a0 + 3)),)

        return out, vjp

    return _apply("upsample2x", fn, x)


def downsample2x(x: Tensor, axes: tuple[int, int] = (-2, -1)) -> Tensor:
    """Stride-2 nearest subsampling along two spatial axes."""
    x = as_tensor(x)
    a0, a1 = (_norm_axis(a, x.ndim) for a in axes)
    index = [slice(None)] * x.ndim
    index[a0] = index[a1] = slice(None, None, 2)
    index = tuple(index)

    def fn(a):
        def vjp(g):
            full = np.zeros_like(a)
            full[index] = g
            return (full,)

        return np.ascontiguousarray(a[index]), vjp

    return _apply("downsample2x", fn, x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(x, y):
        out = np.matmul(x, y)

        def vjp(g):
            gx = np.matmul(g, np.swapaxes(y, -1, -2))
            gy = np.matmul(np.swapaxes(x, -1, -2), g)
            return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

        return out, vjp

    return _apply("matmul", fn, a, b)


# --------------------------------------------------------------- convolution


def _conv_out(n: int, k: int, stride: int, pad_lo: int, pad_hi: int) -> int:
    return (n + pad_lo + pad_hi - k) // stride + 1


def _same_pads(n: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Rows ``[N*oh*ow, kh*kw*C]`` of a padded channels-last ``[N, H, W, C]`` array."""
    n, c = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same", layout: str = "NCHW") -> Tensor:
    """2-d cross-correlation of ``x`` with ``w[O,C,kh,kw]``.

    ``layout`` selects ``x[N,C,H,W]`` (default) or channels-last ``x[N,H,W,C]``;
    the output uses the same layout. Channels-last avoids two transposes per
    call and is what the U-net uses internally.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects a rank-4 input and w[O,C,kh,kw]")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if layout == "NCHW":
        return transpose(conv2d(transpose(x, (0, 2, 3, 1)), w, stride, padding, "NHWC"), (0, 3, 1, 2))
    if layout != "NHWC":
        raise ValueError(f"unknown layout {layout!r}")
    n, h, wd, c = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {cw}")
    if padding == "same":
        ph, pw = _same_pads(h, kh, stride), _same_pads(wd, kw, stride)
    elif padding == "valid":
        ph, pw = (0, 0), (0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    hp, wp = h + sum(ph), wd + sum(pw)
    if hp < kh or wp < kw:
        raise ValueError("kernel larger than padded input")
    oh, ow = _conv_out(h, kh, stride, *ph), _conv_out(wd, kw, stride, *pw)
    pointwise = kh == kw == 1 and stride == 1 and not any(ph + pw)

    def fn(xa, wa):
        if pointwise:
            rows = xa.reshape(n * h * wd, c)
        else:
            xp = np.pad(xa, ((0, 0), ph, pw, (0, 0))) if any(ph + pw) else xa
            rows = _im2col(xp, kh, kw, stride, oh, ow)
        wmat = wa.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
        out = (rows @ wmat).reshape(n, oh, ow, o)

        def vjp(g):
            gmat = g.reshape(n * oh * ow, o)
            gw = (rows.T @ gmat).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
            if pointwise:
                return (gmat @ wmat.T).reshape(xa.shape), np.ascontiguousarray(gw)
            # input gradient = correlation of the stride-dilated output
            # gradient with the flipped, channel-swapped kernel
            dh, dw = stride * (oh - 1) + 1, stride * (ow - 1) + 1
            gd = np.zeros((n, dh + 2 * (kh - 1), dw + 2 * (kw - 1), o), dtype=g.dtype)
            gd[:, kh - 1 : kh - 1 + dh : stride, kw - 1 : kw - 1 + dw : stride] = g
            gh, gwid = dh + kh - 1, dw + kw - 1
            wflip = wa[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * o, c)
            gxp = (_im2col(gd, kh, kw, 1, gh, gwid) @ wflip).reshape(n, gh, gwid, c)
            if gh < hp or gwid < wp:
                gxp = np.pad(gxp, ((0, 0), (0, hp - gh), (0, wp - gwid), (0, 0)))
            gx = gxp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + wd]
            return np.ascontiguousarray(gx), np.ascontiguousarray(gw)

        return out, vjp

    return _apply("conv2d", fn, x, w)


# ---------------------------------------------------------------- nonlinear


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise ValueError("softmax over a zero-length axis")

    def fn(a):
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        out = e / e.sum(axis=axis, keepdims=True)

        def vjp(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return out, vjp

    return _apply("softmax", fn, x)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over a zero-length axis")

    def fn(a):
        shifted = a - a.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

        def vjp(g):
            return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

        return out, vjp

    return _apply("log_softmax", fn, x)


def layer_norm(x: Tensor, axis=-1, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalisation over ``axis`` (no affine part)."""
    x = as_tensor(x)
    axes = tuple(_norm_axis(a, x.ndim) for a in np.atleast_1d(axis))
    m = int(np.prod([x.shape[a] for a in axes]))

    def fn(a):
        mu = a.mean(axis=axes, keepdims=True)
        xc = a - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
        out = xc * inv

        def vjp(g):
            gsum = g.sum(axis=axes, keepdims=True)
            gdot = (g * out).sum(axis=axes, keepdims=True)
            return ((inv / m) * (m * g - gsum - out * gdot),)

        return out.astype(a.dtype, copy=False), vjp

    return _apply("layer_norm", fn, x)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over ``[..., L, D]`` inputs."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    scores = scale(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / np.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ------------------------------------------------------------------ backward


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``root`` with respect to leaves.

    Returns a mapping from leaf tensor to gradient array. When ``wrt`` is
    given, every tensor in it appears in the result, with zeros for leaves
    the root does not depend on.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    result = {n: grads.get(id(n), np.zeros_like(n.data)) for n in order if n.is_leaf and n.requires_grad}
    if wrt is not None:
        result = {n: grads.get(id(n), np.zeros_like(n.data)) if n.requires_grad else np.zeros_like(n.data) for n in wrt}
    return result


@dataclass
class Record:
    """Topologically ordered view of the graph behind one root."""

    nodes: list[Tensor]

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def parent_ids(self) -> list[tuple[int, ...]]:
        index = {id(n): i for i, n in enumerate(self.nodes)}
        return [tuple(index[id(p)] for p in n._parents) for n in self.nodes]

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from its parents' current values."""
        values: dict[int, np.ndarray] = {}
        out = []
        for n in self.nodes:
            if n.is_leaf:
                values[id(n)] = n.data
            else:
                values[id(n)] = n._fn(*(values[id(p)] for p in n._parents))[0]
            out.append(values[id(n)])
        return out


def record(root: Tensor) -> Record:
    return Record(_topological(root))


# --------------------------------------------------------------- checkpoints

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, params: dict[str, Tensor | np.ndarray]) -> None:
    """Write a flat archive of little-endian float32 entries plus a JSON manifest.

    Entry timestamps are fixed so identical parameters give identical bytes.
    """
    manifest = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            manifest.append({"name": name, "shape": list(arr.shape)})
            zf.writestr(zipfile.ZipInfo(f"{name}.bin", _ZIP_DATE), arr.astype("<f4").tobytes())
        zf.writestr(zipfile.ZipInfo("manifest.json", _ZIP_DATE), json.dumps(manifest, indent=1))


def load_checkpoint(path, dtype=DEFAULT_DTYPE) -> dict[str, Tensor]:
    params = {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for entry in manifest:
            raw = np.frombuffer(zf.read(f"{entry['name']}.bin"), dtype="<f4")
            params[entry["name"]] = Tensor(raw.reshape(entry["shape"]).astype(dtype), requires_grad=True)
    return params


def checkpoint_bytes(params: dict[str, Tensor]) -> bytes:
    buf = io.BytesIO()
    save_checkpoint(buf, params)
    return buf.getvalue()
