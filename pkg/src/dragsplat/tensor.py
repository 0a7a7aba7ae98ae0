"""Dense tensors with reverse-mode automatic differentiation.

Small numpy-backed engine: every primitive records its inputs and a
vector-Jacobian closure on an implicit tape (the node graph), and
``backward`` replays the tape in reverse topological order. Values are
float32 by default; gradient-check tests run everything in float64.

Only the primitives needed downstream exist here. Broadcasting follows
numpy rules (the gradient is reduced back onto each operand's shape);
anything fancier is out of scope.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / tracking)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjps = ()
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing ------------------------------------------------------

    def _record(self, op, parents, vjps):
        """Attach provenance if recording is on and any parent needs grads."""
        if _grad_enabled and any(p.requires_grad for p in parents):
            self.requires_grad = True
            self._parents = tuple(parents)
            self._vjps = tuple(vjps)
            self._op = op
        return self

    def backward(self):
        """Populate ``.grad`` on every reachable leaf with requires_grad.

        The loss must be scalar. Visits nodes in reverse topological order;
        repeated runs on the same graph are bit-identical.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _pair(a, b):
    """Coerce the operands of a binary op; bare python scalars adopt the
    other side's dtype instead of promoting everything to float64."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def gradients(loss: Tensor, leaves) -> dict:
    """Gradient map for the given leaves; leaves missing from the graph get zeros."""
    for leaf in leaves:
        leaf.zero_grad()
    loss.backward()
    return {id(l): (l.grad if l.grad is not None else np.zeros_like(l.data)) for l in leaves}


# -- helpers ------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to an operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# -- elementwise primitives ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data, "add")
    out = Tensor(a.data + b.data)
    return out._record(
        "add",
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data, "sub")
    out = Tensor(a.data - b.data)
    return out._record(
        "sub",
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data, "mul")
    out = Tensor(a.data * b.data)
    return out._record(
        "mul",
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data, "div")
    out = Tensor(a.data / b.data)
    return out._record(
        "div",
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return out._record("neg", (a,), (lambda g: -g,))


def texp(a) -> Tensor:
    # vjp closures capture plain arrays, never the output Tensor, so a
    # spent graph frees by refcount alone (no gc cycles holding big arrays)
    a = as_tensor(a)
    val = np.exp(a.data)
    out = Tensor(val)
    return out._record("exp", (a,), (lambda g: g * val,))


def tlog(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return out._record("log", (a,), (lambda g: g / a.data,))


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    val = np.sqrt(a.data)
    out = Tensor(val)
    return out._record("sqrt", (a,), (lambda g: g * (0.5 / val),))


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data**p)
    return out._record("pow", (a,), (lambda g: g * p * a.data ** (p - 1),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s)
    return out._record("sigmoid", (a,), (lambda g: g * s * (1.0 - s),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return out._record("relu", (a,), (lambda g: g * (a.data > 0),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * s)

    def vjp(g):
        return g * (s * (1.0 + a.data * (1.0 - s)))

    return out._record("silu", (a,), (vjp,))


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data, requires_grad=False)


# -- reductions ----------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.data.shape).copy()

    return out._record("sum", (a,), (vjp,))


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size / out.data.size

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, a.data.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2 / n, a.data.shape).copy()

    return out._record("mean", (a,), (vjp,))


# -- shape ops -----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return out._record("reshape", (a,), (lambda g: g.reshape(a.data.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.transpose(axes))
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return out._record("transpose", (a,), (lambda g: g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]

        return vjp

    return out._record("concat", tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def tslice(a, index) -> Tensor:
    """Basic (slice/int-free) indexing; ``index`` is a tuple of slices."""
    a = as_tensor(a)
    out = Tensor(a.data[index])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return full

    return out._record("slice", (a,), (vjp,))


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on each side."""
    a = as_tensor(a)
    if pad == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = Tensor(np.pad(a.data, width))
    sl = (Ellipsis, slice(pad, -pad), slice(pad, -pad))
    return out._record("pad2d", (a,), (lambda g: g[sl],))


# -- matmul / softmax ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)

    return out._record("matmul", (a, b), (vjp_a, vjp_b))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def vjp(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return p * (g - dot)

    return out._record("softmax", (a,), (vjp,))


# -- losses ----------------------------------------------------------------------


def l1(a, b) -> Tensor:
    """Sum of absolute differences (the paper's patch and mask penalties)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "l1")
    diff = a.data - b.data
    out = Tensor(np.abs(diff).sum())
    sign = np.sign(diff)
    return out._record(
        "l1",
        (a, b),
        (
            lambda g: _unbroadcast(g * sign, a.data.shape),
            lambda g: _unbroadcast(-g * sign, b.data.shape),
        ),
    )


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mse")
    diff = a.data - b.data
    out = Tensor(np.mean(diff * diff))
    scale = 2.0 / diff.size

    def vjp_a(g):
        return _unbroadcast(g * scale * diff, a.data.shape)

    def vjp_b(g):
        return _unbroadcast(-g * scale * diff, b.data.shape)

    return out._record("mse", (a, b), (vjp_a, vjp_b))


# -- conv / resampling -------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """(N,C,H,W) -> (N, C*kh*kw, L) patch matrix plus output spatial dims."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N,C,oh,ow,kh,kw)
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int):
    """Adjoint of _im2col: scatter-add patches back onto the input."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        ys = slice(i, i + stride * oh, stride)
        for j in range(kw):
            xs = slice(j, j + stride * ow, stride)
            out[:, :, ys, xs] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x, w, b=None, stride: int = 1, pad: int = 1) -> Tensor:
    """2-D convolution, NCHW input and OIHW weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: need 4-D input/weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: channel mismatch between input {x.shape} and weights {w.shape}")
    co, ci, kh, kw = w.data.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(co, ci * kh * kw)
    out_data = np.matmul(wmat, cols).reshape(-1, co, oh, ow)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out_data = out_data + b.data.reshape(1, co, 1, 1)
        parents.append(b)
    out = Tensor(out_data)

    def vjp_x(g):
        gm = g.reshape(g.shape[0], co, oh * ow)
        dcols = np.matmul(wmat.T.astype(gm.dtype, copy=False), gm)
        return _col2im(dcols, x.data.shape, kh, kw, stride, pad)

    def vjp_w(g):
        gm = g.reshape(g.shape[0], co, oh * ow)
        dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
        return dw.reshape(co, ci, kh, kw)

    vjps = [vjp_x, vjp_w]
    if b is not None:
        vjps.append(lambda g: g.sum(axis=(0, 2, 3)))
    return out._record("conv2d", tuple(parents), tuple(vjps))


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    x = as_tensor(x)
    out = Tensor(x.data.repeat(factor, axis=-2).repeat(factor, axis=-1))

    def vjp(g):
        s = g.shape
        g2 = g.reshape(*s[:-2], s[-2] // factor, factor, s[-1] // factor, factor)
        return g2.sum(axis=(-3, -1))

    return out._record("upsample_nearest", (x,), (vjp,))


def bilinear_sample(fmap, coords) -> Tensor:
    """Sample (C,H,W) at fractional (x, y) pixel coords -> (N, C).

    Out-of-range coordinates clamp to the border. Gradients flow to the map
    only; coordinates are treated as constants.
    """
    fmap = as_tensor(fmap)
    pts = np.asarray(coords, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"bilinear_sample: coords must be (N,2), got {pts.shape}")
    c, h, w = fmap.data.shape
    x = np.clip(pts[:, 0], 0.0, w - 1.0)
    y = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0).astype(fmap.dtype)
    fy = (y - y0).astype(fmap.dtype)
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    m = fmap.data
    vals = (
        m[:, y0, x0] * w00 + m[:, y0, x1] * w01 + m[:, y1, x0] * w10 + m[:, y1, x1] * w11
    ).T  # (N, C)
    out = Tensor(np.ascontiguousarray(vals))

    def vjp(g):
        dm = np.zeros_like(m)
        gt = g.T  # (C, N)
        np.add.at(dm, (slice(None), y0, x0), gt * w00)
        np.add.at(dm, (slice(None), y0, x1), gt * w01)
        np.add.at(dm, (slice(None), y1, x0), gt * w10)
        np.add.at(dm, (slice(None), y1, x1), gt * w11)
        return dm

    return out._record("bilinear_sample", (fmap,), (vjp,))


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of (C,H,W) with half-pixel centers (align_corners=False)."""
    x = as_tensor(x)
    c, h, w = x.data.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    coords = np.stack([gx.ravel(), gy.ravel()], axis=1)
    sampled = bilinear_sample(x, coords)  # (out_h*out_w, C)
    return transpose(reshape(sampled, (out_h, out_w, c)), (2, 0, 1))


# -- optimizer --------------------------------------------------------------------


class Adam:
    """Adam with bias correction; deterministic given identical grad sequences."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = (self.b1 * self.m[i] + (1.0 - self.b1) * g).astype(p.data.dtype, copy=False)
            self.v[i] = (self.b2 * self.v[i] + (1.0 - self.b2) * (g * g)).astype(p.data.dtype, copy=False)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            # in-place so the parameter keeps its dtype (no float64 promotion)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype, copy=False)


def sgd_step(params, lr: float):
    for p in params:
        if p.grad is not None:
            p.data -= (lr * p.grad).astype(p.data.dtype, copy=False)
