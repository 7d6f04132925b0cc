"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records a backward closure on the output
tensor; calling ``backward()`` on a scalar walks the recorded graph once in
reverse topological order and accumulates gradients into every tensor that
requires them, including input images (needed by the gradient-based attacks).
"""

from __future__ import annotations

import contextlib

import numpy as np

BCE_CLAMP = 1e-7
COSINE_EPS = 1e-8

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def frozen(tensors):
    """Treat the given tensors as constants inside the block.

    Backward passes over graphs built here skip their gradient chains; values
    are unchanged.
    """
    saved = [(t, t.requires_grad) for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, was in saved:
            t.requires_grad = was


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return arr


class Tensor:
    """N-dimensional float64 array with an optional gradient record."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _check_finite(_as_array(data), "tensor construction")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple = ()
        self._backward = None
        self._backward_ran = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing ------------------------------------------------

    def backward(self):
        """Populate gradients of every requires_grad tensor reachable from here.

        Only scalar roots are accepted, each node's backward rule runs exactly
        once, and running twice on the same root is rejected.
        """
        if self.data.shape != ():
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward on a tensor detached from any gradient record")
        if self._backward_ran:
            raise RuntimeError("backward already ran for this tensor; rebuild the graph")
        self._backward_ran = True

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_lift(other))

    def __rsub__(self, other):
        return add(_lift(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(data, op)
    out.grad = None
    out._backward = None
    out._backward_ran = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(p for p in parents if p.requires_grad)
    else:
        out.requires_grad = False
        out._prev = ()
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise primitives ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape))
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _make(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        out._backward = _bw
    return out


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _make(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.outer(g, b.data)
                _accum(a, _unbroadcast(ga.reshape(a.data.shape) if ga.shape != a.data.shape and ga.size == a.data.size else ga, a.data.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g if a.data.ndim > 1 else np.outer(a.data, g)
                _accum(b, _unbroadcast(gb.reshape(b.data.shape) if gb.shape != b.data.shape and gb.size == b.data.size else gb, b.data.shape))
        out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    out = _make(np.maximum(a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        mask = a.data > 0.0
        def _bw(g):
            _accum(a, g * mask)
        out._backward = _bw
    return out


def softplus(a: Tensor) -> Tensor:
    a = _lift(a)
    out = _make(np.logaddexp(0.0, a.data), (a,), "softplus")
    if out.requires_grad:
        def _bw(g):
            z = np.exp(-np.abs(a.data))
            sig = np.where(a.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
            _accum(a, g * sig)
        out._backward = _bw
    return out


def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):
        out = _make(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        def _bw(g):
            _accum(a, g * out.data)
        out._backward = _bw
    return out


def log(a: Tensor) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0.0):
        raise FloatingPointError("log of non-positive value")
    out = _make(np.log(a.data), (a,), "log")
    if out.requires_grad:
        def _bw(g):
            _accum(a, g / a.data)
        out._backward = _bw
    return out


def sqrt(a: Tensor) -> Tensor:
    a = _lift(a)
    if np.any(a.data < 0.0):
        raise FloatingPointError("sqrt of negative value")
    out = _make(np.sqrt(a.data), (a,), "sqrt")
    if out.requires_grad:
        def _bw(g):
            _accum(a, g * 0.5 / out.data)
        out._backward = _bw
    return out


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input lies in range."""
    a = _lift(a)
    out = _make(np.clip(a.data, lo, hi), (a,), "clamp")
    if out.requires_grad:
        mask = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            mask &= a.data >= lo
        if hi is not None:
            mask &= a.data <= hi
        def _bw(g):
            _accum(a, g * mask)
        out._backward = _bw
    return out


# -- reductions and rearrangement ----------------------------------------


def sum_(a: Tensor, axis=None) -> Tensor:
    a = _lift(a)
    out = _make(a.data.sum(axis=axis), (a,), "sum")
    if out.requires_grad:
        def _bw(g):
            if axis is None:
                _accum(a, np.broadcast_to(g, a.data.shape))
            else:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                g_exp = np.expand_dims(g, tuple(ax % a.data.ndim for ax in axes))
                _accum(a, np.broadcast_to(g_exp, a.data.shape))
        out._backward = _bw
    return out


def mean(a: Tensor, axis=None) -> Tensor:
    a = _lift(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(sum_(a, axis), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    out = _make(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        def _bw(g):
            _accum(a, g.reshape(a.data.shape))
        out._backward = _bw
    return out


def transpose(a: Tensor, axes) -> Tensor:
    a = _lift(a)
    out = _make(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        inv = np.argsort(axes)
        def _bw(g):
            _accum(a, np.transpose(g, inv))
        out._backward = _bw
    return out


def _is_basic_index(index) -> bool:
    if isinstance(index, (int, np.integer, slice)):
        return True
    return isinstance(index, tuple) and all(isinstance(i, (int, np.integer, slice)) for i in index)


def getitem(a: Tensor, index) -> Tensor:
    a = _lift(a)
    out = _make(a.data[index], (a,), "getitem")
    if out.requires_grad:
        def _bw(g):
            full = np.zeros_like(a.data)
            if _is_basic_index(index):
                full[index] += g
            else:
                np.add.at(full, index, g)
            _accum(a, full)
        out._backward = _bw
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def _bw(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _accum(t, g[tuple(idx)])
        out._backward = _bw
    return out


# -- structured operations -----------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of NCHW input with FCkk kernels plus bias."""
    x, kernel, bias = _lift(x), _lift(kernel), _lift(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.data.ndim}-d and {kernel.data.ndim}-d")
    n, c, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if c != ck:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if bias.data.shape != (f,):
        raise ValueError(f"conv2d bias must have shape ({f},), got {bias.data.shape}")
    ho = h + 2 * padding - kh + 1
    wo = w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be {ho}x{wo}; increase padding or input size")

    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    # columns laid out (N, C*kh*kw, Ho*Wo): the output needs no transpose
    cols = np.empty((n, c * kh * kw, ho * wo))
    col_view = cols.reshape(n, c, kh, kw, ho, wo)
    for u in range(kh):
        for v in range(kw):
            col_view[:, :, u, v] = xp[:, :, u:u + ho, v:v + wo]
    wmat = kernel.data.reshape(f, c * kh * kw)
    out_data = np.matmul(wmat[None], cols).reshape(n, f, ho, wo) + bias.data[None, :, None, None]
    out = _make(out_data, (x, kernel, bias), "conv2d")

    if out.requires_grad:
        def _bw(g):
            gmat = g.reshape(n, f, ho * wo)
            if bias.requires_grad:
                _accum(bias, g.sum(axis=(0, 2, 3)))
            if kernel.requires_grad:
                _accum(kernel, np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
                       .reshape(f, c, kh, kw))
            if x.requires_grad:
                gcols = np.matmul(wmat.T[None], gmat).reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
                for u in range(kh):
                    for v in range(kw):
                        gxp[:, :, u:u + ho, v:v + wo] += gcols[:, :, u, v]
                _accum(x, gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp)
        out._backward = _bw
    return out


def avg_pool2d(x: Tensor, factor: int = 2) -> Tensor:
    """Non-overlapping average pooling; spatial extents must divide by factor."""
    x = _lift(x)
    n, c, h, w = x.data.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {factor}")
    out = _make(
        x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5)),
        (x,), "avg_pool2d",
    )
    if out.requires_grad:
        def _bw(g):
            up = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
            _accum(x, up / (factor * factor))
        out._backward = _bw
    return out


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-d linear interpolation weights, align-corners-false."""
    mat = np.zeros((n_out, n_in))
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of NCHW maps, realized as two 1-d interpolation matmuls."""
    x = _lift(x)
    if x.data.ndim != 4:
        raise ValueError(f"bilinear_resize expects 4-d input, got {x.data.ndim}-d")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize target {out_h}x{out_w} must be at least 1x1")
    _, _, h, w = x.data.shape
    wy = _interp_matrix(h, out_h)
    wx = _interp_matrix(w, out_w)
    out = _make(np.matmul(wy, x.data @ wx.T), (x,), "bilinear_resize")
    if out.requires_grad:
        def _bw(g):
            _accum(x, np.matmul(wy.T, g) @ wx)
        out._backward = _bw
    return out


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along one axis; outputs sum to one there."""
    logits = _lift(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = _make(e / e.sum(axis=axis, keepdims=True), (logits,), "softmax")
    if out.requires_grad:
        def _bw(g):
            dot = (g * out.data).sum(axis=axis, keepdims=True)
            _accum(logits, out.data * (g - dot))
        out._backward = _bw
    return out


def cosine_similarity(a: Tensor, b: Tensor, eps_guard: float = COSINE_EPS) -> Tensor:
    """Cosine similarity over the last axis of a against vector b, in [-1, 1].

    The denominator is clamped below by eps_guard, so zero vectors map to 0
    and gradients stay finite everywhere.
    """
    if eps_guard <= 0.0:
        raise ValueError("eps_guard must be positive")
    a, b = _lift(a), _lift(b)
    if a.data.shape[-1] != b.data.shape[-1]:
        raise ValueError(f"cosine_similarity dimension mismatch: {a.data.shape[-1]} vs {b.data.shape[-1]}")
    dot = sum_(mul(a, b), axis=-1)
    sq = mul(sum_(mul(a, a), axis=-1), sum_(mul(b, b), axis=-1))
    denom = sqrt(clamp(sq, lo=eps_guard * eps_guard))
    return clamp(div(dot, denom), lo=-1.0, hi=1.0)


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    pred = _lift(pred)
    tgt = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if tgt.shape != pred.data.shape:
        raise ValueError(f"bce_loss shape mismatch: pred {pred.data.shape} vs target {tgt.shape}")
    if not np.all((tgt == 0.0) | (tgt == 1.0)):
        raise ValueError("bce_loss target must contain only 0 and 1")
    p = clamp(pred, lo=BCE_CLAMP, hi=1.0 - BCE_CLAMP)
    return -mean(add(mul(log(p), tgt), mul(log(1.0 - p), 1.0 - tgt)))


# -- verification ---------------------------------------------------------


def finite_diff_check(f, x: Tensor, n_probes: int = 32, step: float = 1e-5, rng=None) -> float:
    """Worst relative discrepancy between backward() and central differences.

    Probes n_probes coordinates of x (the largest analytic-gradient coordinate
    plus random ones); discrepancy is |analytic - numeric| relative to
    max(|analytic|, |numeric|, 1).
    """
    if n_probes < 1:
        raise ValueError("n_probes must be at least 1")
    rng = np.random.default_rng(0) if rng is None else rng
    base = Tensor(x.data.copy(), requires_grad=True)
    loss = f(base)
    loss.backward()
    analytic = base.grad.reshape(-1)

    flat_ids = {int(np.argmax(np.abs(analytic)))}
    while len(flat_ids) < min(n_probes, x.data.size):
        flat_ids.add(int(rng.integers(x.data.size)))

    worst = 0.0
    for idx in sorted(flat_ids):
        probe = x.data.copy().reshape(-1)
        probe[idx] += step
        f_plus = f(Tensor(probe.reshape(x.data.shape))).item()
        probe[idx] -= 2.0 * step
        f_minus = f(Tensor(probe.reshape(x.data.shape))).item()
        numeric = (f_plus - f_minus) / (2.0 * step)
        rel = abs(analytic[idx] - numeric) / max(abs(analytic[idx]), abs(numeric), 1.0)
        worst = max(worst, rel)
    return worst
