"""Minimal reverse-mode autodiff over numpy arrays (NHWC layout).

Each op builds its output ``Tensor`` and, if any input requires a gradient,
a closure that maps the output gradient onto its inputs.  ``backward`` walks
the graph in reverse topological order.  Precision is global: ``"test"``
mode computes in float64 (gradient checks), ``"train"`` mode in float32.

Broadcasting between two operands is allowed only at equal rank, where each
axis either matches or is 1 in one operand (e.g. ``N x 1 x 1 x C`` against
``N x H x W x C``).  Anything else must be reshaped explicitly.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels
from .errors import DiagnosticError, ParameterError

_MODES = {"test": np.float64, "train": np.float32}
_dtype = np.float64
_grad_enabled = True


def set_mode(mode: str) -> None:
    global _dtype
    if mode not in _MODES:
        raise ParameterError(f"unknown precision mode {mode!r}; use 'test' or 'train'")
    _dtype = _MODES[mode]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(mode: str):
    prev = _dtype
    set_mode(mode)
    try:
        yield
    finally:
        globals()["_dtype"] = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data, t.grad, t.requires_grad, t._parents, t._backward, t.name = self.data, None, False, (), None, None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward_fn if needs else None
    return out


def _accumulate(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        raise DiagnosticError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every tensor that requires it and feeds ``loss``."""
    if grad is None:
        if loss.data.size != 1:
            raise ParameterError(f"backward needs a scalar loss or an explicit gradient, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise DiagnosticError("loss does not depend on any tensor that requires a gradient")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise arithmetic with restricted broadcasting
# ---------------------------------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim != b.ndim:
        raise ParameterError(f"cannot broadcast shapes {a.shape} and {b.shape}: ranks differ")
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ParameterError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary(a, b, fwd, grad_a, grad_b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)
    out = fwd(a.data, b.data)

    def bw(g):
        return (_unbroadcast(grad_a(g, a.data, b.data), a.shape) if a.requires_grad else None,
                _unbroadcast(grad_b(g, a.data, b.data), b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    if count == 0:
        raise ParameterError("mean over an empty axis")
    return mul(sum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def hswish(x: Tensor) -> Tensor:
    """``x * clamp(x + 3, 0, 6) / 6``."""
    d = x.data
    gate = np.clip(d + 3.0, 0.0, 6.0) / 6.0
    inner = (d > -3.0) & (d < 3.0)
    deriv = gate + inner * d / 6.0
    return _make(d * gate, (x,), lambda g: (g * deriv,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``N x P`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ParameterError(f"cross_entropy needs N x P logits and N labels, got {logits.shape}, {labels.shape}")
    if labels.size == 0:
        raise ParameterError("cross_entropy over an empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ParameterError("label index out of range")
    n = labels.size
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.asarray((lse - z[np.arange(n), labels]).mean(), dtype=logits.data.dtype)
    p = np.exp(z - lse[:, None])

    def bw(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return _make(loss, (logits,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product or batched 3-D product with matching batch size."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3) or a.shape[-1] != b.shape[-2] \
            or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ParameterError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    sw = (1, 0) if a.ndim == 2 else (0, 2, 1)

    def bw(g):
        return (g @ b.data.transpose(sw) if a.requires_grad else None,
                a.data.transpose(sw) @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return add(out, reshape(b, (1, -1))) if b is not None else out


# ---------------------------------------------------------------------------
# convolution (NHWC)
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with kernel ``w`` of shape ``kh x kw x Cin x Cout``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ParameterError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    kh, kw, cin, cout = w.shape
    n, h, wd, _ = x.shape
    ho = kernels.conv_out_size(h, kh, stride, padding)
    wo = kernels.conv_out_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ParameterError(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}")
    cols = kernels.im2col(x.data, kh, kw, stride, padding).reshape(-1, kh * kw * cin)
    wmat = w.data.reshape(-1, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    parents = (x, w)
    if b is not None:
        if b.shape != (cout,):
            raise ParameterError(f"conv2d bias shape {b.shape} != ({cout},)")
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = gw = None
        if x.requires_grad:
            gx = kernels.col2im(g2 @ wmat.T, x.shape, kh, kw, stride, padding)
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w.shape)
        grads = (gx, gw)
        if b is not None:
            grads += (g2.sum(axis=0) if b.requires_grad else None,)
        return grads

    return _make(out, parents, bw)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Per-channel cross-correlation with kernel ``w`` of shape ``kh x kw x C``."""
    if x.ndim != 4 or w.ndim != 3 or x.shape[3] != w.shape[2]:
        raise ParameterError(f"depthwise_conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    out = kernels.dwconv_forward(x.data, w.data, stride, padding)
    if out.shape[1] < 1 or out.shape[2] < 1:
        raise ParameterError(f"depthwise_conv2d output would be empty for input {x.shape}")
    parents = (x, w)
    if b is not None:
        if b.shape != (w.shape[2],):
            raise ParameterError(f"depthwise bias shape {b.shape} != ({w.shape[2]},)")
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        gx, gw = kernels.dwconv_backward(x.data, w.data, np.ascontiguousarray(g), stride, padding)
        grads = (gx if x.requires_grad else None, gw if w.requires_grad else None)
        if b is not None:
            grads += (g.sum(axis=(0, 1, 2)) if b.requires_grad else None,)
        return grads

    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _check_rank4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ParameterError(f"{op} needs an N x H x W x C input, got {x.shape}")
    if 0 in x.shape:
        raise ParameterError(f"{op} over an empty axis: {x.shape}")


def gap(x: Tensor) -> Tensor:
    """Global average over H, W -> ``N x 1 x 1 x C``."""
    _check_rank4(x, "gap")
    return mean(x, axis=(1, 2), keepdims=True)


def gap_spatial(x: Tensor) -> Tensor:
    """Average over channels -> ``N x H x W x 1``."""
    _check_rank4(x, "gap_spatial")
    return mean(x, axis=3, keepdims=True)


def _max_keep(x: Tensor, axes) -> Tensor:
    d = x.data
    moved = np.moveaxis(d, axes, tuple(range(d.ndim - len(axes), d.ndim)))
    flat = moved.reshape(moved.shape[: d.ndim - len(axes)] + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = np.expand_dims(out, axes)

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], np.squeeze(g, axes)[..., None], axis=-1)
        return (np.moveaxis(gf.reshape(moved.shape), tuple(range(d.ndim - len(axes), d.ndim)), axes),)

    return _make(out, (x,), bw)


def gmp(x: Tensor) -> Tensor:
    """Global max over H, W -> ``N x 1 x 1 x C`` (gradient to the first maximum)."""
    _check_rank4(x, "gmp")
    return _max_keep(x, (1, 2))


def gmp_spatial(x: Tensor) -> Tensor:
    """Max over channels -> ``N x H x W x 1``."""
    _check_rank4(x, "gmp_spatial")
    return _max_keep(x, (3,))


# ---------------------------------------------------------------------------
# data movement
# ---------------------------------------------------------------------------

def shuffle_permutation(C: int, groups: int) -> np.ndarray:
    """Destination index of each source channel: ``(c % g) * (C // g) + c // g``."""
    if groups < 1 or C % groups:
        raise ParameterError(f"{C} channels are not divisible into {groups} groups")
    c = np.arange(C)
    return (c % groups) * (C // groups) + c // groups


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    dest = shuffle_permutation(x.shape[-1], groups)
    src = np.argsort(dest)
    return _make(x.data[..., src], (x,), lambda g: (g[..., dest],))


def concat(xs, axis: int = -1) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    if not xs:
        raise ParameterError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise ParameterError(f"concat shape mismatch: {[t.shape for t in xs]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, sizes, axis: int = -1) -> list:
    if np.sum(sizes) != x.shape[axis]:
        raise ParameterError(f"split sizes {sizes} do not cover axis of length {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(take(x, start, start + s, axis))
        start += s
    return out


def take(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _make(x.data[sl], (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ParameterError(f"cannot reshape {x.shape} to {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def upsample_nn(x: Tensor, H: int, W: int) -> Tensor:
    """Nearest-neighbour resize of ``N x h x w x C`` to ``N x H x W x C``."""
    _check_rank4(x, "upsample_nn")
    n, h, w, c = x.shape
    if H < 1 or W < 1:
        raise ParameterError(f"upsample target must be positive, got {H}x{W}")
    iy = (np.arange(H) * h) // H
    ix = (np.arange(W) * w) // W
    out = x.data[:, iy][:, :, ix]

    def bw(g):
        gy = np.zeros((n, h, W, c), dtype=g.dtype)
        np.add.at(gy, (slice(None), iy), g)
        gx = np.zeros((n, h, w, c), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), ix), gy)
        return (gx,)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over every axis but the last.

    In training mode the batch statistics are used and the running buffers are
    updated in place: ``running = momentum * running + (1 - momentum) * batch``
    (biased batch variance).  In eval mode the running buffers are used.
    """
    if x.shape[0] == 0:
        raise ParameterError("batch_norm over an empty batch")
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    m = x.size // x.shape[-1]

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = inv / m * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
            else:
                gx = gxhat * inv
        return gx, gg, gb

    return _make(out.astype(x.data.dtype), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# finite-difference check
# ---------------------------------------------------------------------------

def grad_check(fn, inputs, h: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None, floor: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences.

    ``fn(*inputs)`` must return a scalar Tensor.  For every input that requires
    a gradient the error is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|, floor)``; the worst input is returned.  The floor keeps
    gradients that are identically zero (e.g. a bias feeding a batch norm)
    from turning round-off into a large relative error.  It is raised to
    ``1e6 * eps * max(1, |f|) / h`` because the difference quotient itself
    carries round-off of order ``eps * |f| / h``.  ``max_coords`` caps the
    number of perturbed coordinates per input (sampled with ``rng``).
    """
    if any(t.data.dtype != np.float64 for t in inputs):
        raise ParameterError("grad_check needs float64 tensors (use precision('test'))")
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    backward(loss)
    floor = max(floor, 1e6 * np.finfo(np.float64).eps * max(1.0, abs(loss.item())) / h)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        coords = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        flat = t.data.reshape(-1)
        numeric = np.empty(coords.size)
        with no_grad():
            for k, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + h
                up = fn(*inputs).item()
                flat[i] = orig - h
                down = fn(*inputs).item()
                flat[i] = orig
                numeric[k] = (up - down) / (2 * h)
        a = analytic.reshape(-1)[coords]
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        worst = max(worst, float(np.abs(a - numeric).max() / scale))
    return worst
