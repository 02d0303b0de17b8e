"""Layers, parameter bookkeeping and the Adam optimizer on top of ``tensor``."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor


class Module:
    """Attribute-discovered parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    numpy arrays registered in ``self._buffers``; child modules may be plain
    attributes or lists of modules.  Names are dotted attribute paths.
    """

    training = True

    def __init__(self):
        self._buffers = {}

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def parameters(self, prefix: str = "") -> dict:
        out = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + key] = val
        for key, child in self._children():
            out.update(child.parameters(f"{prefix}{key}."))
        return out

    def buffers(self, prefix: str = "") -> dict:
        out = {prefix + k: v for k, v in getattr(self, "_buffers", {}).items()}
        for key, child in self._children():
            out.update(child.buffers(f"{prefix}{key}."))
        return out

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict:
        state = {k: v.data.copy() for k, v in self.parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict) -> None:
        params, bufs = self.parameters(), self.buffers()
        expected = set(params) | set(bufs)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ConfigurationError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ConfigurationError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.data.dtype).copy()
        for k, b in bufs.items():
            arr = np.asarray(state[k])
            if arr.shape != b.shape:
                raise ConfigurationError(f"buffer {k}: checkpoint shape {arr.shape} != model shape {b.shape}")
            b[...] = arr

    def cast(self, mode: str) -> "Module":
        """Re-type every parameter for ``mode`` ('test' float64, 'train' float32)."""
        with T.precision(mode):
            dtype = T.get_dtype()
            for p in self.parameters().values():
                p.data = p.data.astype(dtype)
                p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, padding=None, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = _param(kaiming(rng, (k, k, cin, cout), k * k * cin))
        self.bias = _param(np.zeros(cout)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels, k=3, stride=1, padding=None, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = _param(kaiming(rng, (k, k, channels), k * k))

    def forward(self, x):
        return T.depthwise_conv2d(x, self.weight, None, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels):
        super().__init__()
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self._buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training)


class Linear(Module):
    def __init__(self, fin, fout, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = _param(rng.standard_normal((fin, fout)) * np.sqrt(1.0 / fin))
        self.bias = _param(np.zeros(fout))

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


_ACTS = {"relu": T.relu, "hswish": T.hswish, "none": lambda x: x}


class ConvBNAct(Module):
    def __init__(self, cin, cout, k=3, stride=1, act="relu", rng=None):
        super().__init__()
        if act not in _ACTS:
            raise ConfigurationError(f"unknown activation {act!r}")
        self.conv = Conv2d(cin, cout, k, stride, bias=False, rng=rng)
        self.bn = BatchNorm(cout)
        self.act = act

    def forward(self, x):
        return _ACTS[self.act](self.bn(self.conv(x)))


class SqueezeExcite(Module):
    """Channel attention: GAP -> 1x1 reduce -> ReLU -> 1x1 expand -> sigmoid gate."""

    def __init__(self, channels, reduction=4, rng=None):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.reduce = Conv2d(channels, hidden, 1, rng=rng)
        self.expand = Conv2d(hidden, channels, 1, rng=rng)

    def forward(self, x):
        w = T.sigmoid(self.expand(T.relu(self.reduce(T.gap(x)))))
        return x * w


class InvertedBottleneck(Module):
    """3x3 expand conv, depthwise conv, channel attention, 1x1 projection.

    The identity shortcut is added only when stride is 1 and the channel
    count is unchanged.
    """

    def __init__(self, cin, expand, cout, stride=1, rng=None):
        super().__init__()
        self.expand = ConvBNAct(cin, expand, 3, 1, "hswish", rng=rng)
        self.dw = DepthwiseConv2d(expand, 3, stride, rng=rng)
        self.dw_bn = BatchNorm(expand)
        self.se = SqueezeExcite(expand, rng=rng)
        self.project = ConvBNAct(expand, cout, 1, 1, "none", rng=rng)
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        y = self.expand(x)
        y = T.hswish(self.dw_bn(self.dw(y)))
        y = self.project(self.se(y))
        return x + y if self.residual else y


class Adam:
    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = (p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
