"""Neural-network layers built on :mod:`dadjscc.tensor`.

Convolutions are cross-correlations computed through im2col. Every layer
accepts a single feature map ``[C, H, W]`` or a batch ``[B, C, H, W]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import DEFAULT_DTYPE, Tensor, _make, prelu, relu, reduce, sigmoid


class Parameter(Tensor):
    """Named trainable tensor."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    kernel: int = 5
    padding: int = 2
    transposed: bool = False
    output_padding: int = 0

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.output_padding and not self.transposed:
            raise ValueError("output_padding only applies to transposed convolutions")
        if self.output_padding >= self.stride:
            raise ValueError("output_padding must be smaller than stride")

    @classmethod
    def transposed_for(cls, in_channels: int, out_channels: int, stride: int) -> "Conv2dSpec":
        # stride-2 upsampling needs output_padding 1 to exactly double H, W
        return cls(in_channels, out_channels, stride, transposed=True,
                   output_padding=1 if stride == 2 else 0)

    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel
        if self.transposed:
            return (self.in_channels, self.out_channels, k, k)
        return (self.out_channels, self.in_channels, k, k)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        if self.transposed:
            f = lambda n: (n - 1) * s - 2 * p + k + self.output_padding
        else:
            f = lambda n: (n + 2 * p - k) // s + 1
        return f(h), f(w)

    def label(self) -> str:
        return f"{self.kernel}x{self.kernel}x{self.out_channels}/{self.stride}"


# -- im2col helpers --------------------------------------------------------

def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of ``xp [B,C,Hp,Wp]`` as ``[B, Ho, Wo, C, k, k]`` patches."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return as_strided(xp, shape=(b, ho, wo, c, k, k),
                      strides=(sb, sh * stride, sw * stride, sc, sh, sw), writeable=False)


def _col2im(cols: np.ndarray, out_shape: tuple[int, int, int, int], k: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """Scatter-add ``cols [B, Ho, Wo, C, k, k]`` into a ``[B,C,Hp,Wp]`` buffer."""
    out = np.zeros(out_shape, dtype=cols.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    cols_t = cols.transpose(0, 3, 4, 5, 1, 2)  # B, C, ki, kj, Ho, Wo
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + span_h:stride, j:j + span_w:stride] += cols_t[:, :, i, j]
    return out


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [B,C,H,W], got shape {x.shape}")
    return x, False


def _unbatched(y: Tensor, squeeze: bool) -> Tensor:
    return y.reshape(y.shape[1:]) if squeeze else y


def _conv_forward(x: Tensor, weight: Tensor, bias: Tensor | None, k: int, stride: int,
                  padding: int) -> Tensor:
    b, cin, h, w = x.shape
    cout = weight.shape[0]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for kernel {k} stride {stride}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _windows(xp, k, stride, ho, wo).reshape(b * ho * wo, cin * k * k)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(b, ho, wo, cin, k, k)
            gxp = _col2im(dcols, xp.shape, k, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gw, gb

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return _make(np.ascontiguousarray(out), inputs, bw)


def _tconv_forward(x: Tensor, weight: Tensor, bias: Tensor | None, k: int, stride: int,
                   padding: int, output_padding: int) -> Tensor:
    b, cin, h, w = x.shape
    cout = weight.shape[1]
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    full = ((h - 1) * stride + k + output_padding, (w - 1) * stride + k + output_padding)
    xmat = x.data.transpose(0, 2, 3, 1).reshape(b * h * w, cin)
    wmat = weight.data.reshape(cin, cout * k * k)
    cols = (xmat @ wmat).reshape(b, h, w, cout, k, k)
    buf = _col2im(cols, (b, cout) + full, k, stride, h, w)
    out = buf[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def bw(g):
        gbuf = np.zeros((b, cout) + full, dtype=g.dtype)
        gbuf[:, :, padding:padding + ho, padding:padding + wo] = g
        gcols = _windows(gbuf, k, stride, h, w).reshape(b * h * w, cout * k * k)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = (xmat.T @ gcols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return _make(np.ascontiguousarray(out), inputs, bw)


def conv2d(x: Tensor, spec: Conv2dSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Zero-padded 2-D cross-correlation. ``weight`` is ``[C_out, C_in, k, k]``."""
    if spec.transposed:
        raise ValueError("conv2d called with a transposed spec")
    xb, squeeze = _batched(x)
    if xb.shape[1] != spec.in_channels:
        raise ValueError(f"expected {spec.in_channels} input channels, got {xb.shape[1]}")
    if weight.shape != spec.weight_shape():
        raise ValueError(f"weight shape {weight.shape} != {spec.weight_shape()}")
    y = _conv_forward(xb, weight, bias, spec.kernel, spec.stride, spec.padding)
    return _unbatched(y, squeeze)


def transposed_conv2d(x: Tensor, spec: Conv2dSpec, weight: Tensor,
                      bias: Tensor | None = None) -> Tensor:
    """Adjoint of :func:`conv2d`. ``weight`` is ``[C_in, C_out, k, k]``."""
    if not spec.transposed:
        raise ValueError("transposed_conv2d needs a transposed spec")
    xb, squeeze = _batched(x)
    if xb.shape[1] != spec.in_channels:
        raise ValueError(f"expected {spec.in_channels} input channels, got {xb.shape[1]}")
    if weight.shape != spec.weight_shape():
        raise ValueError(f"weight shape {weight.shape} != {spec.weight_shape()}")
    y = _tconv_forward(xb, weight, bias, spec.kernel, spec.stride, spec.padding,
                       spec.output_padding)
    return _unbatched(y, squeeze)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape ``[n]`` or ``[B, n]``."""
    squeeze = x.ndim == 1
    xb = x.reshape((1, x.shape[0])) if squeeze else x
    if xb.shape[-1] != weight.shape[0]:
        raise ValueError(f"input extent {xb.shape[-1]} != weight rows {weight.shape[0]}")
    y = xb @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
        y = y + bias
    return y.reshape((weight.shape[1],)) if squeeze else y


def activation(kind: str, x: Tensor, slope: Tensor | None = None) -> Tensor:
    if kind == "prelu":
        if slope is None:
            raise ValueError("prelu needs its slope parameter")
        return prelu(x, slope)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(f: Tensor) -> Tensor:
    """Mean over the spatial axes: ``[C,H,W] -> [C]`` (or ``[B,C,H,W] -> [B,C]``)."""
    if f.ndim not in (3, 4):
        raise ValueError(f"expected a rank-3/4 feature map, got shape {f.shape}")
    return reduce("mean", f, (-2, -1))


def channel_mean(f: Tensor, keepdims: bool = False) -> Tensor:
    """Per-pixel mean across channels: ``[C,H,W] -> [H,W]``."""
    if f.ndim not in (3, 4):
        raise ValueError(f"expected a rank-3/4 feature map, got shape {f.shape}")
    return reduce("mean", f, f.ndim - 3, keepdims)


# -- parameterised layer objects -------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=DEFAULT_DTYPE) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base for objects that own named parameters."""

    def parameters(self) -> Iterator[Parameter]:
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value
            elif isinstance(value, Layer):
                yield from value.parameters()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Layer):
                        yield from item.parameters()

    def named(self, prefix: str) -> "Layer":
        """Assign dotted names to every parameter below this layer."""
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                value.name = f"{prefix}.{attr}"
            elif isinstance(value, Layer):
                value.named(f"{prefix}.{attr}")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        item.named(f"{prefix}.{attr}.{i}")
        return self


class Conv2d(Layer):
    def __init__(self, spec: Conv2dSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.spec = spec
        k2 = spec.kernel * spec.kernel
        fan_in, fan_out = spec.in_channels * k2, spec.out_channels * k2
        self.weight = Parameter(glorot_uniform(rng, spec.weight_shape(), fan_in, fan_out, dtype))
        self.bias = Parameter(np.zeros(spec.out_channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if self.spec.transposed:
            return transposed_conv2d(x, self.spec, self.weight, self.bias)
        return conv2d(x, self.spec, self.weight, self.bias)


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.weight = Parameter(glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype))
        self.bias = Parameter(np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)


class PReLU(Layer):
    def __init__(self, init: float = 0.25, dtype=DEFAULT_DTYPE):
        self.slope = Parameter(np.full((1,), init, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return prelu(x, self.slope)


def init_params(spec: Conv2dSpec | tuple[int, int], rng: np.random.Generator,
                dtype=DEFAULT_DTYPE) -> Layer:
    """Initialise a conv layer from a :class:`Conv2dSpec` or an FC layer from ``(n_in, n_out)``."""
    if isinstance(spec, Conv2dSpec):
        return Conv2d(spec, rng, dtype)
    n_in, n_out = spec
    return Linear(n_in, n_out, rng, dtype)


def count_params(model) -> int:
    params: Iterable[Parameter] = model.parameters() if hasattr(model, "parameters") else model
    return sum(p.size for p in params)


def compute_memory_mb(model) -> float:
    """Storage of all parameters as 32-bit floats, in MiB."""
    return count_params(model) * 4 / 2**20
