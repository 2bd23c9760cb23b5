"""Dense rank-5 volume kernels: 3D convolution (grouped/strided/dilated),
batch norm, ReLU, trilinear upsampling, channel concat, residual add and
per-voxel softmax.

Volumes are C-contiguous numpy arrays of shape (n, c, d, h, w), float32 by
default. Every kernel is a pure function of its inputs (batch_norm's running
statistics are updated by the caller, see :func:`batch_norm`), deterministic,
and safe to call concurrently on distinct arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import ConfigError, ShapeError

AXES = ("d", "h", "w")

# volumes are plain numpy arrays; the alias documents the (n, c, d, h, w) contract
Volume5D = np.ndarray


def _triple(v, name="value"):
    """Normalize an int or length-3 sequence to a (d, h, w) tuple."""
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ConfigError(f"{name} must be an int or length-3 sequence, got {v!r}")
    return t


def check_volume5d(x, name="input"):
    x = np.asarray(x)
    if x.ndim != 5:
        raise ShapeError(f"{name} must be rank-5 (n, c, d, h, w), got shape {x.shape}")
    if any(s <= 0 for s in x.shape):
        raise ShapeError(f"{name} has a zero-sized axis: shape {x.shape}")
    return x


@dataclass(frozen=True)
class ConvSpec:
    """Declarative description of one 3D convolution."""

    c_in: int
    c_out: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    dilation: tuple = (1, 1, 1)
    groups: int = 1
    padding: tuple = (0, 0, 0)
    has_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel, "kernel"))
        object.__setattr__(self, "stride", _triple(self.stride, "stride"))
        object.__setattr__(self, "dilation", _triple(self.dilation, "dilation"))
        object.__setattr__(self, "padding", _triple(self.padding, "padding"))
        if self.c_in <= 0 or self.c_out <= 0:
            raise ConfigError(f"channel counts must be positive, got {self.c_in}->{self.c_out}")
        if self.groups <= 0:
            raise ConfigError(f"groups must be positive, got {self.groups}")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide c_in={self.c_in} and c_out={self.c_out}"
            )
        if any(s < 1 for s in self.stride) or any(d < 1 for d in self.dilation):
            raise ConfigError("stride and dilation must be >= 1 per axis")

    @property
    def weight_shape(self):
        return (self.c_out, self.c_in // self.groups) + self.kernel

    @property
    def effective_kernel(self):
        """Kernel extent per axis once dilation is applied: d*(k-1)+1."""
        return tuple(d * (k - 1) + 1 for k, d in zip(self.kernel, self.dilation))

    def out_spatial(self, spatial):
        out = []
        for ax, (size, ext, s, p) in enumerate(
            zip(spatial, self.effective_kernel, self.stride, self.padding)
        ):
            o = (size + 2 * p - ext) // s + 1
            if o < 1:
                raise ShapeError(
                    f"conv3d output collapses on axis {AXES[ax]}: input {size}, "
                    f"effective kernel {ext}, stride {s}, padding {p}"
                )
            out.append(o)
        return tuple(out)

    @property
    def weight_count(self):
        """Learnable scalars, bias included. Equals k_d*k_h*k_w*c_in*c_out/g (+ c_out)."""
        n = self.c_out * (self.c_in // self.groups) * int(np.prod(self.kernel))
        return n + (self.c_out if self.has_bias else 0)


def same_padding(kernel, dilation=1):
    """Padding that preserves spatial dims at stride 1 (odd kernels only)."""
    kernel = _triple(kernel, "kernel")
    dilation = _triple(dilation, "dilation")
    for k in kernel:
        if k % 2 == 0:
            raise ConfigError(f"same padding needs odd kernels, got {kernel}")
    return tuple(d * (k - 1) // 2 for k, d in zip(kernel, dilation))


def _check_conv_args(x, weight, spec):
    x = check_volume5d(x)
    if x.shape[1] != spec.c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects c_in={spec.c_in}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} does not match spec {spec.weight_shape}")
    return x


def conv3d(x, weight, spec, bias=None):
    """Grouped, strided, dilated 3D cross-correlation.

    x: (n, c_in, d, h, w); weight: (c_out, c_in/g, kd, kh, kw).
    Output channel group i reads only input channel group i.
    """
    x = _check_conv_args(x, weight, spec)
    n = x.shape[0]
    g = spec.groups
    kd, kh, kw = spec.kernel
    sd, sh, sw = spec.stride
    dd, dh, dw = spec.dilation
    pd, ph, pw = spec.padding
    do, ho, wo = spec.out_spatial(x.shape[2:])

    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    xg = xp.reshape(n, g, spec.c_in // g, *xp.shape[2:])
    wg = weight.reshape(g, spec.c_out // g, spec.c_in // g, kd, kh, kw)
    acc = np.zeros((n, g, spec.c_out // g, do, ho, wo), dtype=x.dtype)
    for a, b, c in product(range(kd), range(kh), range(kw)):
        xs = xg[
            :,
            :,
            :,
            a * dd : a * dd + sd * (do - 1) + 1 : sd,
            b * dh : b * dh + sh * (ho - 1) + 1 : sh,
            c * dw : c * dw + sw * (wo - 1) + 1 : sw,
        ]
        acc += np.einsum("ngidhw,goi->ngodhw", xs, wg[:, :, :, a, b, c], optimize=True)
    out = acc.reshape(n, spec.c_out, do, ho, wo)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1, 1)
    return out


def conv3d_input_grad(grad_out, weight, spec, input_shape):
    """Gradient of conv3d w.r.t. its input (transposed convolution)."""
    n = input_shape[0]
    g = spec.groups
    kd, kh, kw = spec.kernel
    sd, sh, sw = spec.stride
    dd, dh, dw = spec.dilation
    pd, ph, pw = spec.padding
    do, ho, wo = grad_out.shape[2:]

    padded = (
        input_shape[2] + 2 * pd,
        input_shape[3] + 2 * ph,
        input_shape[4] + 2 * pw,
    )
    go = grad_out.reshape(n, g, spec.c_out // g, do, ho, wo)
    wg = weight.reshape(g, spec.c_out // g, spec.c_in // g, kd, kh, kw)
    gxp = np.zeros((n, g, spec.c_in // g) + padded, dtype=grad_out.dtype)
    for a, b, c in product(range(kd), range(kh), range(kw)):
        # strided slices for a fixed kernel offset never overlap, so += is safe
        gxp[
            :,
            :,
            :,
            a * dd : a * dd + sd * (do - 1) + 1 : sd,
            b * dh : b * dh + sh * (ho - 1) + 1 : sh,
            c * dw : c * dw + sw * (wo - 1) + 1 : sw,
        ] += np.einsum("ngodhw,goi->ngidhw", go, wg[:, :, :, a, b, c], optimize=True)
    gx = gxp[
        :,
        :,
        :,
        pd : padded[0] - pd,
        ph : padded[1] - ph,
        pw : padded[2] - pw,
    ]
    return gx.reshape(input_shape)


def conv3d_weight_grad(x, grad_out, spec):
    """Gradient of conv3d w.r.t. its weight tensor."""
    x = check_volume5d(x)
    n = x.shape[0]
    g = spec.groups
    kd, kh, kw = spec.kernel
    sd, sh, sw = spec.stride
    dd, dh, dw = spec.dilation
    pd, ph, pw = spec.padding
    do, ho, wo = grad_out.shape[2:]

    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    xg = xp.reshape(n, g, spec.c_in // g, *xp.shape[2:])
    go = grad_out.reshape(n, g, spec.c_out // g, do, ho, wo)
    gw = np.zeros((g, spec.c_out // g, spec.c_in // g, kd, kh, kw), dtype=grad_out.dtype)
    for a, b, c in product(range(kd), range(kh), range(kw)):
        xs = xg[
            :,
            :,
            :,
            a * dd : a * dd + sd * (do - 1) + 1 : sd,
            b * dh : b * dh + sh * (ho - 1) + 1 : sh,
            c * dw : c * dw + sw * (wo - 1) + 1 : sw,
        ]
        gw[:, :, :, a, b, c] = np.einsum("ngodhw,ngidhw->goi", go, xs, optimize=True)
    return gw.reshape(spec.weight_shape)


@dataclass
class BNParams:
    """Per-channel batch-norm state: learnable (gamma, beta) plus running stats."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels, dtype=np.float32, eps=1e-5, momentum=0.1):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )


def batch_norm_stats(x):
    """Biased per-channel mean/variance over the (n, d, h, w) axes."""
    axes = (0, 2, 3, 4)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    return mean, var


def batch_norm_apply(x, mean, var, gamma, beta, eps):
    shape = (1, -1, 1, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mean.reshape(shape)) * (gamma * inv).reshape(shape) + beta.reshape(shape)


def batch_norm(x, params, mode="train"):
    """Batch normalization over (n, d, h, w) per channel.

    Train mode normalizes with batch statistics and updates
    ``params.running_mean/var`` in place; eval mode uses the running stats.
    """
    x = check_volume5d(x)
    if x.shape[1] != params.gamma.shape[0]:
        raise ShapeError(
            f"input has {x.shape[1]} channels, batch norm expects {params.gamma.shape[0]}"
        )
    if mode == "train":
        mean, var = batch_norm_stats(x)
        m = params.momentum
        params.running_mean[:] = (1 - m) * params.running_mean + m * mean
        params.running_var[:] = (1 - m) * params.running_var + m * var
    elif mode == "eval":
        mean, var = params.running_mean, params.running_var
    else:
        raise ConfigError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    return batch_norm_apply(x, mean, var, params.gamma, params.beta, params.eps)


def relu(x):
    """Elementwise max(x, 0)."""
    return np.maximum(x, 0)


def _axis_interp_indices(size, scale):
    """Source indices/weights for align-corners=false linear interpolation.

    Output index i samples the source at (i + 0.5)/scale - 0.5, clamped.
    """
    out = np.arange(size * scale, dtype=np.float64)
    src = np.clip((out + 0.5) / scale - 0.5, 0.0, size - 1)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, size - 1)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = src - i0
    return i0, i1, frac


def trilinear_upsample(x, scale):
    """Integer-factor trilinear upsampling (align-corners=false, clamped borders)."""
    x = check_volume5d(x)
    scale = _triple(scale, "scale")
    if any(s < 1 for s in scale):
        raise ConfigError(f"scale must be >= 1 per axis, got {scale}")
    out = x
    for axis, s in zip((2, 3, 4), scale):
        if s == 1:
            continue
        i0, i1, frac = _axis_interp_indices(out.shape[axis], s)
        shape = [1] * out.ndim
        shape[axis] = len(frac)
        f = frac.astype(out.dtype).reshape(shape)
        out = np.take(out, i0, axis=axis) * (1 - f) + np.take(out, i1, axis=axis) * f
    return out


def trilinear_upsample_grad(grad_out, input_shape, scale):
    """Transpose of :func:`trilinear_upsample` (scatter-add of the weights)."""
    scale = _triple(scale, "scale")
    g = grad_out
    # reverse the axis order so each scatter sees the dims the forward produced
    for axis, s in reversed(list(zip((2, 3, 4), scale))):
        if s == 1:
            continue
        in_size = input_shape[axis]
        i0, i1, frac = _axis_interp_indices(in_size, s)
        shape = [1] * g.ndim
        shape[axis] = len(frac)
        f = frac.astype(g.dtype).reshape(shape)
        gm = np.moveaxis(g, axis, 0)
        acc_shape = (in_size,) + gm.shape[1:]
        acc = np.zeros(acc_shape, dtype=g.dtype)
        fm = np.moveaxis(f, axis, 0)
        np.add.at(acc, i0, gm * (1 - fm))
        np.add.at(acc, i1, gm * fm)
        g = np.moveaxis(acc, 0, axis)
    return g


def concat_channels(a, b):
    """Concatenate along the channel axis; batch and spatial dims must match."""
    a = check_volume5d(a, "a")
    b = check_volume5d(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs matching (n, d, h, w): {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def add(a, b):
    """Elementwise sum; the residual-shortcut primitive."""
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes: {a.shape} vs {b.shape}")
    return a + b


def softmax_channels(x):
    """Per-voxel softmax over the channel axis, stabilized by max subtraction."""
    x = check_volume5d(x)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
