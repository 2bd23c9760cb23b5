"""Composite units: multiplexer, multi-fiber (MF) unit and dilated
multi-fiber (DMF) unit.

Topology of one MF unit (pre-activation BN+ReLU before every conv):

    x -> multiplexer -> [BN,ReLU, grouped 3x3x3 conv c_in->c_mid, stride s]
      -> [BN,ReLU, grouped 3x3x3 conv c_mid->c_out] -> (+ shortcut(x))

The multiplexer squeezes channels c -> c/2 -> c with two ungrouped 1x1x1
convs and its own residual shortcut. A DMF unit replaces the first grouped
conv with three parallel dilated branches (rates 1, 2, 3 by default) combined
by a weighted sum with one-initialized scalar weights.

Blocks are immutable after construction except for parameter updates; forward
is reentrant for distinct activation buffers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import ops
from .autograd import Parameter
from .errors import ConfigError


def kaiming_normal(rng, shape, fan_in, dtype):
    """He initialization: zero-mean normal with std sqrt(2 / fan_in)."""
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


@dataclass(frozen=True)
class MFUnitConfig:
    """Channel/group layout of one multi-fiber unit."""

    c_in: int
    c_mid: int
    c_out: int
    g: int = 16
    stride: int = 1

    def __post_init__(self):
        for label, c in (("c_in", self.c_in), ("c_mid", self.c_mid), ("c_out", self.c_out)):
            if c % self.g:
                raise ConfigError(f"groups g={self.g} must divide {label}={c}")
        if self.c_in % 2:
            raise ConfigError(f"c_in={self.c_in} must be even (multiplexer squeeze to c_in/2)")
        if self.stride not in (1, 2):
            raise ConfigError(f"unit stride must be 1 or 2, got {self.stride}")


@dataclass(frozen=True)
class DMFUnitConfig(MFUnitConfig):
    dilation_rates: tuple = (1, 2, 3)
    weight_mode: str = "learnable"

    def __post_init__(self):
        super().__post_init__()
        rates = tuple(int(d) for d in self.dilation_rates)
        object.__setattr__(self, "dilation_rates", rates)
        if any(d < 1 for d in rates) or len(set(rates)) != len(rates):
            raise ConfigError(f"dilation rates must be positive and distinct, got {rates}")
        if self.weight_mode not in ("learnable", "fixed_equal"):
            raise ConfigError(f"weight_mode must be 'learnable' or 'fixed_equal', got {self.weight_mode!r}")


class Conv3dLayer:
    """Bare convolution layer owning its weight (and optional bias)."""

    def __init__(self, name, spec, rng, dtype=np.float32):
        self.name = name
        self.spec = spec
        fan_in = (spec.c_in // spec.groups) * int(np.prod(spec.kernel))
        self.weight = Parameter(f"{name}.weight",
                                kaiming_normal(rng, spec.weight_shape, fan_in, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(spec.c_out, dtype=dtype)) \
            if spec.has_bias else None

    def forward(self, x, mode="train", tape=None):
        return ag.t_conv3d(tape, x, self.weight, self.spec, self.bias)

    def parameters(self):
        out = [self.weight]
        if self.bias is not None:
            out.append(self.bias)
        return out

    def buffers(self):
        return []


class BatchNorm3d:
    """Pre-activation batch norm with learnable gamma/beta and running stats."""

    def __init__(self, name, channels, dtype=np.float32, eps=1e-5, momentum=0.1):
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.params = ops.BNParams(
            gamma=self.gamma.data,
            beta=self.beta.data,
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    def forward(self, x, mode="train", tape=None):
        # keep the shared views valid if someone replaced the arrays wholesale
        self.params.gamma = self.gamma.data
        self.params.beta = self.beta.data
        return ag.t_batch_norm(tape, x, self, mode)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [
            (f"{self.name}.running_mean", self.params.running_mean),
            (f"{self.name}.running_var", self.params.running_var),
        ]


class PreActConv:
    """BN -> ReLU -> conv, the ordering used inside MF/DMF units."""

    def __init__(self, name, spec, rng, dtype=np.float32):
        self.name = name
        self.bn = BatchNorm3d(f"{name}.bn", spec.c_in, dtype=dtype)
        self.conv = Conv3dLayer(f"{name}.conv", spec, rng, dtype=dtype)

    def forward(self, x, mode="train", tape=None):
        h = self.bn.forward(x, mode, tape)
        h = ag.t_relu(tape, h)
        return self.conv.forward(h, mode, tape)

    def parameters(self):
        return self.bn.parameters() + self.conv.parameters()

    def buffers(self):
        return self.bn.buffers()


class Multiplexer:
    """Squeeze-then-inflate 1x1x1 conv pair with a residual shortcut.

    Routes information across fibers: channels go c_in -> c_in/2 -> c_in with
    pre-activation BN+ReLU before each conv. The inflate conv is the channel
    transpose of the squeeze conv, so the pair holds exactly c_in^2/2 weights,
    half the cost of a single full 1x1x1 conv (c_in^2).
    """

    def __init__(self, name, c_in, rng, dtype=np.float32):
        if c_in % 2:
            raise ConfigError(f"multiplexer input channels must be even, got {c_in}")
        self.name = name
        self.c_in = c_in
        self.squeeze_spec = ops.ConvSpec(c_in, c_in // 2, kernel=1, padding=0)
        self.inflate_spec = ops.ConvSpec(c_in // 2, c_in, kernel=1, padding=0)
        self.bn_squeeze = BatchNorm3d(f"{name}.bn_squeeze", c_in, dtype=dtype)
        self.bn_inflate = BatchNorm3d(f"{name}.bn_inflate", c_in // 2, dtype=dtype)
        self.weight = Parameter(f"{name}.weight",
                                kaiming_normal(rng, self.squeeze_spec.weight_shape,
                                               c_in, dtype))

    def forward(self, x, mode="train", tape=None):
        h = ag.t_relu(tape, self.bn_squeeze.forward(x, mode, tape))
        h = ag.t_conv3d(tape, h, self.weight, self.squeeze_spec)
        h = ag.t_relu(tape, self.bn_inflate.forward(h, mode, tape))
        h = ag.t_conv3d(tape, h, self.weight, self.inflate_spec, transpose_weight=True)
        return ag.t_add(tape, h, x)

    def parameters(self):
        return (self.bn_squeeze.parameters() + [self.weight]
                + self.bn_inflate.parameters())

    def buffers(self):
        return self.bn_squeeze.buffers() + self.bn_inflate.buffers()


def _shortcut_layer(name, cfg, rng, dtype):
    """Projection shortcut: 1x1x1 grouped conv carrying the unit's stride.

    Only present when the unit changes shape; identity shortcuts add no
    parameters.
    """
    if cfg.c_in == cfg.c_out and cfg.stride == 1:
        return None
    spec = ops.ConvSpec(cfg.c_in, cfg.c_out, kernel=1, stride=cfg.stride,
                        padding=0, groups=cfg.g)
    return Conv3dLayer(name, spec, rng, dtype)


class MFUnit:
    """Multi-fiber unit: multiplexer + two grouped 3x3x3 convs + outer shortcut."""

    def __init__(self, name, cfg, rng, dtype=np.float32):
        if not isinstance(cfg, MFUnitConfig):
            raise ConfigError("MFUnit needs an MFUnitConfig")
        self.name = name
        self.cfg = cfg
        self.mux = Multiplexer(f"{name}.mux", cfg.c_in, rng, dtype)
        self.conv1 = PreActConv(
            f"{name}.conv1",
            ops.ConvSpec(cfg.c_in, cfg.c_mid, kernel=3, stride=cfg.stride,
                         padding=ops.same_padding(3), groups=cfg.g),
            rng, dtype)
        self.conv2 = PreActConv(
            f"{name}.conv2",
            ops.ConvSpec(cfg.c_mid, cfg.c_out, kernel=3, stride=1,
                         padding=ops.same_padding(3), groups=cfg.g),
            rng, dtype)
        self.shortcut = _shortcut_layer(f"{name}.shortcut", cfg, rng, dtype)

    def forward(self, x, mode="train", tape=None):
        h = self.mux.forward(x, mode, tape)
        h = self.conv1.forward(h, mode, tape)
        h = self.conv2.forward(h, mode, tape)
        s = x if self.shortcut is None else self.shortcut.forward(x, mode, tape)
        return ag.t_add(tape, h, s)

    def parameters(self):
        out = self.mux.parameters() + self.conv1.parameters() + self.conv2.parameters()
        if self.shortcut is not None:
            out += self.shortcut.parameters()
        return out

    def buffers(self):
        out = self.mux.buffers() + self.conv1.buffers() + self.conv2.buffers()
        if self.shortcut is not None:
            out += self.shortcut.buffers()
        return out


class DMFUnit:
    """MF unit whose first grouped conv is split into parallel dilated branches.

    All branches share one pre-activation BN+ReLU, are same-padded so their
    outputs align, and are combined as a weighted sum with scalar weights
    initialized to 1 so every branch contributes equally at the start.
    """

    def __init__(self, name, cfg, rng, dtype=np.float32):
        if not isinstance(cfg, DMFUnitConfig):
            raise ConfigError("DMFUnit needs a DMFUnitConfig")
        self.name = name
        self.cfg = cfg
        self.mux = Multiplexer(f"{name}.mux", cfg.c_in, rng, dtype)
        self.bn1 = BatchNorm3d(f"{name}.bn1", cfg.c_in, dtype=dtype)
        self.branches = []
        for d in cfg.dilation_rates:
            spec = ops.ConvSpec(cfg.c_in, cfg.c_mid, kernel=3, stride=cfg.stride,
                                dilation=d, padding=ops.same_padding(3, d), groups=cfg.g)
            self.branches.append(
                Conv3dLayer(f"{name}.branch_d{d}", spec, rng, dtype))
        self.omega = Parameter(f"{name}.omega",
                               np.ones(len(self.branches), dtype=dtype),
                               decay=False,
                               trainable=cfg.weight_mode == "learnable")
        self.conv2 = PreActConv(
            f"{name}.conv2",
            ops.ConvSpec(cfg.c_mid, cfg.c_out, kernel=3, stride=1,
                         padding=ops.same_padding(3), groups=cfg.g),
            rng, dtype)
        self.shortcut = _shortcut_layer(f"{name}.shortcut", cfg, rng, dtype)

    def forward(self, x, mode="train", tape=None):
        h = self.mux.forward(x, mode, tape)
        a = ag.t_relu(tape, self.bn1.forward(h, mode, tape))
        ys = [branch.forward(a, mode, tape) for branch in self.branches]
        h = ag.t_branch_weighted_sum(tape, ys, self.omega)
        h = self.conv2.forward(h, mode, tape)
        s = x if self.shortcut is None else self.shortcut.forward(x, mode, tape)
        return ag.t_add(tape, h, s)

    def parameters(self):
        out = self.mux.parameters() + self.bn1.parameters()
        for branch in self.branches:
            out += branch.parameters()
        out.append(self.omega)
        out += self.conv2.parameters()
        if self.shortcut is not None:
            out += self.shortcut.parameters()
        return out

    def buffers(self):
        out = self.mux.buffers() + self.bn1.buffers()
        for branch in self.branches:
            out += branch.buffers()
        out += self.conv2.buffers()
        if self.shortcut is not None:
            out += self.shortcut.buffers()
        return out


def build_multiplexer(c_in, rng=None, name="mux", dtype=np.float32):
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return Multiplexer(name, c_in, rng, dtype)


def build_mf_unit(cfg, rng=None, name="mf", dtype=np.float32):
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return MFUnit(name, cfg, rng, dtype)


def build_dmf_unit(cfg, rng=None, name="dmf", dtype=np.float32):
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return DMFUnit(name, cfg, rng, dtype)
