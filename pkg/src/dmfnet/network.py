"""Encoder-decoder segmentation networks assembled from MF/DMF units.

Layout (strides in parentheses):

    stem: plain 3x3x3 conv, input_channels -> stem width (2)
    encoder: three stages of three units each; the first unit of every stage
        downsamples with stride 2; the first `dilated_unit_count` encoder
        units are DMF units, the rest MF units
    decoder: three times [trilinear upsample x2, concat encoder skip, MF unit]
    head: trilinear upsample x2 back to full resolution, then an ungrouped
        1x1x1 classifier conv to num_classes

The default stage widths were tuned (starting from 32/64/128 and adjusting,
see README) until the complexity accounting in :mod:`dmfnet.analysis`
reproduces the published parameter/FLOP totals of the full-scale, plain and
0.75x variants. Widths are configuration data, not architecture code: pass a
different :class:`ArchConfig` for toy-sized models.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from . import ops
from .blocks import Conv3dLayer, DMFUnitConfig, MFUnit, DMFUnit, MFUnitConfig
from .errors import ConfigError, ShapeError

# BraTS label alphabet; class index i maps to CLASS_LABELS[i]
CLASS_LABELS = (0, 1, 2, 4)

UNITS_PER_STAGE = 3
NUM_STAGES = 3


@dataclass(frozen=True)
class ArchConfig:
    """Declarative architecture description.

    stage_channels lists seven widths: stem, three encoder stages, three
    decoder unit outputs. All widths must be divisible by ``groups`` after
    the width multiplier is applied (rounding to the nearest multiple of
    ``groups``, half up).
    """

    input_channels: int = 4
    num_classes: int = 4
    groups: int = 16
    width_multiplier: float = 1.0
    stage_channels: tuple = (32, 128, 272, 432, 144, 64, 16)
    dilated_unit_count: int = 6
    dilation_rates: tuple = (1, 2, 3)
    weight_mode: str = "learnable"
    stem_stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "dilation_rates", tuple(int(d) for d in self.dilation_rates))
        if len(self.stage_channels) != 7:
            raise ConfigError(
                "stage_channels needs 7 entries (stem, enc1..enc3, dec1..dec3), "
                f"got {len(self.stage_channels)}")
        if self.width_multiplier <= 0:
            raise ConfigError(f"width_multiplier must be positive, got {self.width_multiplier}")
        if self.stem_stride not in (1, 2):
            raise ConfigError(f"stem_stride must be 1 or 2, got {self.stem_stride}")
        if not 0 <= self.dilated_unit_count <= NUM_STAGES * UNITS_PER_STAGE:
            raise ConfigError(
                f"dilated_unit_count must lie in [0, {NUM_STAGES * UNITS_PER_STAGE}]")
        names = ("stem", "enc1", "enc2", "enc3", "dec1", "dec2", "dec3")
        for name, c in zip(names, self.stage_channels):
            if c % self.groups:
                raise ConfigError(
                    f"stage {name} width {c} is not divisible by groups={self.groups}")
        # the multiplier rounding rule then keeps every scaled width a multiple
        assert all(c % self.groups == 0 for c in self.scaled_channels())

    def scaled_channels(self):
        """Stage widths after the multiplier, rounded to multiples of groups."""
        m = self.width_multiplier
        g = self.groups
        return tuple(max(g, int(c * m / g + 0.5) * g) for c in self.stage_channels)

    @property
    def downsample_factor(self):
        return self.stem_stride * 2 ** NUM_STAGES

    def unit_plan(self):
        """Ordered (kind, stride) per unit: nine encoder then three decoder."""
        plan = []
        for s in range(NUM_STAGES):
            for u in range(UNITS_PER_STAGE):
                kind = "DMF" if len(plan) < self.dilated_unit_count else "MF"
                plan.append((kind, 2 if u == 0 else 1))
        plan.extend(("MF", 1) for _ in range(NUM_STAGES))
        return plan


def dmfnet_config(**overrides):
    """Full-scale network with six leading dilated encoder units."""
    return replace(ArchConfig(), **overrides)


def mfnet_config(**overrides):
    """Plain multi-fiber variant (no dilated units)."""
    return replace(ArchConfig(dilated_unit_count=0), **overrides)


def mfnet_075_config(**overrides):
    """MFNet with every stage width scaled to 75%."""
    return replace(ArchConfig(dilated_unit_count=0, width_multiplier=0.75), **overrides)


def toy_config(groups=4, stage_channels=(8, 16, 24, 32, 16, 16, 8),
               stem_stride=2, **overrides):
    """Small widths for tests, demos and CPU training experiments."""
    return ArchConfig(groups=groups, stage_channels=stage_channels,
                      stem_stride=stem_stride, **overrides)


ARCH_PRESETS = {
    "dmfnet": dmfnet_config,
    "mfnet": mfnet_config,
    "mfnet-075": mfnet_075_config,
    "toy": toy_config,
}


def _unit_cfg(kind, cfg, c_in, c_out, stride):
    c_mid = min(c_in, c_out)
    if kind == "DMF":
        return DMFUnitConfig(c_in=c_in, c_mid=c_mid, c_out=c_out, g=cfg.groups,
                             stride=stride, dilation_rates=cfg.dilation_rates,
                             weight_mode=cfg.weight_mode)
    return MFUnitConfig(c_in=c_in, c_mid=c_mid, c_out=c_out, g=cfg.groups, stride=stride)


class Network:
    """Realized layer graph with its parameter store."""

    def __init__(self, cfg, stem, stages, decoder, classifier, dtype):
        self.cfg = cfg
        self.stem = stem
        self.stages = stages          # list of stage lists of units
        self.decoder = decoder       # list of units, deep to shallow
        self.classifier = classifier
        self.dtype = dtype

    # -- forward ----------------------------------------------------------

    def _check_input(self, shape):
        if shape[1] != self.cfg.input_channels:
            raise ShapeError(
                f"input has {shape[1]} channels, network expects {self.cfg.input_channels}")
        f = self.cfg.downsample_factor
        if any(s % f for s in shape[2:]):
            raise ShapeError(
                f"spatial dims {shape[2:]} must each be divisible by {f} "
                f"(stem stride {self.cfg.stem_stride} x {NUM_STAGES} stage strides of 2)")

    def forward(self, x, mode="eval", tape=None):
        """Logits with the input's spatial dims and num_classes channels."""
        data = x.data if isinstance(x, ag.Var) else x
        self._check_input(data.shape)
        h = self.stem.forward(x, mode, tape)
        skips = [h]
        for stage in self.stages:
            for unit in stage:
                h = unit.forward(h, mode, tape)
            skips.append(h)
        # skips: stem out (1/s0), stage outputs (1/2s0, 1/4s0, 1/8s0)
        for unit, skip in zip(self.decoder, reversed(skips[:-1])):
            h = ag.t_trilinear_upsample(tape, h, 2)
            h = ag.t_concat_channels(tape, h, skip)
            h = unit.forward(h, mode, tape)
        if self.cfg.stem_stride != 1:
            h = ag.t_trilinear_upsample(tape, h, self.cfg.stem_stride)
        return self.classifier.forward(h, mode, tape)

    # -- parameter access --------------------------------------------------

    def _blocks(self):
        yield self.stem
        for stage in self.stages:
            yield from stage
        yield from self.decoder
        yield self.classifier

    def parameters(self):
        out = []
        for block in self._blocks():
            out += block.parameters()
        return out

    def buffers(self):
        out = []
        for block in self._blocks():
            out += block.buffers()
        return out

    def omega_parameters(self):
        """(unit name, omega Parameter) for every DMF unit, encoder order."""
        out = []
        for block in self._blocks():
            if isinstance(block, DMFUnit):
                out.append((block.name, block.omega))
        return out

    def state_items(self):
        """Ordered (name, array) pairs: parameters then running statistics."""
        items = [(p.name, p.data) for p in self.parameters()]
        items += [(name, arr) for name, arr in self.buffers()]
        return items


def build_network(cfg, seed=0, dtype=np.float32):
    """Construct a network with freshly initialized parameters.

    Kaiming fan-in init for conv weights, gamma=1/beta=0 for batch norm,
    omega=1 for every dilated unit. Deterministic for a given seed.
    """
    rng = np.random.default_rng(seed)
    widths = cfg.scaled_channels()
    stem_w, e1, e2, e3, d1, d2, d3 = widths
    plan = cfg.unit_plan()

    stem = Conv3dLayer(
        "stem",
        ops.ConvSpec(cfg.input_channels, stem_w, kernel=3, stride=cfg.stem_stride,
                     padding=ops.same_padding(3)),
        rng, dtype)

    stages = []
    c_prev = stem_w
    idx = 0
    for s, c_out in enumerate((e1, e2, e3)):
        stage = []
        for u in range(UNITS_PER_STAGE):
            kind, stride = plan[idx]
            ucfg = _unit_cfg(kind, cfg, c_prev, c_out, stride)
            cls = DMFUnit if kind == "DMF" else MFUnit
            stage.append(cls(f"enc{s + 1}.u{u}", ucfg, rng, dtype))
            c_prev = c_out
            idx += 1
        stages.append(stage)

    decoder = []
    skip_widths = (e2, e1, stem_w)
    for s, (skip_w, c_out) in enumerate(zip(skip_widths, (d1, d2, d3))):
        kind, stride = plan[idx]
        ucfg = _unit_cfg(kind, cfg, c_prev + skip_w, c_out, stride)
        decoder.append(MFUnit(f"dec{s + 1}", ucfg, rng, dtype))
        c_prev = c_out
        idx += 1

    classifier = Conv3dLayer(
        "classifier",
        ops.ConvSpec(d3, cfg.num_classes, kernel=1, padding=0),
        rng, dtype)

    return Network(cfg, stem, stages, decoder, classifier, dtype)


def predict_labels(logits):
    """Per-voxel argmax over classes mapped to BraTS labels {0, 1, 2, 4}.

    Ties break toward the lower class index (numpy argmax convention).
    """
    logits = ops.check_volume5d(logits, "logits")
    if logits.shape[1] != len(CLASS_LABELS):
        raise ShapeError(
            f"logits have {logits.shape[1]} channels, expected {len(CLASS_LABELS)} classes")
    idx = logits.argmax(axis=1)
    return np.asarray(CLASS_LABELS, dtype=np.uint8)[idx]
