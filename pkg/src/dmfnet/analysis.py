"""Static parameter and FLOPs accounting over built blocks and networks.

Conventions: parameters are exact integer counts of learnable scalars
(conv weights, optional biases, batch-norm gamma/beta, branch weights).
FLOPs count multiply-add pairs of convolution layers only, i.e.
k_d*k_h*k_w*c_in*c_out/g per output voxel; BN, ReLU, interpolation and
softmax are excluded. Totals are reported in millions / units of 1e9.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .blocks import BatchNorm3d, Conv3dLayer, DMFUnit, MFUnit, Multiplexer, PreActConv
from .errors import ConfigError
from .network import Network


@dataclass(frozen=True)
class LayerRow:
    name: str
    kind: str
    params: int
    flops: int


@dataclass
class ComplexityReport:
    """Per-layer accounting rows plus totals."""

    rows: list = field(default_factory=list)
    input_shape: tuple | None = None

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self):
        return sum(r.flops for r in self.rows)

    @property
    def params_millions(self):
        return self.total_params / 1e6

    @property
    def flops_g(self):
        return self.total_flops / 1e9

    def to_text(self, per_layer=True):
        lines = []
        if per_layer:
            lines.append(f"{'layer':44s} {'kind':6s} {'params':>12s} {'flops':>16s}")
            for r in self.rows:
                lines.append(f"{r.name:44s} {r.kind:6s} {r.params:>12d} {r.flops:>16d}")
        shape = "n/a" if self.input_shape is None else "x".join(map(str, self.input_shape))
        lines.append(f"total params: {self.params_millions:.2f}M ({self.total_params})")
        lines.append(f"total conv FLOPs at input {shape}: {self.flops_g:.2f}G ({self.total_flops})")
        return "\n".join(lines)

    def to_json(self):
        return json.dumps({
            "input_shape": list(self.input_shape) if self.input_shape else None,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "rows": [
                {"name": r.name, "kind": r.kind, "params": r.params, "flops": r.flops}
                for r in self.rows
            ],
        }, indent=2)


def _voxels(spatial, n):
    return n * int(np.prod(spatial))


def _conv_rows(layer, spatial, n, rows):
    spec = layer.spec
    out_sp = None if spatial is None else spec.out_spatial(spatial)
    macs = layer.weight.data.size
    params = macs + (spec.c_out if layer.bias is not None else 0)
    flops = 0 if out_sp is None else macs * _voxels(out_sp, n)
    rows.append(LayerRow(layer.name, "conv", int(params), int(flops)))
    return out_sp


def _bn_rows(layer, rows):
    rows.append(LayerRow(layer.name, "bn", 2 * layer.gamma.data.size, 0))


def _block_rows(block, spatial, n, rows):
    """Append rows for a block; returns the output spatial dims (or None)."""
    if isinstance(block, Conv3dLayer):
        return _conv_rows(block, spatial, n, rows)
    if isinstance(block, BatchNorm3d):
        _bn_rows(block, rows)
        return spatial
    if isinstance(block, PreActConv):
        _bn_rows(block.bn, rows)
        return _conv_rows(block.conv, spatial, n, rows)
    if isinstance(block, Multiplexer):
        _bn_rows(block.bn_squeeze, rows)
        macs = block.weight.data.size
        vox = 0 if spatial is None else _voxels(spatial, n)
        rows.append(LayerRow(f"{block.name}.squeeze", "conv", macs, macs * vox))
        _bn_rows(block.bn_inflate, rows)
        # inflate shares the squeeze weights; parameters counted once
        rows.append(LayerRow(f"{block.name}.inflate", "conv", 0, macs * vox))
        return spatial
    if isinstance(block, MFUnit):
        sp = _block_rows(block.mux, spatial, n, rows)
        sp = _block_rows(block.conv1, sp, n, rows)
        sp = _block_rows(block.conv2, sp, n, rows)
        if block.shortcut is not None:
            _conv_rows(block.shortcut, spatial, n, rows)
        return sp
    if isinstance(block, DMFUnit):
        sp = _block_rows(block.mux, spatial, n, rows)
        _bn_rows(block.bn1, rows)
        out_sp = sp
        for branch in block.branches:
            out_sp = _conv_rows(branch, sp, n, rows)
        rows.append(LayerRow(block.omega.name, "omega", block.omega.data.size, 0))
        out_sp = _block_rows(block.conv2, out_sp, n, rows)
        if block.shortcut is not None:
            _conv_rows(block.shortcut, spatial, n, rows)
        return out_sp
    if isinstance(block, Network):
        return _network_rows(block, spatial, n, rows)
    raise ConfigError(f"no complexity rule for block type {type(block).__name__}")


def _network_rows(net, spatial, n, rows):
    sp = _block_rows(net.stem, spatial, n, rows)
    skips = [sp]
    for stage in net.stages:
        for unit in stage:
            sp = _block_rows(unit, sp, n, rows)
        skips.append(sp)
    for unit, skip_sp in zip(net.decoder, reversed(skips[:-1])):
        if sp is not None:
            sp = tuple(2 * s for s in sp)
            if skip_sp != sp:
                raise ConfigError(
                    f"skip spatial dims {skip_sp} do not match upsampled dims {sp}")
        sp = _block_rows(unit, sp, n, rows)
    if net.cfg.stem_stride != 1 and sp is not None:
        sp = tuple(net.cfg.stem_stride * s for s in sp)
    return _block_rows(net.classifier, sp, n, rows)


def block_complexity(block, input_shape=None):
    """Accounting for any single block; input_shape (n, c, d, h, w) enables FLOPs."""
    rows = []
    if input_shape is None:
        _block_rows(block, None, 1, rows)
        return ComplexityReport(rows=rows, input_shape=None)
    n = input_shape[0]
    _block_rows(block, tuple(input_shape[2:]), n, rows)
    return ComplexityReport(rows=rows, input_shape=tuple(input_shape))


def count_params(net):
    """Exact per-layer parameter counts; independent of input shape."""
    return block_complexity(net, None)


def count_flops(net, input_shape=(1, 4, 128, 128, 128)):
    """Parameter and conv multiply-add accounting at the given input shape."""
    if isinstance(net, Network):
        net._check_input(input_shape)
    return block_complexity(net, input_shape)


def report_table(reports, labels):
    """Render a comparison table: one row per (label, ComplexityReport)."""
    w = max(12, max(len(label) for label in labels) + 2)
    lines = [f"{'Model':{w}s} {'Params(M)':>10s} {'FLOPs(G)':>10s}"]
    for label, rep in zip(labels, reports):
        flops = f"{rep.flops_g:10.2f}" if rep.input_shape is not None else f"{'n/a':>10s}"
        lines.append(f"{label:{w}s} {rep.params_millions:10.2f} {flops}")
    return "\n".join(lines)
