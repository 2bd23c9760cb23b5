"""Reverse-mode differentiation over the fixed kernel vocabulary of
:mod:`dmfnet.ops`, plus an independent finite-difference verifier.

A :class:`GradTape` records a forward pass as a topologically ordered list of
nodes (define-by-run order is already topological). Each node stores its
output snapshot, its parents and a backward rule; :func:`backward` walks the
list in reverse, accumulating gradients into parents and into every trainable
:class:`Parameter` touched by the pass. Tapes are single-use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError


class Parameter:
    """Named learnable array. Optimizers update ``data`` in place.

    decay=False exempts the tensor from L2 regularization (used for the
    dilated-branch weights); trainable=False freezes it entirely.
    """

    __slots__ = ("name", "data", "decay", "trainable")

    def __init__(self, name, data, decay=True, trainable=True):
        self.name = name
        self.data = np.ascontiguousarray(data)
        self.decay = decay
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


class Var:
    """One recorded value in a tape."""

    __slots__ = ("data", "grad", "op", "parents", "backward_fn", "recompute_fn", "param")

    def __init__(self, data, op="leaf", parents=(), backward_fn=None, recompute_fn=None, param=None):
        self.data = data
        self.grad = None
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.recompute_fn = recompute_fn
        self.param = param


class GradTape:
    """Ordered record of one forward pass."""

    def __init__(self):
        self.nodes = []
        self.input_var = None
        self.output_var = None
        self.consumed = False
        self._param_vars = {}
        self._param_names = {}

    def leaf(self, data, param=None):
        v = Var(np.asarray(data), op="param" if param is not None else "input", param=param)
        self.nodes.append(v)
        return v

    def param_var(self, param):
        """Memoized leaf Var for a Parameter (one node per tape per parameter)."""
        key = id(param)
        if key not in self._param_vars:
            prev = self._param_names.get(param.name)
            if prev is not None and prev != key:
                raise ConfigError(f"duplicate parameter name on tape: {param.name!r}")
            self._param_names[param.name] = key
            self._param_vars[key] = self.leaf(param.data, param=param)
        return self._param_vars[key]

    def node(self, data, op, parents, backward_fn, recompute_fn=None):
        v = Var(data, op=op, parents=tuple(parents), backward_fn=backward_fn,
                recompute_fn=recompute_fn)
        self.nodes.append(v)
        return v

    def replay(self):
        """Re-execute every recorded op in order and verify the snapshots.

        Pure per node (no running-stat updates). Returns the output array.
        Assumes parameters have not been mutated since recording.
        """
        for v in self.nodes:
            if v.recompute_fn is None:
                continue
            again = v.recompute_fn()
            if not np.array_equal(again, v.data):
                raise AssertionError(f"tape replay diverged at op {v.op!r}")
        return self.output_var.data


def forward_record(block, x, mode="train"):
    """Run ``block.forward`` under a fresh tape.

    Returns (output array, tape). The output equals the plain forward
    bit-exactly; the tape captures every parameterized op.
    """
    x = np.asarray(x)
    tape = GradTape()
    xv = tape.leaf(x)
    tape.input_var = xv
    out = block.forward(xv, mode=mode, tape=tape)
    tape.output_var = out
    return out.data, tape


def backward(tape, output_grad):
    """Reverse sweep: gradients of sum(output * output_grad).

    Returns (input_grad, param_grads) where param_grads maps parameter name
    to a gradient of identical shape. Tapes are single-use.
    """
    if tape.consumed:
        raise ConfigError("tape already consumed; record a fresh forward pass")
    out = tape.output_var
    output_grad = np.asarray(output_grad, dtype=out.data.dtype)
    if output_grad.shape != out.data.shape:
        raise ShapeError(
            f"output_grad shape {output_grad.shape} != recorded output {out.data.shape}"
        )
    tape.consumed = True

    out.grad = output_grad
    for v in reversed(tape.nodes):
        if v.grad is None or v.backward_fn is None:
            continue
        for parent, g in zip(v.parents, v.backward_fn(v.grad)):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g

    grads = {}
    for v in tape._param_vars.values():
        if not v.param.trainable:
            continue
        grads[v.param.name] = v.grad if v.grad is not None else np.zeros_like(v.data)
    input_grad = tape.input_var.grad
    if input_grad is None:
        input_grad = np.zeros_like(tape.input_var.data)
    return input_grad, grads


# ---------------------------------------------------------------------------
# Traced ops. Each mirrors one ops.* kernel: plain dispatch when tape is None,
# record + backward rule otherwise.
# ---------------------------------------------------------------------------


def _eff_weight(weight, transpose_weight):
    # channel-transposed view shares storage with the parameter (tied convs)
    return weight.data.transpose(1, 0, 2, 3, 4) if transpose_weight else weight.data


def t_conv3d(tape, x, weight, spec, bias=None, transpose_weight=False):
    """Traced conv3d. With transpose_weight the kernel is the channel
    transpose of ``weight`` (used by the tied multiplexer pair); the weight
    gradient is transposed back before accumulating into the parameter."""
    if tape is None:
        return ops.conv3d(x, _eff_weight(weight, transpose_weight), spec,
                          bias.data if bias is not None else None)
    xv = x
    wv = tape.param_var(weight)
    parents = [xv, wv]
    bv = None
    if bias is not None:
        bv = tape.param_var(bias)
        parents.append(bv)

    def w_eff():
        return _eff_weight(weight, transpose_weight)

    data = ops.conv3d(xv.data, w_eff(), spec, bv.data if bv is not None else None)
    x_shape = xv.data.shape

    def bwd(g):
        gx = ops.conv3d_input_grad(g, w_eff(), spec, x_shape)
        gw = ops.conv3d_weight_grad(xv.data, g, spec)
        if transpose_weight:
            gw = gw.transpose(1, 0, 2, 3, 4)
        if bv is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    def redo():
        return ops.conv3d(xv.data, w_eff(), spec, bv.data if bv is not None else None)

    return tape.node(data, "conv3d", parents, bwd, redo)


def t_batch_norm(tape, x, bn, mode="train"):
    """bn is a BatchNorm3d block (gamma/beta Parameters plus running buffers)."""
    if tape is None:
        return ops.batch_norm(x, bn.params, mode)
    xv = x
    gv = tape.param_var(bn.gamma)
    bv = tape.param_var(bn.beta)
    p = bn.params
    train = mode == "train"
    if train:
        mean, var = ops.batch_norm_stats(xv.data)
        m = p.momentum
        p.running_mean[:] = (1 - m) * p.running_mean + m * mean
        p.running_var[:] = (1 - m) * p.running_var + m * var
    elif mode == "eval":
        mean, var = p.running_mean.copy(), p.running_var.copy()
    else:
        raise ConfigError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    data = ops.batch_norm_apply(xv.data, mean, var, gv.data, bv.data, p.eps)

    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    inv = 1.0 / np.sqrt(var + p.eps)
    count = xv.data.size // xv.data.shape[1]

    def bwd(g):
        xm = xv.data - mean.reshape(shape)
        xhat = xm * inv.reshape(shape)
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gv.data.reshape(shape)
        if not train:
            # eval-mode BN is an affine map in x
            return dxhat * inv.reshape(shape), dgamma, dbeta
        dvar = (dxhat * xm).sum(axis=axes) * (-0.5) * inv**3
        dmean = (-(dxhat).sum(axis=axes) * inv
                 + dvar * (-2.0 / count) * xm.sum(axis=axes))
        dx = (dxhat * inv.reshape(shape)
              + dvar.reshape(shape) * (2.0 / count) * xm
              + dmean.reshape(shape) / count)
        return dx, dgamma, dbeta

    def redo():
        if train:
            m2, v2 = ops.batch_norm_stats(xv.data)
        else:
            m2, v2 = mean, var
        return ops.batch_norm_apply(xv.data, m2, v2, gv.data, bv.data, p.eps)

    return tape.node(data, "batch_norm", (xv, gv, bv), bwd, redo)


def t_relu(tape, x):
    if tape is None:
        return ops.relu(x)
    xv = x
    data = ops.relu(xv.data)

    def bwd(g):
        # subgradient at exactly 0 is defined as 0
        return (g * (xv.data > 0),)

    return tape.node(data, "relu", (xv,), bwd, lambda: ops.relu(xv.data))


def t_add(tape, a, b):
    if tape is None:
        return ops.add(a, b)
    data = ops.add(a.data, b.data)
    return tape.node(data, "add", (a, b), lambda g: (g, g),
                     lambda: ops.add(a.data, b.data))


def t_concat_channels(tape, a, b):
    if tape is None:
        return ops.concat_channels(a, b)
    data = ops.concat_channels(a.data, b.data)
    ca = a.data.shape[1]

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return tape.node(data, "concat_channels", (a, b), bwd,
                     lambda: ops.concat_channels(a.data, b.data))


def t_trilinear_upsample(tape, x, scale):
    if tape is None:
        return ops.trilinear_upsample(x, scale)
    xv = x
    data = ops.trilinear_upsample(xv.data, scale)
    in_shape = xv.data.shape

    def bwd(g):
        return (ops.trilinear_upsample_grad(g, in_shape, scale),)

    return tape.node(data, "trilinear_upsample", (xv,), bwd,
                     lambda: ops.trilinear_upsample(xv.data, scale))


def t_softmax_channels(tape, x):
    if tape is None:
        return ops.softmax_channels(x)
    xv = x
    data = ops.softmax_channels(xv.data)

    def bwd(g):
        dot = (g * data).sum(axis=1, keepdims=True)
        return (data * (g - dot),)

    return tape.node(data, "softmax_channels", (xv,), bwd,
                     lambda: ops.softmax_channels(xv.data))


def t_branch_weighted_sum(tape, branches, omega):
    """sum_i omega[i] * branches[i] with learnable scalar weights.

    d(omega_i) is the inner product of branch i's output with the upstream
    gradient; branch gradients are omega_i * upstream.
    """
    if tape is None:
        acc = omega.data[0] * branches[0]
        for i in range(1, len(branches)):
            acc = acc + omega.data[i] * branches[i]
        return acc
    if omega.data.shape != (len(branches),):
        raise ShapeError(
            f"omega has shape {omega.data.shape}, expected ({len(branches)},)")
    parents = list(branches)
    ov = tape.param_var(omega) if omega.trainable else None
    if ov is not None:
        parents.append(ov)
    w = omega.data

    def compute():
        acc = w[0] * branches[0].data
        for i in range(1, len(branches)):
            acc = acc + w[i] * branches[i].data
        return acc

    data = compute()

    def bwd(g):
        grads = [w[i] * g for i in range(len(branches))]
        if ov is not None:
            grads.append(np.array([(b.data * g).sum() for b in branches], dtype=w.dtype))
        return grads

    return tape.node(data, "branch_weighted_sum", parents, bwd, compute)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class TensorCheck:
    name: str
    max_rel_err: float
    checked: int
    masked: int
    passed: bool


@dataclass
class CheckReport:
    """Per-tensor comparison of analytic gradients against central differences."""

    tolerance: float
    step: float
    rows: list = field(default_factory=list)
    failure: str | None = None

    @property
    def passed(self):
        return self.failure is None and all(r.passed for r in self.rows)

    def __str__(self):
        lines = [f"finite-difference check (tol={self.tolerance:g}, step={self.step:g})"]
        if self.failure:
            lines.append(f"  FAILED: {self.failure}")
        for r in self.rows:
            status = "ok" if r.passed else "FAIL"
            lines.append(
                f"  {status:4s} {r.name:40s} max_rel_err={r.max_rel_err:.3e} "
                f"checked={r.checked} masked={r.masked}"
            )
        return "\n".join(lines)


def _rel_err(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


def _loss_and_relu_inputs(block, x, mode):
    """Loss = sum of outputs, plus every ReLU input activation of the pass."""
    out, tape = forward_record(block, x, mode=mode)
    acts = [v.parents[0].data for v in tape.nodes if v.op == "relu"]
    return float(out.sum()), acts


def _crosses_kink(acts_plus, acts_minus):
    """True when the probe moved some ReLU input across its kink, which puts
    the central difference on two different linear pieces."""
    for ap, am in zip(acts_plus, acts_minus):
        if ((ap > 0) != (am > 0)).any():
            return True
    return False


def _snapshot_buffers(block):
    bufs = getattr(block, "buffers", None)
    if bufs is None:
        return []
    return [(arr, arr.copy()) for _, arr in bufs()]


def finite_diff_check(block, x, tolerance=1e-5, step=1e-5, max_per_tensor=200,
                      mode="train", rng=None):
    """Compare analytic gradients of L = sum(block(x)) to central differences.

    Requires 64-bit input and parameters. Samples up to ``max_per_tensor``
    scalars per parameter tensor and from the input. Probes that move a ReLU
    input across its kink (the exact case of sitting within one step of the
    kink along the probe direction) are masked rather than compared, since
    the two central-difference evaluations would straddle the corner.
    Restores any running-statistic buffers afterwards.
    """
    x = np.ascontiguousarray(x)
    if x.dtype != np.float64:
        raise ConfigError("finite_diff_check requires float64 input")
    params = [p for p in block.parameters() if p.trainable]
    for p in params:
        if p.data.dtype != np.float64:
            raise ConfigError(f"finite_diff_check requires float64 parameters ({p.name})")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    report = CheckReport(tolerance=tolerance, step=step)
    saved_buffers = _snapshot_buffers(block)
    try:
        out, tape = forward_record(block, x, mode=mode)
        loss = float(out.sum())
        if not np.isfinite(loss):
            report.failure = f"loss is not finite: {loss}"
            return report
        gin, grads = backward(tape, np.ones_like(out))

        targets = [(p.name, p.data, grads[p.name]) for p in params]
        targets.append(("input", x, gin))
        for name, arr, analytic in targets:
            flat = arr.reshape(-1)
            aflat = analytic.reshape(-1)
            size = flat.size
            if size <= max_per_tensor:
                idx = np.arange(size)
            else:
                idx = np.sort(rng.choice(size, size=max_per_tensor, replace=False))
            max_err = 0.0
            masked = 0
            checked = 0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                lp, acts_p = _loss_and_relu_inputs(block, x, mode)
                flat[i] = orig - step
                lm, acts_m = _loss_and_relu_inputs(block, x, mode)
                flat[i] = orig
                if _crosses_kink(acts_p, acts_m):
                    masked += 1
                    continue
                numeric = (lp - lm) / (2.0 * step)
                max_err = max(max_err, _rel_err(float(aflat[i]), numeric))
                checked += 1
            report.rows.append(TensorCheck(
                name=name, max_rel_err=max_err, checked=checked,
                masked=masked, passed=max_err <= tolerance,
            ))
    finally:
        for arr, saved in saved_buffers:
            arr[:] = saved
    return report
