"""Adam optimization with coupled L2 regularization, the training loop and
branch-weight trajectory logging.

The loop per step: augment -> forward (train mode) -> softmax -> generalized
dice loss -> backward -> adam_step. Deterministic given (config seed,
single-worker mode). Branch weights omega are snapshotted for every dilated
unit once per epoch so their trajectories can be exported and plotted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import data as dio
from .errors import ConfigError, GradientError, TrainingDiverged
from .losses import dice_region, generalized_dice_loss, region_specs
from .network import predict_labels


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1
    epochs: int = 10
    lr: float = 0.001
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_schedule: str = "constant"  # constant | poly
    poly_power: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.lr_schedule not in ("constant", "poly"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'poly', got {self.lr_schedule!r}")

    def lr_at(self, step, total_steps):
        if self.lr_schedule == "constant":
            return self.lr
        frac = min(step / max(total_steps, 1), 1.0)
        return self.lr * (1.0 - frac) ** self.poly_power


class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, params):
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}


def adam_step(params, grads, state, cfg, lr=None):
    """One Adam update with bias correction, in place.

    Coupled L2: weight_decay * theta is added to the gradient before the
    moment update. Parameters flagged decay=False (the branch weights omega)
    are exempt; decaying them would bias branch mixing toward zero.
    """
    lr = cfg.lr if lr is None else lr
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for p in params:
        if not p.trainable:
            continue
        g = grads[p.name]
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for {p.name!r} at step {t}")
        if cfg.weight_decay and p.decay:
            g = g + cfg.weight_decay * p.data
        m = state.m[p.name]
        v = state.v[p.name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(p.data.dtype)


@dataclass
class TrainLog:
    """Per-step losses, per-epoch omega snapshots, optional metric snapshots."""

    steps: list = field(default_factory=list)
    omega: list = field(default_factory=list)
    metrics: list = field(default_factory=list)

    @property
    def losses(self):
        return [rec["loss"] for rec in self.steps]

    def save_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"record": "step", **rec}, sort_keys=True) + "\n")
            for rec in self.omega:
                fh.write(json.dumps({"record": "omega", **rec}, sort_keys=True) + "\n")
            for rec in self.metrics:
                fh.write(json.dumps({"record": "metrics", **rec}, sort_keys=True) + "\n")

    def save_omega_csv(self, path):
        """Branch-weight trajectories, one row per (epoch, unit)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write("epoch,unit,w1,w2,w3\n")
            for rec in self.omega:
                fh.write(f"{rec['epoch']},{rec['unit']},"
                         f"{rec['w1']!r},{rec['w2']!r},{rec['w3']!r}\n")


def _snapshot_omega(net, epoch, log):
    for name, omega in net.omega_parameters():
        w = omega.data
        log.omega.append({
            "epoch": epoch, "unit": name,
            "w1": float(w[0]), "w2": float(w[1]), "w3": float(w[2]),
        })


def train_step(net, x, labels, state, cfg, lr):
    """One optimization step on a prepared batch; returns the loss."""
    tape = ag.GradTape()
    xv = tape.leaf(x)
    tape.input_var = xv
    logits = net.forward(xv, mode="train", tape=tape)
    probs = ag.t_softmax_channels(tape, logits)
    loss_var = generalized_dice_loss(probs, labels, tape=tape)
    tape.output_var = loss_var
    loss = float(loss_var.data)
    if np.isfinite(loss):
        _, grads = ag.backward(tape, np.ones_like(loss_var.data))
        adam_step(net.parameters(), grads, state, cfg, lr=lr)
    return loss


def train(net, dataset, cfg, aug_cfg=None):
    """Optimize `net` on a list of (volume (4,d,h,w), labels (d,h,w)) cases.

    Volumes are assumed normalized. When `aug_cfg` is given every sample is
    cropped/flipped/rotated/jittered first; otherwise cases must share one
    shape and are used as-is. Halts with the step index and last finite loss
    if the loss leaves the finite range.
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    params = net.parameters()
    state = AdamState(params)
    rng = np.random.default_rng(cfg.seed)
    log = TrainLog()
    steps_per_epoch = max(len(dataset) // cfg.batch_size, 1)
    total_steps = cfg.epochs * steps_per_epoch
    last_finite = None
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for b in range(steps_per_epoch):
            picks = [dataset[order[(b * cfg.batch_size + k) % len(dataset)]]
                     for k in range(cfg.batch_size)]
            vols = []
            labs = []
            for vol, lab in picks:
                if aug_cfg is not None:
                    vol, lab = dio.augment(vol, lab, aug_cfg, rng)
                vols.append(vol)
                labs.append(lab)
            x = np.stack(vols).astype(net.dtype)
            y = np.stack(labs)
            lr = cfg.lr_at(step, total_steps)
            loss = train_step(net, x, y, state, cfg, lr)
            if not np.isfinite(loss):
                raise TrainingDiverged(step, last_finite)
            last_finite = loss
            log.steps.append({"step": step, "epoch": epoch, "loss": loss, "lr": lr})
            step += 1
        _snapshot_omega(net, epoch, log)
    return log


def evaluate(net, dataset, case_ids=None, et_labels=frozenset({4})):
    """Per-case and mean dice (ET/WT/TC) for (volume, labels) pairs.

    Returns (records, means); records follow the metrics file schema.
    """
    regions = region_specs(et_labels)
    records = []
    for i, (vol, lab) in enumerate(dataset):
        case_id = case_ids[i] if case_ids is not None else f"case{i:03d}"
        x = vol[None].astype(net.dtype)
        logits = net.forward(x, mode="eval")
        pred = predict_labels(logits)[0]
        rec = {"case_id": str(case_id)}
        for region in regions:
            rec[f"dice_{region.name.lower()}"] = dice_region(pred, lab, region)
        records.append(rec)
    keys = [f"dice_{r.name.lower()}" for r in regions]
    means = {k: float(np.mean([rec[k] for rec in records])) for k in keys}
    return records, means
