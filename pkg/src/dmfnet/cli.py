"""Command-line entry point.

Subcommands: analyze, infer, train, gradcheck, augment-preview, evaluate.
Configuration precedence is built-in defaults < --config JSON file <
command-line flags; the resolved configuration is echoed to stderr for
provenance. Exit codes: 0 success, 1 validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, autograd as ag, blocks, data as dio, network as net_mod, ops, training
from .errors import DMFNetError


def _log(msg):
    print(msg, file=sys.stderr)


def _echo_config(name, cfg):
    _log(f"resolved {name} config: {json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=list)}")


def _load_config_file(path):
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _arch_from_args(args, file_cfg):
    overrides = dict(file_cfg.get("arch", {}))
    if getattr(args, "width_multiplier", None) is not None:
        overrides["width_multiplier"] = args.width_multiplier
    if getattr(args, "groups", None) is not None:
        overrides["groups"] = args.groups
    preset = net_mod.ARCH_PRESETS[args.arch]
    cfg = preset(**overrides)
    _echo_config("arch", cfg)
    return cfg


def _shape_arg(text):
    return tuple(int(v) for v in text.split(","))


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def cmd_analyze(args):
    file_cfg = _load_config_file(args.config)
    shape = tuple(args.input_shape)
    if args.compare:
        names = [n.strip() for n in args.compare.split(",")]
        reports = []
        for name in names:
            cfg = net_mod.ARCH_PRESETS[name]()
            net = net_mod.build_network(cfg, seed=0)
            reports.append(analysis.count_flops(net, shape))
        print(analysis.report_table(reports, names))
        return 0
    cfg = _arch_from_args(args, file_cfg)
    net = net_mod.build_network(cfg, seed=0)
    report = analysis.count_flops(net, shape)
    print(report.to_text(per_layer=args.per_layer))
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
        _log(f"wrote {args.json}")
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def _pad_to_divisible(x, factor):
    pads = []
    for s in x.shape[2:]:
        rem = (-s) % factor
        pads.append((0, rem))
    padded = np.pad(x, ((0, 0), (0, 0)) + tuple(pads))
    return padded, [s for s in x.shape[2:]]


def cmd_infer(args):
    file_cfg = _load_config_file(args.config)
    cfg = _arch_from_args(args, file_cfg)
    net = net_mod.build_network(cfg, seed=0)
    dio.load_params(net, args.checkpoint)
    volume, _ = dio.load_case(args.case_dir)
    volume = dio.normalize(volume)
    x = volume[None].astype(np.float32)
    padded, orig = _pad_to_divisible(x, cfg.downsample_factor)
    logits = net.forward(padded, mode="eval")
    labels = net_mod.predict_labels(logits)[0]
    labels = labels[: orig[0], : orig[1], : orig[2]]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())
    _log(f"wrote {out} ({labels.shape[0]}x{labels.shape[1]}x{labels.shape[2]} uint8 labels)")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_cfg_from_args(args, file_cfg):
    overrides = dict(file_cfg.get("train", {}))
    for key in ("batch_size", "epochs", "lr", "weight_decay", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    cfg = training.TrainConfig(**overrides)
    _echo_config("train", cfg)
    return cfg


def _augment_cfg_from_args(args, file_cfg):
    if getattr(args, "no_augment", False):
        _log("augmentation disabled")
        return None
    overrides = dict(file_cfg.get("augment", {}))
    if getattr(args, "crop_size", None) is not None:
        overrides["crop_size"] = args.crop_size
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    cfg = dio.AugmentConfig(**overrides)
    _echo_config("augment", cfg)
    return cfg


def _load_dataset(data_dir, require_labels):
    case_dirs = dio.list_cases(data_dir)
    if not case_dirs:
        raise DMFNetError(f"no cases found under {data_dir}")
    dataset = []
    ids = []
    for d in case_dirs:
        vol, lab = dio.load_case(d)
        if require_labels and lab is None:
            raise DMFNetError(f"case {d.name} has no {dio.SEG_NAME}")
        dataset.append((dio.normalize(vol), lab))
        ids.append(d.name)
    return dataset, ids


def cmd_train(args):
    file_cfg = _load_config_file(args.config)
    arch_cfg = _arch_from_args(args, file_cfg)
    train_cfg = _train_cfg_from_args(args, file_cfg)
    aug_cfg = _augment_cfg_from_args(args, file_cfg)
    dataset, _ = _load_dataset(args.data_dir, require_labels=True)
    net = net_mod.build_network(arch_cfg, seed=train_cfg.seed)
    log = training.train(net, dataset, train_cfg, aug_cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dio.save_params(net, out_dir / "checkpoint.bin")
    log.save_jsonl(out_dir / "trainlog.jsonl")
    log.save_omega_csv(out_dir / "omega.csv")
    final = log.losses[-1] if log.steps else float("nan")
    _log(f"trained {len(log.steps)} steps; final loss {final:.4f}; artifacts in {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


class _OpBlock:
    """Adapter exposing a traced-op closure as a checkable block."""

    def __init__(self, fn, params=()):
        self._fn = fn
        self._params = list(params)

    def forward(self, x, mode="train", tape=None):
        return self._fn(tape, x, mode)

    def parameters(self):
        return self._params

    def buffers(self):
        return []


def _conv_case(rng, groups, dilation, stride):
    spec = ops.ConvSpec(4, 4, kernel=3, stride=stride, dilation=dilation,
                        padding=ops.same_padding(3, dilation), groups=groups)
    layer = blocks.Conv3dLayer(f"conv_g{groups}_d{dilation}_s{stride}", spec, rng,
                               dtype=np.float64)
    return layer


def gradcheck_suite(scope, seed=0):
    """(name, block, input, tolerance, step, probes) cases for one scope."""
    rng = np.random.default_rng(seed)
    x8 = rng.standard_normal((1, 4, 6, 6, 6))
    cases = []
    if scope == "ops":
        for g, d, s in [(1, 1, 1), (2, 1, 1), (4, 2, 1), (2, 3, 1), (1, 1, 2), (4, 1, 2)]:
            layer = _conv_case(rng, g, d, s)
            cases.append((layer.name, layer, x8, 1e-6, 1e-5, 60))
        up = _OpBlock(lambda tape, x, mode: ag.t_trilinear_upsample(tape, x, 2))
        cases.append(("trilinear_upsample", up, rng.standard_normal((1, 3, 4, 4, 4)), 1e-6, 1e-5, 60))
        cat = _OpBlock(lambda tape, x, mode: ag.t_concat_channels(tape, x, ag.t_add(tape, x, x)))
        cases.append(("concat_add", cat, rng.standard_normal((1, 2, 4, 4, 4)), 1e-6, 1e-5, 60))
        bnl = blocks.BatchNorm3d("bn", 3, dtype=np.float64)
        cases.append(("batch_norm", bnl, rng.standard_normal((2, 3, 4, 4, 4)), 1e-5, 1e-5, 60))
        sm = _OpBlock(lambda tape, x, mode: ag.t_softmax_channels(tape, x))
        cases.append(("softmax_channels", sm, rng.standard_normal((1, 4, 3, 3, 3)), 1e-5, 1e-5, 60))
    elif scope == "blocks":
        mux = blocks.build_multiplexer(8, rng=rng, dtype=np.float64)
        cases.append(("multiplexer", mux, rng.standard_normal((1, 8, 4, 4, 4)), 1e-5, 1e-5, 40))
        mf = blocks.build_mf_unit(blocks.MFUnitConfig(8, 8, 8, g=2), rng=rng, dtype=np.float64)
        cases.append(("mf_unit", mf, rng.standard_normal((1, 8, 4, 4, 4)), 1e-5, 1e-5, 40))
        dmf = blocks.build_dmf_unit(blocks.DMFUnitConfig(8, 8, 8, g=2), rng=rng,
                                    dtype=np.float64)
        cases.append(("dmf_unit", dmf, rng.standard_normal((1, 8, 6, 6, 6)), 1e-5, 1e-5, 40))
    elif scope == "network":
        cfg = net_mod.toy_config(groups=2, stage_channels=(4, 8, 8, 8, 8, 8, 4),
                                 stem_stride=1)
        net = net_mod.build_network(cfg, seed=seed, dtype=np.float64)
        cases.append(("dmfnet_toy_8cube", net, rng.standard_normal((1, 4, 8, 8, 8)), 1e-4, 1e-5, 6))
    else:
        raise DMFNetError(f"unknown gradcheck scope {scope!r}")
    return cases


def cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else 0
    failures = 0
    for name, block, x, tol, step, probes in gradcheck_suite(args.scope, seed):
        report = ag.finite_diff_check(block, x, tolerance=tol, step=step,
                                      max_per_tensor=probes, rng=seed)
        status = "PASS" if report.passed else "FAIL"
        worst = max((r.max_rel_err for r in report.rows), default=0.0)
        print(f"{status} {name} (tol {tol:g}, worst rel err {worst:.3e})")
        if not report.passed:
            print(report)
            failures += 1
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# augment-preview
# ---------------------------------------------------------------------------


def cmd_augment_preview(args):
    file_cfg = _load_config_file(args.config)
    aug_cfg = _augment_cfg_from_args(args, file_cfg)
    if aug_cfg is None:
        raise DMFNetError("augment-preview needs augmentation enabled")
    volume, labels = dio.load_case(args.case_dir)
    volume = dio.normalize(volume)
    rng = np.random.default_rng(aug_cfg.seed)
    out_vol, out_lab = dio.augment(volume, labels, aug_cfg, rng)
    dio.save_case(args.out_dir, out_vol, out_lab)
    _log(f"wrote augmented case to {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args):
    file_cfg = _load_config_file(args.config)
    cfg = _arch_from_args(args, file_cfg)
    net = net_mod.build_network(cfg, seed=0)
    dio.load_params(net, args.checkpoint)
    dataset, ids = _load_dataset(args.data_dir, require_labels=True)
    records, means = training.evaluate(net, dataset, case_ids=ids)
    for rec in records:
        print(json.dumps(rec, sort_keys=True))
    print(json.dumps({"case_id": "mean", **means}, sort_keys=True))
    if args.out:
        dio.write_metrics(args.out, records)
        _log(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dmfnet",
        description="Dilated multi-fiber 3D segmentation networks on numpy kernels.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file (arch/train/augment sections)")
        p.add_argument("--seed", type=int, default=None, help="rng seed")

    p = sub.add_parser("analyze", help="parameter and FLOPs accounting")
    add_common(p)
    p.add_argument("--arch", choices=sorted(net_mod.ARCH_PRESETS), default="dmfnet")
    p.add_argument("--width-multiplier", type=float, default=None)
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--input-shape", type=_shape_arg, default=(1, 4, 128, 128, 128))
    p.add_argument("--compare", help="comma-separated presets for a comparison table")
    p.add_argument("--per-layer", action="store_true")
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("infer", help="segment one case with a trained checkpoint")
    add_common(p)
    p.add_argument("--arch", choices=sorted(net_mod.ARCH_PRESETS), default="dmfnet")
    p.add_argument("--width-multiplier", type=float, default=None)
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case-dir", required=True)
    p.add_argument("--out", required=True, help="output label file (raw uint8)")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("train", help="train on a directory of cases")
    add_common(p)
    p.add_argument("--arch", choices=sorted(net_mod.ARCH_PRESETS), default="toy")
    p.add_argument("--width-multiplier", type=float, default=None)
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--crop-size", type=_shape_arg, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    add_common(p)
    p.add_argument("--scope", choices=("ops", "blocks", "network"), default="ops")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("augment-preview", help="apply the augmentation pipeline once")
    add_common(p)
    p.add_argument("--case-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--crop-size", type=_shape_arg, default=None)
    p.set_defaults(fn=cmd_augment_preview)

    p = sub.add_parser("evaluate", help="dice metrics over a labeled dataset")
    add_common(p)
    p.add_argument("--arch", choices=sorted(net_mod.ARCH_PRESETS), default="dmfnet")
    p.add_argument("--width-multiplier", type=float, default=None)
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", help="metrics JSONL output path")
    p.set_defaults(fn=cmd_evaluate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DMFNetError as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
