"""Command-line front end for the full experimental pipeline.

Subcommands: train-base, train-amr, sweep, breakpoint, correct, ablate.
Every option can also come from a flat JSON config (--config); explicit
flags win over config values, which win over built-in defaults. The
resolved options are echoed to <outdir>/effective_config.json. Exit codes:
0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import netpbm
from .data import Dataset, load_mnist, normalize, compute_norm_stats
from .evaluation import (
    ABLATION_MASKS,
    BreakpointInput,
    ablation_suite,
    amr_classifier,
    angle_sweep,
    base_classifier,
    breakpoint_share,
    emit_polar_svg,
    emit_sweep_csv,
    eval_at_angle,
    pct_ceiling,
    SWEEP_ANGLES,
)
from .geometry import mask_array, rotate_array, resize_bilinear
from .models import GATE_NAMES, predict_angle
from .training import (
    MetricsLog,
    TrainConfig,
    evaluate_classifier,
    load_checkpoint,
    restore_amr,
    restore_base,
    save_checkpoint,
    train_amr,
    train_base,
)


class UsageError(Exception):
    pass


def _default_seed() -> int:
    return int(os.environ.get("AMR_SEED", "0"))


_COMMON_TRAIN = {
    "epochs": None,  # per-command default below
    "batch_size": 128,
    "lr": 0.05,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "schedule": "cosine",
    "limit_train": 0,
    "limit_test": 0,
    "eval_subset": 2000,
    "mnist_dir": "data/mnist",
    "outdir": "runs/out",
}

_DEFAULTS = {
    "train-base": dict(_COMMON_TRAIN, epochs=10, preset="resnet18-slim", regime="upright"),
    "train-amr": dict(_COMMON_TRAIN, epochs=3, base_ckpt=None, gates="all",
                      compress_width=0),
    "sweep": {
        "method": "base", "base_ckpt": None, "amr_ckpt": None,
        "mnist_dir": "data/mnist", "outdir": "runs/sweep", "limit_test": 0,
        "angles": "", "ceiling": 0.0, "batch_size": 512,
    },
    "breakpoint": {},
    "correct": {"input_dir": None, "output_dir": None, "base_ckpt": None,
                "amr_ckpt": None},
    "ablate": dict(_COMMON_TRAIN, epochs=2, base_ckpt=None, eval_size=2000),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amr",
        description="Angle prediction and derotation experiments on MNIST-scale data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, *, training: bool):
        p.add_argument("--config", help="flat JSON config; flags override its values")
        p.add_argument("--seed", type=int, help="PRNG seed (default: $AMR_SEED or 0)")
        p.add_argument("--outdir", help="output directory")
        p.add_argument("--mnist-dir", dest="mnist_dir", help="directory with MNIST IDX files")
        if training:
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", dest="batch_size", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--momentum", type=float)
            p.add_argument("--weight-decay", dest="weight_decay", type=float)
            p.add_argument("--schedule", choices=["cosine", "step"])
            p.add_argument("--limit-train", dest="limit_train", type=int,
                           help="cap the training set size (0 = all)")
            p.add_argument("--limit-test", dest="limit_test", type=int,
                           help="cap the test set size (0 = all)")
            p.add_argument("--eval-subset", dest="eval_subset", type=int,
                           help="per-epoch metric sample size (0 = full test set)")

    p = sub.add_parser("train-base", help="train the base classifier from scratch")
    add_common(p, training=True)
    p.add_argument("--preset", choices=["resnet18", "resnet18-slim"])
    p.add_argument("--regime", choices=["upright", "rotated"])
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-amr", help="train the angle head against a frozen base")
    add_common(p, training=True)
    p.add_argument("--base-ckpt", dest="base_ckpt", help="path to the base checkpoint")
    p.add_argument("--gates", help="'all', or comma list from " + ",".join(GATE_NAMES))
    p.add_argument("--compress-width", dest="compress_width", type=int,
                   help="1x1 compression width (0 = preset default)")
    p.set_defaults(func=cmd_train_amr)

    p = sub.add_parser("sweep", help="per-angle accuracy sweep with CSV + polar SVG")
    add_common(p, training=False)
    p.add_argument("--method", choices=["base", "amr"])
    p.add_argument("--base-ckpt", dest="base_ckpt")
    p.add_argument("--amr-ckpt", dest="amr_ckpt")
    p.add_argument("--limit-test", dest="limit_test", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--angles", help="comma list of even angles (debug override)")
    p.add_argument("--ceiling", type=float,
                   help="upright ceiling accuracy (default: measured from the base ckpt)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("breakpoint", help="rotated-share parity point of two methods")
    p.add_argument("accuracies", nargs=4, metavar="ACC",
                   help="up_base rot_base up_alt rot_alt (all in %% or all in [0,1])")
    p.set_defaults(func=cmd_breakpoint)

    p = sub.add_parser("correct", help="derotate a directory of images")
    p.add_argument("--config", help="flat JSON config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--input-dir", dest="input_dir")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--base-ckpt", dest="base_ckpt")
    p.add_argument("--amr-ckpt", dest="amr_ckpt")
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("ablate", help="tap-gate ablation at equal training budget")
    add_common(p, training=True)
    p.add_argument("--base-ckpt", dest="base_ckpt")
    p.add_argument("--eval-size", dest="eval_size", type=int)
    p.set_defaults(func=cmd_ablate)

    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    defaults = dict(_DEFAULTS[args.command])
    defaults.setdefault("seed", None)
    merged = dict(defaults)
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(cfg, dict):
            raise UsageError("config must be a flat JSON object")
        unknown = sorted(set(cfg) - set(defaults) - {"seed"})
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {unknown}")
        merged.update(cfg)
    for key, val in vars(args).items():
        if key in ("command", "func", "config") or val is None:
            continue
        merged[key] = val
    if merged.get("seed") is None:
        merged["seed"] = _default_seed()
    return merged


def _echo_config(opts: dict, outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "effective_config.json", "w") as f:
        json.dump(opts, f, indent=2, sort_keys=True)
        f.write("\n")


def _require(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if not opts.get(k)]
    if missing:
        raise UsageError(
            f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}"
        )


def _parse_gates(spec: str) -> tuple[bool, ...]:
    if spec == "all":
        return (True,) * 5
    names = [s.strip() for s in spec.split(",") if s.strip()]
    unknown = [n for n in names if n not in GATE_NAMES]
    if unknown:
        raise UsageError(f"unknown gate name(s) {unknown}; choose from {list(GATE_NAMES)}")
    if not names:
        raise UsageError("at least one gate must be open")
    return tuple(n in names for n in GATE_NAMES)


def _load_mnist_pair(opts: dict) -> tuple[Dataset, Dataset]:
    train = load_mnist(opts["mnist_dir"], "train")
    test = load_mnist(opts["mnist_dir"], "test")
    if opts.get("limit_train"):
        train = train.subset(int(opts["limit_train"]))
    if opts.get("limit_test"):
        test = test.subset(int(opts["limit_test"]))
    stats = compute_norm_stats(train)
    return normalize(train, stats), normalize(replace(test, split="test"), stats)


def _train_cfg(opts: dict, regime: str) -> TrainConfig:
    return TrainConfig(
        epochs=int(opts["epochs"]),
        batch_size=int(opts["batch_size"]),
        lr=float(opts["lr"]),
        momentum=float(opts["momentum"]),
        weight_decay=float(opts["weight_decay"]),
        schedule=opts["schedule"],
        seed=int(opts["seed"]),
        regime=regime,
        preset=opts.get("preset", "resnet18-slim"),
        gates=_parse_gates(opts["gates"]) if "gates" in opts else (True,) * 5,
        compress_width=int(opts.get("compress_width") or 0) or None,
        eval_subset=int(opts["eval_subset"]),
    )


def cmd_train_base(opts: dict) -> int:
    outdir = Path(opts["outdir"])
    _echo_config(opts, outdir)
    train, test = _load_mnist_pair(opts)
    cfg = _train_cfg(opts, opts["regime"])
    metrics = MetricsLog(outdir / "metrics.csv")
    ckpt = train_base(train, cfg, test_ds=test, metrics=metrics, verbose=True)
    save_checkpoint(ckpt, outdir / "base.ckpt")
    print(f"checkpoint written to {outdir / 'base.ckpt'}")
    return 0


def cmd_train_amr(opts: dict) -> int:
    _require(opts, "base_ckpt")
    outdir = Path(opts["outdir"])
    _echo_config(opts, outdir)
    base_ckpt = load_checkpoint(opts["base_ckpt"])
    train, test = _load_mnist_pair(opts)
    cfg = _train_cfg(opts, "amr")
    metrics = MetricsLog(outdir / "metrics.csv")
    ckpt = train_amr(train, base_ckpt, cfg, test_ds=test, metrics=metrics, verbose=True)
    save_checkpoint(ckpt, outdir / "amr.ckpt")
    print(f"checkpoint written to {outdir / 'amr.ckpt'}")
    return 0


def _parse_angles(spec: str) -> tuple[int, ...]:
    if not spec:
        return SWEEP_ANGLES
    try:
        angles = tuple(int(a) for a in spec.split(","))
    except ValueError as e:
        raise UsageError(f"bad --angles value {spec!r}") from e
    bad = [a for a in angles if a % 2 or not 0 <= a <= 358]
    if bad:
        raise UsageError(f"angles must be even and within [0, 358]: {bad}")
    return angles


def cmd_sweep(opts: dict) -> int:
    _require(opts, "base_ckpt")
    if opts["method"] == "amr":
        _require(opts, "amr_ckpt")
    outdir = Path(opts["outdir"])
    _echo_config(opts, outdir)

    base_ckpt = load_checkpoint(opts["base_ckpt"])
    base = restore_base(base_ckpt)
    mean = np.array(base_ckpt.meta["norm_mean"], dtype=np.float32)
    std = np.array(base_ckpt.meta["norm_std"], dtype=np.float32)
    test = load_mnist(opts["mnist_dir"], "test")
    if opts.get("limit_test"):
        test = test.subset(int(opts["limit_test"]))
    test = normalize(replace(test, split="test"), (mean, std))
    from .data import prepare_upright

    images = prepare_upright(test)

    if opts["method"] == "amr":
        head = restore_amr(load_checkpoint(opts["amr_ckpt"]))
        classify = amr_classifier(base, head)
        tag = "amr"
    else:
        classify = base_classifier(base)
        tag = "base"

    ceiling = float(opts.get("ceiling") or 0.0)
    if ceiling <= 0.0:
        ceiling = evaluate_classifier(base, images, test.labels,
                                      int(opts["batch_size"]))
    angles = _parse_angles(opts.get("angles") or "")
    result = angle_sweep(
        classify, images, test.labels, method=tag, angles=angles,
        seed=int(opts["seed"]), batch_size=int(opts["batch_size"]),
        progress=lambda a, t: print(f"  angle {a:3d}: top1 {t:.4f}", flush=True)
        if a % 30 == 0 else None,
    )
    emit_sweep_csv(result, outdir / "sweep.csv")
    emit_polar_svg([result], outdir / "polar.svg")
    mean_top1 = result.mean_top1
    print(
        f"method={tag} mean_over_angles={mean_top1:.6g} "
        f"ceiling={ceiling:.6g} pct_ceil={pct_ceiling(mean_top1, ceiling):.6g}"
    )
    return 0


def cmd_breakpoint(opts: dict) -> int:
    vals = opts["accuracies"]
    try:
        up_base, rot_base, up_alt, rot_alt = (float(v) for v in vals)
    except ValueError as e:
        raise UsageError(f"breakpoint expects four numbers, got {vals}") from e
    inp = BreakpointInput(up_base, rot_base, up_alt, rot_alt)
    share = breakpoint_share(inp)
    if share is None:
        print("never")
    else:
        print(f"{100.0 * share:.1f}%")
    return 0


_IMAGE_SUFFIXES = (".pgm", ".ppm", ".npy")


def _read_input_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        img = np.load(path)
        if img.ndim == 2:
            img = img[:, :, None]
        return img.astype(np.float32)
    return netpbm.read_image(path)


def cmd_correct(opts: dict) -> int:
    _require(opts, "input_dir", "output_dir", "base_ckpt", "amr_ckpt")
    indir = Path(opts["input_dir"])
    outdir = Path(opts["output_dir"])
    _echo_config(opts, outdir)

    base_ckpt = load_checkpoint(opts["base_ckpt"])
    base = restore_base(base_ckpt)
    head = restore_amr(load_checkpoint(opts["amr_ckpt"]))
    mean = np.array(base_ckpt.meta["norm_mean"], dtype=np.float32)
    std = np.array(base_ckpt.meta["norm_std"], dtype=np.float32)
    size = int(base_ckpt.meta.get("input_size", 28))
    want_c = len(mean)

    manifest_path = outdir / "manifest.csv"
    files = sorted(p for p in indir.glob("*") if p.suffix in _IMAGE_SUFFIXES)
    ok = 0
    with open(manifest_path, "w") as manifest:
        manifest.write("filename,predicted_deg\n")
        for path in files:
            try:
                raw = _read_input_image(path)
            except (OSError, ValueError) as e:
                print(f"warning: skipping {path.name}: {e}", file=sys.stderr)
                continue
            if raw.shape[2] != want_c:
                raw = (raw.mean(axis=2, keepdims=True) if want_c == 1
                       else np.repeat(raw[:, :, :1], want_c, axis=2))
            if raw.shape[0] != size or raw.shape[1] != size:
                raw = resize_bilinear(raw, size, size)
            norm = mask_array((raw - mean) / std, 0.0)
            x = np.ascontiguousarray(norm.transpose(2, 0, 1)[None], dtype=np.float32)
            _, angles = predict_angle(base, head, x)
            theta = int(angles[0])
            fill = float(mean.mean())
            corrected = mask_array(rotate_array(raw, (360 - theta) % 360, fill), fill)
            out_path = outdir / path.name
            if path.suffix == ".npy":
                np.save(out_path, corrected)
            else:
                netpbm.write_image(out_path, corrected)
            manifest.write(f"{path.name},{theta}\n")
            ok += 1
    print(f"corrected {ok}/{len(files)} image(s); manifest at {manifest_path}")
    return 0 if ok > 0 else 1


def cmd_ablate(opts: dict) -> int:
    _require(opts, "base_ckpt")
    outdir = Path(opts["outdir"])
    _echo_config(opts, outdir)
    base_ckpt = load_checkpoint(opts["base_ckpt"])
    train, test = _load_mnist_pair(opts)
    budget = _train_cfg(opts, "amr")
    table, curves = ablation_suite(
        train, test, base_ckpt, budget, eval_size=int(opts["eval_size"]), verbose=True
    )
    with open(outdir / "ablation.csv", "w") as f:
        f.write("mask,angle_top1\n")
        for name, top1 in table:
            f.write(f"{name},{top1:.6g}\n")
    with open(outdir / "ablation_curves.csv", "w") as f:
        f.write("mask,epoch,angle_top1\n")
        for name, epoch, top1 in curves:
            f.write(f"{name},{epoch},{top1:.6g}\n")
    best = max(table, key=lambda kv: kv[1])
    print(f"best mask: {best[0]} (angle top-1 {best[1]:.4f})")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve_options(args)
        return args.func(opts)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
