"""Command-line entry point (``fad``).

Exit codes: 0 success, 1 property failure or runtime error, 2 configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import harness, verify
from .config import ConfigError, RunConfig
from .episodes import write_idx
from .io import write_csv_matrix, write_pgm
from .spectral import kernel_transfer_function

log = logging.getLogger("fad")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--seed", type=int, help="run seed (pretrain: initialization seed)")
    p.add_argument("--episodes", type=int, help="number of evaluation episodes")
    p.add_argument("--lr", type=float, help="learning rate (pretrain: SGD, otherwise Adadelta multiplier)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fad", description="Frequency-band adapters for few-shot transfer.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the backbone on the source domain")
    _add_common(p)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("adapt", help="adapt and evaluate on target episodes")
    _add_common(p)
    p.add_argument("--variant", choices=harness.VARIANT_NAMES)

    p = sub.add_parser("ablate", help="run one ablation grid")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=harness.AXES)

    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--out", help="also write verify.json here")
    p.add_argument("--only", nargs="*", help="restrict to these property names")
    p.add_argument("--mutate", action="append", default=[], choices=["idft_sign"],
                   help=argparse.SUPPRESS)

    p = sub.add_parser("gen-data", help="export the synthetic domains as IDX files")
    _add_common(p)

    p = sub.add_parser("analyze-kernel", help="transfer-function magnitude of a kernel as PGM and CSV")
    _add_common(p)
    p.add_argument("--checkpoint", help="backbone checkpoint; defaults to a seeded random kernel")
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--out-channel", type=int, default=0)
    p.add_argument("--in-channel", type=int, default=0)
    p.add_argument("--kernel-size", type=int, default=3, help="size of the random kernel")
    p.add_argument("--grid", type=int, default=16, help="transfer function grid size")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "episodes", None) is not None:
        cfg.episodes = args.episodes
    if args.command == "pretrain":
        if args.seed is not None:
            cfg.pretrain.seed = args.seed
        if args.lr is not None:
            cfg.pretrain.lr = args.lr
        if args.epochs is not None:
            cfg.pretrain.epochs = args.epochs
    else:
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        if getattr(args, "lr", None) is not None:
            cfg.optimizer.lr = args.lr
    if getattr(args, "variant", None):
        cfg.variant = args.variant
    harness.validate(cfg)
    return cfg


def _summary(rows) -> str:
    return "\n".join(f"{r['label']:<22s} {100 * r['mean']:6.2f} +- {100 * r['ci95']:5.2f}  (n={r['n']})"
                     for r in rows)


def cmd_verify(args) -> int:
    outcomes = verify.run(args.mutate, args.only)
    report = {"passed": all(o.passed for o in outcomes), "properties": [o.as_dict() for o in outcomes]}
    for o in outcomes:
        status = "PASS" if o.passed else "FAIL"
        rel = ">" if any(c.greater for c in verify.CHECKS if c.name == o.name) else "<="
        print(f"{status} {o.module}.{o.name}: {o.measured:.3e} {rel} {o.tolerance:.1e} {o.error}".rstrip())
    if args.out:
        path = Path(args.out) / "verify.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0 if report["passed"] else 1


def cmd_gen_data(cfg: RunConfig) -> dict:
    out = Path(cfg.out_dir)
    written = {}
    for name, ds in zip(("source", "target"), harness.domains(cfg)):
        # class ids are remapped to 0..n-1 so they fit a byte; the map is kept beside the files
        classes = ds.classes
        remap = {int(c): i for i, c in enumerate(classes)}
        labels = np.array([remap[int(c)] for c in ds.labels])
        write_idx(dataclasses.replace(ds, labels=labels, ids=None),
                  out / f"{name}-images-idx3-ubyte", out / f"{name}-labels-idx1-ubyte")
        (out / f"{name}-label-map.json").write_text(json.dumps({str(v): k for k, v in remap.items()}, indent=2) + "\n")
        written[name] = len(ds)
    config_mod.write_resolved(cfg, out)
    return written


def cmd_analyze_kernel(cfg: RunConfig, args) -> dict:
    if args.checkpoint:
        from .backbone import load_backbone
        params = load_backbone(args.checkpoint)
        kernel = params.blocks[args.block].weight[args.out_channel, args.in_channel]
        source = f"{args.checkpoint}:block{args.block}[{args.out_channel},{args.in_channel}]"
    else:
        kernel = np.random.default_rng(cfg.seed).standard_normal((args.kernel_size, args.kernel_size))
        source = f"random {args.kernel_size}x{args.kernel_size} seed={cfg.seed}"
    mag = np.abs(kernel_transfer_function(kernel, args.grid, args.grid))
    out = Path(cfg.out_dir)
    write_pgm(out / "transfer_magnitude.pgm", mag)
    write_csv_matrix(out / "transfer_magnitude.csv", mag)
    return {"kernel": source, "min": float(mag.min()), "max": float(mag.max()), "spread": float(np.ptp(mag))}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify(args)
        cfg = resolve_config(args)
        if args.command == "pretrain":
            res = harness.cmd_pretrain(cfg)
            print(f"checkpoint {res['checkpoint']} train_accuracy={res.get('train_accuracy', float('nan')):.4f}")
        elif args.command == "adapt":
            print(_summary(harness.cmd_adapt(cfg)["rows"]))
        elif args.command == "ablate":
            print(_summary(harness.cmd_ablate(cfg, args.axis)["rows"]))
        elif args.command == "gen-data":
            print(json.dumps(cmd_gen_data(cfg)))
        elif args.command == "analyze-kernel":
            print(json.dumps(cmd_analyze_kernel(cfg, args)))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
