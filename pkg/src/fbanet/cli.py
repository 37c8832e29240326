"""``fba`` command line: train, eval, ablate, gradcheck and synth.

Exit codes: 0 success, 1 gradcheck failure, 2 configuration or checkpoint
error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import config_from_dict, deep_merge, load_config, load_yaml, synth_from_dict
from .data import VolumeFormatError, write_synthetic_dataset
from .errors import CheckpointError, ConfigError, NumericalAbort

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("fbanet")


def _cmd_train(args) -> int:
    from .trainer import train

    overrides = {"out_dir": args.out} if args.out else {}
    cfg = load_config(args.config, overrides)
    if cfg.out_dir is None:
        cfg.out_dir = str(Path("runs") / cfg.config_hash())
    record = train(cfg)
    print(json.dumps({"out_dir": cfg.out_dir, **record.summary()}, indent=2))
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .trainer import build_dataset, evaluate

    cfg = load_config(args.config)
    out = args.out or str(Path(args.ckpt).parent)
    report = evaluate(args.ckpt, build_dataset(cfg), cfg, out)
    print(json.dumps(report["aggregate"], indent=2))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from .trainer import ablate, format_table

    matrix = load_yaml(args.matrix)
    if not isinstance(matrix, dict):
        raise ConfigError(f"{args.matrix}: ablation matrix must be a mapping")
    unknown = set(matrix) - {"base", "variants", "seeds", "repeats"}
    if unknown:
        raise ConfigError(f"unknown ablation key(s) {sorted(unknown)}")
    variants = matrix.get("variants") or {}
    if len(variants) < 2:
        raise ConfigError("an ablation needs at least two variants")
    # validate every cell before spending any compute
    for overrides in variants.values():
        config_from_dict(deep_merge(matrix.get("base") or {}, overrides or {}), env={})
    rows = ablate(matrix, out_dir=args.out)
    print(format_table(rows))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .verification import GRADCHECK_TOL, missing_gradchecks, run_gradcheck

    reports = run_gradcheck(seeds=range(args.seeds), step=args.step)
    print(f"{'op':<28} {'max rel err':>12} {'seeds':>6}  status")
    for r in reports:
        status = "ok" if r.passed else f"FAIL {r.failing[:3]}"
        print(f"{r.op:<28} {r.max_rel_error:>12.3e} {len(r.seeds):>6}  {status}")
    missing = missing_gradchecks()
    for name in missing:
        print(f"{name:<28} {'-':>12} {'-':>6}  FAIL no gradcheck case")
    failed = missing or not all(r.passed for r in reports)
    print(f"tolerance {GRADCHECK_TOL:g}: {'FAILED' if failed else 'all passed'}")
    return EXIT_GRADCHECK if failed else EXIT_OK


def _cmd_synth(args) -> int:
    raw = load_yaml(args.config)
    # accept either a bare synth mapping or a full training config
    if "data" in raw:
        raw = (raw.get("data") or {}).get("synth") or {}
    manifest = write_synthetic_dataset(synth_from_dict(raw), args.out)
    print(manifest)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fba", description="Foreground/background contrastive segmentation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML config")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--out", help="output directory (overrides out_dir)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("-o", "--out", help="report directory (default: checkpoint directory)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train a matrix of variants over several seeds")
    p.add_argument("-m", "--matrix", required=True)
    p.add_argument("-o", "--out")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss op")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--step", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic NIfTI dataset with a manifest")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, VolumeFormatError) as exc:
        print(f"fba: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"fba: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
