"""Command-line entry point.

One subcommand per pipeline stage; every subcommand takes --config (flat
key = value file), --seed (overrides the config seed) and --out (run
directory). Exit codes: 0 success, 2 config error, 3 stage-order error,
4 validation error, 5 training divergence, 6 I/O error, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import ConfigError, StageOrderError, TrainingDiverged, ValidationError
from .metrics import format_metric_value
from .pipeline import STAGES, run_pipeline

_STAGE_HELP = {
    "synth": "generate the synthetic event/image dataset",
    "accumulate": "build normalized pseudo-frames from event files",
    "align": "train the event encoder against the frozen image teacher",
    "pretrain": "autoregressive training of the causal transformer",
    "rollout": "sliding-window long-horizon generation from a trained model",
    "eval-seg": "train/evaluate the linear segmentation decoder (mIoU, mAcc)",
    "eval-depth": "train/evaluate the depth head (Abs, RMS in meters)",
    "eval-cluster": "clustering metrics of encoder features before/after alignment",
    "gradcheck": "finite-difference verification of every loss gradient",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evseq",
        description="Desk-scale event-camera pretraining pipeline",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=_STAGE_HELP[stage])
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default="runs/default", help="run directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        report = run_pipeline(cfg, args.stage, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageOrderError as exc:
        print(f"stage-order error: {exc}", file=sys.stderr)
        return 3
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 4
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 5
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 6
    for key in sorted(report):
        print(f"{key} = {format_metric_value(report[key])}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
