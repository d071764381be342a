"""Command-line entry point: trainer-bridge <manifest.json> [--stub]."""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .errors import BridgeError, ToolchainError
from .runner import LOSS_KINDS, LossSpec, run_training


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trainer-bridge",
        description=(
            "Validate a training job manifest and its dataset, then stub the "
            "training step or launch an external fine-tuning command."
        ),
    )
    parser.add_argument("manifest", help="path to a train_job.json manifest")
    parser.add_argument(
        "--stub",
        action="store_true",
        help="skip real training; write a version-bumped result after validation",
    )
    parser.add_argument(
        "--loss",
        choices=LOSS_KINDS,
        default=None,
        help="objective override (default: sft_nll for sft jobs, dpo for dpo jobs)",
    )
    parser.add_argument("--beta", type=float, default=0.1, help="preference strength")
    parser.add_argument(
        "--alpha", type=float, default=0.0, help="likelihood weight for the rpo loss"
    )
    parser.add_argument(
        "--toolchain",
        default=None,
        help="external trainer command to run in live mode, e.g. 'python3 train.py'",
    )
    parser.add_argument(
        "--timeout", type=float, default=3600.0, help="live-mode time limit in seconds"
    )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    loss = None
    if args.loss is not None:
        try:
            loss = LossSpec(kind=args.loss, beta=args.beta, alpha=args.alpha)
        except BridgeError as exc:
            print(f"trainer-bridge: {exc}", file=sys.stderr)
            return 2
    try:
        result_path = run_training(
            args.manifest,
            stub=args.stub,
            loss=loss,
            toolchain=args.toolchain,
            timeout=args.timeout,
        )
    except ToolchainError as exc:
        print(f"trainer-bridge: {exc}", file=sys.stderr)
        return 3
    except (BridgeError, OSError) as exc:
        print(f"trainer-bridge: {exc}", file=sys.stderr)
        return 2
    print(result_path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
