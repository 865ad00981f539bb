"""Command-line entry point.

    quest <command> --config experiment.ini [--out DIR] [--seed N]

Commands: train-teacher, build-vocab, distill, eval, retrieve, ablate,
gradcheck. Exit codes: 0 success, 1 configuration / usage error,
2 numerical failure (non-finite values or a failed gradient check).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import NumericalError, QuestError
from . import harness

_COMMANDS = ("train-teacher", "build-vocab", "distill", "eval", "retrieve",
             "ablate", "gradcheck")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quest",
        description="Visual-word knowledge distillation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=(name != "gradcheck"),
                       help="INI experiment configuration")
        p.add_argument("--out", default=None,
                       help="output directory (overrides [output] dir)")
        p.add_argument("--seed", type=int, default=None,
                       help="override model and train seeds")
        p.add_argument("--quiet", action="store_true",
                       help="suppress per-epoch progress")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; that slot is reserved for
        # numerical failures here
        return 0 if e.code == 0 else 1

    try:
        if args.config:
            cfg = load_config(args.config)
        else:
            cfg = ExperimentConfig()
        if args.seed is not None:
            cfg.train.model_seed = args.seed
            cfg.train.train_seed = args.seed
        out_dir = Path(args.out) if args.out else Path(cfg.out_dir)
        verbose = not args.quiet

        if args.command == "train-teacher":
            harness.cmd_train_teacher(cfg, out_dir, verbose=verbose)
        elif args.command == "build-vocab":
            harness.cmd_build_vocab(cfg, out_dir, verbose=verbose)
        elif args.command == "distill":
            harness.cmd_distill(cfg, out_dir, verbose=verbose)
        elif args.command == "eval":
            harness.cmd_eval(cfg, out_dir, verbose=verbose)
        elif args.command == "retrieve":
            harness.cmd_retrieve(cfg, out_dir, verbose=verbose)
        elif args.command == "ablate":
            harness.cmd_ablate(cfg, out_dir, verbose=verbose)
        else:
            result = harness.cmd_gradcheck(out_dir if args.out else None,
                                           verbose=verbose)
            if not result["passed"]:
                print("gradient verification failed", file=sys.stderr)
                return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except QuestError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
