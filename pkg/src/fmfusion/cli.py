"""Command-line entry point: ``fmfusion <command> --config run.json [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .commands import COMMANDS
from .errors import FusionError, NumericError
from .runconfig import RunConfig

log = logging.getLogger("fmfusion")

HELP = {
    "synth": "generate a synthetic cohort (embedding files, manifest, ground truth)",
    "similarity": "pairwise representational similarity between encoders",
    "fuse": "rank and correlation-prune concatenated features over a theta grid",
    "train": "train MIL or slide-level MLP heads per feature set and fold",
    "vote": "majority vote across prediction files",
    "evaluate": "holdout metrics and paired bootstrap comparisons",
    "attention": "attention coverage of annotated regions and cross-model Dice",
    "cluster": "t-SNE projections and cluster quality statistics",
    "pipeline": "synth, fuse, train, vote and evaluate in one run",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, value parsed as JSON when possible")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        cfg = RunConfig.load(args.config, overrides)
        if args.out is not None:
            out = str(Path(args.out).resolve())
            sec = cfg.doc.setdefault(args.command, {})
            if args.command == "pipeline":
                cfg.doc["output_dir"] = out
            else:
                sec["output_dir"] = out
        manifest = COMMANDS[args.command](cfg)
    except FusionError as exc:
        print(f"fmfusion {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"fmfusion {args.command}: numerical failure: {exc}", file=sys.stderr)
        return NumericError.exit_code
    log.info("wrote %s", manifest)
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
