"""``dwic`` command-line entry point.

Exit codes: 0 ok, 1 unexpected error, 2 bad usage or config (including a
cohort too small for the configured split), 3 missing input artifact,
4 non-finite values during training, 5 malformed data file.
"""

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config
from .data import VolumeFormatError
from .forest import ForestFormatError
from .model import CheckpointError
from .tensor import NonFiniteError

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_NONFINITE, EXIT_FORMAT = 0, 1, 2, 3, 4, 5

log = logging.getLogger("dwic")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--work-dir", help="artifact directory (default: $DWIC_WORKDIR or ./work)")
    common.add_argument("--data-dir", help="directory of raw .dwiv volumes")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="dwic", description="DWI slice CNN ensemble + patient forest pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in pipeline.STAGES:
        p = sub.add_parser(name, parents=[common])
        if name == "train":
            p.add_argument("--parallel-members", type=int, metavar="N",
                           help="train up to N ensemble members concurrently")
    p = sub.add_parser("run-all", parents=[common], help="every stage in order")
    p.add_argument("--parallel-members", type=int, metavar="N")
    p.add_argument("--no-synth", action="store_true", help="use existing volumes in the data dir")
    return parser


def _config(args):
    overrides = list(args.set)
    if args.work_dir:
        overrides.append(f"work_dir={args.work_dir}")
    if args.data_dir:
        overrides.append(f"data_dir={args.data_dir}")
    if getattr(args, "parallel_members", None):
        overrides.append(f"parallel_members={args.parallel_members}")
    return load_config(args.config, overrides)


def run(argv=None):
    """Parse ``argv`` and run; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "run-all":
            pipeline.run_all(cfg, cfg.parallel_members, synth=not args.no_synth)
        elif args.command == "train":
            pipeline.stage_train(cfg, cfg.parallel_members)
        else:
            pipeline.STAGES[args.command](cfg)
    except (ConfigError, pipeline.InsufficientDataError) as exc:
        print(f"dwic: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingArtifactError as exc:
        print(f"dwic: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NonFiniteError as exc:
        print(f"dwic: non-finite values during training: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (VolumeFormatError, CheckpointError, ForestFormatError) as exc:
        print(f"dwic: bad data file: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except RuntimeError as exc:
        # ensemble failures wrap the member's exception
        cause = exc.__cause__
        if isinstance(cause, NonFiniteError):
            print(f"dwic: non-finite values during training: {exc}", file=sys.stderr)
            return EXIT_NONFINITE
        log.exception("unexpected error")
        return EXIT_ERROR
    except Exception:
        log.exception("unexpected error")
        return EXIT_ERROR
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
