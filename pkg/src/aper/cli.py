"""Command line entry point: ``aper run | embed | params``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

import torch

from .config import ProjectionConfig, load_config
from .evaluation import summary_line
from .exceptions import ConfigurationError, CorruptFileError, DataError, ShapeError
from .experiment import STATUS_FILE, embed_dataset, format_param_table, report_params, run_experiment

logger = logging.getLogger("aper")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="aper", description="Class-incremental learning runs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", help="overrides output_dir from the config")
    p.add_argument("--seed", type=int, help="overrides seed from the config")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.add_argument("--project-method", choices=("pca", "random"))
    p.add_argument("--project-dim", type=int)

    p = sub.add_parser("embed", parents=[common], help="write an embedding cache for a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")

    p = sub.add_parser("params", parents=[common], help="print parameter counts for a config")
    p.add_argument("--config", required=True)
    return parser


def _configure(args):
    config = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.project_method or args.project_dim:
        current = config.projection or ProjectionConfig()
        changes["projection"] = ProjectionConfig(method=args.project_method or current.method,
                                                 k=args.project_dim or current.k)
    return dataclasses.replace(config, **changes) if changes else config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        if args.command == "run":
            config = _configure(args)
            summary = run_experiment(config, args.output_dir, force=args.force)
            print(summary_line(summary))
        elif args.command == "embed":
            feats = embed_dataset(args.checkpoint, args.data, args.out, split=args.split)
            print(f"wrote {feats.shape[0]} x {feats.shape[1]} embeddings to {args.out}")
        else:
            print(format_param_table(report_params(load_config(args.config))))
    except ConfigurationError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, ShapeError, CorruptFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"run failed ({STATUS_FILE} marks partial outputs): {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
