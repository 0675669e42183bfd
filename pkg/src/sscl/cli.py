"""Command-line entry point.

Every subcommand takes a config file plus optional ``--key=value`` overrides
using the same dotted keys as the file; overrides win. Exit status is 0 on
success and 1 with a one-line diagnostic on stderr for any library error, so
shell pipelines and sweep schedulers can branch on it.
"""

import argparse
import os
import sys

from .core import SsclError
from .harness import (
    cmd_eval_knn,
    cmd_eval_linear,
    cmd_finetune,
    cmd_prepare_data,
    cmd_pretrain,
    cmd_report,
    cmd_sweep,
    checkpoint_path,
    export_embeddings,
    load_experiment,
    load_split,
    parse_cell,
)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="sscl",
        description="Semi-supervised contrastive learning under class mismatch.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="experiment config file (key = value lines)")
        return p

    add("prepare-data", "carve a dataset split and write its descriptor")
    add("pretrain", "run contrastive pre-training for every seed")
    add("eval-knn", "weighted nearest-neighbor evaluation of each checkpoint")
    add("eval-linear", "linear probe on frozen features for each checkpoint")
    add("finetune", "fine-tune backbone plus classifier for each checkpoint")

    p = add("export-embeddings", "write one pool's embeddings as a bank file")
    p.add_argument("--pool", required=True,
                   help="labeled | unlabeled | validation | test")
    p.add_argument("--out", required=True, help="output bank file")
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint to embed with (default: first seed's)")

    p = add("sweep", "train and score the alpha x t_end grid")
    p.add_argument("--cell", action="append", default=None, metavar="ALPHA:T_END",
                   help="run only this grid cell (repeatable; cells are "
                        "independent, so separate processes may split the grid)")

    p = add("report", "aggregate per-seed results into mean (stddev) tables")
    p.add_argument("--plots", action="store_true",
                   help="also write loss and accuracy curve images")
    return parser


def _dispatch(args, overrides):
    spec = load_experiment(args.config, overrides)
    if args.command == "prepare-data":
        path, split = cmd_prepare_data(spec)
        print(f"wrote {path}: {len(split.labeled)} labeled, "
              f"{len(split.unlabeled)} unlabeled, {len(split.validation)} "
              f"validation, {len(split.test)} test")
    elif args.command == "pretrain":
        for path in cmd_pretrain(spec):
            print(f"wrote {path}")
    elif args.command == "eval-knn":
        path, rows = cmd_eval_knn(spec)
        print(f"wrote {path} ({len(rows)} rows)")
    elif args.command == "eval-linear":
        path, rows = cmd_eval_linear(spec)
        print(f"wrote {path} ({len(rows)} rows)")
    elif args.command == "finetune":
        path, rows = cmd_finetune(spec)
        print(f"wrote {path} ({len(rows)} rows)")
    elif args.command == "export-embeddings":
        ckpt = args.checkpoint or checkpoint_path(spec, spec.seeds[0])
        out = export_embeddings(ckpt, load_split(spec), args.pool, args.out)
        print(f"wrote {out}")
    elif args.command == "sweep":
        cells = ([parse_cell(spec, text) for text in args.cell]
                 if args.cell else None)
        matrix = cmd_sweep(spec, only_cells=cells)
        if matrix:
            print(f"wrote {matrix}")
        else:
            print("cell results written; matrix pending remaining cells")
    elif args.command == "report":
        _, text, written = cmd_report(spec, plots=args.plots)
        sys.stdout.write(text)
        for path in written:
            print(f"wrote {path}")
    return 0


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        return _dispatch(args, extras)
    except (SsclError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
