"""Command-line entry point: ``lestab <subcommand> [--config file] [--seed N] [--out dir]``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import report as R
from .config import load_config
from .errors import InvalidArgument, NumericError, ParseError, UnsupportedOperation
from .influence import read_records

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=R._jsonable))


def cmd_gen(cfg, args):
    _print_json(R.pipeline_gen(cfg))


def cmd_train(cfg, args):
    _print_json(R.pipeline_train(cfg))


def cmd_sensitivity(cfg, args):
    res = R.pipeline_sensitivity(cfg)
    _print_json({"files": res["files"], "summary": res["summary"].to_dict(),
                 "settings": res["settings"]})


def cmd_validate(cfg, args):
    _print_json(R.pipeline_validate(cfg))


def cmd_bounds(cfg, args):
    rep = R.pipeline_bounds(cfg)
    for k, v in rep.values.items():
        print(f"{k}\t{v!r}")
    for k, v in rep.checks.items():
        print(f"{k}\t{'true' if v else 'false'}")


def cmd_sgd_probe(cfg, args):
    _print_json(R.pipeline_sgd(cfg))


def cmd_couple(cfg, args):
    tr = R.pipeline_couple(cfg)
    _print_json({"delta_T": float(tr.delta[-1]), "steps_differ": int(tr.differ.sum()),
                 "L": tr.L, "L_i": tr.L_i, "L_z": tr.L_z})


def cmd_summary(cfg, args):
    if not args.records:
        raise InvalidArgument("summary needs --records <csv>")
    recs = read_records(args.records)
    m = args.m if args.m is not None else cfg["dataset"]["m"]
    fresh = read_records(args.fresh) if args.fresh else None
    out = {"summary": R.stability_summary(recs, m, fresh_records=fresh).to_dict()}
    if all(r.train_class is not None and r.test_class is not None for r in recs):
        cm = R.class_matrix(recs)
        out["diagonal_mean"] = cm.diagonal_mean()
        if cm.K > 1:
            out["off_diagonal_mean"] = cm.off_diagonal_mean()
    _print_json(out)


COMMANDS = {
    "gen": (cmd_gen, "generate train/test datasets as CSV"),
    "train": (cmd_train, "train the configured model and save it as JSON"),
    "sensitivity": (cmd_sensitivity, "pairwise sensitivity sweep, class matrix and summary"),
    "validate": (cmd_validate, "influence estimates vs exact leave-one-out retraining"),
    "bounds": (cmd_bounds, "evaluate every bound computable from the 'bounds' section"),
    "sgd-probe": (cmd_sgd_probe, "Monte Carlo SGD stability, optional envelope check"),
    "couple": (cmd_couple, "one coupled SGD run on S and S minus i; writes the trace CSV"),
    "summary": (cmd_summary, "stability summary of a sensitivity records CSV"),
}


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not overwrite flags given before the subcommand
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    c = argparse.ArgumentParser(add_help=False)
    c.add_argument("--config", help="JSON config file (schema: docs/config.md)", **kw)
    c.add_argument("--seed", type=int, help="override the config seed", **kw)
    c.add_argument("--out", help="output directory (default from config, else ./out)", **kw)
    return c


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lestab", parents=[_common(False)],
                                description="Locally elastic stability toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, parents=[_common(True)])
        if name == "summary":
            sp.add_argument("--records", help="sensitivity records CSV")
            sp.add_argument("--fresh", help="records CSV with held-out z'")
            sp.add_argument("--m", type=int, help="training-set size for the x m convention")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        COMMANDS[args.command][0](cfg, args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidArgument, ParseError, UnsupportedOperation, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
