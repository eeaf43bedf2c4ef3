"""Command-line entry point: ``cosa <command> --config run.json [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
Each command prints a JSON summary on stdout and stores it under
``<out>/summaries/<command>.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .nn.checkpoint import CheckpointError
from .nn.train import TrainingDiverged
from .synthdata import CloudFormatError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _attack(cfg, args):
    return harness.run_attacks(cfg, harness._main_kinds(cfg))


def _ablate(cfg, args):
    return harness.run_attacks(cfg, cfg.ablation_modes)


def _eval(cfg, args):
    out = harness.run_eval(cfg)
    cells = harness._table(cfg, list(dict.fromkeys(harness._main_kinds(cfg) + list(cfg.ablation_modes))))
    out["cells"] = [dict(zip(harness.CELL_HEADER, c.row())) for c in cells]
    return out


COMMANDS = {
    "gen-data": lambda cfg, args: harness.run_gen_data(cfg),
    "train-ae": lambda cfg, args: harness.run_train_ae(cfg),
    "train-clf": lambda cfg, args: harness.run_train_clf(cfg, args.arch),
    "build-dict": lambda cfg, args: harness.run_build_dict(cfg),
    "attack": _attack,
    "defend": lambda cfg, args: harness.run_defend(cfg),
    "eval": _eval,
    "ablate": _ablate,
    "export-protos": lambda cfg, args: harness.run_export_prototypes(cfg),
    "report": lambda cfg, args: harness.write_reports(cfg),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="cosa", description="Compact-subspace point-cloud attack pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config (JSON)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="override the output directory")
        if name == "train-clf":
            p.add_argument("--arch", action="append", choices=harness.ARCH_TAGS,
                           help="train only this architecture (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = harness.load_run_config(args.config).with_overrides(args.seed, args.out)
    except harness.ConfigError as exc:
        print(f"cosa: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = COMMANDS[args.command](cfg, args)
    except harness.ConfigError as exc:
        print(f"cosa: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (harness.StageError, TrainingDiverged, CheckpointError, CloudFormatError,
            OSError, ValueError, RuntimeError) as exc:
        print(f"cosa: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    summary = {"command": args.command, "seed": cfg.seed, "status": "ok", "result": result}
    ws = harness.Workspace(cfg)
    harness._write_json(ws.summary(args.command), summary)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
