"""Command-line entry point.

    causalgcl run --config PATH [--stage NAME] [--seed N] [--backend mock|http] [--base-url URL]
    causalgcl synth --out DIR [--seed N]

``run`` may be omitted. The chat endpoint's API key is read from the
environment variable named in the config (``OPENAI_API_KEY`` by default);
there is deliberately no flag for it.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import check_paths, load_config, render_config
from .errors import CausalGCLError
from .pipeline import STAGES, run_pipeline, run_stage
from .synthetic import SyntheticSpec, generate, synthetic_config, write_dataset

log = logging.getLogger("causalgcl")

COMMANDS = ("run", "synth")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causalgcl", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one pipeline stage or all of them")
    run.add_argument("--config", required=True, type=Path, metavar="PATH", help="pipeline config file")
    run.add_argument("--stage", default="all", choices=STAGES + ("all",), metavar="NAME",
                     help=f"one of {', '.join(STAGES)} or all (default: all)")
    run.add_argument("--seed", type=int, default=None, metavar="N", help="override [run] seed")
    run.add_argument("--backend", choices=("mock", "http"), default=None, help="override [edit] backend")
    run.add_argument("--base-url", default=None, metavar="URL", help="override [edit] base_url")
    run.add_argument("--force", action="store_true", help="with --stage all: rerun stages that are up to date")
    run.add_argument("-v", "--verbose", action="count", default=0)

    syn = sub.add_parser("synth", help="write the synthetic OOD dataset and a matching config")
    syn.add_argument("--out", required=True, type=Path, metavar="DIR")
    syn.add_argument("--seed", type=int, default=0, metavar="N")
    syn.add_argument("--users", type=int, default=SyntheticSpec.num_users)
    syn.add_argument("--items", type=int, default=SyntheticSpec.num_items)
    syn.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.override("run", seed=args.seed)
    edits = {}
    if args.backend is not None:
        edits["backend"] = args.backend
    if args.base_url is not None:
        edits["base_url"] = args.base_url
    if edits:
        cfg = cfg.override("edit", **edits)
    if args.stage == "all":
        run_pipeline(cfg, force=args.force)
    else:
        check_paths(cfg)
        run_stage(cfg, args.stage)  # an explicitly named stage always runs
    metrics = cfg.output / "evaluate" / "metrics.txt"
    if args.stage in ("all", "evaluate") and metrics.is_file():
        print(metrics.read_text(encoding="utf-8"), end="")
        backbone = cfg.output / "evaluate" / "backbone_metrics.txt"
        if backbone.is_file():
            print("\nbackbone (BPR only)")
            print(backbone.read_text(encoding="utf-8"), end="")
    return 0


def cmd_synth(args) -> int:
    data = generate(SyntheticSpec(num_users=args.users, num_items=args.items, seed=args.seed))
    paths = write_dataset(data, args.out)
    config_path = args.out / "config.ini"
    config_path.write_text(render_config(synthetic_config(paths, "out", args.seed)), encoding="utf-8")
    print(f"wrote {len(data.train)} train and {len(data.test)} test rows to {args.out}")
    print(f"run with: causalgcl run --config {config_path}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMMANDS + ("-h", "--help", "--version"):
        argv.insert(0, "run")
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return cmd_run(args) if args.command == "run" else cmd_synth(args)
    except CausalGCLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
