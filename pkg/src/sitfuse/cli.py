"""Command-line entry point: ``sitfuse <stage> --config run.json [--set k=v ...] [--out DIR]``."""
from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .dbn import TrainingError
from .pipeline import COMMANDS, PipelineError, run_all, thread_limit


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sitfuse", description="Self-supervised smoke and fire masking pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*COMMANDS, "all"]:
        p = sub.add_parser(name, help="run every stage in order" if name == "all" else f"run the {name} stage")
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable); VALUE is parsed as JSON when possible")
        p.add_argument("--out", help="output directory (overrides the config's 'output')")
        if name == "predict":
            p.add_argument("--scene", action="append", default=None, help="limit prediction to this scene id")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.out)
        if args.command == "all":
            run_all(cfg)
        else:
            with thread_limit():
                if args.command == "predict":
                    COMMANDS["predict"](cfg, args.scene)
                else:
                    COMMANDS[args.command](cfg)
    except (ConfigError, PipelineError, TrainingError, FloatingPointError, ValueError, OSError) as exc:
        print(f"sitfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(f"sitfuse {args.command}: done -> {cfg.run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
