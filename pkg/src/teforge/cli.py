"""Command line entry point: ``teforge <subcommand> --config run.json``.

Exit codes: 0 success, 2 configuration error, 3 backend error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config
from .dsl import ProgramError
from .llm import BackendError
from .writer import RestoreError, SearchAborted

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_IO = 0, 2, 3, 4

logger = logging.getLogger("teforge")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="teforge", description="Find where a traffic-engineering heuristic "
                                "underperforms and evolve regional specialists for it.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, region=False):
        sp.add_argument("--config", required=True, help="run config (.json or .toml)")
        sp.add_argument("--seed", type=int, help="override the top-level seed")
        sp.add_argument("--out", help="override output_dir")
        sp.add_argument("--backend", choices=["mock", "remote"], help="override suggester.backend")
        if region:
            sp.add_argument("--region", help="region id (default: every region)")

    common(sub.add_parser("analyze", help="adversarial search, regions and explanations for the base"))
    s = sub.add_parser("search", help="suggester + writer for one or all regions")
    common(s, region=True)
    s.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    common(sub.add_parser("oneshot", help="compare one-shot prompt variants"), region=True)
    common(sub.add_parser("ensemble", help="assemble specialists and evaluate on held-out data"))
    common(sub.add_parser("validate-config", help="check a config file and print its hash"))
    pd = sub.add_parser("plotdata", help="emit plot-ready CSVs from a run directory")
    pd.add_argument("run_dir")
    pd.add_argument("--out", help="directory for the CSVs (default: the run dir)")
    return p


def _load(args) -> pipeline.Context:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.backend is not None:
        overrides["suggester.backend"] = args.backend
    return pipeline.load_context(load_config(args.config, overrides))


def _regions(ctx, args) -> list[str]:
    return [args.region] if args.region else pipeline.region_ids(ctx)


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plotdata":
            for path in pipeline.cmd_plotdata(args.run_dir, args.out):
                print(path)
            return EXIT_OK
        ctx = _load(args)
        if args.command == "validate-config":
            print(json.dumps({"config_hash": ctx.hash, "config": ctx.cfg.to_dict()}, indent=2, sort_keys=True))
        elif args.command == "analyze":
            for name, path in pipeline.cmd_analyze(ctx).items():
                print(f"{name}: {path}")
        elif args.command == "search":
            status = EXIT_OK
            for rid in _regions(ctx, args):
                state = pipeline.cmd_search(ctx, rid, resume=args.resume)
                print(f"{rid}: best train gap {state.best_train_gap:g} after {state.iteration} iterations "
                      f"({state.stop_reason})")
                if pipeline.search_all_skipped(ctx.out / "search" / rid):
                    logger.error("every candidate for %s failed on the backend", rid)
                    status = EXIT_BACKEND
            return status
        elif args.command == "oneshot":
            for rid in _regions(ctx, args):
                res = pipeline.cmd_oneshot(ctx, rid)
                print(rid, json.dumps({k: v["best"] for k, v in res.items()}))
        elif args.command == "ensemble":
            res = pipeline.cmd_ensemble(ctx)
            for r in res["reports"]:
                o = r.overall
                print(f"{r.label}: normalized max {100 * o['normalized_max']:.2f}%, "
                      f"mean {100 * o['normalized_mean']:.2f}% ± {100 * o['normalized_se']:.2f}%")
        return EXIT_OK
    except (ConfigError, ProgramError, RestoreError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (OSError, SearchAborted) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
