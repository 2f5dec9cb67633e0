"""Command line entry point: ``robuxfer run | validate | reproduce | report``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .datasets import FormatError

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2

log = logging.getLogger("robuxfer")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robuxfer", description="Robust transfer learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None, help="output directory (beats ROBUXFER_OUT)")
    r.add_argument("--workers", type=int, default=None)
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    rp = sub.add_parser("reproduce", help="re-run a manifest and compare results.csv bitwise")
    rp.add_argument("manifest")
    rp.add_argument("--out", required=True)
    rep = sub.add_parser("report", help="flatten sweep CSVs into long format")
    rep.add_argument("csv", nargs="+")
    rep.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    try:
        if args.command == "validate":
            cfg = harness.load_config(args.config)
            log.info("ok: %s experiment %r", cfg.kind, cfg.name)
            return EXIT_OK
        if args.command == "run":
            if args.workers is not None and args.workers < 1:
                raise harness.ValidationError("--workers", "must be >= 1")
            cfg = harness.load_config(args.config, seed=args.seed)
            odir = harness.run(cfg, out=args.out, workers=args.workers)
            log.info("wrote %s", odir)
            return EXIT_OK
        if args.command == "reproduce":
            odir, same = harness.reproduce(args.manifest, args.out)
            log.info("%s: results.csv %s", odir, "identical" if same else "DIFFERS")
            return EXIT_OK if same else EXIT_RUNTIME
        harness.report(args.csv, args.out)
        return EXIT_OK
    except harness.ValidationError as e:
        log.error("invalid config: %s", e)
        return EXIT_INVALID
    except FormatError as e:
        log.error("format error: %s", e)
        return EXIT_INVALID if args.command == "report" else EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - any failure mid-run maps to exit 1
        log.error("run failed: %s: %s", type(e).__name__, e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
