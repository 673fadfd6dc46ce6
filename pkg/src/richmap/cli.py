"""Command-line scenario runner: generate, update, batch, render."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import database
from .pipeline import RunConfig, StageError, format_table, run_batch, run_generate, run_update


def _parse_set(values) -> dict:
    overrides = {}
    for item in values or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="richmap",
        description="Deterministic inspection-robot simulator producing rich information maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", required=True, help="scenario YAML file")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", dest="overrides",
                       help="override a scenario value by dotted path (repeatable)")
        p.add_argument("--debug-dumps", action="store_true",
                       help="write per-stage grid-processing images")

    gen = sub.add_parser("generate", help="explore, detect, and save a new map bundle")
    common(gen)

    upd = sub.add_parser("update", help="recheck an existing bundle against the scenario world")
    common(upd)
    upd.add_argument("--map", required=True, dest="map_stem",
                     help="bundle stem from a previous generate run (path without extension)")

    bat = sub.add_parser("batch", help="repeat generate runs over consecutive seeds")
    common(bat)
    bat.add_argument("--trials", type=int, default=3)

    ren = sub.add_parser("render", help="re-render a saved bundle to a PPM image")
    ren.add_argument("--map", required=True, dest="map_stem")
    ren.add_argument("--out", default=None, help="output image path (default <stem>.ppm)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "render":
        try:
            m = database.load(args.map_stem)
        except database.MapLoadError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        out = Path(args.out) if args.out else Path(str(args.map_stem) + ".ppm")
        database.render(m, out)
        print(f"wrote {out}")
        return 0

    overrides = _parse_set(args.overrides)
    try:
        if args.command == "generate":
            cfg = RunConfig(args.scenario, "generate", args.seed, args.out,
                            overrides=overrides, debug_dumps=args.debug_dumps)
            summary, _, paths = run_generate(cfg)
            print(format_table([summary]))
            print(f"bundle: {paths['records']}")
            if not summary.ok:
                print(f"error: {summary.error}", file=sys.stderr)
                return 1
            return 0
        if args.command == "update":
            cfg = RunConfig(args.scenario, "update", args.seed, args.out,
                            map_stem=args.map_stem, overrides=overrides,
                            debug_dumps=args.debug_dumps)
            summary, report, m, paths = run_update(cfg)
            print(format_table([summary]))
            print(f"verified={report.verified} deleted={report.deleted} added={report.added}")
            print(f"count={database.count(m)}")
            print(f"bundle: {paths['records']}")
            if not summary.ok:
                print(f"error: {summary.error}", file=sys.stderr)
                return 1
            return 0
        if args.command == "batch":
            cfg = RunConfig(args.scenario, "generate", args.seed, args.out,
                            overrides=overrides, debug_dumps=args.debug_dumps)
            summaries = run_batch(cfg, args.trials)
            print(format_table(summaries))
            return 0 if all(s.ok for s in summaries) else 1
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
