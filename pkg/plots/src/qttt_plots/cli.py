"""Command line for rendering benchmark figures from metrics CSVs."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .figures import FIGURE_KINDS, PlotSpec, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qttt-plots", description=__doc__)
    parser.add_argument("--csv", required=True, help="metrics (or ttt-curve) CSV")
    parser.add_argument("--kind", required=True, choices=FIGURE_KINDS)
    parser.add_argument("--out", required=True, help="output image path (.png/.svg)")
    parser.add_argument("--per-family", action="store_true",
                        help="one panel per dataset family instead of pooling")
    parser.add_argument("--stats-json", help="also write the plotted statistics as JSON")
    parser.add_argument("--dpi", type=int, default=150)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = PlotSpec(
        csv_path=args.csv,
        kind=args.kind,
        out_path=args.out,
        per_family=args.per_family,
        dpi=args.dpi,
    )
    try:
        stats = render(spec)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.stats_json:
        Path(args.stats_json).write_text(json.dumps(stats, indent=1, sort_keys=True))
    print(f"wrote   {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
