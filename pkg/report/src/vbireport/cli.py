"""vbi-report: normalized speedup chart + table from sweep results.

    vbi-report --in results.csv --baseline native [--exclude mcf]
               --out fig.png [--data fig.csv]
"""

from __future__ import annotations

import argparse
import sys

from .normalize import (MissingBaseline, load_results, normalize,
                        table_to_csv)
from .render import render


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="vbi-report")
    ap.add_argument("--in", dest="input", required=True,
                    help="sweep results CSV")
    ap.add_argument("--baseline", required=True,
                    help="scenario to normalize against")
    ap.add_argument("--exclude", default="",
                    help="comma-separated traces left out of the second geomean")
    ap.add_argument("--out", required=True, help="chart image path")
    ap.add_argument("--data", default=None,
                    help="write the plotted table as CSV here")
    args = ap.parse_args(argv if argv is not None else sys.argv[1:])

    exclude = [t for t in args.exclude.split(",") if t]
    try:
        results = load_results(args.input)
        table = normalize(results, args.baseline, exclude)
        render(table, args.out, data_path=args.data)
    except (MissingBaseline, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.data:
        print(f"wrote {args.out} and {args.data}")
    else:
        sys.stdout.write(table_to_csv(table))
    return 0


if __name__ == "__main__":
    sys.exit(main())
