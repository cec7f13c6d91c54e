"""`plot` command: one figure per invocation.

    plot --kind {bars,interp,select,sparsity,compare} --in results.json --out fig.png
"""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, FigureJob, InputError, render


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> _Parser:
    parser = _Parser(prog="plot", description=__doc__)
    parser.add_argument("--kind", required=True, choices=KINDS)
    parser.add_argument(
        "--in", dest="inputs", required=True, action="append",
        help="input file; repeat for multi-curve figures",
    )
    parser.add_argument("--out", required=True)
    parser.add_argument("--title", default=None)
    parser.add_argument(
        "--method", dest="methods", action="append", default=[],
        help="restrict bar charts to these methods",
    )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        job = FigureJob(
            kind=args.kind,
            inputs=args.inputs,
            out=args.out,
            title=args.title,
            methods=args.methods,
        )
        render(job)
    except InputError as exc:
        print(f"plot: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"plot: {exc}", file=sys.stderr)
        return 2
    print(args.out, file=sys.stderr)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
