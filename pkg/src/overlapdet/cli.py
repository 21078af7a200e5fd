"""Command-line front end.

Exit codes: 0 success, 1 property failure, 2 usage or input error, 3 divergence.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from overlapdet import metrics, selftest
from overlapdet.experiment import ManifestError, load_manifest, run_manifest
from overlapdet.refinement import RefineScheme, empirical_gradient_flow, gradient_flow

EXIT_OK, EXIT_PROPERTY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


def _scheme(text: str) -> RefineScheme:
    try:
        return RefineScheme.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def cmd_selftest(args) -> int:
    results = selftest.run_suites(args.suite or None)
    print(selftest.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failing properties: {', '.join(failed)}", file=sys.stderr)
        return EXIT_PROPERTY
    return EXIT_OK


def cmd_gradflow(args) -> int:
    symbolic = gradient_flow(args.scheme, args.layers)
    tape_reach, fd_reach, agree = empirical_gradient_flow(args.scheme, args.layers,
                                                          np.random.default_rng(args.seed))
    if args.format == "matrix":
        sys.stdout.write(symbolic.to_csv())
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["layer", "offset", "symbolic", "tape", "finite_difference"])
        for l in range(args.layers):
            for n in range(args.layers):
                w.writerow([l + 1, n + 1, int(symbolic.reach[l, n]),
                            int(tape_reach.reach[l, n]), int(fd_reach.reach[l, n])])
    print(f"{args.scheme.name} L={args.layers}: {symbolic.count()} reachable cells", file=sys.stderr)
    if not agree or tape_reach != symbolic or fd_reach != symbolic:
        print("measured gradient reach disagrees with the symbolic pattern", file=sys.stderr)
        return EXIT_PROPERTY
    return EXIT_OK


def _run(args, single: bool) -> int:
    try:
        manifest = load_manifest(args.manifest)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if single:
        manifest = replace(manifest, strategies=[manifest.config.strategy],
                           schemes=[manifest.config.scheme])
    try:
        manifest.root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: output directory not writable: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rows = run_manifest(manifest, workers=getattr(args, "workers", None))
    print(f"wrote {manifest.root / 'summary.csv'}", file=sys.stderr)
    failed = sum(r["failed"] for r in rows)
    if failed:
        print(f"{failed} run(s) diverged; see FAILED markers under {manifest.root}", file=sys.stderr)
        if single:
            return EXIT_DIVERGED
    return EXIT_OK


def cmd_train(args) -> int:
    return _run(args, single=True)


def cmd_ablate(args) -> int:
    return _run(args, single=False)


def cmd_analyze_logs(args) -> int:
    try:
        with open(args.logs) as fh:
            records = metrics.read_log_lines(fh)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {args.logs}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not records:
        print(f"error: {args.logs} holds no assignment records", file=sys.stderr)
        return EXIT_USAGE
    try:
        by_epoch = metrics.group_by_epoch(records)
        epochs = sorted(by_epoch)
        if len(epochs) < 2:
            raise ValueError("need at least two epochs to measure instability")
        if args.per_image:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["epoch", "image_id", "IS", "FCS", "FOS", "FIS"])
            for prev, cur in zip(epochs, epochs[1:]):
                a, b = by_epoch[cur], by_epoch[prev]
                if set(a) != set(b):
                    raise ValueError(f"epochs {prev} and {cur} cover different images")
                for img in sorted(a):
                    w.writerow([cur, img, repr(metrics.is_metric(a[img], b[img])),
                                metrics.fcs(a[img], b[img]), metrics.fos(a[img], b[img]),
                                repr(metrics.fis(a[img], b[img]))])
            text = buf.getvalue()
        else:
            text = metrics.instability_csv(metrics.instability_series(records))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="overlapdet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("selftest", help="run the built-in consistency suites")
    p.add_argument("--suite", action="append", choices=sorted(selftest.SUITES),
                   help="run only this suite (repeatable)")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("gradflow", help="print which offsets each layer's loss reaches")
    p.add_argument("--scheme", type=_scheme, required=True,
                   help="lfo, lft, lfd, or lfd-{sum,avg}-{equal,amplify,diminish}")
    p.add_argument("--layers", type=_positive, required=True)
    p.add_argument("--format", choices=("long", "matrix"), default="long")
    p.add_argument("--seed", type=int, default=0, help="evaluation point for the measured columns")
    p.set_defaults(func=cmd_gradflow)

    p = sub.add_parser("train", help="train the configured cell for every seed of a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the strategy x scheme grid of a manifest")
    p.add_argument("--grid", "--manifest", dest="manifest", required=True)
    p.add_argument("--workers", type=_positive, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze-logs", help="per-epoch IS/FCS/FOS/FIS from assignment logs")
    p.add_argument("--logs", required=True)
    p.add_argument("--per-image", action="store_true")
    p.add_argument("--output", help="write the CSV here instead of stdout")
    p.set_defaults(func=cmd_analyze_logs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
