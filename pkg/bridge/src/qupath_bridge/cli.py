"""Command line for the bridge.

``run`` turns a large image plus GeoJSON region annotations into
classified cell detections (GeoJSON) and per-region count tables (CSV),
driving the engine CLI under the hood.  ``counts`` re-derives the count
table from an existing detections file.

Exit codes: 0 success, 2 invalid input, 4 i/o error, 5 engine failure.
"""

import argparse
import shlex
import sys

from . import __version__
from .detections import export_counts, read_detections
from .engine import FileStubProducer
from .errors import BridgeError, EngineCallError
from .runner import RunParams, run


def _cmd_run(args) -> int:
    params = RunParams(
        engine=shlex.split(args.engine),
        jobs=args.jobs,
        seed=args.seed,
        class_names=(args.class_names.split(",")
                     if args.class_names else None),
        halo=args.halo,
    )
    producer = FileStubProducer(args.stub_dir)
    result = run(args.image, args.annotations, producer, args.out_dir,
                 params)
    totals = result.report["totals"]
    failed = [rid for rid, entry in result.report["regions"].items()
              if entry["status"] != "ok"]
    print(f"{totals['detections']} detections -> {result.detections_path}")
    if failed:
        print(f"failed regions: {', '.join(failed)}", file=sys.stderr)
    return 0


def _cmd_counts(args) -> int:
    coll = read_detections(args.detections)
    export_counts(coll, args.out)
    print(f"{len(coll)} detections -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qupath-bridge",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version",
                        version=f"qupath-bridge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="regions -> detections + counts")
    p.add_argument("--image", required=True, help="large PNG/TIFF")
    p.add_argument("--annotations", required=True,
                   help="GeoJSON FeatureCollection of region polygons")
    p.add_argument("--stub-dir", required=True,
                   help="directory of precomputed per-tile model outputs")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--engine", default="cellquant",
                   help="engine command (default: cellquant)")
    p.add_argument("--class-names",
                   help="comma-separated names for class ids 1..C")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker threads driving engine calls")
    p.add_argument("--seed", type=int, help="seed passed to the engine")
    p.add_argument("--halo", type=int, default=0,
                   help="reserved; only 0 is supported")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("counts", help="count table from a detections file")
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_counts)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EngineCallError as exc:
        print(f"qupath-bridge: {exc}", file=sys.stderr)
        return 5
    except BridgeError as exc:
        print(f"qupath-bridge: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"qupath-bridge: i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
