"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from facewarp.energy import EnergyWeights
from facewarp.pipeline import RunConfig, run


def _grid(text: str):
    try:
        cols, rows = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 33x25, got {text!r}") from None
    if cols < 2 or rows < 2:
        raise argparse.ArgumentTypeError("grid must be at least 2x2")
    return cols, rows


def _weight(text: str):
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"weight must look like name=value, got {text!r}")
    try:
        return name.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"weight value is not a number: {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="facewarp",
        description="Correct wide-angle face distortion in a PNG frame sequence.")
    p.add_argument("--frames", help="input frames: printf pattern (frames/%%05d.png) or glob")
    p.add_argument("--annotations", required=True, type=Path, help="annotation JSON file")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--mode", choices=("full", "sequential"), default="full")
    p.add_argument("--grid", type=_grid, default=(33, 25), help="mesh vertices as COLSxROWS")
    p.add_argument("--weight", type=_weight, action="append", default=[],
                   help="override an energy weight, e.g. line=32 or l=32 (repeatable)")
    p.add_argument("--no-render", action="store_true", help="skip writing warped frames")
    p.add_argument("--no-track", action="store_true",
                   help="use annotated per-frame line endpoints instead of tracking seeds")
    p.add_argument("--export-mesh", action="store_true",
                   help="write meshes.csv and latents.csv to the output directory")
    p.add_argument("--export-metrics", type=Path, help="write JSON metrics to this path")
    p.add_argument("--dump-system", type=Path, help="write the sparse system as text triplets")
    p.add_argument("--threads", type=int, default=1, help="render worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        weights = EnergyWeights().with_overrides(dict(args.weight))
        config = RunConfig(annotations=args.annotations, out_dir=args.out, frames=args.frames,
                           mode=args.mode, grid=args.grid, weights=weights,
                           no_render=args.no_render, export_mesh=args.export_mesh,
                           export_metrics=args.export_metrics, dump_system=args.dump_system,
                           track=not args.no_track, threads=args.threads)
        state = run(config)
    except Exception as exc:  # noqa: BLE001 - reported as one parseable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    if args.verbose:
        print(json.dumps(state.timings_ms))
    return 0


if __name__ == "__main__":
    sys.exit(main())
