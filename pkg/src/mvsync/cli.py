"""Command-line entry points: run, gen, inspect."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import MvsyncError, StageError
from .pipeline import run
from .synthetic import gen_synthetic_scene


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="mvsync", description="Multi-view consistency engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the full pipeline from a config file")
    p_run.add_argument("--config", required=True, help="path to the flat key=value config")

    p_gen = sub.add_parser("gen", help="generate a synthetic scene with ground truth")
    p_gen.add_argument("--kind", required=True, choices=["plane", "two_planes", "cube"])
    p_gen.add_argument("--views", required=True, type=int)
    p_gen.add_argument("--res", required=True, type=int, help="square image resolution in pixels")
    p_gen.add_argument("--out", required=True, help="output scene directory")

    p_inspect = sub.add_parser("inspect", help="summarize a run manifest")
    p_inspect.add_argument("--manifest", required=True, help="path to run_manifest.json")

    args = parser.parse_args(argv)

    try:
        if args.command == "run":
            manifest = run(args.config)
            for stage, ms in manifest.stage_timings_ms.items():
                print(f"{stage:24s} {ms:10.1f} ms")
            print(f"outputs: {len(manifest.output_paths)} files (seed {manifest.seed})")
            return 0
        if args.command == "gen":
            bundle = gen_synthetic_scene(args.kind, args.views, args.res, args.out)
            print(f"wrote {args.kind} scene with {len(bundle.views)} views to {args.out}")
            print(f"run it with: mvsync run --config {Path(args.out) / 'scene.cfg'}")
            return 0
        if args.command == "inspect":
            data = json.loads(Path(args.manifest).read_text())
            print(f"seed: {data.get('seed')}")
            print("stages:")
            for stage, ms in data.get("stage_timings_ms", {}).items():
                print(f"  {stage:24s} {ms:10.1f} ms")
            print(f"outputs: {len(data.get('output_paths', []))} files")
            for key, value in sorted(data.get("config", {}).items()):
                print(f"  {key} = {value}")
            return 0
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (MvsyncError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
