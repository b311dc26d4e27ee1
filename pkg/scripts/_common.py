import argparse
import logging
import sys
import tempfile
from pathlib import Path

from embkit.presets import run_preset


def run(name: str, description: str) -> None:
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument("--workdir", type=Path, help="where fixture data is written (default: temp dir)")
    parser.add_argument("--out", type=Path, default=Path("runs"), help="root for run directories")
    parser.add_argument("--seeds", type=int, nargs="+", help="override the preset's seeds")
    parser.add_argument("--fixture-seed", type=int, default=0)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    overrides = {"seeds": args.seeds} if args.seeds else None
    with tempfile.TemporaryDirectory() as tmp:
        workdir = args.workdir or Path(tmp)
        result = run_preset(name, workdir, args.out, args.fixture_seed, overrides)
    sys.stdout.write(result.to_markdown())
    print(f"results in {result.run_dir}", file=sys.stderr)
