"""Write every bundled fixture, with its experiment config, under one directory.

    python scripts/make_fixtures.py fixtures/
    embkit sweep --config fixtures/scale/config.yaml --out runs/
"""

import argparse
from pathlib import Path

from embkit.presets import PRESETS, materialize


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("directory", type=Path)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--only", choices=sorted(PRESETS), nargs="+")
    args = parser.parse_args()
    for name in args.only or PRESETS:
        path = materialize(name, args.directory / name, seed=args.seed)
        print(path)


if __name__ == "__main__":
    main()
