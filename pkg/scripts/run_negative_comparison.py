"""Mined hard negatives vs in-batch negatives on the distractor fixture (5 seeds)."""

from _common import run

if __name__ == "__main__":
    run("negatives", __doc__)
