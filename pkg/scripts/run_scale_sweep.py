"""Training-set size sweep (50 to 400 pairs, 3 seeds) on the clustered fixture."""

from _common import run

if __name__ == "__main__":
    run("scale", __doc__)
