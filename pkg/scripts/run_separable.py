"""Sanity run: 500 steps on the separable fixture should lift ndcg@10 above 0.9."""

from _common import run

if __name__ == "__main__":
    run("separable", __doc__)
