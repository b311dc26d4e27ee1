"""Data-mixture study on the bilingual fixture: per-language group means per mixture."""

from _common import run

if __name__ == "__main__":
    run("mixture", __doc__)
