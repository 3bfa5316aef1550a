"""Print the attention cost table on a grid that includes H-doubling pairs."""

import argparse
import csv
import sys

from retinexformer.attention import FLOP_COLUMNS, flop_report

DEFAULT_GRID = [(h, w, c, k) for h, w in ((8, 8), (16, 8), (16, 16), (32, 16)) for c, k in ((8, 1), (16, 2), (32, 4))]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.parse_args()
    rows = flop_report(DEFAULT_GRID)
    writer = csv.writer(sys.stdout)
    writer.writerow(FLOP_COLUMNS + ("match",))
    for r in rows:
        writer.writerow([r[c] for c in FLOP_COLUMNS] + [r["formula_igmsa"] == r["measured"]])


if __name__ == "__main__":
    main()
