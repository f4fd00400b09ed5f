#!/usr/bin/env python3
"""Render (eta, zeta) RMSE heat maps from experiment CSV output.

Reads the CSV written by the `grid` or `compare-penalties` subcommands,
prints an ASCII heat map per method (minimum cell marked with `<`), and
optionally writes a PNG when matplotlib is available.

Usage:
    python3 python/plot_heatmap.py results.csv [--png out.png] [--method NAME]
"""

import argparse
import csv
import sys
from collections import defaultdict

SHADES = " .:-=+*#%@"


def read_rows(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for need in ("eta", "zeta", "rmse_mean"):
            if need not in fields:
                sys.exit(f"{path}: column {need!r} missing; not a grid/compare CSV")
        rows = list(reader)
    if not rows:
        sys.exit(f"{path}: no data rows")
    return rows


def by_method(rows, only):
    groups = defaultdict(list)
    for r in rows:
        method = r.get("method", "grid")
        if only is None or method == only:
            groups[method].append(r)
    if not groups:
        sys.exit(f"no rows for method {only!r}")
    return groups


def cells_of(rows):
    cells = {}
    for r in rows:
        key = (float(r["eta"]), float(r["zeta"]))
        val = float(r["rmse_mean"])
        if key not in cells or val < cells[key]:
            cells[key] = val
    return cells


def ascii_map(method, cells):
    etas = sorted({e for e, _ in cells})
    zetas = sorted({z for _, z in cells})
    values = list(cells.values())
    lo, hi = min(values), max(values)
    span = hi - lo or 1.0
    best = min(cells, key=cells.get)

    print(f"\n{method}: rmse_mean over (eta, zeta); "
          f"min {lo:.4f} at eta={best[0]:g}, zeta={best[1]:g}; max {hi:.4f}")
    width = 7
    print(" " * 8 + "".join(f"z={z:<{width - 2}g}" for z in zetas))
    for e in etas:
        line = [f"eta={e:<4g}"]
        for z in zetas:
            v = cells.get((e, z))
            if v is None:
                line.append(" " * width)
                continue
            shade = SHADES[int((v - lo) / span * (len(SHADES) - 1))]
            mark = "<" if (e, z) == best else " "
            line.append(f"{shade}{v:.3f}{mark}"[:width].ljust(width))
        print("".join(line))
    print(f"shade scale: '{SHADES[0]}' = {lo:.4f} ... '{SHADES[-1]}' = {hi:.4f}")


def png_map(groups, out):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        sys.exit("matplotlib is not installed; drop --png or install it")

    fig, axes = plt.subplots(1, len(groups), figsize=(5.2 * len(groups), 4.4), squeeze=False)
    for ax, (method, rows) in zip(axes[0], sorted(groups.items())):
        cells = cells_of(rows)
        etas = sorted({e for e, _ in cells})
        zetas = sorted({z for _, z in cells})
        grid = [[cells.get((e, z), float("nan")) for z in zetas] for e in etas]
        im = ax.imshow(grid, origin="lower", cmap="viridis_r", aspect="auto")
        ax.set_xticks(range(len(zetas)), [f"{z:g}" for z in zetas])
        ax.set_yticks(range(len(etas)), [f"{e:g}" for e in etas])
        ax.set_xlabel("zeta (object side)")
        ax.set_ylabel("eta (user side)")
        ax.set_title(f"{method} RMSE")
        be, bz = min(cells, key=cells.get)
        ax.plot(zetas.index(bz), etas.index(be), "r*", markersize=14)
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(out, dpi=140)
    print(f"wrote {out}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv_path", help="grid or compare-penalties CSV")
    ap.add_argument("--png", metavar="OUT", help="also write a PNG heat map")
    ap.add_argument("--method", help="plot only this method column value")
    args = ap.parse_args()

    groups = by_method(read_rows(args.csv_path), args.method)
    for method, rows in sorted(groups.items()):
        ascii_map(method, cells_of(rows))
    if args.png:
        png_map(groups, args.png)


if __name__ == "__main__":
    main()
