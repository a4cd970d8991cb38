"""
Plot a result table written by ``blindisac sweep``.

Usage: python3 plot_results.py results.csv [metric ...]

Draws every ``*_rmse`` metric (or the ones named) against the sweep value on
a log scale. Needs matplotlib, which the library itself does not use.
"""

import sys

import matplotlib.pyplot as plt

from blindisac.harness import ResultTable


def main(path, metrics=None):
    table = ResultTable.read_csv(path)
    metrics = metrics or [m for m in table.metrics() if m.endswith("_rmse") or m.startswith("crlb_")]
    fig, ax = plt.subplots()
    for metric in metrics:
        rows = [r for r in table.rows if r[1] == metric]
        ax.semilogy([r[0] for r in rows], [r[2] for r in rows], marker="o", label=metric)
    ax.set_xlabel(table.metadata.get("axis", "sweep value"))
    ax.legend(fontsize="small")
    out = path.rsplit(".", 1)[0] + ".png"
    fig.savefig(out, dpi=120)
    print("wrote", out)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2:] or None)
