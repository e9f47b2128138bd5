#!/usr/bin/env python3
"""Render the toy-lab trajectories (mean error and output spread per step)
from the CSVs written by `aesop-sr seve-lab`.

Usage: python scripts/plot_toy_lab.py LAB_DIR [OUT.png]

Requires matplotlib (not a package dependency): pip install matplotlib
"""

import csv
import sys
from pathlib import Path


def load(path):
    with open(path) as handle:
        rows = list(csv.DictReader(handle))
    steps = [int(r["step"]) for r in rows]
    mean_error = [float(r["mean_error"]) for r in rows]
    std = [float(r["std"]) for r in rows]
    return steps, mean_error, std


def main() -> int:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib is required: pip install matplotlib", file=sys.stderr)
        return 1
    if len(sys.argv) < 2:
        print(__doc__, file=sys.stderr)
        return 1
    lab_dir = Path(sys.argv[1])
    out = Path(sys.argv[2]) if len(sys.argv) > 2 else lab_dir / "toy_lab.png"

    fig, (ax_err, ax_std) = plt.subplots(1, 2, figsize=(9, 3.5))
    for mode, color in (("pixel", "tab:red"), ("aesop_analytic", "tab:blue")):
        path = lab_dir / f"trajectory_{mode}.csv"
        if not path.exists():
            continue
        steps, mean_error, std = load(path)
        ax_err.plot(steps, mean_error, color=color, label=mode)
        ax_std.plot(steps, std, color=color, label=mode)
    ax_err.set_xlabel("step")
    ax_err.set_ylabel("|mean - posterior mean|")
    ax_err.legend()
    ax_std.set_xlabel("step")
    ax_std.set_ylabel("output std")
    ax_std.legend()
    fig.suptitle("mean alignment vs. spread preservation")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
