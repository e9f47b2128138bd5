#!/usr/bin/env python3
"""Plot the distortion/perception rows emitted to pd_curve.csv.

Usage: python scripts/plot_pd_curve.py PD_CURVE_CSV [OUT.png]

Checkpoint ids of the form "<run>_step_NNNN" are grouped into one curve per
run.  Requires matplotlib: pip install matplotlib
"""

import csv
import sys
from collections import defaultdict
from pathlib import Path


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
    csv_path = Path(sys.argv[1])
    out = Path(sys.argv[2]) if len(sys.argv) > 2 else csv_path.with_suffix(".png")

    curves = defaultdict(list)
    with open(csv_path) as handle:
        for row in csv.DictReader(handle):
            try:
                run = row["checkpoint"].split("_step_")[0]
                curves[run].append((int(row["step"]), float(row["psnr"]),
                                    float(row["proxy_perception"])))
            except (KeyError, TypeError, ValueError):
                print(f"{csv_path} does not look like a pd_curve.csv "
                      "(need checkpoint,step,psnr,proxy_perception columns)", file=sys.stderr)
                return 1

    fig, ax = plt.subplots(figsize=(5, 4))
    for run, points in sorted(curves.items()):
        points.sort()
        psnr = [p[1] for p in points]
        perception = [p[2] for p in points]
        ax.plot(psnr, perception, marker="o", label=run)
    ax.set_xlabel("PSNR (dB, distortion)")
    ax.set_ylabel("proxy perception score (higher = better)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
