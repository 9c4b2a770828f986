"""Angle distributions: seeded Gaussian pairs across dimensions, then guided runs on hyper8.

Usage: python3 scripts/angle_histogram.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from cfdiff import guidance as gd
from cfdiff import plots
from cfdiff.cli import Harness, collect_angle_pairs
from cfdiff.config import load_config

if __name__ == "__main__":
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/angles")
    out.mkdir(parents=True, exist_ok=True)
    for d in (2, 16, 128, 10000):
        rng = np.random.default_rng([d, 0])
        stats = gd.angle_stats((rng.standard_normal((1000, d)), rng.standard_normal((1000, d))))
        print(f"gaussian pairs d={d:>5}: fraction above 60 deg {stats.fraction_above:.4f}")
    h = Harness.from_config(load_config("configs/hyper8_untrained.json"))
    stats = gd.angle_stats(collect_angle_pairs(h, h.classifier()))
    print(f"hyper8 untrained classifier: {stats.n_pairs} pairs, {stats.degenerate} degenerate, "
          f"fraction above 60 deg {stats.fraction_above:.4f}")
    (out / "hyper8_angles.svg").write_text(plots.histogram_svg(stats.edges, stats.counts, "hyper8 angles", 60.0))
