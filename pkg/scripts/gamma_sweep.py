"""Flip ratio, closeness and realism as the consensus threshold varies.

With 1x1 blocks on a 2-D latent every block angle is 0 or 180 degrees,
so all thresholds below 180 coincide there; use a wider world or block
size to see a gradual effect.

Usage: python3 scripts/gamma_sweep.py [config] [out_dir]
"""

import sys

from cfdiff.cli import main

if __name__ == "__main__":
    config = sys.argv[1] if len(sys.argv) > 1 else "configs/moons_linear.json"
    out = sys.argv[2] if len(sys.argv) > 2 else "runs/gamma_sweep"
    sys.exit(main(["sweep", "--config", config, "--out", out, "--gammas", "0,15,30,45,60,90,120,180"]))
