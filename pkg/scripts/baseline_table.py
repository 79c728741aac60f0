"""Identify each shipped system with all three generators and print E_f / E_g.

Usage: python scripts/baseline_table.py [OUT_ROOT] [SYSTEM ...]
"""

import csv
import os
import sys

from koopman_pi import cli

SYSTEMS = ["pendulum", "cartpole", "quad2d", "quad3d"]


def main(argv):
    root = argv[0] if argv else "runs/baselines"
    systems = argv[1:] or SYSTEMS
    print(f"{'system':<10}{'method':<15}{'E_f':>12}{'E_g':>12}")
    for name in systems:
        out = os.path.join(root, name)
        code = cli.main(["identify", "--config", name, "--out", out, "--baselines", "--quiet"])
        if code != 0:
            print(f"{name:<10}failed with exit code {code}")
            continue
        with open(os.path.join(out, "ef_eg.csv"), newline="") as fh:
            for row in csv.DictReader(fh):
                print(f"{name:<10}{row['method']:<15}{float(row['E_f']):>12.3e}{float(row['E_g']):>12.3e}")


if __name__ == "__main__":
    main(sys.argv[1:])
