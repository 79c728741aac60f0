"""Run the full pipeline on every shipped configuration and print the summaries.

Usage: python scripts/run_all.py [OUT_ROOT] [SYSTEM ...]
"""

import json
import os
import sys

from koopman_pi import cli

SYSTEMS = ["pendulum", "cartpole", "quad2d", "quad3d"]


def main(argv):
    root = argv[0] if argv else "runs/pipeline"
    for name in argv[1:] or SYSTEMS:
        out = os.path.join(root, name)
        code = cli.main(["pipeline", "--config", name, "--out", out, "--quiet"])
        if code != 0:
            print(f"{name}: exit code {code}")
            continue
        with open(os.path.join(out, "summary.json")) as fh:
            s = json.load(fh)
        print(f"{name}: success={s['success_fraction']:.2f} max_cost_error={s['max_cost_error']:.2e} "
              f"dropped={s['n_dropped']}")


if __name__ == "__main__":
    main(sys.argv[1:])
