"""Train and evaluate every configured regime, then print the summary.

    python3 scripts/run_experiment.py configs/reference.json --output-dir runs/reference
"""

import argparse
import logging

from fedglu.cli import cmd_run
from fedglu.config import load_config
from fedglu.report import render_summary


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?", default="configs/reference.json")
    ap.add_argument("--output-dir")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    exp, report = cmd_run(load_config(args.config), args.output_dir)
    print(render_summary(report))
    print("stage timings (s): " + ", ".join(f"{k}={v:.0f}" for k, v in exp.timings.items()))


if __name__ == "__main__":
    main()
