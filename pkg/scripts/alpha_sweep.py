"""Improvement of the HH loss over MSE across a grid of alpha values.

    python3 scripts/alpha_sweep.py configs/acceptance.json --regime central
"""

import argparse
import logging

from fedglu.cli import cmd_alpha_sweep
from fedglu.config import load_config
from fedglu.report import render_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?", default="configs/acceptance.json")
    ap.add_argument("--regime", choices=("central", "fedglu"), default="central")
    ap.add_argument("--alphas", help="comma-separated grid (default: loss.alpha_grid)")
    ap.add_argument("--output-dir")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else None
    sweep = cmd_alpha_sweep(load_config(args.config), alphas, args.regime, args.output_dir)
    print(render_sweep(sweep))


if __name__ == "__main__":
    main()
