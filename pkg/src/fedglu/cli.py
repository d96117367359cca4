"""Command-line entry point: ``fedglu {synth,run,alpha-sweep,report}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cgm_data import (InfeasibleSpec, NonMonotonicTimestamps, ParseError, SeriesTooShort, SyntheticCohortSpec,
                       audit_cohort, generate_synthetic_cohort, write_csv)
from .config import ConfigError, RunConfig, load_config
from .evaluation import cega_svg
from .experiment import Experiment, alpha_sweep, build_report, report_rows
from .nn_core import EmptyDataset, save_checkpoint
from .report import (SWEEP_COLUMNS, HashMismatch, MissingArtifacts, dump_json, dump_rows, load_report,
                     render_summary, render_sweep, verify_manifest, write_manifest)

logger = logging.getLogger("fedglu")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
DATA_ERRORS = (ParseError, NonMonotonicTimestamps, InfeasibleSpec, SeriesTooShort, EmptyDataset)


def cmd_synth(spec: SyntheticCohortSpec, out_csv) -> str:
    """Write a synthetic cohort as CSV and return its audit table."""
    cohort = generate_synthetic_cohort(spec)
    write_csv(cohort, out_csv)
    return audit_cohort(cohort).format()


def cmd_run(cfg: RunConfig, out_dir=None) -> tuple[Experiment, dict]:
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = Experiment(cfg)
    for fold in cfg.folds.run:
        snap = out / f"fold_{fold}" if cfg.outputs.save_round_snapshots else None
        exp.run_fold(fold, snapshot_dir=snap)
        if cfg.outputs.save_models:
            for name in ("central_mse", "central_hh", "fed_global"):
                model = exp.model(name, fold)
                if model is not None:
                    save_checkpoint(out / "models" / f"{name}_fold{fold}.json", model)
    with exp.stage("report"):
        report = build_report(exp)
        dump_json(report, out / "report.json")
        dump_rows(("patient", "regime", "fold", "metric", "value"), report_rows(report), out / "report.csv")
        if cfg.outputs.cega_svg:
            for regime in report["regimes"]:
                pairs = exp.predictions(regime)
                ys = [y for y, _ in pairs.values()]
                ps = [p for _, p in pairs.values()]
                svg = cega_svg(np.concatenate(ys), np.concatenate(ps), title=regime)
                (out / f"cega_{regime}.svg").write_text(svg, encoding="utf-8")
    write_manifest(out, cfg.to_dict(), exp.timings)
    return exp, report


def cmd_alpha_sweep(cfg: RunConfig, alphas: Optional[Sequence[float]] = None, regime: str = "central",
                    out_dir=None, experiment: Optional[Experiment] = None) -> dict:
    """One training per alpha; writes ``alpha_sweep.json`` / ``.csv`` and a manifest."""
    needed = "central" if regime == "central" else "fedglu"
    if needed not in cfg.regimes:
        raise ConfigError("regimes", f"alpha sweep over '{regime}' needs the '{needed}' regime configured")
    alphas = tuple(cfg.loss.alpha_grid) if alphas is None else tuple(alphas)
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ConfigError("alphas", f"value {a!r} outside [0, 1]")
    exp = experiment or Experiment(cfg)
    sweep = alpha_sweep(exp, alphas, regime)
    out = Path(out_dir or Path(cfg.output_dir) / "alpha_sweep")
    dump_json(sweep, out / "alpha_sweep.json")
    dump_rows(SWEEP_COLUMNS, [tuple(r[c] for c in SWEEP_COLUMNS) for r in sweep["rows"] + [sweep["baseline"]]],
              out / "alpha_sweep.csv")
    write_manifest(out, {**cfg.to_dict(), "sweep": {"alphas": list(alphas), "regime": regime}}, exp.timings)
    return sweep


def cmd_report(run_dir, verify: bool = False, scope: Optional[str] = None) -> str:
    lines = []
    if verify:
        n = verify_manifest(run_dir)
        lines.append(f"manifest ok: {n} files verified\n")
    run_dir = Path(run_dir)
    if (run_dir / "report.json").is_file():
        lines.append(render_summary(load_report(run_dir), scope))
    elif (run_dir / "alpha_sweep.json").is_file():
        lines.append(render_sweep(json.loads((run_dir / "alpha_sweep.json").read_text(encoding="utf-8"))))
    else:
        raise MissingArtifacts(f"no report.json or alpha_sweep.json in {run_dir}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------

def _alpha_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedglu", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    d = SyntheticCohortSpec()
    p = sub.add_parser("synth", help="write a synthetic CGM cohort as CSV")
    p.add_argument("--patients", type=int, default=d.n_patients)
    p.add_argument("--days", type=int, default=d.days_per_patient)
    p.add_argument("--seed", type=int, default=d.rng_seed)
    p.add_argument("--hypo", type=float, default=d.target_hypo_fraction, help="target median hypo fraction")
    p.add_argument("--hyper", type=float, default=d.target_hyper_fraction, help="target median hyper fraction")
    p.add_argument("--missing", type=float, default=d.missing_fraction, help="fraction of missing readings")
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="train and evaluate the configured regimes")
    p.add_argument("config")
    p.add_argument("--output-dir")

    p = sub.add_parser("alpha-sweep", help="HH improvement over MSE for each alpha")
    p.add_argument("config")
    p.add_argument("--alphas", type=_alpha_list, help="comma-separated grid (default: loss.alpha_grid)")
    p.add_argument("--regime", choices=("central", "fedglu"), default="central")
    p.add_argument("--output-dir")

    p = sub.add_parser("report", help="print the summary of a run directory")
    p.add_argument("run_dir")
    p.add_argument("--verify", action="store_true", help="re-hash files against manifest.json")
    p.add_argument("--fold", help="fold number or 'all' (default: all when present)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            try:
                spec = SyntheticCohortSpec(args.patients, args.days, args.hypo, args.hyper, args.seed, args.missing)
            except ValueError as exc:
                raise ConfigError("synth", str(exc)) from None
            print(cmd_synth(spec, args.out))
        elif args.command in ("run", "alpha-sweep"):
            try:
                cfg = load_config(args.config)
            except OSError as exc:
                raise ConfigError("<file>", str(exc)) from None
            if args.command == "run":
                _, report = cmd_run(cfg, args.output_dir)
                print(render_summary(report))
            else:
                print(render_sweep(cmd_alpha_sweep(cfg, args.alphas, args.regime, args.output_dir)))
        else:
            print(cmd_report(args.run_dir, args.verify, args.fold), end="")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (MissingArtifacts, HashMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        # unreadable inputs are data errors; failing to write outputs is a runtime error
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_DATA if isinstance(exc, FileNotFoundError) else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
