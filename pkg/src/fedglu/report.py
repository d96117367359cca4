"""Run-directory artifacts: deterministic JSON/CSV emission, the hash manifest, and text rendering.

Rendering reads ``report.json`` only and performs no statistics of its own,
so every printed p-value is the stored one.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from pathlib import Path
from typing import Iterable, Optional

MANIFEST = "manifest.json"


class MissingArtifacts(FileNotFoundError):
    pass


class HashMismatch(RuntimeError):
    pass


def dump_json(obj, path, indent: Optional[int] = 1) -> None:
    """Sorted keys and repr floats, so equal content gives equal bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=indent, allow_nan=False) + "\n", encoding="utf-8")


def dump_rows(header: Iterable[str], rows: Iterable[tuple], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow(["" if v is None else v for v in row])


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    import numpy
    import scipy

    from . import __version__
    return {"python": platform.python_version(), "numpy": numpy.__version__, "scipy": scipy.__version__,
            "fedglu": __version__}


def write_manifest(run_dir, config: dict, timings: dict) -> dict:
    """Hash every file under ``run_dir`` (except the manifest) into ``manifest.json``."""
    run_dir = Path(run_dir)
    files = {p.relative_to(run_dir).as_posix(): sha256(p)
             for p in sorted(run_dir.rglob("*")) if p.is_file() and p.name != MANIFEST}
    manifest = {"config": config, "versions": versions(),
                "timings_s": {k: round(v, 3) for k, v in sorted(timings.items())}, "files": files}
    dump_json(manifest, run_dir / MANIFEST)
    return manifest


def verify_manifest(run_dir) -> int:
    """Re-hash every listed file; returns the number checked."""
    run_dir = Path(run_dir)
    path = run_dir / MANIFEST
    if not path.is_file():
        raise MissingArtifacts(f"{path} not found")
    files = json.loads(path.read_text(encoding="utf-8"))["files"]
    missing = [f for f in files if not (run_dir / f).is_file()]
    if missing:
        raise MissingArtifacts(f"missing from {run_dir}: {', '.join(missing)}")
    bad = [f for f, digest in files.items() if sha256(run_dir / f) != digest]
    if bad:
        raise HashMismatch(f"content changed since the manifest was written: {', '.join(bad)}")
    return len(files)


def load_report(run_dir) -> dict:
    path = Path(run_dir) / "report.json"
    if not path.is_file():
        raise MissingArtifacts(f"{path} not found")
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# text rendering

def _f(v, spec=".2f") -> str:
    return "-" if v is None else format(v, spec)


def _p(v) -> str:
    return "-" if v is None else f"{v:.4g}"


def render_summary(report: dict, scope: Optional[str] = None) -> str:
    scopes = list(report["summary"])
    scope = scope or ("all" if "all" in scopes else scopes[-1])
    summary, comps = report["summary"][scope], report["comparisons"][scope]
    out = [f"scope: {'all folds pooled' if scope == 'all' else 'fold ' + scope}   seed: {report['seed']}", ""]

    out.append("CEGA groups (mean ± std across patients, %)")
    out.append(f"{'regime':<12} {'n':>3} {'A+B':>16} {'C':>14} {'D+E':>14}")
    for r, s in summary.items():
        cells = [f"{_f(s['cega_group_mean'][g])} ± {_f(s['cega_group_std'][g])}" for g in ("A+B", "C", "D+E")]
        out.append(f"{r:<12} {s['n_patients']:>3} {cells[0]:>16} {cells[1]:>14} {cells[2]:>14}")
    out.append("")

    out.append("RMSE (mg/dL, mean across patients)")
    out.append(f"{'regime':<12} {'overall':>8} {'hypo':>8} {'hyper':>8} {'hypo+hyper':>10}")
    for r, s in summary.items():
        m = s["rmse_mean"]
        out.append(f"{r:<12} {_f(m['overall']):>8} {_f(m['hypo']):>8} {_f(m['hyper']):>8} {_f(m['combined']):>10}")
    out.append("")

    if comps:
        out.append("Comparisons (delta > 0 favours the first regime; paired t-test)")
        out.append(f"{'comparison':<28} {'metric':<14} {'improved':>9} {'mean delta':>10} {'t':>8} {'p':>10}")
        for name, metrics in comps.items():
            label = name.replace("_vs_", " vs ")
            for metric, e in metrics.items():
                improved = f"{e['n_improved']}/{e['n']}"
                out.append(f"{label:<28} {metric:<14} {improved:>9} {_f(e['mean_delta']):>10} "
                           f"{_f(e['t']):>8} {_p(e['p']):>10}")
        out.append("")
        for base in ("local_hh", "central_hh"):
            e = comps.get(f"fedglu_vs_{base}", {}).get("rmse_combined")
            if e:
                out.append(f"patients improved, fedglu vs {base}: {e['n_improved']} of {e['n']} "
                           f"(hypo+hyper RMSE, p={_p(e['p'])})")
    alphas = report.get("cohort_alpha", {}).get("central_hh")
    if alphas:
        out.append("central_hh alpha by fold: " + ", ".join(f"{k}: {v:g}" for k, v in alphas.items()))
    return "\n".join(out).rstrip() + "\n"


SWEEP_COLUMNS = ("alpha", "hypo_improvement_pct", "hyper_improvement_pct", "ab_pct", "cde_pct",
                 "hypo_n_improved", "hypo_n_patients", "hyper_n_improved", "hyper_n_patients")


def render_sweep(sweep: dict) -> str:
    out = [f"alpha sweep ({sweep['regime']}); improvement is relative to the MSE model",
           f"{'alpha':>6} {'hypo impr %':>12} {'hyper impr %':>13} {'A+B %':>8} {'C+D+E %':>8}"]
    for r in sweep["rows"] + [sweep["baseline"]]:
        a = r["alpha"] if isinstance(r["alpha"], str) else f"{r['alpha']:g}"
        out.append(f"{a:>6} {_f(r['hypo_improvement_pct']):>12} {_f(r['hyper_improvement_pct']):>13} "
                   f"{_f(r['ab_pct']):>8} {_f(r['cde_pct']):>8}")
    for region, res in sweep["spearman"].items():
        if res is None:
            out.append(f"spearman(alpha, {region} improvement): undefined")
        else:
            out.append(f"spearman(alpha, {region} improvement): rho={res['rho']:.4f} p={_p(res['p'])}")
    return "\n".join(out) + "\n"
