"""End-to-end experiment: data -> folds -> training regimes -> test predictions -> report.

``Experiment`` caches every trained model's test predictions keyed by
(regime, fold, patient[, alpha]) so that the alpha sweep and the run share
work: selecting alpha for the central HH model trains exactly the models an
alpha sweep over the same grid would.
"""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cgm_data import (GlucoseSeries, SampleSet, SeriesTooShort, excursion_fractions, generate_synthetic_cohort,
                       load_csv, preprocess, split_fold, temporal_kfold)
from .config import REGIME_NAMES, RunConfig
from .evaluation import (GROUPS, ZONES, cega_summary, clip_predictions, group_percentages, region_rmse,
                         zone_percentages)
from .federated import (ClientState, FedConfig, derive_seed, local_finetune, run_federated, select_alpha,
                        train_central, train_local)
from .loss import MSE, HhParams, LossSpec
from .nn_core import MlpModel, init_model, predict_mgdl, train
from .stats import DegenerateVariance, paired_t_test, spearman_rho

logger = logging.getLogger(__name__)

# (candidate, baseline) pairs reported in the comparison block
COMPARISONS = (
    ("fedglu", "local_hh"),
    ("fedglu", "central_hh"),
    ("fedglu", "fed_global"),
    ("fed_global", "local_mse"),
    ("local_hh", "local_mse"),
    ("central_hh", "central_mse"),
    ("central_hh", "local_hh"),
)
RMSE_METRICS = ("overall", "hypo", "hyper", "combined")


@dataclass
class PatientFold:
    patient_id: str
    train: SampleSet
    test: SampleSet

    def client(self) -> ClientState:
        return ClientState(self.patient_id, self.train)


class Experiment:
    def __init__(self, cfg: RunConfig, cohort: Optional[Sequence[GlucoseSeries]] = None):
        self.cfg = cfg
        self.timings: dict[str, float] = {}
        with self.stage("data"):
            if cohort is None:
                if cfg.data.csv is not None:
                    cohort = load_csv(cfg.data.csv)
                else:
                    cohort = generate_synthetic_cohort(cfg.data.synthetic)
            self.cohort = list(cohort)
            self.profiles = {s.patient_id: excursion_fractions(s.values) for s in self.cohort}
            self.folds: dict[int, list[PatientFold]] = {i: [] for i in cfg.folds.run}
            self.excluded: dict[str, str] = {}
            for series in sorted(self.cohort, key=lambda s: s.patient_id):
                clean = preprocess(series, cfg.data.max_gap)
                try:
                    plan = temporal_kfold(clean, cfg.folds.k, cfg.window)
                except SeriesTooShort as exc:
                    self.excluded[series.patient_id] = str(exc)
                    logger.warning("excluding %s: %s", series.patient_id, exc)
                    continue
                for i in cfg.folds.run:
                    tr, te = split_fold(clean, plan[i - 1], cfg.window)
                    if len(tr) and len(te):
                        self.folds[i].append(PatientFold(series.patient_id, tr, te))
                    else:
                        logger.warning("patient %s has no train or test windows in fold %d", series.patient_id, i)
        self.preds: dict[tuple, np.ndarray] = {}
        self.alphas: dict[tuple, float] = {}
        self._models: dict[tuple, MlpModel] = {}
        self.fed_ledgers: dict[int, object] = {}

    # -- helpers ---------------------------------------------------------
    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    def seed(self, *tags) -> int:
        return derive_seed(self.cfg.seed, *tags)

    @property
    def layer_dims(self):
        return self.cfg.layer_dims

    def patients(self, fold: int) -> list[PatientFold]:
        return self.folds[fold]

    def model(self, name: str, fold: int) -> Optional[MlpModel]:
        """Cohort-level model (central_mse, central_hh, fed_global) if already trained."""
        return self._models.get((name, fold))

    def _fresh(self, *tags) -> MlpModel:
        return init_model(self.seed("init", *tags), self.layer_dims)

    def _store(self, key: tuple, model: MlpModel, pf: PatientFold) -> np.ndarray:
        pred = clip_predictions(predict_mgdl(model, pf.test.X))
        self.preds[key] = pred
        return pred

    def alpha_grid(self) -> tuple:
        loss = self.cfg.loss
        return (loss.alpha,) if loss.alpha is not None else tuple(loss.alpha_grid)

    # -- MSE base models ---------------------------------------------------
    def local_mse(self, fold: int) -> dict[str, MlpModel]:
        key = ("local_mse", fold)
        if key not in self._models:
            with self.stage("local_mse"):
                models = {}
                for pf in self.patients(fold):
                    cfg = self.cfg.train.with_seed(self.seed("local_mse", fold, pf.patient_id))
                    m = train_local(pf.client(), MSE, cfg, init=self._fresh("local", fold, pf.patient_id),
                                    layer_dims=self.layer_dims)
                    models[pf.patient_id] = m
                    self._store(("local_mse", fold, pf.patient_id), m, pf)
                self._models[key] = models
        return self._models[key]

    def central_mse(self, fold: int) -> MlpModel:
        key = ("central_mse", fold)
        if key not in self._models:
            with self.stage("central_mse"):
                cfg = self.cfg.train.with_seed(self.seed("central_mse", fold))
                m = train_central([pf.train for pf in self.patients(fold)], MSE, cfg,
                                  init=self._fresh("central", fold), layer_dims=self.layer_dims)
                for pf in self.patients(fold):
                    self._store(("central_mse", fold, pf.patient_id), m, pf)
                self._models[key] = m
        return self._models[key]

    def fed_global(self, fold: int, snapshot_dir=None) -> MlpModel:
        key = ("fed_global", fold)
        if key not in self._models:
            with self.stage("fed_global"):
                s = self.cfg.federated
                fcfg = FedConfig(s.rounds, s.local_epochs, self.cfg.train.batch_size, s.client_lr, s.server_lr,
                                 self.seed("federated", fold), s.max_workers)
                clients = [pf.client() for pf in self.patients(fold)]
                server, ledger = run_federated(clients, fcfg, self._fresh("federated", fold).params,
                                               self.layer_dims, snapshot_dir=snapshot_dir)
                m = MlpModel(self.layer_dims, server.params)
                self.fed_ledgers[fold] = ledger
                for pf in self.patients(fold):
                    self._store(("fed_global", fold, pf.patient_id), m, pf)
                self._models[key] = m
        return self._models[key]

    # -- HH variants -------------------------------------------------------
    def _hh_start(self, base: MlpModel, *tags) -> MlpModel:
        return base if self.cfg.hh_init == "mse" else self._fresh(*tags)

    def central_hh_candidate(self, fold: int, alpha: float) -> MlpModel:
        """Central HH model for one alpha; test predictions are cached per patient."""
        start = self._hh_start(self.central_mse(fold), "central", fold)
        settings = self.cfg.finetune if self.cfg.hh_init == "mse" else self.cfg.train
        cfg = settings.with_seed(self.seed("central_hh", fold))
        pooled = SampleSet.concat([pf.train for pf in self.patients(fold)])
        m = train(start, pooled, LossSpec("hh", HhParams(alpha)), cfg).model
        for pf in self.patients(fold):
            self._store(("central_hh@", fold, pf.patient_id, float(alpha)), m, pf)
        return m

    def central_hh(self, fold: int) -> float:
        key = ("central_hh", fold)
        if key not in self.alphas:
            self.central_mse(fold)
            with self.stage("central_hh"):
                pooled = SampleSet.concat([pf.train for pf in self.patients(fold)])
                sel = select_alpha(lambda a: self.central_hh_candidate(fold, a), self.alpha_grid(), pooled)
                model = sel.model if sel.model is not None else self.central_hh_candidate(fold, sel.alpha)
                self._models[key] = model
                for pf in self.patients(fold):
                    self.preds[("central_hh", fold, pf.patient_id)] = \
                        self.preds[("central_hh@", fold, pf.patient_id, sel.alpha)]
                self.alphas[key] = sel.alpha
        return self.alphas[key]

    def _personal_hh(self, regime: str, fold: int, bases: dict[str, MlpModel]) -> dict[str, float]:
        chosen = {}
        for pf in self.patients(fold):
            base = self._hh_start(bases[pf.patient_id], regime, fold, pf.patient_id)
            settings = self.cfg.finetune if (regime == "fedglu" or self.cfg.hh_init == "mse") else self.cfg.train
            cfg = settings.with_seed(self.seed(regime, fold, pf.patient_id))
            client = pf.client()

            def fit(alpha, base=base, cfg=cfg, client=client, pf=pf):
                m = MlpModel(self.layer_dims, local_finetune(client, base.params, HhParams(alpha), cfg,
                                                             self.layer_dims))
                self._store((regime + "@", fold, pf.patient_id, float(alpha)), m, pf)
                return m

            sel = select_alpha(fit, self.alpha_grid(), pf.train)
            if sel.model is None:
                fit(sel.alpha)
            self.preds[(regime, fold, pf.patient_id)] = self.preds[(regime + "@", fold, pf.patient_id, sel.alpha)]
            self.alphas[(regime, fold, pf.patient_id)] = sel.alpha
            chosen[pf.patient_id] = sel.alpha
        return chosen

    def local_hh(self, fold: int) -> dict[str, float]:
        bases = self.local_mse(fold)
        with self.stage("local_hh"):
            return self._personal_hh("local_hh", fold, bases)

    def fedglu(self, fold: int) -> dict[str, float]:
        g = self.fed_global(fold)
        with self.stage("fedglu"):
            return self._personal_hh("fedglu", fold, {pf.patient_id: g for pf in self.patients(fold)})

    def fedglu_candidate(self, fold: int, alpha: float) -> None:
        g = self.fed_global(fold)
        for pf in self.patients(fold):
            key = ("fedglu@", fold, pf.patient_id, float(alpha))
            if key in self.preds:
                continue
            cfg = self.cfg.finetune.with_seed(self.seed("fedglu", fold, pf.patient_id))
            m = MlpModel(self.layer_dims, local_finetune(pf.client(), g.params, HhParams(alpha), cfg,
                                                         self.layer_dims))
            self._store(key, m, pf)

    # -- orchestration -----------------------------------------------------
    def regime_names(self) -> list[str]:
        names = []
        hh = self.cfg.loss.loss == "hh"
        for r in self.cfg.regimes:
            if r == "local":
                names += ["local_mse"] + (["local_hh"] if hh else [])
            elif r == "central":
                names += ["central_mse"] + (["central_hh"] if hh else [])
            elif r == "federated":
                names.append("fed_global")
            elif r == "fedglu":
                names.append("fedglu")
        return [n for n in REGIME_NAMES if n in names]

    def run_fold(self, fold: int, snapshot_dir=None) -> None:
        names = self.regime_names()
        if not self.patients(fold):
            logger.warning("fold %d has no usable patients", fold)
            return
        if "local_mse" in names:
            self.local_mse(fold)
        if "local_hh" in names:
            self.local_hh(fold)
        if "central_mse" in names:
            self.central_mse(fold)
        if "central_hh" in names:
            self.central_hh(fold)
        if "fed_global" in names:
            self.fed_global(fold, snapshot_dir=snapshot_dir)
        if "fedglu" in names:
            self.fedglu(fold)

    def predictions(self, regime: str, fold: Optional[int] = None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """patient -> (y_true, y_pred) for one fold, or pooled over all run folds."""
        folds = [fold] if fold is not None else list(self.cfg.folds.run)
        out: dict[str, list] = {}
        for f in folds:
            for pf in self.folds.get(f, []):
                pred = self.preds.get((regime, f, pf.patient_id))
                if pred is None:
                    continue
                ys, ps = out.setdefault(pf.patient_id, ([], []))
                ys.append(pf.test.y)
                ps.append(pred)
        return {pid: (np.concatenate(ys), np.concatenate(ps)) for pid, (ys, ps) in sorted(out.items())}


# ---------------------------------------------------------------------------
# report assembly

def patient_metrics(y_true, y_pred) -> dict:
    rr = region_rmse(y_true, y_pred)
    d = rr.to_dict()
    d["combined"] = rr.combined
    return {"n_test": int(len(y_true)), "rmse": d,
            "cega_zones": zone_percentages(y_true, y_pred), "cega_groups": group_percentages(y_true, y_pred)}


def _mean_present(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def regime_summary(per_patient: dict[str, dict], pairs: dict[str, tuple]) -> dict:
    cs = cega_summary(pairs)
    return {
        "n_patients": len(per_patient),
        "rmse_mean": {m: _mean_present(p["rmse"][m] for p in per_patient.values()) for m in RMSE_METRICS},
        "cega_group_mean": cs.group_mean, "cega_group_std": cs.group_std,
        "cega_zone_mean": cs.zone_mean, "cega_zone_std": cs.zone_std,
    }


def compare(candidate: dict[str, dict], baseline: dict[str, dict]) -> dict:
    """Per-metric improvement of ``candidate`` over ``baseline`` across shared patients.

    RMSE and the C / D+E shares improve when they go down, A+B when it goes
    up; ``delta`` is oriented so positive always means the candidate is better.
    """
    shared = sorted(set(candidate) & set(baseline))
    out = {}
    metrics = [("rmse_" + m, m, -1) for m in RMSE_METRICS] + \
              [("cega_" + g, g, 1 if g == "A+B" else -1) for g in GROUPS]
    for name, key, sign in metrics:
        deltas, rel = [], []
        for pid in shared:
            if name.startswith("rmse_"):
                a, b = candidate[pid]["rmse"][key], baseline[pid]["rmse"][key]
            else:
                a, b = candidate[pid]["cega_groups"][key], baseline[pid]["cega_groups"][key]
            if a is None or b is None:
                continue
            deltas.append(sign * (a - b))
            if name.startswith("rmse_") and b > 0:
                rel.append(100.0 * (b - a) / b)
        entry = {"n": len(deltas), "n_improved": int(sum(d > 0 for d in deltas)),
                 "mean_delta": float(np.mean(deltas)) if deltas else None,
                 "mean_improvement_pct": float(np.mean(rel)) if rel else None, "t": None, "p": None}
        try:
            res = paired_t_test(deltas)
            entry["t"], entry["p"] = res.statistic, res.p_value
        except DegenerateVariance:
            pass
        out[name] = entry
    return out


def build_report(exp: Experiment) -> dict:
    names = exp.regime_names()
    fold_keys = [str(f) for f in exp.cfg.folds.run] + (["all"] if len(exp.cfg.folds.run) > 1 else [])
    regimes, summary, comparisons = {}, {}, {}
    per_scope: dict[str, dict[str, dict]] = {}
    for fk in fold_keys:
        fold = None if fk == "all" else int(fk)
        per_scope[fk] = {}
        summary[fk] = {}
        for r in names:
            pairs = exp.predictions(r, fold)
            if not pairs:
                continue
            metrics = {pid: patient_metrics(*pair) for pid, pair in pairs.items()}
            if fold is not None:
                for pid, m in metrics.items():
                    a = exp.alphas.get((r, fold, pid), exp.alphas.get((r, fold)))
                    if a is not None:
                        m["alpha"] = a
                    pf = next(p for p in exp.folds[fold] if p.patient_id == pid)
                    m["n_train"] = len(pf.train)
            per_scope[fk][r] = metrics
            regimes.setdefault(r, {})[fk] = metrics
            summary[fk][r] = regime_summary(metrics, pairs)
        comparisons[fk] = {f"{a}_vs_{b}": compare(per_scope[fk][a], per_scope[fk][b])
                           for a, b in COMPARISONS if a in per_scope[fk] and b in per_scope[fk]}
    cohort_alphas = {r: {str(f): exp.alphas[(r, f)] for f in exp.cfg.folds.run if (r, f) in exp.alphas}
                     for r in ("central_hh",)}
    return {
        "seed": exp.cfg.seed,
        "regimes_run": names,
        "folds": list(exp.cfg.folds.run),
        "profiles": {pid: {"hypo_pct": 100 * lo, "hyper_pct": 100 * hi} for pid, (lo, hi) in sorted(exp.profiles.items())},
        "excluded": exp.excluded,
        "cohort_alpha": cohort_alphas,
        "regimes": regimes,
        "summary": summary,
        "comparisons": comparisons,
    }


def report_rows(report: dict) -> list[tuple]:
    """Flat (patient, regime, fold, metric, value) rows for report.csv."""
    rows = []
    for regime, by_fold in report["regimes"].items():
        for fold, by_patient in by_fold.items():
            for pid, m in by_patient.items():
                for k, v in m["rmse"].items():
                    rows.append((pid, regime, fold, f"rmse_{k}" if not k.startswith("n_") else k, v))
                for z in ZONES:
                    rows.append((pid, regime, fold, f"zone_{z.value}", m["cega_zones"][z.value]))
                for g in GROUPS:
                    rows.append((pid, regime, fold, f"group_{g}", m["cega_groups"][g]))
                rows.append((pid, regime, fold, "n_test", m["n_test"]))
                for extra in ("n_train", "alpha"):
                    if extra in m:
                        rows.append((pid, regime, fold, extra, m[extra]))
    return rows


# ---------------------------------------------------------------------------
# alpha sweep

def alpha_sweep(exp: Experiment, alphas: Sequence[float], regime: str = "central") -> dict:
    """Per-alpha excursion RMSE improvement over the MSE baseline, pooled over folds.

    ``regime`` is ``central`` (baseline central_mse) or ``fedglu`` (baseline
    fed_global, per-patient fine-tuning at a fixed alpha).
    """
    if regime not in ("central", "fedglu"):
        raise ValueError("alpha sweep supports the 'central' and 'fedglu' regimes")
    base_name = "central_mse" if regime == "central" else "fed_global"
    tag = "central_hh@" if regime == "central" else "fedglu@"
    for f in exp.cfg.folds.run:
        if not exp.patients(f):
            continue
        if regime == "central":
            exp.central_mse(f)
        else:
            exp.fed_global(f)
        for a in alphas:
            with exp.stage("alpha_sweep"):
                if regime == "central":
                    if (tag, f, exp.patients(f)[0].patient_id, float(a)) not in exp.preds:
                        exp.central_hh_candidate(f, a)
                else:
                    exp.fedglu_candidate(f, a)

    def pooled(key_fn):
        out = {}
        for f in exp.cfg.folds.run:
            for pf in exp.patients(f):
                pred = exp.preds.get(key_fn(f, pf.patient_id))
                if pred is None:
                    continue
                ys, ps = out.setdefault(pf.patient_id, ([], []))
                ys.append(pf.test.y)
                ps.append(pred)
        return {pid: (np.concatenate(y), np.concatenate(p)) for pid, (y, p) in sorted(out.items())}

    base = pooled(lambda f, pid: (base_name, f, pid))
    base_rr = {pid: region_rmse(*pair) for pid, pair in base.items()}

    def row(label, pairs):
        rr = {pid: region_rmse(*pair) for pid, pair in pairs.items()}
        r = {"alpha": label}
        for region in ("hypo", "hyper"):
            imps = []
            for pid in rr:
                a, b = getattr(rr[pid], region), getattr(base_rr[pid], region)
                if a is not None and b is not None and b > 0:
                    imps.append(100.0 * (b - a) / b)
            r[f"{region}_improvement_pct"] = float(np.mean(imps)) if imps else None
            r[f"{region}_n_improved"] = int(sum(i > 0 for i in imps))
            r[f"{region}_n_patients"] = len(imps)
        groups = [group_percentages(*pair) for pair in pairs.values()]
        r["ab_pct"] = float(np.mean([g["A+B"] for g in groups]))
        r["cde_pct"] = float(np.mean([g["C"] + g["D+E"] for g in groups]))
        return r

    rows = [row(float(a), pooled(lambda f, pid, a=a: (tag, f, pid, float(a)))) for a in alphas]
    baseline = row("mse", base)
    result = {"regime": regime, "rows": rows, "baseline": baseline, "spearman": {}}
    for region in ("hypo", "hyper"):
        xs = [r["alpha"] for r in rows if r[f"{region}_improvement_pct"] is not None]
        ys = [r[f"{region}_improvement_pct"] for r in rows if r[f"{region}_improvement_pct"] is not None]
        try:
            res = spearman_rho(xs, ys)
            result["spearman"][region] = {"rho": res.statistic, "p": res.p_value}
        except DegenerateVariance:
            result["spearman"][region] = None
    return result
