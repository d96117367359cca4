"""CGM series ingestion, preprocessing, windowing and temporal fold planning.

Readings are stored as a float array with three sentinel encodings:
``MISSING`` is NaN, ``LOW`` is ``-inf`` and ``HIGH`` is ``+inf``. This keeps
the preprocessing steps vectorised (``np.clip`` maps the sentinels onto the
sensor bounds and leaves NaN alone).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

logger = logging.getLogger(__name__)

INTERVAL_S = 300
GLUCOSE_MIN = 40.0
GLUCOSE_MAX = 400.0
HYPO_THRESHOLD = 70.0
HYPER_THRESHOLD = 180.0

MISSING = np.nan
LOW = -np.inf
HIGH = np.inf


class SeriesTooShort(ValueError):
    pass


class InfeasibleSpec(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, row: int, reason: str):
        super().__init__(f"row {row}: {reason}")
        self.row = row
        self.reason = reason


class NonMonotonicTimestamps(ValueError):
    pass


@dataclass
class GlucoseSeries:
    """One patient's CGM trace on a regular 5-minute grid."""

    patient_id: str
    timestamps: np.ndarray
    values: np.ndarray
    interval_s: int = INTERVAL_S

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape or self.values.ndim != 1:
            raise ValueError("timestamps and values must be 1-d and equally long")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise NonMonotonicTimestamps(f"patient {self.patient_id}: timestamps not strictly increasing")
        if np.any(self.timestamps % self.interval_s):
            raise ValueError(f"patient {self.patient_id}: timestamps off the {self.interval_s}s grid")

    def __len__(self) -> int:
        return len(self.values)

    def with_values(self, values: np.ndarray) -> "GlucoseSeries":
        return GlucoseSeries(self.patient_id, self.timestamps.copy(), values, self.interval_s)

    def slice(self, start: int, stop: int) -> "GlucoseSeries":
        return GlucoseSeries(self.patient_id, self.timestamps[start:stop].copy(),
                             self.values[start:stop].copy(), self.interval_s)

    @property
    def observed(self) -> np.ndarray:
        return np.isfinite(self.values)


@dataclass(frozen=True)
class WindowConfig:
    window_length: int = 24
    horizon: int = 6

    def __post_init__(self):
        if self.window_length < 1 or self.horizon < 1:
            raise ValueError("window_length and horizon must be >= 1")


@dataclass(frozen=True)
class Normalizer:
    lo: float = GLUCOSE_MIN
    hi: float = GLUCOSE_MAX

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("Normalizer requires lo < hi")

    @property
    def span(self) -> float:
        return self.hi - self.lo


DEFAULT_NORMALIZER = Normalizer()


def normalize(v, n: Normalizer = DEFAULT_NORMALIZER):
    return (np.asarray(v, dtype=np.float64) - n.lo) / n.span


def denormalize(u, n: Normalizer = DEFAULT_NORMALIZER):
    return np.asarray(u, dtype=np.float64) * n.span + n.lo


@dataclass
class Sample:
    x: np.ndarray
    y_raw: float
    t: int


@dataclass
class SampleSet:
    """Supervised windows: ``X`` is (n, WL) normalised, ``y`` is mg/dL."""

    X: np.ndarray
    y: np.ndarray
    t: np.ndarray

    @classmethod
    def empty(cls, window_length: int = 24) -> "SampleSet":
        return cls(np.zeros((0, window_length)), np.zeros(0), np.zeros(0, dtype=np.int64))

    @classmethod
    def concat(cls, sets: Sequence["SampleSet"]) -> "SampleSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        return cls(np.concatenate([s.X for s in sets]), np.concatenate([s.y for s in sets]),
                   np.concatenate([s.t for s in sets]))

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.X[i], float(self.y[i]), int(self.t[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.X[idx], self.y[idx], self.t[idx])


# ---------------------------------------------------------------------------
# preprocessing

def clamp_sentinels(series: GlucoseSeries) -> GlucoseSeries:
    """Map LOW/HIGH onto 40/400 and clip numeric readings into the sensor range."""
    return series.with_values(np.clip(series.values, GLUCOSE_MIN, GLUCOSE_MAX))


def _nan_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open ``(start, stop)`` index runs where ``mask`` is True."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def interpolate_gaps(series: GlucoseSeries, max_gap: int = 6) -> GlucoseSeries:
    """Linearly fill interior MISSING runs shorter than ``max_gap`` readings.

    Runs of length >= ``max_gap`` and runs touching either end stay MISSING.
    The series must already be clamped (no LOW/HIGH sentinels left).
    """
    v = series.values.copy()
    if np.any(np.isinf(v)):
        raise ValueError("clamp_sentinels must run before interpolate_gaps")
    if len(v) > 1 and np.any(np.diff(series.timestamps) != series.interval_s):
        raise ValueError("series is not on a contiguous grid")
    n = len(v)
    for start, stop in _nan_runs(np.isnan(v)):
        length = stop - start
        if length >= max_gap or start == 0 or stop == n:
            continue
        left, right = v[start - 1], v[stop]
        frac = np.arange(1, length + 1) / (length + 1)
        v[start:stop] = left + (right - left) * frac
    return series.with_values(v)


def preprocess(series: GlucoseSeries, max_gap: int = 6) -> GlucoseSeries:
    return interpolate_gaps(clamp_sentinels(series), max_gap=max_gap)


def window_samples(series: GlucoseSeries, cfg: WindowConfig = WindowConfig(),
                   n: Normalizer = DEFAULT_NORMALIZER) -> SampleSet:
    """Every position whose WL inputs and the target PH steps ahead are observed."""
    wl, ph = cfg.window_length, cfg.horizon
    v = series.values
    if len(v) < wl + ph:
        return SampleSet.empty(wl)
    obs = np.isfinite(v)
    # window ending at index t occupies [t-wl+1, t]; target at t+ph
    end_idx = np.arange(wl - 1, len(v) - ph)
    win_ok = sliding_window_view(obs, wl)[: len(end_idx)].all(axis=1)
    valid = end_idx[win_ok & obs[end_idx + ph]]
    windows = sliding_window_view(v, wl)[valid - wl + 1]
    return SampleSet(normalize(windows, n), v[valid + ph].copy(), series.timestamps[valid].copy())


# ---------------------------------------------------------------------------
# temporal folds

@dataclass(frozen=True)
class Fold:
    index: int
    train: tuple[int, int]
    test: tuple[int, int]
    train_range_s: tuple[int, int]
    test_range_s: tuple[int, int]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[Fold, ...]
    boundaries: tuple[int, ...]

    def __iter__(self):
        return iter(self.folds)

    def __getitem__(self, i: int) -> Fold:
        return self.folds[i]


def temporal_kfold(series: GlucoseSeries, k: int = 5,
                   cfg: WindowConfig = WindowConfig()) -> FoldPlan:
    """Expanding-window plan over ``k + 1`` equal contiguous segments.

    Fold ``i`` (1-based) trains on segments 1..i and tests on segment i+1.
    Index ranges are half-open. Raises SeriesTooShort if a segment cannot hold
    a single window plus its target.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(series)
    bounds = tuple(j * n // (k + 1) for j in range(k + 2))
    need = cfg.window_length + cfg.horizon
    if min(b - a for a, b in zip(bounds[:-1], bounds[1:])) < need:
        raise SeriesTooShort(f"patient {series.patient_id}: {n} readings cannot be split into "
                             f"{k + 1} segments of >= {need}")
    ts = series.timestamps
    step = series.interval_s

    def span(a, b):
        return (int(ts[a]), int(ts[b - 1]) + step)

    folds = tuple(
        Fold(i, (0, bounds[i]), (bounds[i], bounds[i + 1]), span(0, bounds[i]), span(bounds[i], bounds[i + 1]))
        for i in range(1, k + 1)
    )
    return FoldPlan(k, folds, bounds)


def split_fold(series: GlucoseSeries, fold: Fold, cfg: WindowConfig = WindowConfig(),
               n: Normalizer = DEFAULT_NORMALIZER) -> tuple[SampleSet, SampleSet]:
    """Window the train and test ranges separately so no window straddles the cut."""
    train = window_samples(series.slice(*fold.train), cfg, n)
    test = window_samples(series.slice(*fold.test), cfg, n)
    return train, test


# ---------------------------------------------------------------------------
# CSV ingestion / export

CSV_HEADER = ("patient_id", "timestamp_s", "glucose")


def _parse_glucose(token: str, row: int) -> float:
    token = token.strip()
    if token == "Low":
        return LOW
    if token == "High":
        return HIGH
    if token == "":
        return MISSING
    try:
        value = float(token)
    except ValueError:
        raise ParseError(row, f"glucose value {token!r} is not a number, 'Low' or 'High'") from None
    if not np.isfinite(value):
        raise ParseError(row, f"glucose value {token!r} is not finite")
    return value


def load_csv(path, interval_s: int = INTERVAL_S) -> list[GlucoseSeries]:
    """Read ``patient_id,timestamp_s,glucose`` rows into gridded series.

    Grid positions with no row become MISSING. Patients are returned in order
    of first appearance.
    """
    per_patient: dict[str, tuple[list[int], list[float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ParseError(1, f"expected header {','.join(CSV_HEADER)}")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(row_no, f"expected 3 fields, got {len(row)}")
            pid, ts_tok, g_tok = row
            pid = pid.strip()
            if not pid:
                raise ParseError(row_no, "empty patient_id")
            try:
                ts = int(ts_tok.strip())
            except ValueError:
                raise ParseError(row_no, f"timestamp {ts_tok!r} is not an integer") from None
            if ts % interval_s:
                raise ParseError(row_no, f"timestamp {ts} is not a multiple of {interval_s}")
            stamps, vals = per_patient.setdefault(pid, ([], []))
            if stamps and ts <= stamps[-1]:
                raise NonMonotonicTimestamps(f"row {row_no}: patient {pid} timestamp {ts} <= {stamps[-1]}")
            stamps.append(ts)
            vals.append(_parse_glucose(g_tok, row_no))

    out = []
    for pid, (stamps, vals) in per_patient.items():
        ts = np.asarray(stamps, dtype=np.int64)
        grid = np.arange(ts[0], ts[-1] + interval_s, interval_s, dtype=np.int64)
        values = np.full(len(grid), MISSING)
        values[(ts - ts[0]) // interval_s] = vals
        out.append(GlucoseSeries(pid, grid, values, interval_s))
    return out


def _format_glucose(v: float) -> str | None:
    if np.isnan(v):
        return None
    if v == LOW:
        return "Low"
    if v == HIGH:
        return "High"
    return f"{v:.1f}"


def write_csv(cohort: Sequence[GlucoseSeries], path) -> None:
    """Export in the ingestion schema; MISSING readings are omitted rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for s in cohort:
            for ts, v in zip(s.timestamps.tolist(), s.values.tolist()):
                token = _format_glucose(v)
                if token is not None:
                    writer.writerow((s.patient_id, ts, token))


# ---------------------------------------------------------------------------
# synthetic cohort

@dataclass(frozen=True)
class SyntheticCohortSpec:
    n_patients: int = 20
    days_per_patient: int = 30
    target_hypo_fraction: float = 0.028
    target_hyper_fraction: float = 0.385
    rng_seed: int = 7
    missing_fraction: float = 0.02

    def __post_init__(self):
        if self.n_patients < 1 or self.days_per_patient < 1:
            raise ValueError("n_patients and days_per_patient must be positive")
        for name in ("target_hypo_fraction", "target_hyper_fraction", "missing_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.target_hypo_fraction + self.target_hyper_fraction >= 1.0:
            raise ValueError("hypo and hyper fractions must sum to < 1")


READINGS_PER_DAY = 24 * 60 * 60 // INTERVAL_S
AR_RHO = 0.98
BASELINE_MEAN = 140.0
BASELINE_SD = 20.0
NOISE_SD = 5.0
HYPO_TOL = 0.01
HYPER_TOL = 0.05


def _excursion_kernel(peak: int, length: int) -> np.ndarray:
    tau = np.arange(length, dtype=np.float64)
    return (tau / peak) * np.exp(1.0 - tau / peak)


@dataclass
class _PatientComponents:
    baseline: np.ndarray
    bumps: np.ndarray
    dips: np.ndarray
    noise: np.ndarray
    missing: np.ndarray

    def signal(self, bump_scale: float, dip_scale: float) -> np.ndarray:
        raw = self.baseline + bump_scale * self.bumps - dip_scale * self.dips + self.noise
        return np.clip(raw, GLUCOSE_MIN, GLUCOSE_MAX)


def _events(rng: np.random.Generator, n: int, per_day: float, amp_sigma: float) -> np.ndarray:
    impulses = np.zeros(n)
    hits = rng.random(n) < per_day / READINGS_PER_DAY
    impulses[hits] = rng.lognormal(0.0, amp_sigma, size=int(hits.sum()))
    return impulses


def _missing_mask(rng: np.random.Generator, n: int, fraction: float) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    if fraction <= 0:
        return mask
    # half short (interpolable) runs, half long ones; mean run length ~9
    n_runs = max(2, int(round(fraction * n / 9.0)))
    lengths = np.where(rng.random(n_runs) < 0.5, rng.integers(1, 6, n_runs), rng.integers(6, 25, n_runs))
    starts = rng.integers(0, n, n_runs)
    for s, length in zip(starts, lengths):
        mask[s:s + length] = True
    return mask


def _components(rng: np.random.Generator, n: int, missing_fraction: float) -> _PatientComponents:
    mean = BASELINE_MEAN + 8.0 * rng.standard_normal()
    innov_sd = BASELINE_SD * np.sqrt(1.0 - AR_RHO ** 2)
    eps = rng.standard_normal(n) * innov_sd
    eps[0] = rng.standard_normal() * BASELINE_SD
    baseline = mean + lfilter([1.0], [1.0, -AR_RHO], eps)

    # per-patient excursion propensities drive the hypo/hyper heterogeneity
    meal_rate = 3.0 * rng.uniform(0.7, 1.3)
    meal_gain = rng.lognormal(0.0, 0.35)
    dip_rate = 1.2 * rng.lognormal(0.0, 0.5)
    bumps = meal_gain * np.convolve(_events(rng, n, meal_rate, 0.3), _excursion_kernel(12, 72))[:n]
    dips = np.convolve(_events(rng, n, dip_rate, 0.25), _excursion_kernel(9, 48))[:n]
    noise = rng.standard_normal(n) * NOISE_SD
    missing = _missing_mask(rng, n, missing_fraction)
    return _PatientComponents(baseline, bumps, dips, noise, missing)


def excursion_fractions(values: np.ndarray) -> tuple[float, float]:
    """Fraction of observed readings below 70 and above 180 mg/dL."""
    v = values[~np.isnan(values)]
    v = np.clip(v, GLUCOSE_MIN, GLUCOSE_MAX)
    if len(v) == 0:
        return 0.0, 0.0
    return float(np.mean(v < HYPO_THRESHOLD)), float(np.mean(v > HYPER_THRESHOLD))


def _cohort_medians(parts: list[_PatientComponents], bump_scale: float, dip_scale: float):
    fr = [excursion_fractions(p.signal(bump_scale, dip_scale)[~p.missing]) for p in parts]
    arr = np.asarray(fr)
    return float(np.median(arr[:, 0])), float(np.median(arr[:, 1]))


def _bisect(f, target: float, lo: float, hi: float, iters: int = 40) -> float:
    """Smallest-ish x in [lo, hi] with f(x) ~ target for non-decreasing f."""
    if f(lo) >= target:
        return lo
    if f(hi) <= target:
        return hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic_cohort(spec: SyntheticCohortSpec) -> list[GlucoseSeries]:
    """Seeded synthetic cohort whose median hypo/hyper fractions hit the targets.

    Each trace is an AR(1) baseline plus meal bumps, insulin dips and sensor
    noise. The bump and dip amplitudes are calibrated with common random
    numbers so the search is monotone in each scale.
    """
    n = spec.days_per_patient * READINGS_PER_DAY
    seeds = np.random.SeedSequence(spec.rng_seed).spawn(spec.n_patients)
    parts = [_components(np.random.default_rng(s), n, spec.missing_fraction) for s in seeds]

    bump_scale, dip_scale = 0.0, 0.0
    for _ in range(4):
        bump_scale = _bisect(lambda b: _cohort_medians(parts, b, dip_scale)[1],
                             spec.target_hyper_fraction, 0.0, 400.0)
        dip_scale = _bisect(lambda d: _cohort_medians(parts, bump_scale, d)[0],
                            spec.target_hypo_fraction, 0.0, 250.0)
    hypo, hyper = _cohort_medians(parts, bump_scale, dip_scale)
    if abs(hypo - spec.target_hypo_fraction) > HYPO_TOL or abs(hyper - spec.target_hyper_fraction) > HYPER_TOL:
        raise InfeasibleSpec(f"calibration reached hypo={hypo:.4f}, hyper={hyper:.4f} for targets "
                             f"{spec.target_hypo_fraction}, {spec.target_hyper_fraction}")
    logger.debug("synthetic calibration: bump_scale=%.3f dip_scale=%.3f", bump_scale, dip_scale)

    width = len(str(spec.n_patients))
    ts = np.arange(n, dtype=np.int64) * INTERVAL_S
    cohort = []
    for i, p in enumerate(parts):
        values = p.signal(bump_scale, dip_scale)
        values[p.missing] = MISSING
        cohort.append(GlucoseSeries(f"P{i + 1:0{width}d}", ts.copy(), values))
    return cohort


@dataclass
class CohortAudit:
    per_patient: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def median_hypo(self) -> float:
        return float(np.median([h for h, _ in self.per_patient.values()]))

    @property
    def median_hyper(self) -> float:
        return float(np.median([h for _, h in self.per_patient.values()]))

    def format(self) -> str:
        lines = ["patient  hypo%   hyper%"]
        for pid, (lo, hi) in self.per_patient.items():
            lines.append(f"{pid:<8} {100 * lo:6.2f} {100 * hi:7.2f}")
        lines.append(f"median   {100 * self.median_hypo:6.2f} {100 * self.median_hyper:7.2f}")
        return "\n".join(lines)


def audit_cohort(cohort: Sequence[GlucoseSeries]) -> CohortAudit:
    return CohortAudit({s.patient_id: excursion_fractions(s.values) for s in cohort})
