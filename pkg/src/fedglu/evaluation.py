"""Region-wise RMSE and Clarke error grid classification."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional

import numpy as np

from .cgm_data import GLUCOSE_MAX, GLUCOSE_MIN, HYPER_THRESHOLD, HYPO_THRESHOLD

logger = logging.getLogger(__name__)


class EmptySet(ValueError):
    pass


class EmptyCohort(ValueError):
    pass


class Zone(str, Enum):
    A = "A"
    B = "B"
    C_UPPER = "C_upper"
    C_LOWER = "C_lower"
    D_LEFT = "D_left"
    D_RIGHT = "D_right"
    E_LEFT_UPPER = "E_left_upper"
    E_RIGHT_LOWER = "E_right_lower"

    @property
    def group(self) -> str:
        return {"A": "A+B", "B": "A+B", "C": "C", "D": "D+E", "E": "D+E"}[self.value[0]]


ZONES = tuple(Zone)
GROUPS = ("A+B", "C", "D+E")


def clip_predictions(y_pred) -> np.ndarray:
    y_pred = np.asarray(y_pred, dtype=np.float64)
    clipped = np.clip(y_pred, GLUCOSE_MIN, GLUCOSE_MAX)
    n = int(np.count_nonzero(clipped != y_pred))
    if n:
        logger.info("clipped %d of %d predictions into [%g, %g]", n, y_pred.size, GLUCOSE_MIN, GLUCOSE_MAX)
    return clipped


def rmse(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.size == 0:
        raise EmptySet("rmse of an empty set")
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


@dataclass
class RegionRmse:
    overall: Optional[float]
    hypo: Optional[float]
    normal: Optional[float]
    hyper: Optional[float]
    n_hypo: int
    n_normal: int
    n_hyper: int

    @property
    def combined(self) -> Optional[float]:
        """hypo + hyper RMSE; None unless both regions are populated."""
        if self.hypo is None or self.hyper is None:
            return None
        return self.hypo + self.hyper

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("overall", "hypo", "normal", "hyper", "n_hypo", "n_normal", "n_hyper")}


def region_masks(y_true) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    y = np.asarray(y_true, dtype=np.float64)
    hypo = y < HYPO_THRESHOLD
    hyper = y > HYPER_THRESHOLD
    return hypo, ~(hypo | hyper), hyper


def region_rmse(y_true, y_pred) -> RegionRmse:
    """RMSE per glycemic region, partitioned by the reference value."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    hypo, normal, hyper = region_masks(y_true)

    def part(mask):
        return rmse(y_true[mask], y_pred[mask]) if mask.any() else None

    return RegionRmse(part(np.ones_like(hypo)), part(hypo), part(normal), part(hyper),
                      int(hypo.sum()), int(normal.sum()), int(hyper.sum()))


# ---------------------------------------------------------------------------
# Clarke error grid

def cega_classify(y: float, y_hat: float) -> Zone:
    """Zone of one (reference, prediction) pair, checked in order A, E, C, D, B."""
    if (y <= 70 and y_hat <= 70) or (0.8 * y <= y_hat <= 1.2 * y):
        return Zone.A
    if y <= 70 and y_hat >= 180:
        return Zone.E_LEFT_UPPER
    if y >= 180 and y_hat <= 70:
        return Zone.E_RIGHT_LOWER
    if 70 <= y <= 290 and y_hat >= y + 110:
        return Zone.C_UPPER
    if 130 <= y <= 180 and y_hat <= (7 / 5) * y - 182:
        return Zone.C_LOWER
    if y >= 240 and 70 <= y_hat <= 180:
        return Zone.D_RIGHT
    if (y <= 175 / 3 and 70 <= y_hat <= 180) or (175 / 3 <= y <= 70 and (6 / 5) * y <= y_hat <= 180):
        return Zone.D_LEFT
    return Zone.B


_ZONE_INDEX = {z: i for i, z in enumerate(ZONES)}


def cega_zone_indices(y_true, y_pred) -> np.ndarray:
    """Vectorised ``cega_classify``; returns indices into ``ZONES``."""
    y = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    conds = [
        ((y <= 70) & (p <= 70)) | ((0.8 * y <= p) & (p <= 1.2 * y)),
        (y <= 70) & (p >= 180),
        (y >= 180) & (p <= 70),
        (70 <= y) & (y <= 290) & (p >= y + 110),
        (130 <= y) & (y <= 180) & (p <= (7 / 5) * y - 182),
        (y >= 240) & (70 <= p) & (p <= 180),
        ((y <= 175 / 3) & (70 <= p) & (p <= 180)) | ((175 / 3 <= y) & (y <= 70) & ((6 / 5) * y <= p) & (p <= 180)),
    ]
    order = [Zone.A, Zone.E_LEFT_UPPER, Zone.E_RIGHT_LOWER, Zone.C_UPPER, Zone.C_LOWER, Zone.D_RIGHT, Zone.D_LEFT]
    return np.select(conds, [_ZONE_INDEX[z] for z in order], default=_ZONE_INDEX[Zone.B])


def zone_counts(y_true, y_pred) -> dict[str, int]:
    idx = cega_zone_indices(y_true, y_pred)
    counts = np.bincount(np.ravel(idx), minlength=len(ZONES))
    return {z.value: int(c) for z, c in zip(ZONES, counts)}


def zone_percentages(y_true, y_pred) -> dict[str, float]:
    counts = zone_counts(y_true, y_pred)
    total = sum(counts.values())
    if total == 0:
        raise EmptySet("zone percentages of an empty set")
    return {z: 100.0 * c / total for z, c in counts.items()}


def group_percentages(y_true, y_pred) -> dict[str, float]:
    """A+B / C / D+E shares, from integer counts so they sum to 100."""
    counts = zone_counts(y_true, y_pred)
    total = sum(counts.values())
    if total == 0:
        raise EmptySet("zone percentages of an empty set")
    grouped = dict.fromkeys(GROUPS, 0)
    for z in ZONES:
        grouped[z.group] += counts[z.value]
    return {g: 100.0 * c / total for g, c in grouped.items()}


@dataclass
class CegaSummary:
    per_patient_zones: dict
    per_patient_groups: dict
    zone_mean: dict
    zone_std: dict
    group_mean: dict
    group_std: dict

    def to_dict(self) -> dict:
        return {
            "per_patient_zones": self.per_patient_zones,
            "per_patient_groups": self.per_patient_groups,
            "zone_mean": self.zone_mean, "zone_std": self.zone_std,
            "group_mean": self.group_mean, "group_std": self.group_std,
        }


def cega_summary(per_patient: Mapping[str, tuple]) -> CegaSummary:
    """Cohort mean and population std of per-patient zone and group percentages.

    ``per_patient`` maps patient id to a ``(y_true, y_pred)`` pair of arrays.
    """
    per_patient = {pid: pair for pid, pair in per_patient.items() if np.size(pair[0])}
    if not per_patient:
        raise EmptyCohort("cega_summary needs at least one patient with predictions")
    pids = sorted(per_patient)
    zones = {pid: zone_percentages(*per_patient[pid]) for pid in pids}
    groups = {pid: group_percentages(*per_patient[pid]) for pid in pids}

    def stats(table, keys):
        arr = np.array([[table[p][k] for k in keys] for p in pids])
        return dict(zip(keys, arr.mean(axis=0).tolist())), dict(zip(keys, arr.std(axis=0).tolist()))

    zm, zs = stats(zones, [z.value for z in ZONES])
    gm, gs = stats(groups, list(GROUPS))
    return CegaSummary(zones, groups, zm, zs, gm, gs)


# ---------------------------------------------------------------------------
# error grid drawing

# zone boundary polylines in (reference, prediction) coordinates
CEGA_LINES = [
    [(0, 70), (70 / 1.2, 70)],
    [(70 / 1.2, 70), (400 / 1.2, 400)],
    [(70, 84), (70, 400)],
    [(0, 180), (70, 180)],
    [(70, 180), (290, 400)],
    [(70, 0), (70, 56)],
    [(70, 56), (400, 320)],
    [(180, 0), (180, 70)],
    [(180, 70), (400, 70)],
    [(240, 70), (240, 180)],
    [(240, 180), (400, 180)],
    [(130, 0), (180, 70)],
]


def cega_svg(y_true, y_pred, size: int = 480, title: str = "") -> str:
    """Scatter of (reference, prediction) with zone boundaries as an SVG string."""
    pad = 40
    scale = (size - 2 * pad) / 400.0

    def xy(x, y):
        x = min(max(x, 0.0), 400.0)
        y = min(max(y, 0.0), 400.0)
        return pad + x * scale, size - pad - y * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             '<rect width="100%" height="100%" fill="white"/>']
    x0, y0 = xy(0, 0)
    x1, y1 = xy(400, 400)
    parts.append(f'<rect x="{x0:.1f}" y="{y1:.1f}" width="{x1 - x0:.1f}" height="{y0 - y1:.1f}" '
                 'fill="none" stroke="black"/>')
    for y, p in zip(np.ravel(y_true), np.ravel(y_pred)):
        cx, cy = xy(float(y), float(p))
        parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="1" fill="steelblue" fill-opacity="0.4"/>')
    for line in CEGA_LINES:
        pts = " ".join("%.1f,%.1f" % xy(x, y) for x, y in line)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="1"/>')
    parts.append(f'<text x="{size / 2:.0f}" y="{size - 8}" text-anchor="middle" font-size="12">'
                 'reference (mg/dL)</text>')
    parts.append(f'<text x="12" y="{size / 2:.0f}" font-size="12" transform="rotate(-90 12 {size / 2:.0f})" '
                 'text-anchor="middle">prediction (mg/dL)</text>')
    if title:
        parts.append(f'<text x="{size / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
