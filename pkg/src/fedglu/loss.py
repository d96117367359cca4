"""Regression losses in mg/dL: plain squared error and the hypo/hyper (HH) loss.

The HH loss adds ``|y - yhat| * (y - c)**2`` to the squared error whenever the
reference value is a glycemic excursion, weighted by ``alpha`` below the
hypoglycemia threshold and by ``1 - alpha`` above the hyperglycemia threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class EmptyBatch(ValueError):
    pass


@dataclass(frozen=True)
class HhParams:
    alpha: float
    hypo_threshold: float = 70.0
    hyper_threshold: float = 180.0
    center: float = 125.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.hypo_threshold < self.center < self.hyper_threshold:
            raise ValueError("thresholds must satisfy hypo < center < hyper")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "mse"
    hh: Optional[HhParams] = None

    def __post_init__(self):
        if self.kind not in ("mse", "hh"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "hh" and self.hh is None:
            raise ValueError("HH loss needs HhParams")

    @classmethod
    def mse(cls) -> "LossSpec":
        return cls("mse")

    @classmethod
    def hh_loss(cls, alpha: float, **kw) -> "LossSpec":
        return cls("hh", HhParams(alpha, **kw))

    def describe(self) -> dict:
        if self.kind == "mse":
            return {"loss": "mse"}
        return {"loss": "hh", "alpha": self.hh.alpha}


MSE = LossSpec.mse()


def _branch_weights(hh: HhParams, y: np.ndarray) -> np.ndarray:
    """Penalty weight per sample: 0 in the normal band, alpha / 1-alpha outside."""
    return np.where(y < hh.hypo_threshold, hh.alpha,
                    np.where(y > hh.hyper_threshold, 1.0 - hh.alpha, 0.0))


def per_sample_loss(spec: LossSpec, y_true, y_pred):
    y = np.asarray(y_true, dtype=np.float64)
    err = y - np.asarray(y_pred, dtype=np.float64)
    se = err * err
    if spec.kind == "mse":
        return se
    hh = spec.hh
    penalty = np.abs(err) * (y - hh.center) ** 2
    return se + _branch_weights(hh, y) * penalty


def per_sample_grad(spec: LossSpec, y_true, y_pred):
    """d(loss)/d(y_pred), with sign(0) taken as 0 for the absolute value."""
    y = np.asarray(y_true, dtype=np.float64)
    err = y - np.asarray(y_pred, dtype=np.float64)
    grad = -2.0 * err
    if spec.kind == "mse":
        return grad
    hh = spec.hh
    return grad - _branch_weights(hh, y) * np.sign(err) * (y - hh.center) ** 2


def batch_loss(spec: LossSpec, y_true, y_pred) -> float:
    losses = per_sample_loss(spec, y_true, y_pred)
    if np.size(losses) == 0:
        raise EmptyBatch("batch_loss on an empty batch")
    return float(np.mean(losses))


def batch_grad(spec: LossSpec, y_true, y_pred) -> np.ndarray:
    """Gradient of the batch mean loss with respect to each prediction."""
    g = np.atleast_1d(per_sample_grad(spec, y_true, y_pred))
    if g.size == 0:
        raise EmptyBatch("batch_grad on an empty batch")
    return g / g.size
