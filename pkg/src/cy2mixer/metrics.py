"""Forecast error metrics in original units."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeMismatch


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    mape: float  # percent, over targets with |y| > mape_epsilon

    def as_dict(self) -> dict:
        return asdict(self)


def compute_metrics(pred, target, mape_epsilon: float = 1.0) -> MetricsReport:
    """MAE, RMSE and masked MAPE averaged over every step, node and feature.

    MAPE is NaN when no target clears ``mape_epsilon``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        return MetricsReport(float("nan"), float("nan"), float("nan"))
    err = pred - target
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    mask = np.abs(target) > mape_epsilon
    mape = float(np.mean(np.abs(err[mask] / target[mask])) * 100.0) if mask.any() else float("nan")
    return MetricsReport(mae, rmse, mape)
