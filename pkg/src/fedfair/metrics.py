"""Fairness, privacy, and efficiency metrics.

CoV uses the population standard deviation (divide by K). A zero or
negative mean makes CoV undefined and raises; the reporting layer turns
that into an explicit missing value, never a silent 0.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from fedfair.errors import MetricUndefinedError

CONVERGENCE_DELTA = 0.01


def cov(values) -> float:
    """Coefficient of variation: population std / mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 1:
        raise ValueError("values must be a nonempty 1-D array")
    mu = v.mean()
    if mu <= 0:
        raise MetricUndefinedError(f"CoV undefined for mean {mu}")
    return float(np.sqrt(np.mean((v - mu) ** 2)) / mu)


def fi(cov_value: float) -> float:
    """Fairness index 1 / (1 + CoV^2), in (0, 1]."""
    if cov_value < 0:
        raise ValueError("cov must be >= 0")
    return 1.0 / (1.0 + cov_value * cov_value)


def eod(acc) -> float:
    """Equal opportunity difference: max pairwise gap = max - min."""
    a = np.asarray(acc, dtype=np.float64)
    if a.shape[0] < 2:
        raise ValueError("need at least 2 clients")
    return float(a.max() - a.min())


def loss_fairness(per_client_loss):
    """(CoV, FI) of per-client target-record losses."""
    c = cov(per_client_loss)
    return c, fi(c)


def convergence_round(test_acc_series, delta: float = CONVERGENCE_DELTA):
    """First round after which accuracy stays within delta of the series max.

    Returns (round_index, censored). round_index is 0-based (reports add 1);
    None if even the final round sits below max - delta. censored flags a
    plateau that only begins at the last observed round, where staying put
    cannot be confirmed.
    """
    series = np.asarray(test_acc_series, dtype=np.float64)
    if series.ndim != 1 or series.shape[0] < 1:
        raise ValueError("series must be a nonempty 1-D array")
    if delta <= 0:
        raise ValueError("delta must be > 0")
    threshold = series.max() - delta
    below = np.nonzero(series < threshold)[0]
    if below.shape[0] == 0:
        return 0, series.shape[0] == 1
    start = int(below[-1]) + 1
    if start >= series.shape[0]:
        return None, False
    return start, start == series.shape[0] - 1


@dataclass
class MetricsRow:
    """One round's metric set. None marks an undefined value."""

    round: int
    cov_sia: Optional[float]
    fi_sia: Optional[float]
    cov_loss: Optional[float]
    fi_loss: Optional[float]
    eod: Optional[float]
    mean_sia: Optional[float]
    max_sia: Optional[float]
    train_acc: float
    test_acc: float


def safe_cov_fi(values):
    """(cov, fi) or (None, None) when undefined."""
    try:
        c = cov(values)
    except MetricUndefinedError:
        return None, None
    return c, fi(c)
