"""Recalibrating a conformal predictor for a shifted target distribution.

Given labeled source scores and unlabeled target scores, the estimators here
translate a desired target miscoverage level alpha into a level beta to
calibrate at on the source (``qtc``, ``qtc-sc``) or directly into a
threshold (``qtc-st``). All three work from top confidences only: the
maximum score of each row.

Quantiles are order statistics: the level-c quantile of a dataset is its
``ceil(c * n)``-th smallest top confidence, and all comparisons against a
quantile are strict (``<``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .conformal import PredictorSpec, SaturationError, Threshold, calibrate, max_tau
from .scores import Dataset, LabeledDataset, ScoreMatrix
from .util import ceil_count, format_float, read_kv, write_kv

METHODS = ("qtc", "qtc-sc", "qtc-st")


@dataclass(frozen=True)
class QtcEstimate:
    """Output of one estimator: a beta for qtc/qtc-sc, a tau for qtc-st.

    ``q_threshold`` is the confidence quantile the estimate was computed
    against; it is always an attained top confidence of the dataset it was
    taken from.
    """

    method: str
    q_threshold: float
    value: float
    alpha: float

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")


def top_confidence(row: np.ndarray) -> float:
    """Largest score of a single row."""
    return float(np.max(np.asarray(row, dtype=np.float64)))


def top_confidences(data) -> np.ndarray:
    """Top confidence of every row of a dataset or raw score matrix."""
    if isinstance(data, ScoreMatrix):
        values = data.values
    elif hasattr(data, "scores"):
        values = data.scores.values
    else:
        values = np.asarray(data, dtype=np.float64)
    return values.max(axis=1)


def quantile_q(data, c: float) -> float:
    """Level-c confidence quantile: the ceil(c * n)-th smallest top confidence.

    ``c`` must lie in (0, 1]. Levels below 1/n fall back to the first order
    statistic with a warning.
    """
    if not 0.0 < c <= 1.0:
        raise ValueError(f"quantile level must lie in (0, 1], got {c}")
    s = np.sort(top_confidences(data))
    n = s.size
    if c * n < 1.0 - 1e-9:
        warnings.warn(
            f"quantile level {c:g} is below 1/n for n={n}; using the first order statistic",
            stacklevel=2,
        )
    k = max(1, ceil_count(c * n))
    return float(s[k - 1])


def _check_compatible(source: Dataset, target: Dataset) -> None:
    if source.L != target.L:
        raise ValueError(
            f"source has {source.L} classes but target has {target.L}"
        )


def estimate_beta_qtc(source_cal: Dataset, target: Dataset, alpha: float) -> QtcEstimate:
    """Estimate the source-calibration level matching target miscoverage alpha.

    Takes the level-alpha confidence quantile on the target, then measures
    the fraction of source rows whose top confidence falls strictly below
    it. Labels are never consulted.
    """
    _check_compatible(source_cal, target)
    q = quantile_q(target, alpha)
    count = int(np.count_nonzero(top_confidences(source_cal) < q))
    return QtcEstimate(method="qtc", q_threshold=q, value=count / source_cal.n, alpha=alpha)


def estimate_beta_qtc_sc(source_cal: Dataset, target: Dataset, alpha: float) -> QtcEstimate:
    """Source-calibrated variant: the quantile is taken on the source.

    The level-(1 - alpha) confidence quantile of the source is measured
    against the target: beta is one minus the fraction of target rows
    strictly below it. Labels are never consulted.
    """
    _check_compatible(source_cal, target)
    q = quantile_q(source_cal, 1.0 - alpha)
    below = int(np.count_nonzero(top_confidences(target) < q))
    return QtcEstimate(
        method="qtc-sc",
        q_threshold=q,
        value=(target.n - below) / target.n,
        alpha=alpha,
    )


def estimate_tau_qtc_st(
    source_cal: LabeledDataset,
    target: Dataset,
    spec: PredictorSpec,
    alpha: float,
    seed: int = 0,
) -> QtcEstimate:
    """Self-trained variant: shift the calibrated threshold itself.

    The source threshold tau is read as a quantile level (for raps, divided
    by the maximal tau so it lands in (0, 1]), translated through the
    source confidence quantile, and re-measured on the target; the raps
    scale factor is applied back to the result. Saturated source
    calibrations are rejected: the shifted threshold is undefined there.
    """
    _check_compatible(source_cal, target)
    base = calibrate(spec, source_cal, alpha, seed)
    if base.is_saturated:
        raise SaturationError(
            f"source threshold saturated at tau={base.tau:g}; qtc-st is undefined"
        )
    scale = max_tau(spec, source_cal.L)
    q = quantile_q(source_cal, base.tau / scale)
    below = int(np.count_nonzero(top_confidences(target) < q))
    return QtcEstimate(
        method="qtc-st",
        q_threshold=q,
        value=scale * (below / target.n),
        alpha=alpha,
    )


def recalibrate(
    spec: PredictorSpec,
    source_cal: LabeledDataset,
    target: Dataset,
    alpha: float,
    method: str = "qtc",
    seed: int = 0,
) -> Threshold:
    """Produce a threshold aimed at miscoverage alpha on the target.

    ``qtc`` and ``qtc-sc`` estimate a level beta, clamp it to
    [1/(n+1), 1 - 1/(n+1)] so the follow-up calibration cannot saturate,
    and calibrate on the source at beta. ``qtc-st`` returns the shifted
    threshold directly, with alpha recorded for provenance.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if method == "qtc-st":
        est = estimate_tau_qtc_st(source_cal, target, spec, alpha, seed)
        return Threshold(
            tau=est.value,
            alpha=alpha,
            source_tag=f"recalibrate:qtc-st:alpha={format_float(alpha)}",
        )
    if method == "qtc":
        est = estimate_beta_qtc(source_cal, target, alpha)
    else:
        est = estimate_beta_qtc_sc(source_cal, target, alpha)
    n = source_cal.n
    lo = 1.0 / (n + 1)
    beta = min(max(est.value, lo), 1.0 - lo)
    base = calibrate(spec, source_cal, beta, seed)
    tag = (
        f"recalibrate:{method}:alpha={format_float(alpha)}"
        f":beta={format_float(beta)}:{base.source_tag}"
    )
    return Threshold(tau=base.tau, alpha=base.alpha, source_tag=tag)


def save_estimate(estimate: QtcEstimate, path) -> None:
    write_kv(
        path,
        {
            "method": estimate.method,
            "q": estimate.q_threshold,
            "value": estimate.value,
            "alpha": estimate.alpha,
        },
    )


def load_estimate(path) -> QtcEstimate:
    kv = read_kv(path)
    return QtcEstimate(
        method=kv["method"],
        q_threshold=float(kv["q"]),
        value=float(kv["value"]),
        alpha=float(kv["alpha"]),
    )
