"""Split conformal prediction for classifier score matrices.

Three prediction-set constructions are provided:

* ``tps``: thresholds the true-class score; the set at level tau is every
  class with score >= 1 - tau.
* ``aps``: ranks classes by descending score and admits a class when the
  cumulative score mass strictly above it, plus ``u`` times its own score,
  stays within tau. The smoothing variable ``u`` is shared by all classes
  of a row.
* ``raps``: ``aps`` with an additive penalty ``lam`` for every admitted
  class beyond the ``k_reg`` highest-ranked ones.

Calibration picks the smallest tau whose calibration-set coverage count
reaches ``ceil((1 - alpha) * (n + 1))``, realized as that order statistic of
the per-row conformity scores. When the required count exceeds n the
threshold saturates at the maximal tau and is flagged in ``source_tag``.

All randomness is counter-based: row i of a dataset always receives the
same smoothing uniform for a given seed, so results do not depend on
evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scores import LabeledDataset, Dataset
from .util import ceil_count, format_float, read_kv, row_uniforms, write_kv

KINDS = ("tps", "aps", "raps")


class SaturationError(RuntimeError):
    """An operation that requires an unsaturated threshold met a saturated one."""


@dataclass(frozen=True)
class PredictorSpec:
    """Which set construction to use, with raps regularization knobs.

    ``lam`` and ``k_reg`` must be present exactly when ``kind == "raps"``.
    """

    kind: str
    lam: float | None = None
    k_reg: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "raps":
            if self.lam is None or self.k_reg is None:
                raise ValueError("raps requires lam and k_reg")
            if self.lam < 0:
                raise ValueError(f"lam must be >= 0, got {self.lam}")
            if self.k_reg < 0 or int(self.k_reg) != self.k_reg:
                raise ValueError(f"k_reg must be a non-negative integer, got {self.k_reg}")
            object.__setattr__(self, "k_reg", int(self.k_reg))
        elif self.lam is not None or self.k_reg is not None:
            raise ValueError(f"lam/k_reg are only valid for raps, not {self.kind}")

    @classmethod
    def tps(cls) -> "PredictorSpec":
        return cls("tps")

    @classmethod
    def aps(cls) -> "PredictorSpec":
        return cls("aps")

    @classmethod
    def raps(cls, lam: float, k_reg: int) -> "PredictorSpec":
        return cls("raps", lam=lam, k_reg=k_reg)


def max_tau(spec: PredictorSpec, n_classes: int) -> float:
    """Largest meaningful threshold: every prediction set is the full label set."""
    if spec.kind == "raps":
        return 1.0 + spec.lam * max(0, n_classes - spec.k_reg)
    return 1.0


@dataclass(frozen=True)
class Threshold:
    """A calibrated threshold with the level it was calibrated at.

    ``source_tag`` records provenance; a saturated calibration appends
    ``:saturated`` to it.
    """

    tau: float
    alpha: float
    source_tag: str = ""

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.tau < 0.0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")

    @property
    def is_saturated(self) -> bool:
        return "saturated" in self.source_tag


@dataclass(frozen=True)
class CoverageReport:
    """Evaluation summary: coverage plus prediction-set size statistics."""

    coverage: float
    avg_set_size: float
    median_set_size: float
    size_histogram: np.ndarray
    n_eval: int


def _check_applicable(spec: PredictorSpec, n_classes: int) -> None:
    if spec.kind == "raps" and spec.k_reg > n_classes:
        raise ValueError(
            f"k_reg={spec.k_reg} exceeds the class count {n_classes}"
        )


def _rank_order(values: np.ndarray) -> np.ndarray:
    # Descending by score; np.argsort is stable on the negated values, so
    # ties resolve to the lower class index.
    return np.argsort(-values, axis=1, kind="stable")


def _rank_entry_values(spec: PredictorSpec, values: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-rank admission scores: entry (i, r) is the conformity score of the
    class ranked r in row i. Non-decreasing along each row."""
    order = _rank_order(values)
    sorted_vals = np.take_along_axis(values, order, axis=1)
    prefix = np.cumsum(sorted_vals, axis=1) - sorted_vals
    entry = prefix + u[:, None] * sorted_vals
    if spec.kind == "raps":
        ranks = np.arange(values.shape[1])
        entry = entry + spec.lam * np.maximum(0, ranks - spec.k_reg)[None, :]
    return entry


def conformity_scores(
    spec: PredictorSpec,
    values: np.ndarray,
    labels: np.ndarray,
    u: np.ndarray | None,
) -> np.ndarray:
    """Conformity score of each row's given label: the smallest tau at which
    the label enters the prediction set."""
    n, L = values.shape
    _check_applicable(spec, L)
    rows = np.arange(n)
    if spec.kind == "tps":
        return 1.0 - values[rows, labels]
    if u is None:
        raise ValueError(f"{spec.kind} conformity scores require smoothing uniforms")
    order = _rank_order(values)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(L), (n, L)), axis=1)
    r = ranks[rows, labels]
    sorted_vals = np.take_along_axis(values, order, axis=1)
    prefix = np.cumsum(sorted_vals, axis=1) - sorted_vals
    s = prefix[rows, r] + u * values[rows, labels]
    if spec.kind == "raps":
        s = s + spec.lam * np.maximum(0, r - spec.k_reg)
    return s


def conformity_score(spec: PredictorSpec, row: np.ndarray, label: int, u: float = 0.0) -> float:
    """Single-row convenience wrapper around :func:`conformity_scores`."""
    row = np.asarray(row, dtype=np.float64)[None, :]
    s = conformity_scores(spec, row, np.array([label]), np.array([u]))
    return float(s[0])


def prediction_set(spec: PredictorSpec, row: np.ndarray, u: float, tau: float) -> np.ndarray:
    """Class indices admitted at threshold tau, ascending.

    Equivalent to {l : conformity_score(spec, row, l, u) <= tau}; the result
    is a set of classes, returned as a sorted index array.
    """
    row = np.asarray(row, dtype=np.float64)
    _check_applicable(spec, row.shape[0])
    if spec.kind == "tps":
        return np.flatnonzero(row >= 1.0 - tau)
    entry = _rank_entry_values(spec, row[None, :], np.array([u]))[0]
    order = _rank_order(row[None, :])[0]
    return np.sort(order[entry <= tau])


def _smoothing(spec: PredictorSpec, n: int, seed: int) -> np.ndarray | None:
    if spec.kind == "tps":
        return None
    return row_uniforms(seed, n)


def calibrate(spec: PredictorSpec, cal: LabeledDataset, alpha: float, seed: int = 0) -> Threshold:
    """Calibrate a threshold at miscoverage level alpha.

    The threshold is the k-th smallest calibration conformity score with
    k = ceil((1 - alpha) * (n + 1)); if k > n it saturates at the maximal
    tau for the predictor and ``source_tag`` gains a ``:saturated`` marker.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    _check_applicable(spec, cal.L)
    n = cal.n
    k = max(1, ceil_count((1.0 - alpha) * (n + 1)))
    tag = f"calibrate:{spec.kind}:n={n}:alpha={format_float(alpha)}"
    if k > n:
        return Threshold(
            tau=max_tau(spec, cal.L), alpha=alpha, source_tag=tag + ":saturated"
        )
    u = _smoothing(spec, n, seed)
    s = conformity_scores(spec, cal.scores.values, cal.labels, u)
    tau = float(np.partition(s, k - 1)[k - 1])
    return Threshold(tau=tau, alpha=alpha, source_tag=tag)


def evaluate(
    spec: PredictorSpec, threshold: Threshold, test: LabeledDataset, seed: int = 0
) -> CoverageReport:
    """Coverage and set-size statistics of a threshold on a labeled test set.

    Deterministic for a given seed; rows are aggregated in index order.
    """
    values = test.scores.values
    n, L = values.shape
    _check_applicable(spec, L)
    tau = threshold.tau
    u = _smoothing(spec, n, seed)
    s = conformity_scores(spec, values, test.labels, u)
    covered = s <= tau
    if spec.kind == "tps":
        sizes = np.count_nonzero(values >= 1.0 - tau, axis=1)
    else:
        entry = _rank_entry_values(spec, values, u)
        sizes = np.count_nonzero(entry <= tau, axis=1)
    hist = np.bincount(sizes, minlength=L + 1).astype(np.int64)
    hist.setflags(write=False)
    return CoverageReport(
        coverage=float(np.count_nonzero(covered) / n),
        avg_set_size=float(sizes.mean()),
        median_set_size=float(np.median(sizes)),
        size_histogram=hist,
        n_eval=n,
    )


# --- key-value serialization (consumed by the CLI; see FORMATS.md) ---


def save_threshold(
    threshold: Threshold, path, spec: PredictorSpec | None = None, method: str = "none"
) -> None:
    pairs = {
        "tau": threshold.tau,
        "alpha": threshold.alpha,
        "source_tag": threshold.source_tag,
        "method": method,
    }
    if spec is not None:
        pairs["predictor"] = spec.kind
        if spec.kind == "raps":
            pairs["lambda"] = float(spec.lam)
            pairs["kreg"] = spec.k_reg
    write_kv(path, pairs)


def load_threshold(path) -> tuple[Threshold, PredictorSpec | None, str]:
    kv = read_kv(path)
    try:
        threshold = Threshold(
            tau=float(kv["tau"]),
            alpha=float(kv["alpha"]),
            source_tag=kv.get("source_tag", ""),
        )
    except KeyError as exc:
        raise ValueError(f"threshold file {path} missing key {exc}") from exc
    spec = None
    if "predictor" in kv:
        kind = kv["predictor"]
        if kind == "raps":
            spec = PredictorSpec.raps(float(kv["lambda"]), int(kv["kreg"]))
        else:
            spec = PredictorSpec(kind)
    return threshold, spec, kv.get("method", "none")


def save_coverage_report(report: CoverageReport, path) -> None:
    pairs = {
        "coverage": report.coverage,
        "avg_set_size": report.avg_set_size,
        "median_set_size": report.median_set_size,
        "n_eval": report.n_eval,
    }
    for k, count in enumerate(report.size_histogram):
        pairs[f"hist_{k}"] = int(count)
    write_kv(path, pairs)


def load_coverage_report(path) -> CoverageReport:
    kv = read_kv(path)
    hist_keys = sorted(
        (k for k in kv if k.startswith("hist_")), key=lambda k: int(k.split("_")[1])
    )
    hist = np.array([int(kv[k]) for k in hist_keys], dtype=np.int64)
    return CoverageReport(
        coverage=float(kv["coverage"]),
        avg_set_size=float(kv["avg_set_size"]),
        median_set_size=float(kv["median_set_size"]),
        size_histogram=hist,
        n_eval=int(kv["n_eval"]),
    )
