import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import labeled, softmax_rows
from cshift.conformal import (
    CoverageReport,
    PredictorSpec,
    Threshold,
    calibrate,
    conformity_score,
    conformity_scores,
    evaluate,
    load_coverage_report,
    load_threshold,
    max_tau,
    prediction_set,
    save_coverage_report,
    save_threshold,
)
from cshift.scores import LabeledDataset, ScoreMatrix

TPS = PredictorSpec.tps()
APS = PredictorSpec.aps()
RAPS = PredictorSpec.raps(0.1, 1)

ROW3 = np.array([0.5, 0.3, 0.2])


def _two_class_cal(pi_y):
    # one row per given true-class score, label always 0
    v = np.array([[p, 1.0 - p] for p in pi_y])
    return LabeledDataset(ScoreMatrix(v), np.zeros(len(pi_y), dtype=np.int64))


def test_tps_conformity_is_one_minus_label_score():
    assert conformity_score(TPS, np.array([0.9, 0.1]), 0) == pytest.approx(0.1)
    # u must be ignored for the top-score predictor
    assert conformity_score(TPS, np.array([0.9, 0.1]), 0, u=0.7) == pytest.approx(0.1)


def test_aps_conformity_prefix_sum():
    assert conformity_score(APS, ROW3, 1, u=0.0) == pytest.approx(0.5)
    assert conformity_score(APS, ROW3, 0, u=0.0) == pytest.approx(0.0)
    assert conformity_score(APS, ROW3, 2, u=1.0) == pytest.approx(1.0)


def test_raps_conformity_adds_rank_penalty():
    # label ranked 3rd, k_reg=1: prefix 0.8 plus penalty 0.1 per position past the first
    assert conformity_score(RAPS, ROW3, 2, u=0.0) == pytest.approx(0.9)


def test_ranking_ties_break_by_class_index():
    row = np.array([0.4, 0.4, 0.2])
    assert conformity_score(APS, row, 0, u=0.0) == pytest.approx(0.0)
    assert conformity_score(APS, row, 1, u=0.0) == pytest.approx(0.4)


def test_tps_full_set_at_tau_one():
    assert prediction_set(TPS, np.array([0.9, 0.1]), 0.0, 1.0).tolist() == [0, 1]


def test_aps_sets_at_tau_point_six():
    assert prediction_set(APS, ROW3, 0.0, 0.6).tolist() == [0, 1]
    assert prediction_set(APS, ROW3, 1.0, 0.6).tolist() == [0]


def test_aps_full_set_at_tau_ge_one():
    assert prediction_set(APS, ROW3, 1.0, 1.0).tolist() == [0, 1, 2]
    assert prediction_set(APS, ROW3, 0.3, 1.2).tolist() == [0, 1, 2]


def test_calibrate_order_statistic_hand_example():
    cal = _two_class_cal([0.9, 0.8, 0.6, 0.4])
    thr = calibrate(TPS, cal, alpha=0.5, seed=0)
    assert thr.tau == pytest.approx(0.4)
    assert not thr.is_saturated
    assert "tps" in thr.source_tag and "n=4" in thr.source_tag


def test_calibrate_saturates_when_k_exceeds_n():
    cal = _two_class_cal([0.9, 0.8, 0.6, 0.4])
    thr = calibrate(TPS, cal, alpha=0.05, seed=0)
    assert thr.tau == 1.0
    assert thr.is_saturated


def test_calibrate_single_row_boundary():
    cal = _two_class_cal([0.7])
    thr = calibrate(TPS, cal, alpha=0.4, seed=0)
    assert thr.tau == 1.0
    assert thr.is_saturated


def test_raps_saturation_uses_penalized_maximum():
    spec = PredictorSpec.raps(0.5, 1)
    cal = labeled(4, 3, seed=0)
    thr = calibrate(spec, cal, alpha=0.01, seed=0)
    assert thr.is_saturated
    assert thr.tau == pytest.approx(1.0 + 0.5 * 2)
    assert max_tau(spec, 3) == pytest.approx(2.0)


def test_threshold_range_validation():
    with pytest.raises(ValueError):
        Threshold(tau=-0.1, alpha=0.1, source_tag="x")
    with pytest.raises(ValueError):
        Threshold(tau=0.5, alpha=1.0, source_tag="x")


def test_predictor_spec_validation():
    with pytest.raises(ValueError):
        PredictorSpec(kind="tps", lam=0.1, k_reg=None)
    with pytest.raises(ValueError):
        PredictorSpec(kind="raps", lam=None, k_reg=2)
    with pytest.raises(ValueError):
        PredictorSpec(kind="raps", lam=-0.1, k_reg=2)
    with pytest.raises(ValueError):
        PredictorSpec(kind="nope")


def test_raps_kreg_must_fit_class_count():
    cal = labeled(10, 3, seed=1)
    with pytest.raises(ValueError, match="k_reg"):
        calibrate(PredictorSpec.raps(0.1, 7), cal, alpha=0.1, seed=0)


def test_evaluate_saturated_threshold_covers_everything():
    d = labeled(50, 4, seed=6)
    thr = Threshold(tau=1.0, alpha=0.05, source_tag="calibrate:tps:n=4:alpha=0.05:saturated")
    rep = evaluate(TPS, thr, d, seed=0)
    assert rep.coverage == 1.0
    assert rep.avg_set_size == pytest.approx(4.0)
    assert rep.size_histogram[4] == 50


def test_empirical_calibration_on_the_calibration_set():
    # same seed on both sides reuses the smoothing draws, so coverage is
    # exactly k/n for continuous scores
    n = 400
    d = labeled(n, 6, seed=9)
    for spec in (TPS, APS, PredictorSpec.raps(0.05, 2)):
        for alpha in (0.1, 0.25):
            thr = calibrate(spec, d, alpha, seed=21)
            if thr.is_saturated:
                continue
            k = int(np.ceil((1 - alpha) * (n + 1)))
            rep = evaluate(spec, thr, d, seed=21)
            assert rep.coverage == pytest.approx(k / n)


def test_coverage_report_accounting():
    d = labeled(120, 5, seed=3)
    thr = calibrate(APS, d, 0.2, seed=4)
    rep = evaluate(APS, thr, d, seed=5)
    assert rep.n_eval == 120
    assert int(rep.size_histogram.sum()) == 120
    sizes = np.arange(rep.size_histogram.size)
    assert rep.avg_set_size == pytest.approx(float(sizes @ rep.size_histogram) / 120)
    assert 0.0 <= rep.coverage <= 1.0


@given(seed=st.integers(0, 10**6), tau_pair=st.tuples(st.floats(0, 1), st.floats(0, 1)))
def test_nesting_property(seed, tau_pair):
    lo, hi = sorted(tau_pair)
    row = softmax_rows(1, 5, seed % 9973)[0]
    u = np.random.default_rng(seed).random()
    for spec in (TPS, APS, RAPS):
        inner = set(prediction_set(spec, row, u, lo).tolist())
        outer = set(prediction_set(spec, row, u, hi).tolist())
        assert inner <= outer


@given(seed=st.integers(0, 10**6), tau=st.floats(0, 1.3))
def test_set_score_duality(seed, tau):
    row = softmax_rows(1, 4, seed % 9973)[0]
    u = np.random.default_rng(seed).random()
    for spec in (TPS, APS, RAPS):
        members = set(prediction_set(spec, row, u, tau).tolist())
        for label in range(4):
            assert (conformity_score(spec, row, label, u) <= tau) == (label in members)


@given(n=st.integers(1, 30), seed=st.integers(0, 10**6))
def test_vectorized_scores_match_single_rows(n, seed):
    d = labeled(n, 5, seed=seed % 997)
    u = np.random.default_rng(seed).random(n)
    for spec in (TPS, APS, RAPS):
        vec = conformity_scores(spec, d.scores.values, d.labels, u)
        one = [
            conformity_score(spec, d.scores.values[i], int(d.labels[i]), float(u[i]))
            for i in range(n)
        ]
        np.testing.assert_allclose(vec, one, rtol=0, atol=1e-12)


@given(alpha=st.floats(0.01, 0.5), seed=st.integers(0, 10**4))
def test_calibrated_tau_stays_in_range(alpha, seed):
    d = labeled(40, 4, seed=seed)
    for spec in (TPS, APS, PredictorSpec.raps(0.3, 2)):
        thr = calibrate(spec, d, alpha, seed=seed)
        assert 0.0 <= thr.tau <= max_tau(spec, 4) + 1e-12


def test_calibrate_deterministic_under_seed():
    d = labeled(60, 5, seed=14)
    a = calibrate(APS, d, 0.1, seed=2)
    b = calibrate(APS, d, 0.1, seed=2)
    c = calibrate(APS, d, 0.1, seed=3)
    assert a.tau == b.tau
    assert a.tau != c.tau  # different smoothing draws move the order statistic


def test_threshold_file_round_trip(tmp_path):
    d = labeled(30, 4, seed=5)
    thr = calibrate(RAPS, d, 0.15, seed=8)
    path = tmp_path / "thr.txt"
    save_threshold(thr, path, spec=RAPS, method="none")
    back, spec, method = load_threshold(path)
    assert back.tau == thr.tau
    assert back.alpha == thr.alpha
    assert back.source_tag == thr.source_tag
    assert spec == RAPS
    assert method == "none"


def test_coverage_report_round_trip(tmp_path):
    d = labeled(80, 3, seed=2)
    rep = evaluate(TPS, calibrate(TPS, d, 0.2, seed=0), d, seed=1)
    path = tmp_path / "rep.txt"
    save_coverage_report(rep, path)
    back = load_coverage_report(path)
    assert back.coverage == rep.coverage
    assert back.avg_set_size == rep.avg_set_size
    np.testing.assert_array_equal(back.size_histogram, rep.size_histogram)
