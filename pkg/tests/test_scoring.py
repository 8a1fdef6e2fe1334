import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from simsid.networks import ModelConfig, SimSIDModel
from simsid.scoring import (CalibrationError, CalibrationStats, ThresholdPolicy, accuracy_f1, anomaly_score,
                            best_f1_threshold, calibrate, calibrate_scores, parameter_checksum, pr_curve,
                            raw_score, read_metrics, roc_auc, roc_curve, threshold_metrics, trapezoid_auc,
                            write_curve_csv, write_metrics, write_scores_csv)


def concordance(scores, labels):
    """Pairwise oracle: abnormal beats normal counts 1, a tie counts 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def exhaustive_best_f1(scores, labels):
    """Try every cut that separates the sorted scores; report the best (f1, acc)."""
    u = sorted(set(scores))
    cuts = [u[0] - 1.0] + [(a + b) / 2 for a, b in zip(u, u[1:])] + [u[-1] + 1.0]
    best = None
    for tau in cuts:
        tp = sum(1 for s, y in zip(scores, labels) if s > tau and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s > tau and y == 0)
        fn = sum(1 for s, y in zip(scores, labels) if s <= tau and y == 1)
        tn = len(scores) - tp - fp - fn
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        acc = (tp + tn) / len(scores)
        if best is None or (f1, acc) > best[:2]:
            best = (f1, acc, tau)
    return best


@pytest.fixture(scope="module")
def tiny_model():
    return SimSIDModel(ModelConfig(image_size=32, grid=(2, 2), items=8, top_k=2))


def probe(n=4, seed=0):
    return np.tanh(np.random.default_rng(seed).standard_normal((n, 32, 32, 1)))


# -- AUC ----------------------------------------------------------------------------------


def test_worked_four_sample_case():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert concordance([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_perfect_and_tied():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_single_class_rejected():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_matches_concordance_200_cases():
    rng = np.random.default_rng(7)
    for case in range(200):
        n = int(rng.integers(2, 101))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        # coarse rounding forces plenty of ties
        s = np.round(rng.standard_normal(n), int(rng.integers(0, 3)))
        oracle = concordance(s.tolist(), y.tolist())
        assert abs(roc_auc(s, y) - oracle) <= 1e-12, case
        fpr, tpr, _ = roc_curve(s, y)
        assert abs(trapezoid_auc(fpr, tpr) - oracle) <= 1e-12, case


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=4, max_size=40), st.integers(0, 2**31 - 1))
def test_auc_invariant_under_calibration(raw, seed):
    y = np.random.default_rng(seed).integers(0, 2, len(raw))
    y[0], y[1] = 0, 1
    stats = CalibrationStats(mu=0.3, sigma=0.7, count=10)
    a = anomaly_score(np.array(raw), stats)
    # expit can merge distinct raw values only if they collide in float64; skip those draws
    if len(np.unique(a)) == len(np.unique(raw)):
        assert roc_auc(a, y) == roc_auc(raw, y)


def test_roc_endpoints():
    rng = np.random.default_rng(1)
    s, y = rng.random(30), np.r_[np.zeros(15), np.ones(15)]
    fpr, tpr, thr = roc_curve(s, y)
    assert (fpr[0], tpr[0], thr[0]) == (0.0, 0.0, math.inf)
    assert (fpr[-1], tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


def test_pr_curve_one_point_per_distinct_score():
    s = [0.1, 0.4, 0.4, 0.8]
    prec, rec, thr = pr_curve(s, [0, 1, 0, 1])
    assert thr.tolist() == [0.8, 0.4, 0.1]
    np.testing.assert_allclose(prec, [1.0, 2 / 3, 0.5])
    np.testing.assert_allclose(rec, [0.5, 1.0, 1.0])


# -- thresholds ----------------------------------------------------------------------------


def test_best_f1_on_worked_case_matches_exhaustive_oracle():
    s, y = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    f1, acc, tau = exhaustive_best_f1(s, y)
    rep = threshold_metrics(s, y)
    assert rep.threshold == tau
    assert (rep.f1, rep.accuracy) == (f1, acc)
    assert rep.f1 == pytest.approx(0.8)
    assert rep.accuracy == 0.75
    # the chosen cut keeps 0.35 as abnormal
    assert rep.threshold < 0.35


def test_best_f1_matches_oracle_on_random_cases():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(2, 25))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(rng.random(n), 1)
        f1, acc, tau = exhaustive_best_f1(s.tolist(), y.tolist())
        got = best_f1_threshold(s, y)
        assert accuracy_f1(s, y, got) == pytest.approx((acc, f1), abs=1e-15)
        assert got == tau


def test_perfect_classifier_interior_threshold():
    rep = threshold_metrics([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1], ThresholdPolicy.fixed(0.5))
    assert rep.accuracy == rep.f1 == 1.0


def test_all_predicted_abnormal():
    s, y = [0.2, 0.3, 0.9, 0.1], [0, 1, 0, 0]
    acc, f1 = accuracy_f1(s, y, tau=0.0)
    assert acc == 0.25
    prec, rec, _ = pr_curve(s, y)
    assert rec[-1] == 1.0 and prec[-1] == 0.25


def test_policy_validation():
    with pytest.raises(ValueError):
        ThresholdPolicy("median")
    with pytest.raises(ValueError):
        ThresholdPolicy("fixed")


# -- calibration ----------------------------------------------------------------------------


def test_calibration_hand_example():
    stats = calibrate_scores([0.2, 0.4])
    assert stats.mu == pytest.approx(0.3, abs=1e-15)
    assert stats.sigma == pytest.approx(0.1, abs=1e-15)
    assert stats.count == 2


def test_calibration_rejects_constant_and_tiny_sets():
    with pytest.raises(CalibrationError):
        calibrate_scores([0.4, 0.4, 0.4])
    with pytest.raises(CalibrationError):
        calibrate_scores([0.4])


def test_calibration_is_order_independent():
    x = np.random.default_rng(0).random(50)
    a, b = calibrate_scores(x), calibrate_scores(x[::-1])
    assert a.mu == pytest.approx(b.mu, abs=1e-15)
    assert a.sigma == pytest.approx(b.sigma, abs=1e-15)


def test_anomaly_score_examples():
    stats = CalibrationStats(0.4, 0.05, 100)
    assert anomaly_score(0.4, stats) == 0.5
    assert anomaly_score(0.45, stats) == pytest.approx(1 / (1 + math.exp(-1)), rel=1e-12)
    assert anomaly_score(0.45, stats) == pytest.approx(0.7311, abs=5e-5)


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_anomaly_score_monotone(a, b):
    stats = CalibrationStats(0.0, 3.0, 2)
    if a < b:
        assert anomaly_score(a, stats) <= anomaly_score(b, stats)
        if b - a > 1e-6:
            assert anomaly_score(a, stats) < anomaly_score(b, stats)


# -- model-backed scores ----------------------------------------------------------------------


def test_raw_score_deterministic_and_in_range(tiny_model):
    x = probe()
    a, b = raw_score(tiny_model, x), raw_score(tiny_model, x)
    assert np.array_equal(a, b)
    assert ((a > 0) & (a < 1)).all()


def test_batching_is_transparent(tiny_model):
    x = probe(5)
    together = raw_score(tiny_model, x, batch_size=5)
    alone = np.array([raw_score(tiny_model, x[i : i + 1])[0] for i in range(5)])
    np.testing.assert_allclose(together, alone, rtol=1e-12, atol=1e-15)


def test_scoring_does_not_mutate_model(tiny_model):
    before = parameter_checksum(tiny_model)
    tiny_model.train()
    raw_score(tiny_model, probe())
    calibrate(tiny_model, probe(6, seed=1))
    assert parameter_checksum(tiny_model) == before
    assert tiny_model.training


# -- writers --------------------------------------------------------------------------------


def test_report_files(tmp_path):
    rep = threshold_metrics([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    rep.ids = ["a.png", "b.png", "c.png", "d.png"]
    rep.raw = np.array([0.01, 0.02, 0.03, 0.04])
    write_scores_csv(tmp_path / "scores.csv", rep)
    lines = (tmp_path / "scores.csv").read_text().splitlines()
    assert lines[0] == "path,label,raw,A"
    assert lines[3].startswith("c.png,1,0.03,0.35")
    write_metrics(tmp_path / "metrics.txt", rep.metrics())
    back = read_metrics(tmp_path / "metrics.txt")
    assert float(back["auc"]) == 0.75 and back["n"] == "4"
    write_curve_csv(tmp_path / "roc.csv", ("fpr", "tpr"), *rep.roc)
    rows = (tmp_path / "roc.csv").read_text().splitlines()
    assert rows[0] == "fpr,tpr" and rows[1] == "0.0,0.0" and rows[-1] == "1.0,1.0"


def test_pairs_oracle_itself():
    # sanity: the oracle on a hand-enumerable case
    s, y = [1, 2, 3], [0, 1, 0]
    pairs = [(p, n) for p, n in itertools.product([2], [1, 3])]
    assert concordance(s, y) == sum(p > n for p, n in pairs) / 2
