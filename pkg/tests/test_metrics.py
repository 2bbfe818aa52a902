from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msann.errors import ContractError, DataError
from msann.metrics import (
    Prediction,
    compute_metrics,
    evaluate_files,
    harmonic_mean,
    lqp_quality,
    quantize_quantity,
    read_predictions,
    report_render,
    round_half_away,
    tally,
    tally_matrices,
    write_predictions,
)

GOLDEN = Path(__file__).parent / "golden"

# truth {0},{0,1}; predicted {0,1},{1}
TRUTH = [{0}, {0, 1}]
PRED = [{0, 1}, {1}]


def brute_force(pred, truth, C):
    """Per-definition recomputation with plain loops, in fractions."""
    cp, cr = [], []
    for j in range(C):
        correct = sum(1 for p, t in zip(pred, truth) if j in p and j in t)
        predicted = sum(1 for p in pred if j in p)
        present = sum(1 for t in truth if j in t)
        cp.append(correct / predicted if predicted else 0.0)
        cr.append(correct / present if present else 0.0)
    correct = sum(len(set(p) & set(t)) for p, t in zip(pred, truth))
    predicted = sum(len(p) for p in pred)
    present = sum(len(t) for t in truth)
    ip = correct / predicted if predicted else 0.0
    ir = correct / present if present else 0.0

    def hm(a, b):
        # the mean of two equal numbers is that number; the textbook form
        # can miss it by an ulp
        if a == b:
            return a
        return 2 * a * b / (a + b) if a + b else 0.0

    c_p, c_r = sum(cp) / C, sum(cr) / C
    c_f1, i_f1 = hm(c_p, c_r), hm(ip, ir)
    return [100 * v for v in (c_p, c_r, c_f1, ip, ir, i_f1, hm(c_f1, i_f1))]


def test_perfect_predictions_count_equal():
    t = tally(TRUTH, TRUTH, 2)
    assert (t.ni_correct == t.ni_predicted).all() and (t.ni_predicted == t.ni_truth).all()


def test_two_image_counts():
    t = tally(PRED, TRUTH, 2)
    assert t.ni_correct.tolist() == [1, 1]
    assert t.ni_predicted.tolist() == [1, 2]
    assert t.ni_truth.tolist() == [2, 1]
    assert t.nl_correct.tolist() == [1, 1]
    assert t.nl_predicted.tolist() == [2, 1]
    assert t.nl_truth.tolist() == [1, 2]


def test_two_image_scores():
    r = compute_metrics(tally(PRED, TRUTH, 2))
    assert (r.c_p, r.c_r, r.c_f1) == pytest.approx((75.0, 75.0, 75.0), abs=1e-12)
    assert (r.i_p, r.i_r, r.i_f1) == pytest.approx((200 / 3, 200 / 3, 200 / 3), abs=1e-12)
    assert r.h_f1 == pytest.approx(70.588235, abs=1e-5)


def test_empty_prediction_counts_zero():
    t = tally([set(), {1}], TRUTH, 2)
    assert t.nl_predicted[0] == 0 and t.nl_correct[0] == 0


def test_all_empty_is_degenerate_not_nan():
    r = compute_metrics(tally([set(), set()], [set(), set()], 3))
    assert r.degenerate
    assert r.h_f1 == 0.0 and not np.isnan(r.c_p)


@pytest.mark.parametrize(
    "c_f1, i_f1, h_f1",
    [(69.29, 80.49, 74.47), (66.36, 77.15, 71.35), (69.57, 73.17, 71.32), (67.00, 75.16, 70.84)],
)
def test_published_harmonic_means(c_f1, i_f1, h_f1):
    assert abs(harmonic_mean(c_f1, i_f1) - h_f1) <= 0.01


def random_instance(rng):
    C, N = int(rng.integers(1, 6)), int(rng.integers(1, 11))
    truth = [set(np.flatnonzero(rng.random(C) < 0.4).tolist()) for _ in range(N)]
    pred = [set(np.flatnonzero(rng.random(C) < 0.4).tolist()) for _ in range(N)]
    return pred, truth, C


def test_brute_force_equivalence_200_instances():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        pred, truth, C = random_instance(rng)
        r = compute_metrics(tally(pred, truth, C))
        assert list(r.row()[:7]) == brute_force(pred, truth, C)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_equal_counts_give_ip_equal_ir(seed):
    rng = np.random.default_rng(seed)
    C, N = int(rng.integers(2, 7)), int(rng.integers(1, 12))
    truth = [set(rng.choice(C, size=int(rng.integers(1, C + 1)), replace=False).tolist()) for _ in range(N)]
    pred = [set(rng.choice(C, size=len(t), replace=False).tolist()) for t in truth]
    r = compute_metrics(tally(pred, truth, C))
    assert r.i_p == r.i_r == r.i_f1


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_h_f1_lies_between_components(seed):
    pred, truth, C = random_instance(np.random.default_rng(seed))
    r = compute_metrics(tally(pred, truth, C))
    assert min(r.c_f1, r.i_f1) - 1e-9 <= r.h_f1 <= max(r.c_f1, r.i_f1) + 1e-9


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_adding_a_correct_label_never_hurts_recall(seed):
    rng = np.random.default_rng(seed)
    pred, truth, C = random_instance(rng)
    missing = [(i, j) for i, t in enumerate(truth) for j in t if j not in pred[i]]
    if not missing:
        return
    i, j = missing[int(rng.integers(len(missing)))]
    before = tally(pred, truth, C)
    r0 = compute_metrics(before)
    grown = [set(p) for p in pred]
    grown[i].add(j)
    after = tally(grown, truth, C)
    r1 = compute_metrics(after)
    assert after.nl_correct[i] == before.nl_correct[i] + 1
    assert r1.i_r >= r0.i_r and r1.c_r >= r0.c_r


def test_count_table_rejects_inconsistent_totals():
    t = tally_matrices(np.eye(2, dtype=int), np.eye(2, dtype=int))
    t.nl_correct = np.array([1, 0])
    with pytest.raises(ContractError):
        compute_metrics(t)


def test_label_index_out_of_range():
    with pytest.raises(ContractError):
        tally([{3}], [{0}], 2)


# -- label-quantity quality --------------------------------------------------------
def test_lqp_quality_exact():
    assert lqp_quality([1.0, 2.0, 3.0], [1, 2, 3], 6) == (100.0, 0.0)


def test_lqp_quality_rounding_example():
    acc, mse = lqp_quality([1.2], [1], 6)
    assert acc == 100.0 and mse == pytest.approx(0.04, abs=1e-15)


def test_lqp_quality_matches_direct_formula():
    rng = np.random.default_rng(5)
    mh, m = rng.uniform(-1, 8, size=50), rng.integers(1, 7, size=50)
    q = [min(max(int(np.floor(v + 0.5)) if v >= 0 else -int(np.floor(-v + 0.5)), 1), 6) for v in mh]
    acc, mse = lqp_quality(mh, m, 6)
    assert acc == pytest.approx(100 * np.mean(np.array(q) == m), abs=1e-12)
    assert mse == pytest.approx(np.mean((mh - m) ** 2), rel=1e-13)


def test_rounding_is_half_away_from_zero_and_clamped():
    assert round_half_away([0.5, 1.5, 2.5, -0.5]).tolist() == [1.0, 2.0, 3.0, -1.0]
    assert quantize_quantity([-3.0, 0.2, 2.5, 9.9], 6).tolist() == [1, 1, 3, 6]


# -- rendering and files --------------------------------------------------------
def test_report_matches_golden_csv():
    r = compute_metrics(tally(PRED, TRUTH, 2))
    r2 = compute_metrics(tally(PRED, TRUTH, 2))
    r2.lqp_accuracy, r2.lqp_mse = lqp_quality([1.0, 1.5], [1, 2], 6)
    text = report_render({"fixture": r, "with-lqp": r2})
    assert text == (GOLDEN / "two_image_report.csv").read_text()


def test_perfect_report_matches_golden_csv():
    r = compute_metrics(tally(TRUTH, TRUTH, 2))
    r.lqp_accuracy, r.lqp_mse = lqp_quality([1.0, 2.0], [1, 2], 6)
    assert report_render({"perfect": r}) == (GOLDEN / "perfect_report.csv").read_text()


def test_empty_predictions_report_matches_golden_csv():
    r = compute_metrics(tally([set(), set()], TRUTH, 2))
    assert report_render({"empty": r}) == (GOLDEN / "empty_report.csv").read_text()


def test_prediction_files_round_trip_and_score(tmp_path):
    preds = [Prediction("a", (0, 1), 1.6), Prediction("b", (1,), 1.2)]
    truth = [Prediction("a", (0,)), Prediction("b", (0, 1))]
    write_predictions(tmp_path / "p.tsv", preds)
    write_predictions(tmp_path / "t.tsv", truth)
    assert read_predictions(tmp_path / "p.tsv") == preds
    r = evaluate_files(tmp_path / "p.tsv", tmp_path / "t.tsv", num_classes=2)
    assert r.h_f1 == pytest.approx(70.588235, abs=1e-5)
    assert r.lqp_accuracy == 0.0


def test_missing_prediction_ids_reported(tmp_path):
    write_predictions(tmp_path / "p.tsv", [Prediction("a", (0,))])
    write_predictions(tmp_path / "t.tsv", [Prediction("a", (0,)), Prediction("zz", (1,))])
    with pytest.raises(DataError, match="zz"):
        evaluate_files(tmp_path / "p.tsv", tmp_path / "t.tsv")
