import csv
import json
import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dcpn.data import EpisodeSpec
from dcpn.evaluation import (REPORT_COLUMNS, MetricsReport, auc, confidence_interval, confusion, evaluate_protocol,
                             metrics, read_report, report)
from dcpn.fewshot import DCPN
from oracles import naive_auc, naive_metrics


def test_confusion_perfect_two_way():
    c = confusion([0, 1], [0, 1], 2)
    assert c.tp.tolist() == [1, 1] and c.tn.tolist() == [1, 1]
    assert c.fp.tolist() == [0, 0] and c.fn.tolist() == [0, 0]


def test_confusion_enumerated():
    c = confusion([0, 0], [0, 1], 2)
    assert (c.tp[0], c.fp[0], c.fn[0], c.tn[0]) == (1, 1, 0, 0)


def test_confusion_label_out_of_range_is_fatal():
    with pytest.raises(ValueError, match="out of range"):
        confusion([0, 1], [0, 2], 2)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(2, 7), seed=st.integers(0, 10**6), q=st.integers(1, 30))
def test_confusion_counts_partition_queries(n, seed, q):
    rng = np.random.default_rng(seed)
    c = confusion(rng.integers(0, n, q), rng.integers(0, n, q), n)
    np.testing.assert_array_equal(c.tp + c.tn + c.fp + c.fn, q)


def test_perfect_predictions_score_one():
    m = metrics(confusion([0, 1, 2, 2], [0, 1, 2, 2], 3))
    assert (m.accuracy, m.precision, m.recall, m.f1, m.pooled_accuracy) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_f1_equals_p_when_precision_equals_recall():
    # symmetric confusion: each class has one FP and one FN
    preds, labels = [0, 1, 1, 2, 2, 0], [0, 0, 1, 1, 2, 2]
    m = metrics(confusion(preds, labels, 3))
    assert m.precision == m.recall == 0.5
    assert m.f1 == m.precision


@pytest.mark.filterwarnings("ignore:F1 of class")
def test_zero_denominator_counts_zero_with_warning():
    with pytest.warns(RuntimeWarning, match="precision of class 1"):
        m = metrics(confusion([0, 0], [0, 1], 2))
    assert m.precision == pytest.approx(0.5 * (0.5 + 0.0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pooled_accuracy_counts_negatives():
    m = metrics(confusion([0, 0, 2], [0, 1, 2], 3))
    assert m.accuracy == 2 / 3
    assert m.pooled_accuracy == (2 + 5) / 9


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 7), q=st.integers(2, 30), seed=st.integers(0, 10**6))
def test_metrics_match_brute_force(n, q, seed):
    rng = np.random.default_rng(seed)
    preds, labels = rng.integers(0, n, q), rng.integers(0, n, q)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        m = metrics(confusion(preds, labels, n))
    ref = naive_metrics(preds.tolist(), labels.tolist(), n)
    assert m.accuracy == ref["accuracy"]
    assert m.pooled_accuracy == ref["pooled_accuracy"]
    assert m.precision == ref["precision"]
    assert m.recall == ref["recall"]
    assert m.f1 == ref["f1"]


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 7), q=st.integers(2, 30), seed=st.integers(0, 10**6))
def test_relabeling_keeps_accuracy(n, q, seed):
    rng = np.random.default_rng(seed)
    preds, labels = rng.integers(0, n, q), rng.integers(0, n, q)
    perm = rng.permutation(n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = metrics(confusion(preds, labels, n))
        b = metrics(confusion(perm[preds], perm[labels], n))
    assert a.accuracy == b.accuracy


# --- AUC -----------------------------------------------------------------------------

def test_auc_perfect_separation():
    p = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.9]])
    assert auc(p, [0, 0, 1, 1]) == 1.0


def test_auc_identical_rows_is_half():
    p = np.full((6, 3), 1 / 3)
    assert auc(p, [0, 1, 2, 0, 1, 2]) == 0.5


def test_auc_hand_case_of_ten():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3), size=10).round(1)  # rounding forces ties
    y = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0]
    assert auc(p, y) == naive_auc(p.tolist(), y, 3)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 7), q=st.integers(2, 30), seed=st.integers(0, 10**6), decimals=st.sampled_from([1, 2, 8]))
def test_auc_matches_pairwise_oracle(n, q, seed, decimals):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n, q)
    if len(set(y.tolist())) < 2:
        y[0], y[1] = 0, 1
    p = rng.dirichlet(np.ones(n), size=q).round(decimals)
    assert auc(p, y) == naive_auc(p.tolist(), y.tolist(), n)


def test_auc_single_class_is_fatal():
    with pytest.raises(ValueError, match="two classes"):
        auc(np.full((3, 2), 0.5), [1, 1, 1])


# --- protocol -------------------------------------------------------------------------

def test_confidence_interval_formula():
    v = [0.5, 0.7, 0.9, 0.6]
    assert confidence_interval(v) == pytest.approx(1.96 * np.std(v) / 2, rel=1e-15)
    assert confidence_interval([0.3]) == 0.0


@pytest.fixture(scope="module")
def untrained():
    torch.manual_seed(0)
    return DCPN(dim=16)


def test_protocol_counts_queries(tmp_path, corpus, untrained):
    untrained.refresh_projector(corpus.images)
    log = tmp_path / "ep.csv"
    r = evaluate_protocol(untrained, corpus, 4, 15, EpisodeSpec(5, 1, 15), seed=0, episode_log=log)
    rows = list(csv.DictReader(open(log)))
    assert list(rows[0]) == ["episode_id", "accuracy", "loss"]
    assert len(rows) == r.n_episodes == 4
    # every per-episode accuracy is a multiple of 1/75
    for row in rows:
        assert float(row["accuracy"]) * 75 == pytest.approx(round(float(row["accuracy"]) * 75))


def test_thousand_task_protocol_arithmetic():
    spec = EpisodeSpec(5, 1, 15)
    assert spec.n_way * spec.q_queries == 75
    assert 1000 * spec.n_way * spec.q_queries == 75_000


def test_protocol_is_deterministic(corpus, untrained):
    untrained.refresh_projector(corpus.images)
    a = evaluate_protocol(untrained, corpus, 5, 5, EpisodeSpec(5, 1, 5), seed=3)
    b = evaluate_protocol(untrained, corpus, 5, 5, EpisodeSpec(5, 1, 5), seed=3)
    assert a == b


def test_mean_accuracy_is_mean_of_episodes(corpus, untrained):
    untrained.refresh_projector(corpus.images)
    r = evaluate_protocol(untrained, corpus, 6, 5, EpisodeSpec(5, 2, 5), seed=1)
    assert r.mean_accuracy == pytest.approx(math.fsum(r.episode_accuracies) / 6, abs=1e-9)
    for v in (r.accuracy, r.precision, r.recall, r.f1, r.auc):
        assert 0.0 <= v <= 1.0
    assert r.ci95 >= 0


def test_protocol_requires_fitted_projector(corpus):
    torch.manual_seed(0)
    with pytest.raises(RuntimeError, match="projector"):
        evaluate_protocol(DCPN(dim=16), corpus, 1, 5)


# --- report --------------------------------------------------------------------------

def grid_results():
    out = []
    for task, way in (("same", 7), ("near", 5), ("mixture", 5)):
        for k in (1, 5, 10):
            out.append(MetricsReport(0.5, 0.5, 0.5, 0.5, 0.5, 1000, 0.5 + k / 100 + 1 / 3, 0.01 * k,
                                     task, way, k, "global+local+mix", "euclidean", k == 5))
    return out


def test_report_has_nine_rows(tmp_path):
    path = report(grid_results(), tmp_path / "r.csv")
    assert len(path.read_text().strip().splitlines()) == 1 + 9


@pytest.mark.parametrize("name", ["r.csv", "r.json"])
def test_report_round_trip(tmp_path, name):
    results = grid_results()
    rows = read_report(report(results, tmp_path / name))
    assert rows == [r.row() for r in results]


def test_report_column_order(tmp_path):
    path = report(grid_results(), tmp_path / "r.csv")
    assert next(csv.reader(open(path))) == REPORT_COLUMNS
    first = json.loads(report(grid_results(), tmp_path / "r.json").read_text())[0]
    assert list(first) == REPORT_COLUMNS


def test_empty_report_is_fatal(tmp_path):
    with pytest.raises(ValueError):
        report([], tmp_path / "r.csv")


def test_unwritable_report_is_fatal(tmp_path):
    with pytest.raises(OSError):
        report(grid_results(), tmp_path / "missing-dir" / "r.csv")
