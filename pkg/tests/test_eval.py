import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cttsp.data import InteractionEvent, split
from cttsp.evaluation import (MetricReport, baseline_report, evaluate, ndcg_at_k, phr_at_k, ptop_baseline, rank,
                              ranking_metrics, recall_at_k, top_baseline)
from cttsp.model import CTTSP, ModelConfig
from cttsp.synthetic import random_dataset


def brute_force(scores, truth, k):
    """Independent scorer: python sort with explicit (-score, id) key and plain loops."""
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))[:k]
    hits = [1 if j in truth else 0 for j in order]
    dcg = 0.0
    for r, h in enumerate(hits, start=1):
        dcg += h / math.log2(r + 1)
    idcg = 0.0
    for r in range(1, min(k, len(truth)) + 1):
        idcg += 1 / math.log2(r + 1)
    return sum(hits) / len(truth), dcg / idcg, float(sum(hits) > 0)


scores_and_truth = st.integers(2, 40).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-5, 5), min_size=n, max_size=n),
    st.sets(st.integers(0, n - 1), min_size=1, max_size=n),
    st.integers(1, n + 3)))


@settings(max_examples=300, deadline=None)
@given(scores_and_truth)
def test_metrics_match_brute_force(case):
    raw, truth, k = case
    scores = np.array(raw, dtype=float)
    r, n, p = brute_force(raw, truth, k)
    assert recall_at_k(scores, truth, k) == r
    assert ndcg_at_k(scores, truth, k) == pytest.approx(n, abs=1e-12)
    assert phr_at_k(scores, truth, k) == p


@settings(max_examples=200, deadline=None)
@given(scores_and_truth)
def test_metric_properties(case):
    raw, truth, _ = case
    scores = np.array(raw, dtype=float)
    ks = list(range(1, len(raw) + 1))
    m = ranking_metrics(rank(scores), truth, ks)
    for name in ("recall", "ndcg", "phr"):
        vals = [m[name][k] for k in ks]
        assert all(0.0 <= v <= 1.0 + 1e-12 for v in vals)
        if name == "ndcg":
            # IDCG grows with K until K reaches |truth|; only from there is NDCG monotone
            vals = vals[len(truth) - 1:]
        assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))
    assert all(m["phr"][k] >= m["recall"][k] for k in ks)
    # strictly monotone transform keeps every metric (ties stay ties)
    moved = ranking_metrics(rank(3.0 * scores - 7.0), truth, ks)
    assert moved == m


def test_hand_examples():
    scores = np.array([0.9, 0.1, 0.5, 0.4])
    assert recall_at_k(scores, {0, 1}, 2) == 0.5
    assert recall_at_k(scores, {0, 2}, 2) == 1.0
    assert recall_at_k(scores, {1}, 2) == 0.0
    ndcg = ndcg_at_k(np.r_[1.0, np.zeros(20)], {0, 15}, 10)
    assert ndcg == pytest.approx(1 / (1 + 1 / math.log2(3)), abs=1e-12)
    assert ndcg == pytest.approx(0.6131, abs=1e-4)
    assert phr_at_k(scores, {3}, 2) == 0.0 and phr_at_k(scores, {3}, 3) == 1.0
    with pytest.raises(ValueError):
        recall_at_k(scores, set(), 2)


def test_tie_break_by_ascending_id():
    assert rank(np.array([1.0, 2.0, 2.0, 1.0])).tolist() == [1, 2, 0, 3]


def ev(u, els, t):
    return InteractionEvent(u, tuple(els), float(t))


def test_baselines():
    events = [ev(0, [0], 1), ev(1, [0], 2), ev(1, [0, 1], 3)]
    assert top_baseline(events, 2).tolist() == [0, 1]
    # user 0 has [a, a, b]; everyone else mostly c
    events = [ev(0, [0], 1), ev(0, [0, 1], 2)] + [ev(u, [2], 3 + u) for u in range(1, 6)]
    assert ptop_baseline(events, 0, 4)[:3].tolist() == [0, 1, 2]
    single = [ev(0, [0], 1)]
    assert top_baseline(single, 1).tolist() == [0] and ptop_baseline(single, 0, 1).tolist() == [0]
    assert ptop_baseline(events, 4, 4).tolist() == [2, 0, 1, 3]


def test_report_roundtrip_and_csv(tmp_path):
    rep = MetricReport((1, 2))
    rep.add(0, [3, 1, 2], {1})
    rep.add(1, [3, 1, 2], {3, 2})
    assert rep.mean("recall", 1) == pytest.approx((0 + 0.5) / 2)
    back = MetricReport.from_json(json.loads(json.dumps(rep.to_json())))
    assert back.means() == rep.means() and back.users == [0, 1]
    rep.save(tmp_path / "r")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "metric,K=1,K=2" and [l.split(",")[0] for l in lines[1:]] == ["recall", "ndcg", "phr"]


def test_evaluate_deterministic_and_frozen():
    ds = random_dataset(seed=3)
    sp = split(ds, "transductive")
    model = CTTSP(ds.num_users, ds.num_elements, ModelConfig(dim=4, lambda_cp=0.5), seed=0)
    before = model.parameter_values()
    a = evaluate(model, ds, sp, "test")
    b = evaluate(model, ds, sp, "test")
    assert a.to_json() == b.to_json()
    assert all(np.array_equal(before[k], v) for k, v in model.parameter_values().items())
    assert len(a.users) == ds.num_users
    with pytest.raises(ValueError):
        evaluate(model, ds, sp, "test", protocol="inductive")


def test_baseline_report_structure():
    ds = random_dataset(seed=4)
    sp = split(ds, "transductive")
    top = baseline_report(ds, sp, "test", "TOP")
    model_rep = evaluate(CTTSP(ds.num_users, ds.num_elements, ModelConfig(dim=4), seed=0), ds, sp, "test")
    assert top.ks == model_rep.ks and top.users == model_rep.users
    assert set(top.to_json()["mean"]) == {"recall", "ndcg", "phr"}
    with pytest.raises(ValueError):
        baseline_report(ds, sp, "test", "RANDOM")
