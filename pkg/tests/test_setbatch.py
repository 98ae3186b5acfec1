import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cttsp.data import InteractionEvent
from cttsp.setbatch import BatchPlan, PlanError, build_batch_plan, sequential_plan, validate_plan


def ev(user, elements, t):
    return InteractionEvent(user, tuple(sorted(elements)), float(t))


def random_events(rng, n_events, n_users, n_elements, max_set=4, tie_prob=0.3):
    t = 0.0
    out = []
    for _ in range(n_events):
        if rng.random() > tie_prob:
            t += float(rng.integers(1, 5))
        size = int(rng.integers(1, max_set + 1))
        els = rng.choice(n_elements, size=min(size, n_elements), replace=False)
        out.append(ev(int(rng.integers(n_users)), els.tolist(), t))
    return out


def brute_force_batches(events):
    """O(K^2) oracle: 1 + max batch over every earlier conflicting event (0-based)."""
    out = []
    for k, e in enumerate(events):
        b = 0
        for k2 in range(k):
            e2 = events[k2]
            if e2.user == e.user or set(e2.elements) & set(e.elements):
                b = max(b, out[k2] + 1)
        out.append(b)
    return out


def test_hand_traced_example():
    events = [ev(1, [1, 2], 1), ev(3, [2, 3], 2), ev(1, [3], 3)]
    plan = build_batch_plan(events)
    assert plan.batches == [[0], [1], [2]]
    assert plan.max_set_sizes == [2, 2, 1]
    assert validate_plan(plan, events) == []


def test_extreme_cases():
    distinct = [ev(u, [2 * u, 2 * u + 1], u) for u in range(10)]
    assert build_batch_plan(distinct).batch_num == 1
    same_user = [ev(0, [j], j) for j in range(10)]
    assert build_batch_plan(same_user).batch_num == 10
    same_element = [ev(u, [7], u) for u in range(10)]
    assert build_batch_plan(same_element).batch_num == 10


def test_unsorted_input_rejected():
    with pytest.raises(PlanError):
        build_batch_plan([ev(0, [0], 2), ev(1, [1], 1)])


def test_violation_names_shared_element():
    events = [ev(1, [1, 2], 1), ev(3, [2, 3], 2), ev(1, [3], 3)]
    bad = BatchPlan([[0, 1], [2]])
    violations = validate_plan(bad, events)
    assert len(violations) == 1
    assert violations[0].kind == "duplicate_element" and violations[0].entity == "v2"


def test_sequential_plan_is_valid():
    rng = np.random.default_rng(0)
    events = random_events(rng, 50, 5, 8)
    assert validate_plan(sequential_plan(events), events) == []


def test_order_inversion_detected():
    events = [ev(0, [0], 1), ev(0, [1], 2)]
    violations = validate_plan(BatchPlan([[1], [0]]), events)
    assert [v.kind for v in violations] == ["order"]


def test_order_inversion_across_timestamp_ties():
    # times 1,1,2 on element 0 with batches 2,0,1: event 0 (t=1) sits after event 2 (t=2)
    events = [ev(0, [0], 1), ev(1, [0], 1), ev(2, [0], 2)]
    kinds = [v.kind for v in validate_plan(BatchPlan([[1], [2], [0]]), events)]
    assert "order" in kinds


def test_missing_and_duplicate_event():
    events = [ev(0, [0], 1), ev(1, [1], 2)]
    kinds = sorted(v.kind for v in validate_plan(BatchPlan([[0], [0]]), events))
    assert kinds == ["duplicate_event", "missing"]


def test_index_subsequence():
    events = [ev(0, [0], 1), ev(1, [1], 2), ev(0, [2], 3)]
    plan = build_batch_plan(events, index=[0, 2])
    assert plan.batches == [[0], [2]]
    assert validate_plan(plan, events, index=[0, 2]) == []


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 120), users=st.integers(1, 15), elements=st.integers(1, 20))
def test_plan_properties(seed, n, users, elements):
    events = random_events(np.random.default_rng(seed), n, users, elements)
    plan = build_batch_plan(events)
    assert validate_plan(plan, events) == []
    assert 1 <= plan.batch_num <= len(events)
    assert sorted(k for b in plan.batches for k in b) == list(range(len(events)))
    where = {k: b for b, batch in enumerate(plan.batches) for k in batch}
    assert [where[k] for k in range(len(events))] == brute_force_batches(events)
    assert plan.max_set_sizes == [max(len(events[k].elements) for k in b) for b in plan.batches]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 80))
def test_batch_num_monotone_under_appends(seed, n):
    events = random_events(np.random.default_rng(seed), n, 6, 10)
    counts = [build_batch_plan(events[:m]).batch_num for m in range(1, n + 1)]
    assert all(a <= b for a, b in zip(counts, counts[1:]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_permuting_independent_ties_keeps_validity(seed):
    rng = np.random.default_rng(seed)
    # one timestamp group of pairwise non-conflicting events, surrounded by others
    events = random_events(rng, 20, 4, 6, tie_prob=0.0)
    t_mid = events[-1].timestamp + 1
    group = [ev(100 + i, [50 + i], t_mid) for i in range(5)]
    tail = [ev(e.user, e.elements, e.timestamp + t_mid + 1) for e in random_events(rng, 10, 4, 6, tie_prob=0.0)]
    for perm in (list(range(5)), rng.permutation(5).tolist()):
        seq = events + [group[i] for i in perm] + tail
        assert validate_plan(build_batch_plan(seq), seq) == []


def test_roundtrip_json(tmp_path):
    events = [ev(1, [1, 2], 1), ev(3, [2, 3], 2), ev(1, [3], 3), ev(4, [9], 3)]
    plan = build_batch_plan(events)
    plan.save(tmp_path / "plan.json")
    loaded = BatchPlan.load(tmp_path / "plan.json", events)
    assert loaded.batches == plan.batches and loaded.max_set_sizes == plan.max_set_sizes
