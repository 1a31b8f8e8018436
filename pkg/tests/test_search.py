import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import brute_force_plans
from rankcompress import search
from rankcompress.decompose import RankProposal
from rankcompress.errors import InfeasibleBudgetError
from rankcompress.estimators import CandidateEntry, CandidateTable


def make_table(values, weights, reference_size=1000):
    """``values``/``weights`` exclude the keep item."""
    layers = [f"l{i}" for i in range(len(values))]
    entries = [
        CandidateEntry(lid, RankProposal(lid, j + 1, j + 1), float(v), int(w), -float(v))
        for lid, vs, ws in zip(layers, values, weights)
        for j, (v, w) in enumerate(zip(vs, ws))
    ]
    return CandidateTable(layers, entries, reference_size)


def random_instance(r, ties=False):
    n = int(r.integers(1, 7))
    values, weights = [], []
    for _ in range(n):
        m = int(r.integers(1, 6))
        if ties:
            values.append([-float(x) for x in r.integers(0, 4, m) / 4])
            weights.append([-int(x) for x in r.integers(0, 5, m) * 10])
        else:
            values.append([-float(x) for x in r.random(m)])
            weights.append([-int(x) for x in r.integers(1, 150, m)])
    return values, weights


def oracle(values, weights, cap):
    return brute_force_plans([[0.0] + v for v in values], [[0] + w for w in weights], cap)


def choice_of(plan, table):
    rows = table.rows()
    out = []
    for lid, row in zip(table.layers, rows):
        p = plan.choices[lid]
        out.append(0 if p is None else 1 + [e.proposal for e in row].index(p))
    return tuple(out)


def check_against_oracle(values, weights, flash_max, k, cfg_kw=None):
    table = make_table(values, weights)
    cap = flash_max - table.reference_size
    expect = oracle(values, weights, cap)
    res = search.solve(table, search.Budget(flash_max=flash_max), search.SearchConfig(k=k, **(cfg_kw or {})))
    assert [choice_of(p, table) for p in res.plans] == [e[2] for e in expect[:k]]
    assert [p.predicted_total_delta_acc for p in res.plans] == [-e[0] for e in expect[:k]]
    assert res.truncated == (len(expect) < k)
    for p in res.plans:
        assert p.predicted_size <= flash_max
        assert p.predicted_size == table.reference_size + sum(
            row[c - 1].delta_flash for row, c in zip(table.rows(), choice_of(p, table)) if c)
    return res


def test_solver_matches_enumeration_on_250_instances():
    r = np.random.default_rng(2024)
    for trial in range(250):
        values, weights = random_instance(r, ties=trial % 3 == 0)
        floor = 1000 + sum(min([0] + w) for w in weights)
        flash_max = int(r.integers(floor, 1001)) if floor < 1000 else 1000
        check_against_oracle(values, weights, flash_max, k=int(r.integers(1, 8)))


def test_frontier_path_matches_enumeration(monkeypatch):
    # force the sweep by giving the depth-first warm start no room to finish
    monkeypatch.setattr(search, "WARM_START_NODES", 1)
    r = np.random.default_rng(77)
    for trial in range(200):
        values, weights = random_instance(r, ties=trial % 2 == 0)
        floor = 1000 + sum(min([0] + w) for w in weights)
        flash_max = int(r.integers(floor, 1001)) if floor < 1000 else 1000
        res = check_against_oracle(values, weights, flash_max, k=int(r.integers(1, 6)))
        assert res.proven_optimal


@given(seed=st.integers(0, 2**31), k=st.integers(1, 6), ties=st.booleans())
@settings(max_examples=80, deadline=None)
def test_topk_property(seed, k, ties):
    r = np.random.default_rng(seed)
    values, weights = random_instance(r, ties)
    floor = 1000 + sum(min([0] + w) for w in weights)
    check_against_oracle(values, weights, int(r.integers(floor, 1001)), k)


def test_exact_dp_matches_bnb():
    r = np.random.default_rng(5)
    for _ in range(100):
        values, weights = random_instance(r)
        floor = 1000 + sum(min([0] + w) for w in weights)
        budget = search.Budget(flash_max=int(r.integers(floor, 1001)))
        table = make_table(values, weights)
        a = search.solve(table, budget)
        b = search.solve(table, budget, search.SearchConfig(solver="exact_dp"))
        assert a.plans[0].predicted_total_delta_acc == b.plans[0].predicted_total_delta_acc
        assert b.plans[0].predicted_size <= budget.flash_max


def test_dp_scale_stays_feasible():
    r = np.random.default_rng(6)
    for _ in range(50):
        values, weights = random_instance(r)
        floor = 1000 + sum(min([0] + w) for w in weights)
        budget = search.Budget(flash_max=int(r.integers(floor, 1001)))
        table = make_table(values, weights)
        exact = search.solve(table, budget).plans[0]
        try:
            coarse = search.solve(table, budget, search.SearchConfig(solver="exact_dp", dp_scale=16))
        except InfeasibleBudgetError:
            continue
        p = coarse.plans[0]
        assert p.predicted_size <= budget.flash_max
        assert p.predicted_total_delta_acc <= exact.predicted_total_delta_acc
        assert not coarse.proven_optimal
    with pytest.raises(ValueError):
        search.solve(make_table([[-1.0]], [[-5]]), search.Budget(flash_max=1000),
                     search.SearchConfig(k=2, solver="exact_dp"))


def test_budget_at_or_above_reference_keeps_everything():
    table = make_table([[-0.5, -0.1], [-0.2]], [[-50, -10], [-30]])
    res = search.solve(table, search.Budget(flash_max=1000))
    assert res.plans[0].decomposed == {} and res.plans[0].predicted_total_delta_acc == 0.0
    assert res.plans[0].predicted_size == 1000


def test_budget_at_minimum_takes_largest_saving_everywhere():
    table = make_table([[-0.5, -0.1], [-0.2, -0.9]], [[-50, -10], [-30, -40]])
    assert search.min_achievable_size(table) == 1000 - 50 - 40
    res = search.solve(table, search.Budget(flash_max=910))
    plan = res.plans[0]
    assert plan.choices["l0"].r1 == 1 and plan.choices["l1"].r1 == 2


def test_min_achievable_size():
    assert search.min_achievable_size(make_table([], [], 777)) == 777
    table = make_table([[-0.3]], [[-17088]], 100000)
    assert search.min_achievable_size(table) == 100000 - 17088
    # rows that only grow the model contribute nothing
    assert search.min_achievable_size(make_table([[-0.1]], [[20]], 500)) == 500


def test_infeasible_reports_minimum():
    table = make_table([[-0.5]], [[-50]])
    with pytest.raises(InfeasibleBudgetError) as exc:
        search.solve(table, search.Budget(flash_max=900))
    assert exc.value.min_size == 950 and exc.value.flash_max == 900
    assert "950" in str(exc.value)


def test_target_compression_budget():
    b = search.Budget(target_compression=2.0)
    assert b.resolve(1001) == 500
    with pytest.raises(ValueError):
        search.Budget()
    with pytest.raises(ValueError):
        search.Budget(flash_max=10, target_compression=2.0)
    with pytest.raises(ValueError):
        search.Budget(target_compression=1.0)
    with pytest.raises(ValueError):
        search.SearchConfig(k=0)


def test_equal_objective_prefers_smaller_size():
    table = make_table([[-0.5, -0.5]], [[-10, -20]])
    res = search.solve(table, search.Budget(flash_max=995), search.SearchConfig(k=2))
    assert [p.predicted_size for p in res.plans] == [980, 990]


def test_zero_cost_saving_is_taken():
    table = make_table([[0.0]], [[-10]])
    plan = search.solve(table, search.Budget(flash_max=1000)).plans[0]
    assert plan.predicted_size == 990


def test_fewer_feasible_than_k_is_flagged():
    table = make_table([[-0.5]], [[-10]])
    res = search.solve(table, search.Budget(flash_max=1000), search.SearchConfig(k=5))
    assert len(res.plans) == 2 and res.truncated


@given(seed=st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_budget_monotonicity(seed):
    r = np.random.default_rng(seed)
    values, weights = random_instance(r)
    table = make_table(values, weights)
    floor = search.min_achievable_size(table)
    last = -math.inf
    for fm in sorted(set(np.linspace(floor, 1000, 7).astype(int))):
        obj = search.solve(table, search.Budget(flash_max=int(fm))).plans[0].predicted_total_delta_acc
        assert obj >= last
        last = obj


@given(seed=st.integers(0, 2**31), exp=st.integers(-8, 8))
@settings(max_examples=40, deadline=None)
def test_accuracy_scale_invariance(seed, exp):
    # powers of two scale every float exactly, so the argmax cannot move
    r = np.random.default_rng(seed)
    values, weights = random_instance(r)
    table = make_table(values, weights)
    floor = search.min_achievable_size(table)
    budget = search.Budget(flash_max=int(r.integers(floor, 1001)))
    cfg = search.SearchConfig(k=3)
    a = search.solve(table, budget, cfg)
    b = search.solve(table.scaled_acc(2.0 ** exp), budget, cfg)
    assert [p.choices for p in a.plans] == [p.choices for p in b.plans]


def test_scale_invariance_general_constant():
    r = np.random.default_rng(9)
    for _ in range(50):
        values, weights = random_instance(r)
        table = make_table(values, weights)
        floor = search.min_achievable_size(table)
        budget = search.Budget(flash_max=int(r.integers(floor, 1001)))
        a = search.solve(table, budget).plans[0]
        b = search.solve(table.scaled_acc(3.7), budget).plans[0]
        assert a.choices == b.choices


def test_determinism_and_json_roundtrip(tmp_path):
    r = np.random.default_rng(3)
    values, weights = random_instance(r)
    table = make_table(values, weights)
    budget = search.Budget(flash_max=search.min_achievable_size(table) + 5)
    a = search.solve(table, budget, search.SearchConfig(k=4))
    b = search.solve(table, budget, search.SearchConfig(k=4))
    assert [p.to_dict() for p in a.plans] == [p.to_dict() for p in b.plans]
    path = search.save_plans(a, tmp_path / "plans.json")
    plans, meta = search.load_plans(path)
    assert [p.to_dict() for p in plans] == [p.to_dict() for p in a.plans]
    assert meta["flash_max"] == budget.flash_max and meta["solver"]["proven_optimal"]


def test_k1_equals_first_of_topk():
    r = np.random.default_rng(4)
    for _ in range(30):
        values, weights = random_instance(r)
        table = make_table(values, weights)
        budget = search.Budget(flash_max=search.min_achievable_size(table) + 20)
        one = search.solve(table, budget)
        many = search.topk(table, budget, search.SearchConfig(k=5))
        assert one.plans[0].to_dict() == many.plans[0].to_dict()


def test_desk_scale_speed():
    # 50 layers x 20 proposals, savings and accuracy loss both growing as rank shrinks
    r = np.random.default_rng(1)
    values, weights, ref = [], [], 0
    for _ in range(50):
        size = int(r.integers(10000, 500000))
        ref += size
        decay = r.uniform(0.5, 5)
        fr = np.arange(1, 21) / 21
        values.append(list(-np.exp(-3 * decay * fr) * r.uniform(0.01, 1)))
        weights.append([-int(size * (1 - f)) for f in fr])
    table = make_table(values, weights, ref)
    for tc in (1.5, 2.0, 4.0):
        res = search.solve(table, search.Budget(target_compression=tc), search.SearchConfig(k=5))
        assert res.proven_optimal and res.seconds < 10.0
        assert len(res.plans) == 5
