import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drr_lab.baselines import (LinUcbModel, LinUcbPolicy, PmfRanker, PopularityModel, linucb_step,
                               pmf_recommend, popularity_recommend)
from drr_lab.datasets import FIVE_STAR, EvalSession, build_dataset
from drr_lab.envloop import eval_offline
from drr_lab.pmf import EmbeddingTable


def pop_dataset():
    rows = [("u1", "A", 5, 1), ("u2", "A", 4, 1), ("u3", "A", 4, 1),
            ("u1", "B", 5, 2), ("u2", "B", 2, 2), ("u3", "B", 1, 2),
            ("u1", "C", 3, 3)]
    # D appears only via id space growth below
    return build_dataset(rows, FIVE_STAR)


# -- popularity

def test_popularity_count_strategy():
    ds = pop_dataset()
    m = PopularityModel(ds, "positive_count")
    a, b = ds.item_ids.index("A"), ds.item_ids.index("B")
    assert popularity_recommend(m, [a, b]) == a
    assert m.positive_count[a] == 3 and m.positive_count[b] == 1


def test_popularity_average_strategy():
    ds = pop_dataset()
    m = PopularityModel(ds, "avg_rating")
    a, b, c = (ds.item_ids.index(x) for x in "ABC")
    assert m.avg_rating[a] == pytest.approx(13 / 3)
    assert popularity_recommend(m, [b, c]) == c


def test_popularity_unseen_item_ranked_last():
    ds = pop_dataset()
    ds.num_items += 1  # an item with no train ratings
    unseen = ds.num_items - 1
    for strategy in PopularityModel.STRATEGIES:
        m = PopularityModel(ds, strategy)
        assert m.statistic[unseen] == (0.0 if strategy == "positive_count" else FIVE_STAR.min_rating)
        assert popularity_recommend(m, [unseen, 0]) == 0


def test_popularity_tie_by_id():
    rows = [("u", "x", 5, 1), ("u", "y", 5, 2)]
    ds = build_dataset(rows, FIVE_STAR)
    m = PopularityModel(ds)
    assert popularity_recommend(m, [1, 0]) == 0


def test_popularity_errors():
    ds = pop_dataset()
    with pytest.raises(ValueError):
        PopularityModel(ds, "recent")
    with pytest.raises(ValueError):
        popularity_recommend(PopularityModel(ds), [])


def test_popularity_deterministic():
    ds = pop_dataset()
    np.testing.assert_array_equal(PopularityModel(ds).statistic, PopularityModel(ds).statistic)


def test_popularity_offline_session_ranks_by_statistic():
    ds = pop_dataset()
    m = PopularityModel(ds)
    sess = EvalSession(0, [], [0, 1, 2], {0: 5.0, 1: 2.0, 2: 4.0})
    _, recs = eval_offline(m, [sess], [3], T=3, scale=FIVE_STAR)
    order = [r.item for r in recs]
    assert order == sorted([0, 1, 2], key=lambda i: (-m.positive_count[i], i))


# -- pmf ranker

def pmf_table(seed=0, users=3, items=7, k=4):
    rng = np.random.default_rng(seed)
    return EmbeddingTable(rng.normal(size=(users, k)), rng.normal(size=(items, k)), 3.0, 1.0, 5.0)


def test_pmf_single_candidate():
    assert pmf_recommend(pmf_table(), 0, [4]) == 4


def test_pmf_empty():
    with pytest.raises(ValueError):
        pmf_recommend(pmf_table(), 0, [])


@pytest.mark.parametrize("seed", range(10))
def test_pmf_matches_sorted_predictions(seed):
    tbl = pmf_table(seed)
    rng = np.random.default_rng(seed + 100)
    cand = [int(i) for i in rng.choice(tbl.num_items, 5, replace=False)]
    user = int(rng.integers(tbl.num_users))
    preds = {i: float(tbl.global_mean + tbl.user_vectors[user] @ tbl.item_vectors[i]) for i in cand}
    preds = {i: min(max(p, 1.0), 5.0) for i, p in preds.items()}
    oracle = sorted(cand, key=lambda i: (-preds[i], i))[0]
    assert pmf_recommend(tbl, user, cand) == oracle


def test_pmf_strictly_higher_wins():
    tbl = EmbeddingTable(np.array([[1.0]]), np.array([[0.1], [0.5], [0.2]]), 3.0, 1.0, 5.0)
    assert pmf_recommend(tbl, 0, [0, 1, 2]) == 1
    ranker = PmfRanker(tbl)
    np.testing.assert_allclose(ranker.session(0, []).scores(np.array([0, 1, 2])), [3.1, 3.5, 3.2])


# -- LinUCB

def test_linucb_untrained_zero_alpha_ties_by_id():
    m = LinUcbModel(4, 2, alpha=0.0)
    x = np.array([0.3, -1.0])
    np.testing.assert_array_equal(m.ucb(x, np.arange(4)), 0.0)
    assert m.choose(x, [3, 1, 2]) == 1


def test_linucb_single_arm():
    m = LinUcbModel(5, 2, 1.0)
    for _ in range(3):
        item, _ = linucb_step(m, np.ones(2), [2], lambda i: 1.0)
        assert item == 2


def test_linucb_two_arm_hand_solved():
    m = LinUcbModel(2, 1, alpha=0.0)
    x = np.array([1.0])
    m.update(0, x, 1.0)
    # A = 2, b = 1 -> theta = 0.5
    assert m.theta[0, 0] == pytest.approx(0.5)
    assert m.A(0)[0, 0] == pytest.approx(2.0)
    assert m.choose(x, [0, 1]) == 0


def test_linucb_empty():
    with pytest.raises(ValueError):
        LinUcbModel(2, 1).choose(np.ones(1), [])


def test_linucb_constant_reward_limit():
    m = LinUcbModel(1, 1, alpha=0.0)
    x = np.array([1.0])
    for _ in range(10_000):
        linucb_step(m, x, [0], lambda i: 0.7)
    assert float(m.theta[0] @ x) == pytest.approx(0.7, abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_linucb_sherman_morrison_matches_direct(seed, steps):
    rng = np.random.default_rng(seed)
    d = 3
    m = LinUcbModel(3, d, alpha=0.5)
    A = {a: np.eye(d) for a in range(3)}
    b = {a: np.zeros(d) for a in range(3)}
    for _ in range(steps):
        x = rng.normal(size=d)
        arm = int(rng.integers(3))
        r = float(rng.uniform(-1, 1))
        m.update(arm, x, r)
        A[arm] += np.outer(x, x)
        b[arm] += r * x
    x = rng.normal(size=d)
    for arm in range(3):
        Ainv = np.linalg.inv(A[arm])
        np.testing.assert_allclose(m.theta[arm], Ainv @ b[arm], atol=1e-8)
        if arm in m.A_inv:
            np.testing.assert_allclose(m.A_inv[arm], Ainv, atol=1e-8)
        expected = m.theta[arm] @ x + 0.5 * np.sqrt(x @ Ainv @ x)
        assert m.ucb(x, np.array([arm]))[0] == pytest.approx(expected, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 60))
def test_linucb_design_stays_spd(seed, steps):
    rng = np.random.default_rng(seed)
    m = LinUcbModel(2, 4)
    for _ in range(steps):
        m.update(int(rng.integers(2)), rng.normal(size=4) * rng.uniform(0, 5), float(rng.uniform(-1, 1)))
    for arm in range(2):
        A = m.A(arm)
        np.testing.assert_allclose(A, A.T, atol=1e-8)
        assert np.linalg.eigvalsh(A).min() > 0


def test_linucb_policy_learns_across_sessions():
    tbl = pmf_table()
    pol = LinUcbPolicy(tbl, 0.5)
    s1 = pol.session(0, [])
    s1.observe(3, 1.0)
    s2 = pol.session(1, [])
    assert 3 in pol.model.A_inv
    assert pol.name == "linucb_a0.5"
    np.testing.assert_allclose(s2.x, tbl.user_vectors[1])
