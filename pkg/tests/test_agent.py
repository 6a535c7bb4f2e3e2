import dataclasses

import numpy as np
import pytest

from drr_lab import numkit as nk
from drr_lab.agent import (AgentBundle, AgentConfig, Batch, CheckpointError, explore, load_checkpoint,
                           read_checkpoint_header, save_checkpoint, score_items, top_item)
from drr_lab.pmf import EmbeddingTable
from drr_lab.replay import Transition
from drr_lab.staterep import VARIANTS
from gradcheck import check_params

TOY = dict(n=2, actor_hidden=(4, 4), critic_hidden=(4, 4))


def toy_table(seed=0, k=2, users=3, items=6):
    rng = np.random.default_rng(seed)
    return EmbeddingTable(rng.normal(size=(users, k)), rng.normal(size=(items, k)), 3.0, 1.0, 5.0)


def toy_batch(rng, n=2, items=6, users=3, k=2, size=5, terminal=None):
    ts = []
    for j in range(size):
        h = tuple(int(x) for x in rng.choice(items, n, replace=False))
        nh = h[1:] + (int(rng.integers(items)),)
        term = bool(j % 2) if terminal is None else terminal
        ts.append(Transition(int(rng.integers(users)), h, rng.uniform(-1, 1, k), float(rng.uniform(-1, 1)), nh, term))
    return Batch.from_transitions(ts)


def bundle(variant="drr_ave", seed=0, **kw):
    return AgentBundle(AgentConfig(variant=variant, **{**TOY, **kw}), toy_table(seed), seed=seed)


# -- forward passes

def test_zero_actor_gives_zero_action():
    b = bundle()
    for p in b.actor.net.params():
        p.data[...] = 0.0
    assert np.all(b.act(np.array([0, 1]), np.array([[0, 1], [2, 3]])) == 0.0)


def test_action_range_and_determinism():
    a1 = bundle(seed=4).act(np.array([0, 1, 2]), np.array([[0, 1], [2, 3], [4, 5]]))
    a2 = bundle(seed=4).act(np.array([0, 1, 2]), np.array([[0, 1], [2, 3], [4, 5]]))
    assert np.array_equal(a1, a2)
    assert np.all(np.abs(a1) < 1.0)


def test_action_strictly_bounded_for_large_states():
    b = bundle()
    s = nk.Tensor(np.full((1, b.actor.state_rep.dim), 1e6))
    a = b.actor(s, frozen=True).data
    assert np.all(np.abs(a) <= 1.0)


def test_actor_rejects_wrong_state_length():
    b = bundle()
    with pytest.raises(nk.ShapeError):
        b.actor(nk.Tensor(np.zeros((1, b.actor.state_rep.dim + 1))))


def test_zero_critic_gives_zero_q():
    b = bundle()
    for p in b.critic.params():
        p.data[...] = 0.0
    q = b.q_value(np.array([0]), np.array([[0, 1]]), np.zeros((1, 2)))
    assert q.shape == (1,) and q[0] == 0.0


def test_critic_deterministic_and_finite():
    q1 = bundle(seed=2).q_value(np.array([0, 1]), np.array([[0, 1], [1, 2]]), np.full((2, 2), 0.3))
    q2 = bundle(seed=2).q_value(np.array([0, 1]), np.array([[0, 1], [1, 2]]), np.full((2, 2), 0.3))
    assert np.array_equal(q1, q2) and np.all(np.isfinite(q1))


def test_critic_rejects_wrong_action_length():
    b = bundle()
    s = nk.Tensor(np.zeros((1, b.actor.state_rep.dim)))
    with pytest.raises(nk.ShapeError):
        b.critic(s, nk.Tensor(np.zeros((1, 3))))


def test_targets_match_online_shapes():
    b = bundle()
    for p, q in zip(b.actor.params() + b.critic.params(), b.target_actor.params() + b.target_critic.params()):
        assert p.data.shape == q.data.shape and p is not q


# -- scoring and exploration

def test_score_items_examples():
    tbl = EmbeddingTable(np.zeros((1, 2)), np.array([[1.0, 0.0], [0.0, 1.0]]), 3.0, 1.0, 5.0)
    assert score_items(np.array([1.0, 0.0]), [0, 1], tbl)[0] == (0, 1.0)
    assert [i for i, _ in score_items(np.zeros(2), [1, 0], tbl)] == [0, 1]
    with pytest.raises(ValueError):
        score_items(np.zeros(2), [], tbl)


@pytest.mark.parametrize("seed", range(5))
def test_score_items_brute_force(seed):
    rng = np.random.default_rng(seed)
    tbl = EmbeddingTable(np.zeros((1, 3)), rng.normal(size=(4, 3)), 3.0, 1.0, 5.0)
    a = rng.normal(size=3)
    brute = sorted(range(4), key=lambda i: (-float(tbl.item_vectors[i] @ a), i))
    assert [i for i, _ in score_items(a, [0, 1, 2, 3], tbl)] == brute


def test_ranking_invariant_to_positive_rescale():
    rng = np.random.default_rng(9)
    tbl = EmbeddingTable(np.zeros((1, 4)), rng.normal(size=(30, 4)), 3.0, 1.0, 5.0)
    a = rng.normal(size=4)
    base = [i for i, _ in score_items(a, list(range(30)), tbl)]
    for c in (0.25, 3.0, 1e3):
        assert [i for i, _ in score_items(c * a, list(range(30)), tbl)] == base


def test_explore_greedy_and_errors():
    tbl = toy_table()
    a = np.array([1.0, -0.5])
    cand = np.arange(6)
    rng = np.random.default_rng(0)
    assert all(explore(a, 0.0, cand, tbl, rng) == top_item(a, cand, tbl) for _ in range(50))
    with pytest.raises(ValueError):
        explore(a, 0.1, [], tbl, rng)
    with pytest.raises(ValueError):
        explore(a, 1.5, cand, tbl, rng)


def test_explore_uniform_at_eps_one():
    tbl = toy_table(items=5)
    rng = np.random.default_rng(1)
    draws = [explore(np.zeros(2), 1.0, np.arange(5), tbl, rng) for _ in range(100_000)]
    freq = np.bincount(draws, minlength=5) / len(draws)
    assert np.all(np.abs(freq - 0.2) < 0.02 * 0.2 * 5)


def test_explore_half_eps_two_candidates():
    tbl = EmbeddingTable(np.zeros((1, 1)), np.array([[1.0], [-1.0]]), 3.0, 1.0, 5.0)
    rng = np.random.default_rng(2)
    hits = sum(explore(np.array([1.0]), 0.5, [0, 1], tbl, rng) == 0 for _ in range(100_000))
    assert hits / 100_000 == pytest.approx(0.75, abs=0.01)


# -- update rules

def test_td_target_arithmetic():
    b = bundle(gamma=0.9)
    batch = toy_batch(np.random.default_rng(0), size=1, terminal=False)
    batch.rewards[:] = 0.5
    for p in b.target_critic.params():
        p.data[...] = 0.0
    b.target_critic.net.layers[-1][1].data[...] = 1.0   # Q' == 1 everywhere
    assert b.td_targets(batch)[0] == pytest.approx(1.4)


def test_td_target_terminal_and_myopic():
    rng = np.random.default_rng(1)
    b = bundle()
    batch = toy_batch(rng, size=4, terminal=True)
    np.testing.assert_array_equal(b.td_targets(batch), batch.rewards)
    b0 = bundle(gamma=0.0)
    batch = toy_batch(rng, size=4, terminal=False)
    np.testing.assert_array_equal(b0.td_targets(batch), batch.rewards)


def test_td_target_reads_only_target_networks():
    rng = np.random.default_rng(2)
    b = bundle(variant="drr_u")
    batch = toy_batch(rng, size=6, terminal=False)
    before = b.td_targets(batch)
    for p in b.actor.params() + b.critic.params():
        p.data[...] = np.nan
    after = b.td_targets(batch)
    assert np.array_equal(before, after)


def test_critic_update_zero_td_leaves_params():
    rng = np.random.default_rng(3)
    b = bundle(l2=0.0)
    batch = toy_batch(rng, size=5)
    s = b.state(batch.users, batch.histories)
    q = b.critic(nk.Tensor(s), nk.Tensor(batch.actions), frozen=True).data
    before = [p.data.copy() for p in b.critic.params()]
    loss, td = b.critic_loss(batch, targets=q)
    assert float(loss.data) == 0.0 and np.all(td == 0)
    b.critic_opt.lr = 1e-3
    nk.backward(loss)
    b.critic_opt.step()
    for p, old in zip(b.critic.params(), before):
        np.testing.assert_array_equal(p.data, old)


def test_critic_update_returns_abs_td_and_reduces_loss():
    rng = np.random.default_rng(4)
    b = bundle(critic_lr=1e-2)
    batch = toy_batch(rng, size=8)
    w = rng.uniform(0.2, 1.0, 8)
    first, td = b.critic_update(batch, w)
    assert np.all(td >= 0) and td.shape == (8,)
    for _ in range(50):
        last, _ = b.critic_update(batch, w)
    assert last < first


def test_actor_update_zero_lr_keeps_params():
    b = bundle(actor_lr=0.0)
    before = b.digest()
    b.actor_update(toy_batch(np.random.default_rng(5)))
    assert b.digest() == before


def test_actor_update_ascends_q():
    rng = np.random.default_rng(6)
    b = bundle(actor_lr=1e-4)
    batch = toy_batch(rng, size=16)
    q0 = b.q_value(batch.users, batch.histories, b.act(batch.users, batch.histories)).mean()
    b.actor_update(batch)
    q1 = b.q_value(batch.users, batch.histories, b.act(batch.users, batch.histories)).mean()
    assert q1 >= q0


def test_actor_update_with_action_blind_critic_only_decays():
    rng = np.random.default_rng(7)
    b = bundle(l2=0.0)
    W1 = b.critic.net.layers[0][0]
    W1.data[b.actor.state_rep.dim:, :] = 0.0       # Q no longer depends on a
    before = b.digest()
    b.actor_update(toy_batch(rng))
    assert b.digest() == before


def test_actor_update_does_not_touch_critic():
    b = bundle()
    crit = [p.data.copy() for p in b.critic.params()]
    b.actor_update(toy_batch(np.random.default_rng(8)))
    for p, old in zip(b.critic.params(), crit):
        np.testing.assert_array_equal(p.data, old)


def test_soft_update_examples():
    b = bundle()
    b.soft_update(0.0)
    snap = b.digest()
    b.soft_update(0.0)
    assert b.digest() == snap
    for p in b.actor.params() + b.critic.params():
        p.data[...] = 2.0
    for p in b.target_actor.params() + b.target_critic.params():
        p.data[...] = 0.0
    b.soft_update(0.5)
    assert all(np.all(q.data == 1.0) for q in b.target_actor.params() + b.target_critic.params())
    b.soft_update(1.0)
    for p, q in zip(b.actor.params() + b.critic.params(), b.target_actor.params() + b.target_critic.params()):
        assert p.data.tobytes() == q.data.tobytes()
    with pytest.raises(ValueError):
        b.soft_update(1.5)


def test_soft_update_contraction():
    rng = np.random.default_rng(10)
    b = bundle()
    for q in b.target_actor.params() + b.target_critic.params():
        q.data[...] = rng.normal(size=q.data.shape)
    gaps = [q.data - p.data for p, q in zip(b.actor.params() + b.critic.params(),
                                            b.target_actor.params() + b.target_critic.params())]
    b.soft_update(0.3)
    for g, p, q in zip(gaps, b.actor.params() + b.critic.params(), b.target_actor.params() + b.target_critic.params()):
        np.testing.assert_allclose(q.data - p.data, 0.7 * g, rtol=1e-12, atol=1e-14)


# -- gradient checks at toy sizes (k=2, n=2, hidden 4)

def generic(b, rng):
    """Random biases too: zero biases put dead-ReLU samples exactly on the kink."""
    for p in b.actor.params() + b.critic.params() + b.target_actor.params() + b.target_critic.params():
        p.data[...] = rng.normal(0.0, 0.7, size=p.data.shape)
        if p.name == "state.w":
            p.data[...] = rng.uniform(0.5, 1.5, size=p.data.shape)
    return b


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("variant", VARIANTS)
def test_actor_loss_gradcheck(seed, variant):
    rng = np.random.default_rng(seed)
    b = generic(bundle(variant, seed), rng)
    batch = toy_batch(rng)
    # the policy gradient flows through a only; the critic's s stays fixed
    s0 = b.state(batch.users, batch.histories)
    check_params(lambda: b.actor_loss(batch, critic_state=s0), b.actor.params())


def test_actor_loss_pinned_state_matches_default():
    rng = np.random.default_rng(11)
    b = generic(bundle("drr_ave"), rng)
    batch = toy_batch(rng)
    s0 = b.state(batch.users, batch.histories)
    grads = []
    for kw in ({}, {"critic_state": s0}):
        for p in b.actor.params():
            p.zero_grad()
        loss = b.actor_loss(batch, **kw)
        nk.backward(loss)
        grads.append((float(loss.data), [p.grad.copy() for p in b.actor.params()]))
    assert grads[0][0] == grads[1][0]
    for g0, g1 in zip(grads[0][1], grads[1][1]):
        np.testing.assert_array_equal(g0, g1)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("variant", VARIANTS)
def test_critic_loss_gradcheck(seed, variant):
    rng = np.random.default_rng(seed)
    b = generic(bundle(variant, seed), rng)
    batch = toy_batch(rng)
    w = rng.uniform(0.1, 1.0, len(batch))
    y = b.td_targets(batch)
    check_params(lambda: b.critic_loss(batch, w, targets=y)[0], b.critic.params())


@pytest.mark.parametrize("seed", range(10))
def test_actor_and_critic_forward_gradcheck(seed):
    rng = np.random.default_rng(seed)
    b = generic(bundle("drr_p", seed), rng)
    s = nk.Param(rng.normal(size=(3, b.actor.state_rep.dim)), "s")
    a = nk.Param(rng.uniform(-0.9, 0.9, size=(3, 2)), "a")
    c = rng.normal(size=(3, 2))
    check_params(lambda: nk.sum_all(nk.mul(b.actor(s), nk.Tensor(c))), [s] + b.actor.net.params())
    check_params(lambda: nk.sum_all(b.critic(s, a)), [s, a] + b.critic.params())


# -- checkpoints

def test_checkpoint_round_trip(tmp_path):
    b = bundle("drr_p", 3)
    for _ in range(3):
        b.critic_update(toy_batch(np.random.default_rng(0)))
        b.actor_update(toy_batch(np.random.default_rng(1)))
        b.soft_update()
    p = tmp_path / "a.ckpt"
    save_checkpoint(b, p, {"note": "x"})
    back, meta = load_checkpoint(p, b.tbl)
    assert meta == {"note": "x"}
    assert back.digest() == b.digest()
    assert dataclasses.asdict(back.cfg) == dataclasses.asdict(b.cfg)
    for name, p0 in b.named_params().items():
        p1 = back.named_params()[name]
        assert p1.adam_m.tobytes() == p0.adam_m.tobytes() and p1.step_count == p0.step_count
    save_checkpoint(back, tmp_path / "b.ckpt", {"note": "x"})
    assert (tmp_path / "b.ckpt").read_bytes() == p.read_bytes()
    assert read_checkpoint_header(p)["agent"]["variant"] == "drr_p"


def test_checkpoint_corruption(tmp_path):
    b = bundle()
    p = tmp_path / "a.ckpt"
    save_checkpoint(b, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(p, b.tbl)
    p.write_bytes(b"garbage!" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(p, b.tbl)
    p.write_bytes(raw)
    with pytest.raises(CheckpointError):
        load_checkpoint(p, toy_table(k=3))


def test_snapshot_restore_round_trip():
    b = bundle()
    snap = b.snapshot()
    d0 = b.digest()
    b.critic_update(toy_batch(np.random.default_rng(0)))
    assert b.digest() != d0
    b.restore(snap)
    assert b.digest() == d0
