"""Environments, training loop, evaluation protocols and ranking metrics."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from . import numkit as nk
from .agent import AgentBundle, AgentConfig, Batch
from .datasets import Dataset, EvalSession, Scale, Session, build_sessions
from .pmf import EmbeddingTable
from .replay import PrioritizedReplay, Transition
from .staterep import History, update_history

log = logging.getLogger(__name__)

REWARD_KINDS = ("five_star", "jester")
EXPLORE_ACTIONS = ("item", "policy")


def reward(rating: float, kind: str = "five_star") -> float:
    if kind == "five_star":
        return (rating - 3.0) / 2.0
    if kind == "jester":
        return rating / 10.0
    raise ValueError(f"unknown reward kind {kind!r}")


def reward_kind_for(scale: Scale) -> str:
    return "jester" if scale.min_rating < 0 else "five_star"


# ---------------------------------------------------------------- metrics

@dataclass
class StepRecord:
    session: int
    step: int
    ranked: list[int]
    relevant: list[bool]
    item: int
    reward: float
    num_candidates: int


@dataclass
class MetricsReport:
    precision_at: dict[int, float]
    ndcg_at: dict[int, float]
    cumulative_reward: float
    episodes: int
    seed: int | None = None
    config_digest: str = ""
    short_sessions: int = 0
    steps: int = 0

    def as_rows(self, variant: str, dataset: str) -> list[tuple]:
        rows = []
        for k in sorted(self.precision_at):
            rows.append(("precision", k, self.precision_at[k], self.seed, variant, dataset))
        for k in sorted(self.ndcg_at):
            rows.append(("ndcg", k, self.ndcg_at[k], self.seed, variant, dataset))
        rows.append(("cumulative_reward", 0, self.cumulative_reward, self.seed, variant, dataset))
        return rows


def precision_at_k(relevant: Sequence[bool], k: int) -> float:
    top = list(relevant[:k])
    return sum(top) / len(top) if top else 0.0


def ndcg_at_k(relevant: Sequence[bool], k: int) -> float:
    """Binary-gain NDCG of ``relevant`` (ranked order) against the ideal reordering; 0 if nothing is relevant."""
    top = relevant[:k]
    dcg = sum(1.0 / math.log2(j + 2) for j, r in enumerate(top) if r)
    n_rel = min(sum(bool(r) for r in relevant), len(top))
    idcg = sum(1.0 / math.log2(j + 2) for j in range(n_rel))
    return dcg / idcg if idcg > 0 else 0.0


def compute_metrics(records: Sequence[StepRecord], ks: Sequence[int]) -> MetricsReport:
    """Mean over steps within a session, then over sessions (in session-id order)."""
    if not records:
        raise ValueError("no step records")
    by_session: dict[int, list[StepRecord]] = {}
    for r in records:
        by_session.setdefault(r.session, []).append(r)
    prec = {k: [] for k in ks}
    ndcg = {k: [] for k in ks}
    short = 0
    for sid in sorted(by_session):
        recs = by_session[sid]
        for k in ks:
            prec[k].append(np.mean([precision_at_k(r.relevant, k) for r in recs]))
            ndcg[k].append(np.mean([ndcg_at_k(r.relevant, k) for r in recs]))
        if any(r.num_candidates < max(ks) for r in recs):
            short += 1
    return MetricsReport(
        precision_at={k: float(np.mean(v)) for k, v in prec.items()},
        ndcg_at={k: float(np.mean(v)) for k, v in ndcg.items()},
        cumulative_reward=float(sum(r.reward for r in records)),
        episodes=len(by_session),
        short_sessions=short,
        steps=len(records),
    )


# ---------------------------------------------------------------- policies

class SessionPolicy(Protocol):
    def scores(self, candidates: np.ndarray) -> np.ndarray: ...

    def observe(self, item: int, reward: float) -> None: ...


class Policy(Protocol):
    name: str

    def session(self, user: int, bootstrap: Sequence[int]) -> SessionPolicy: ...


def rank_by_scores(candidates: np.ndarray, scores: np.ndarray) -> np.ndarray:
    return candidates[np.lexsort((candidates, -scores))]


class DrrPolicy:
    """Frozen actor: ranks by V_i . pi(f(H)), history advances on positive reward."""

    def __init__(self, bundle: AgentBundle, name: str | None = None):
        self.bundle = bundle
        self.name = name or bundle.cfg.variant

    def session(self, user: int, bootstrap: Sequence[int]) -> "_DrrSession":
        return _DrrSession(self.bundle, user, History(tuple(bootstrap)))


class _DrrSession:
    def __init__(self, bundle: AgentBundle, user: int, history: History):
        self.bundle = bundle
        self.user = user
        self.history = history

    def action(self) -> np.ndarray:
        return self.bundle.act(np.array([self.user]), np.array([self.history.item_ids]))[0]

    def scores(self, candidates: np.ndarray) -> np.ndarray:
        return self.bundle.tbl.item_vectors[candidates] @ self.action()

    def observe(self, item: int, reward: float) -> None:
        self.history = update_history(self.history, item, reward)


# ---------------------------------------------------------------- offline eval

def _threads() -> int:
    try:
        return max(1, int(os.environ.get("DRR_LAB_THREADS", "1")))
    except ValueError:
        return 1


def _offline_session(policy: Policy, sess: EvalSession, sid: int, T: int, kmax: int,
                     scale: Scale, kind: str) -> list[StepRecord]:
    runner = policy.session(sess.user_id, sess.bootstrap)
    cand = np.array(sess.candidates, dtype=np.intp)
    pos = {i: bool(scale.is_positive(r)) for i, r in sess.ratings.items()}
    records = []
    for t in range(min(T, len(cand))):
        ranked = rank_by_scores(cand, runner.scores(cand))
        item = int(ranked[0])
        r = reward(sess.ratings[item], kind)
        top = [int(i) for i in ranked[:kmax]]
        # relevance over the full remaining list so the ideal DCG sees every positive
        rel_all = [pos[int(i)] for i in ranked]
        records.append(StepRecord(sid, t, top, rel_all, item, r, len(cand)))
        runner.observe(item, r)
        cand = cand[cand != item]
    return records


def eval_offline(policy: Policy, sessions: Sequence[EvalSession], ks: Sequence[int], T: int,
                 scale: Scale, seed: int | None = None, threads: int | None = None) -> tuple[MetricsReport, list[StepRecord]]:
    """Rerank each session's held-out items with a frozen policy."""
    kind = reward_kind_for(scale)
    kmax = max(ks)
    threads = _threads() if threads is None else threads
    jobs = [(policy, s, sid, T, kmax, scale, kind) for sid, s in enumerate(sessions)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda a: _offline_session(*a), jobs))
    else:
        parts = [_offline_session(*a) for a in jobs]
    records = [r for part in parts for r in part]
    report = compute_metrics(records, ks)
    report.seed = seed
    return report, records


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    episodes: int = 1500
    horizon: int = 10
    buffer_capacity: int = 100_000
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_beta_end: float = 1.0
    priority_floor: float = 1e-5
    seed: int = 0
    # action stored for an exploratory (random) pick: "item" stores the picked
    # item's embedding scaled into [-1, 1]; "policy" stores the actor output
    explore_action: str = "item"


@dataclass
class LogRow:
    episode: int
    step: int
    item: int
    reward: float
    critic_loss: float | None


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, bundle: AgentBundle, log_rows: list[LogRow]):
        super().__init__(msg)
        self.bundle = bundle
        self.log_rows = log_rows


class RewardSource:
    """Logged rating when (user, item) is in the log, simulator prediction otherwise."""

    def __init__(self, simulator: EmbeddingTable, logged: dict[tuple[int, int], float] | None, kind: str):
        self.sim = simulator
        self.logged = logged or {}
        self.kind = kind

    def rating(self, user: int, item: int) -> float:
        r = self.logged.get((user, item))
        if r is None:
            raw = self.sim.global_mean + float(self.sim.user_vectors[user] @ self.sim.item_vectors[item])
            r = min(max(raw, self.sim.min_rating), self.sim.max_rating)
        return r

    def __call__(self, user: int, item: int) -> float:
        return reward(self.rating(user, item), self.kind)


class Learner:
    """Algorithm-1 interaction/update step shared by training and online evaluation."""

    def __init__(self, bundle: AgentBundle, buffer: PrioritizedReplay, rng: np.random.Generator,
                 explore_action: str = "item"):
        if explore_action not in EXPLORE_ACTIONS:
            raise ValueError(f"unknown explore_action {explore_action!r}")
        self.bundle = bundle
        self.buffer = buffer
        self.rng = rng
        self.explore_action = explore_action
        self.updates = 0

    def choose(self, user: int, history: History, available: np.ndarray, eps: float) -> tuple[int, np.ndarray]:
        """Pick an item; the returned action is the one to store with it."""
        a = self.bundle.act(np.array([user]), np.array([history.item_ids]))[0]
        if eps > 0.0 and self.rng.random() < eps:
            cand = np.flatnonzero(available)
            item = int(cand[self.rng.integers(cand.size)])
            if self.explore_action == "item":
                v = self.bundle.tbl.item_vectors[item]
                a = v / max(1.0, float(np.abs(v).max()))
            return item, a
        scores = self.bundle.tbl.item_vectors @ a
        scores[~available] = -np.inf
        return int(np.argmax(scores)), a

    def learn(self, beta: float) -> float | None:
        cfg = self.bundle.cfg
        if len(self.buffer) < cfg.batch_size:
            return None
        ts, idx, w, tokens = self.buffer.sample(cfg.batch_size, beta, self.rng)
        batch = Batch.from_transitions(ts)
        loss, td = self.bundle.critic_update(batch, w)
        self.buffer.update_priorities(idx, td, tokens)
        self.bundle.actor_update(batch)
        self.bundle.soft_update()
        self.updates += 1
        return loss


def train(agent_cfg: AgentConfig, train_ds: Dataset, tbl: EmbeddingTable, cfg: TrainConfig = TrainConfig(),
          sessions: Sequence[Session] | None = None,
          on_step: Callable[[LogRow], None] | None = None) -> tuple[AgentBundle, list[LogRow]]:
    """DDPG training over offline-log sessions.

    Each episode takes the next session (reshuffled every pass), starts from
    its bootstrap history and runs up to ``horizon`` steps over the whole item
    space without repeats.
    """
    if sessions is None:
        sessions, _ = build_sessions(train_ds, agent_cfg.n)
    if not sessions:
        raise ValueError("no session has enough positive events to bootstrap")
    rng = np.random.default_rng(cfg.seed)
    bundle = AgentBundle(agent_cfg, tbl, seed=cfg.seed)
    buffer = PrioritizedReplay(cfg.buffer_capacity, cfg.per_alpha, cfg.priority_floor)
    learner = Learner(bundle, buffer, rng, cfg.explore_action)
    source = RewardSource(tbl, train_ds.rating_lookup(), reward_kind_for(train_ds.scale))
    total_steps = max(1, cfg.episodes * cfg.horizon)
    rows: list[LogRow] = []
    step = 0
    order = np.empty(0, dtype=np.intp)
    for ep in range(cfg.episodes):
        if ep % len(sessions) == 0:
            order = rng.permutation(len(sessions))
        sess = sessions[order[ep % len(sessions)]]
        user = sess.user_id
        history = History(tuple(sess.bootstrap))
        available = np.ones(tbl.num_items, dtype=bool)
        horizon = min(cfg.horizon, tbl.num_items)
        for t in range(horizon):
            eps = agent_cfg.epsilon(step)
            item, a = learner.choose(user, history, available, eps)
            available[item] = False
            r = source(user, item)
            nxt = update_history(history, item, r)
            terminal = t == horizon - 1
            buffer.push(Transition(user, history.item_ids, a, r, nxt.item_ids, terminal, item))
            beta = cfg.per_beta_start + (cfg.per_beta_end - cfg.per_beta_start) * min(1.0, step / total_steps)
            try:
                loss = learner.learn(beta)
            except nk.NonFiniteError as exc:
                raise TrainingAborted(f"episode {ep} step {t}: {exc}", bundle, rows) from exc
            row = LogRow(ep, t, item, r, loss)
            rows.append(row)
            if on_step is not None:
                on_step(row)
            history = nxt
            step += 1
    return bundle, rows


def write_training_log(rows: Iterable[LogRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("episode,step,item,reward,critic_loss\n")
        for r in rows:
            loss = "" if r.critic_loss is None else repr(r.critic_loss)
            fh.write(f"{r.episode},{r.step},{r.item},{r.reward!r},{loss}\n")


# ---------------------------------------------------------------- online eval

@dataclass
class OnlineResult:
    report: MetricsReport
    session_rewards: list[float]
    start_digests: list[str] = field(default_factory=list)
    recommended: list[list[int]] = field(default_factory=list)


def eval_online(bundle: AgentBundle, simulator: EmbeddingTable, sessions: Sequence, T: int,
                seed: int = 0, kind: str = "five_star", batch_size: int | None = None,
                record_digests: bool = False) -> OnlineResult:
    """Simulated online run: parameters keep learning within a session and are
    reset to the trained snapshot before the next one. Every reward comes
    from the simulator; candidates are all items not yet recommended.
    """
    snap = bundle.snapshot()
    trained_digest = bundle.digest()
    rng = np.random.default_rng(seed)
    buffer = PrioritizedReplay(100_000)
    learner = Learner(bundle, buffer, rng)
    source = RewardSource(simulator, None, kind)
    totals, digests, recs = [], [], []
    for sess in sessions:
        bundle.restore(snap)
        if record_digests:
            digests.append(bundle.digest())
        user = sess.user_id
        history = History(tuple(sess.bootstrap))
        available = np.ones(simulator.num_items, dtype=bool)
        total, chosen = 0.0, []
        for t in range(min(T, simulator.num_items)):
            item, a = learner.choose(user, history, available, 0.0)
            available[item] = False
            r = source(user, item)
            nxt = update_history(history, item, r)
            buffer.push(Transition(user, history.item_ids, a, r, nxt.item_ids, t == T - 1, item))
            learner.learn(1.0)
            history = nxt
            total += r
            chosen.append(item)
        totals.append(total)
        recs.append(chosen)
    bundle.restore(snap)
    assert bundle.digest() == trained_digest
    report = MetricsReport({}, {}, float(sum(totals)), len(sessions), seed=seed, steps=sum(map(len, recs)))
    return OnlineResult(report, totals, digests, recs)


def eval_online_policy(policy, simulator: EmbeddingTable, sessions: Sequence, T: int,
                       kind: str = "five_star", seed: int = 0) -> OnlineResult:
    """Same budget and candidate rule for a non-DRR online learner (e.g. LinUCB)."""
    source = RewardSource(simulator, None, kind)
    totals, recs = [], []
    for sess in sessions:
        runner = policy.session(sess.user_id, sess.bootstrap)
        available = np.ones(simulator.num_items, dtype=bool)
        all_items = np.arange(simulator.num_items)
        total, chosen = 0.0, []
        for _ in range(min(T, simulator.num_items)):
            cand = all_items[available]
            ranked = rank_by_scores(cand, runner.scores(cand))
            item = int(ranked[0])
            available[item] = False
            r = source(sess.user_id, item)
            runner.observe(item, r)
            total += r
            chosen.append(item)
        totals.append(total)
        recs.append(chosen)
    report = MetricsReport({}, {}, float(sum(totals)), len(sessions), seed=seed, steps=sum(map(len, recs)))
    return OnlineResult(report, totals, [], recs)
