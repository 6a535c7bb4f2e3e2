"""Comparison recommenders sharing the evaluation loops' session interface.

Any object with ``name`` and ``session(user, bootstrap)`` returning something
with ``scores(candidates)`` / ``observe(item, reward)`` plugs into
``eval_offline`` and ``eval_online_policy``; that is all a new baseline
(e.g. SVD++ or a hidden-feature bandit) needs to provide.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .datasets import Dataset
from .pmf import EmbeddingTable


def _argmax_by_id(candidates: np.ndarray, scores: np.ndarray) -> int:
    best = scores.max()
    return int(candidates[scores == best].min())


class _Static:
    """Session runner for policies whose ranking ignores feedback."""

    def __init__(self, score_fn):
        self._score = score_fn

    def scores(self, candidates):
        return self._score(candidates)

    def observe(self, item, reward):
        pass


class PopularityModel:
    STRATEGIES = ("avg_rating", "positive_count")

    def __init__(self, train: Dataset, strategy: str = "positive_count"):
        if strategy not in self.STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        self.strategy = strategy
        self.name = f"popularity_{strategy}"
        n = train.num_items
        counts = np.bincount(train.items, minlength=n)
        sums = np.bincount(train.items, weights=train.ratings, minlength=n)
        # unseen items sit at the bottom of the scale
        self.avg_rating = np.where(counts > 0, sums / np.maximum(counts, 1), train.scale.min_rating)
        self.positive_count = np.bincount(train.items[train.positive], minlength=n).astype(np.float64)

    @property
    def statistic(self) -> np.ndarray:
        return self.avg_rating if self.strategy == "avg_rating" else self.positive_count

    def recommend(self, candidates: Sequence[int]) -> int:
        cand = np.asarray(candidates, dtype=np.intp)
        if cand.size == 0:
            raise ValueError("empty candidate set")
        return _argmax_by_id(cand, self.statistic[cand])

    def session(self, user, bootstrap):
        stat = self.statistic
        return _Static(lambda cand: stat[cand])


def popularity_recommend(model: PopularityModel, candidates: Sequence[int]) -> int:
    return model.recommend(candidates)


class PmfRanker:
    name = "pmf"

    def __init__(self, tbl: EmbeddingTable):
        self.tbl = tbl

    def session(self, user, bootstrap):
        tbl = self.tbl
        return _Static(lambda cand: tbl.predict(np.full(len(cand), user), cand))


def pmf_recommend(tbl: EmbeddingTable, user: int, candidates: Sequence[int]) -> int:
    cand = np.asarray(candidates, dtype=np.intp)
    if cand.size == 0:
        raise ValueError("empty candidate set")
    return _argmax_by_id(cand, tbl.predict(np.full(cand.size, user), cand))


class LinUcbModel:
    """Disjoint LinUCB: one ridge regression per arm over the user context.

    A_i starts at the identity; its inverse is maintained with rank-one
    Sherman-Morrison updates. Arms never pulled share A^{-1} = I and theta = 0,
    so only touched arms are stored explicitly.
    """

    def __init__(self, num_arms: int, d: int, alpha: float = 0.5):
        self.num_arms = num_arms
        self.d = d
        self.alpha = alpha
        self.A_inv: dict[int, np.ndarray] = {}
        self.b: dict[int, np.ndarray] = {}
        self.theta = np.zeros((num_arms, d))

    def A(self, arm: int) -> np.ndarray:
        return np.linalg.inv(self.A_inv[arm]) if arm in self.A_inv else np.eye(self.d)

    def ucb(self, x: np.ndarray, arms: np.ndarray) -> np.ndarray:
        mean = self.theta[arms] @ x
        width = np.full(len(arms), float(x @ x))
        for j, arm in enumerate(arms):
            Ainv = self.A_inv.get(int(arm))
            if Ainv is not None:
                width[j] = x @ Ainv @ x
        return mean + self.alpha * np.sqrt(np.maximum(width, 0.0))

    def choose(self, x: np.ndarray, candidates: Sequence[int]) -> int:
        cand = np.asarray(candidates, dtype=np.intp)
        if cand.size == 0:
            raise ValueError("empty candidate set")
        return _argmax_by_id(cand, self.ucb(x, cand))

    def update(self, arm: int, x: np.ndarray, r: float) -> None:
        Ainv = self.A_inv.get(arm)
        if Ainv is None:
            Ainv = np.eye(self.d)
            self.b[arm] = np.zeros(self.d)
        Ax = Ainv @ x
        Ainv = Ainv - np.outer(Ax, Ax) / (1.0 + x @ Ax)
        self.A_inv[arm] = 0.5 * (Ainv + Ainv.T)
        self.b[arm] = self.b[arm] + r * x
        self.theta[arm] = self.A_inv[arm] @ self.b[arm]


def linucb_step(model: LinUcbModel, x: np.ndarray, candidates: Sequence[int], reward_fn) -> tuple[int, float]:
    """Choose by UCB, observe ``reward_fn(item)``, update. Returns (item, reward)."""
    item = model.choose(x, candidates)
    r = float(reward_fn(item))
    model.update(item, x, r)
    return item, r


class LinUcbPolicy:
    """LinUCB with the user's PMF vector as context; learns across sessions."""

    def __init__(self, tbl: EmbeddingTable, alpha: float = 0.5):
        self.tbl = tbl
        self.model = LinUcbModel(tbl.num_items, tbl.k, alpha)
        self.name = f"linucb_a{alpha:g}"

    def session(self, user, bootstrap):
        return _LinUcbSession(self.model, self.tbl.user_vectors[user])


class _LinUcbSession:
    def __init__(self, model: LinUcbModel, x: np.ndarray):
        self.model = model
        self.x = x

    def scores(self, candidates):
        return self.model.ucb(self.x, candidates)

    def observe(self, item, reward):
        self.model.update(int(item), self.x, reward)
