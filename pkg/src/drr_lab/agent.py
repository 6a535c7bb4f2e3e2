"""Actor-critic networks and their DDPG update rules.

Actor:  s = f(H);  a = tanh(W3 relu(W2 relu(W1 s + b1) + b2) + b3)
Critic: Q = W3 relu(W2 relu(W1 [s, a] + b1) + b2) + b3

The state-module slot weights belong to the actor; the critic sees s as a
constant input.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkit as nk
from .pmf import EmbeddingTable
from .staterep import StateRep


@dataclass
class AgentConfig:
    variant: str = "drr_ave"
    n: int = 5
    actor_hidden: tuple[int, int] = (256, 128)
    critic_hidden: tuple[int, int] = (256, 128)
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    l2: float = 1e-6
    gamma: float = 0.9
    tau: float = 0.001
    batch_size: int = 64
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 10_000

    def epsilon(self, step: int) -> float:
        if step >= self.eps_decay_steps:
            return self.eps_end
        frac = step / self.eps_decay_steps
        return self.eps_start + frac * (self.eps_end - self.eps_start)


class MLP:
    def __init__(self, sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator, prefix: str):
        self.layers: list[tuple[nk.Param, nk.Param, str]] = []
        for j, (d_in, d_out, act) in enumerate(zip(sizes[:-1], sizes[1:], activations)):
            W = nk.Param(nk.uniform_fan_in(rng, d_in, d_out), name=f"{prefix}.W{j + 1}")
            b = nk.Param(np.zeros(d_out), name=f"{prefix}.b{j + 1}")
            self.layers.append((W, b, act))

    def params(self) -> list[nk.Param]:
        return [p for W, b, _ in self.layers for p in (W, b)]

    def __call__(self, x: nk.Tensor, frozen: bool = False) -> nk.Tensor:
        for W, b, act in self.layers:
            if frozen:
                W, b = W.constant(), b.constant()
            x = nk.dense_forward(x, W, b, act)
        return x


class Actor:
    def __init__(self, cfg: AgentConfig, k: int, rng: np.random.Generator):
        self.state_rep = StateRep(cfg.variant, cfg.n, k)
        h1, h2 = cfg.actor_hidden
        self.net = MLP([self.state_rep.dim, h1, h2, k], ["relu", "relu", "tanh"], rng, "actor")

    def params(self) -> list[nk.Param]:
        return self.state_rep.params() + self.net.params()

    def state(self, user_vecs, item_vecs, frozen: bool = False) -> nk.Tensor:
        w = self.state_rep.weights.constant() if frozen else None
        return self.state_rep(user_vecs, item_vecs, w)

    def __call__(self, s: nk.Tensor, frozen: bool = False) -> nk.Tensor:
        if s.shape[-1] != self.state_rep.dim:
            raise nk.ShapeError(f"actor expects state of length {self.state_rep.dim}, got {s.shape[-1]}")
        return self.net(s, frozen)


class Critic:
    def __init__(self, cfg: AgentConfig, state_dim: int, k: int, rng: np.random.Generator):
        h1, h2 = cfg.critic_hidden
        self.state_dim = state_dim
        self.k = k
        self.net = MLP([state_dim + k, h1, h2, 1], ["relu", "relu", "identity"], rng, "critic")

    def params(self) -> list[nk.Param]:
        return self.net.params()

    def __call__(self, s: nk.Tensor, a: nk.Tensor, frozen: bool = False) -> nk.Tensor:
        if s.shape[-1] != self.state_dim or a.shape[-1] != self.k:
            raise nk.ShapeError(f"critic expects ({self.state_dim}, {self.k}), got ({s.shape[-1]}, {a.shape[-1]})")
        q = self.net(nk.concat([s, a], axis=-1), frozen)
        return nk.reshape(q, q.shape[:-1])


@dataclass
class Batch:
    users: np.ndarray
    histories: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_histories: np.ndarray
    terminal: np.ndarray

    @classmethod
    def from_transitions(cls, ts) -> "Batch":
        return cls(np.array([t.user for t in ts], dtype=np.intp),
                   np.array([t.history for t in ts], dtype=np.intp),
                   np.array([t.action for t in ts], dtype=np.float64),
                   np.array([t.reward for t in ts], dtype=np.float64),
                   np.array([t.next_history for t in ts], dtype=np.intp),
                   np.array([t.terminal for t in ts], dtype=bool))

    def __len__(self) -> int:
        return len(self.rewards)


class AgentBundle:
    """Online and target actor/critic plus their optimizers."""

    def __init__(self, cfg: AgentConfig, tbl: EmbeddingTable, seed: int = 0):
        self.cfg = cfg
        self.tbl = tbl
        rng = np.random.default_rng(seed)
        self.actor = Actor(cfg, tbl.k, rng)
        self.critic = Critic(cfg, self.actor.state_rep.dim, tbl.k, rng)
        self.target_actor = copy.deepcopy(self.actor)
        self.target_critic = copy.deepcopy(self.critic)
        self.actor_opt = nk.Adam(self.actor.params(), cfg.actor_lr, cfg.l2)
        self.critic_opt = nk.Adam(self.critic.params(), cfg.critic_lr, cfg.l2)

    # -- state helpers
    def _inputs(self, users, histories):
        return self.tbl.user_vectors[users], self.tbl.item_vectors[histories]

    def state(self, users, histories, target: bool = False) -> np.ndarray:
        actor = self.target_actor if target else self.actor
        return actor.state(*self._inputs(users, histories), frozen=True).data

    def act(self, users, histories, target: bool = False) -> np.ndarray:
        """Deterministic actions for a batch (no gradient)."""
        actor = self.target_actor if target else self.actor
        s = actor.state(*self._inputs(users, histories), frozen=True)
        return actor(s, frozen=True).data

    def q_value(self, users, histories, actions, target: bool = False) -> np.ndarray:
        actor = self.target_actor if target else self.actor
        critic = self.target_critic if target else self.critic
        s = actor.state(*self._inputs(users, histories), frozen=True)
        return critic(s, nk.Tensor(actions), frozen=True).data

    # -- updates
    def td_targets(self, batch: Batch) -> np.ndarray:
        """y = r + gamma * Q'(s', pi'(s')), y = r on terminal steps; reads target nets only."""
        s_next = self.target_actor.state(*self._inputs(batch.users, batch.next_histories), frozen=True)
        a_next = self.target_actor(s_next, frozen=True)
        q_next = self.target_critic(s_next, a_next, frozen=True).data
        return batch.rewards + self.cfg.gamma * np.where(batch.terminal, 0.0, q_next)

    def critic_loss(self, batch: Batch, is_weights: np.ndarray | None = None, targets: np.ndarray | None = None):
        y = self.td_targets(batch) if targets is None else targets
        s = self.actor.state(*self._inputs(batch.users, batch.histories), frozen=True)
        q = self.critic(s, nk.Tensor(batch.actions))
        diff = nk.add(q, nk.Tensor(-y))
        w = np.ones(len(batch)) if is_weights is None else np.asarray(is_weights, dtype=np.float64)
        loss = nk.mul(nk.sum_all(nk.mul(nk.square(diff), nk.Tensor(w))), 1.0 / len(batch))
        return loss, y - q.data

    def actor_loss(self, batch: Batch, critic_state: np.ndarray | None = None) -> nk.Tensor:
        """-mean Q(s, pi(s)) with the critic frozen and s entering the critic as a constant.

        ``critic_state`` pins that constant (defaults to the current state values).
        """
        s = self.actor.state(*self._inputs(batch.users, batch.histories))
        a = self.actor(s)
        s_const = s.data if critic_state is None else critic_state
        q = self.critic(nk.Tensor(s_const), a, frozen=True)
        return nk.neg(nk.mean_all(q))

    def critic_update(self, batch: Batch, is_weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
        loss, td = self.critic_loss(batch, is_weights)
        if not np.isfinite(loss.data).all():
            raise nk.NonFiniteError("critic loss is not finite")
        nk.backward(loss)
        self.critic_opt.step()
        return float(loss.data), np.abs(td)

    def actor_update(self, batch: Batch) -> float:
        loss = self.actor_loss(batch)
        nk.backward(loss)
        self.actor_opt.step()
        return -float(loss.data)

    def soft_update(self, tau: float | None = None) -> None:
        tau = self.cfg.tau if tau is None else tau
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {tau}")
        for online, target in ((self.actor, self.target_actor), (self.critic, self.target_critic)):
            for p, q in zip(online.params(), target.params()):
                if tau == 1.0:
                    q.data[...] = p.data
                elif tau != 0.0:
                    nk.lerp_(q.data, p.data, tau)

    # -- parameter access
    def named_params(self) -> dict[str, nk.Param]:
        out = {}
        for prefix, net in (("actor", self.actor), ("critic", self.critic),
                            ("target_actor", self.target_actor), ("target_critic", self.target_critic)):
            for p in net.params():
                out[f"{prefix}/{p.name}"] = p
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_params().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def snapshot(self) -> dict:
        return {name: (p.data.copy(), p.adam_m.copy(), p.adam_v.copy(), p.step_count)
                for name, p in self.named_params().items()}

    def restore(self, snap: dict) -> None:
        for name, p in self.named_params().items():
            data, m, v, steps = snap[name]
            p.data[...] = data
            p.adam_m[...] = m
            p.adam_v[...] = v
            p.step_count = steps
            p.zero_grad()


# ---------------------------------------------------------------- ranking

def score_items(a: np.ndarray, candidates: Sequence[int], tbl: EmbeddingTable) -> list[tuple[int, float]]:
    """Candidates sorted by V_i . a descending, ties by ascending item id."""
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    cand = np.asarray(candidates, dtype=np.intp)
    scores = tbl.item_vectors[cand] @ np.asarray(a, dtype=np.float64)
    order = np.lexsort((cand, -scores))
    return [(int(cand[j]), float(scores[j])) for j in order]


def rank_candidates(a: np.ndarray, cand: np.ndarray, tbl: EmbeddingTable) -> np.ndarray:
    """Array form of ``score_items`` returning only the ordered item ids."""
    scores = tbl.item_vectors[cand] @ a
    return cand[np.lexsort((cand, -scores))]


def top_item(a: np.ndarray, cand: np.ndarray, tbl: EmbeddingTable) -> int:
    scores = tbl.item_vectors[cand] @ a
    best = scores.max()
    return int(cand[scores == best].min())


def explore(a: np.ndarray, eps: float, candidates, tbl: EmbeddingTable, rng: np.random.Generator) -> int:
    """Epsilon-greedy at the item level."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {eps}")
    cand = np.asarray(candidates, dtype=np.intp)
    if cand.size == 0:
        raise ValueError("empty candidate set")
    if eps > 0.0 and rng.random() < eps:
        return int(cand[rng.integers(cand.size)])
    return top_item(a, cand, tbl)


# ---------------------------------------------------------------- checkpoints
# Layout (little-endian): magic b"DRRCKPT\0", version u8, u32 length + UTF-8
# JSON config, u32 tensor count, then per tensor: u16 name length, name,
# u8 ndim, ndim x i64 dims, i64 step_count, then value, adam_m, adam_v as
# row-major float64.

CKPT_MAGIC = b"DRRCKPT\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(bundle: AgentBundle, path, meta: dict | None = None) -> None:
    cfg = asdict(bundle.cfg)
    header = json.dumps({"agent": cfg, "k": bundle.tbl.k, "meta": meta or {}}, sort_keys=True).encode()
    params = bundle.named_params()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<B", CKPT_VERSION))
        fh.write(struct.pack("<I", len(header)) + header)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<B", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}q", *p.data.shape))
            fh.write(struct.pack("<q", p.step_count))
            for arr in (p.data, p.adam_m, p.adam_v):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (n,) = struct.unpack_from("<I", raw, 9)
    return json.loads(raw[13:13 + n])


def load_checkpoint(path, tbl: EmbeddingTable) -> tuple[AgentBundle, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    if raw[8] != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {raw[8]}")
    try:
        (n,) = struct.unpack_from("<I", raw, 9)
        header = json.loads(raw[13:13 + n])
        off = 13 + n
        cfg_d = header["agent"]
        cfg_d["actor_hidden"] = tuple(cfg_d["actor_hidden"])
        cfg_d["critic_hidden"] = tuple(cfg_d["critic_hidden"])
        cfg = AgentConfig(**cfg_d)
        if header["k"] != tbl.k:
            raise CheckpointError(f"{path}: checkpoint k={header['k']} but embeddings k={tbl.k}")
        bundle = AgentBundle(cfg, tbl, seed=0)
        params = bundle.named_params()
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        if count != len(params):
            raise CheckpointError(f"{path}: {count} tensors, expected {len(params)}")
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + ln].decode()
            off += ln
            ndim = raw[off]
            off += 1
            shape = struct.unpack_from(f"<{ndim}q", raw, off)
            off += 8 * ndim
            (steps,) = struct.unpack_from("<q", raw, off)
            off += 8
            p = params[name]
            if tuple(shape) != p.data.shape:
                raise CheckpointError(f"{path}: {name} has shape {shape}, expected {p.data.shape}")
            size = int(np.prod(shape))
            arrs = []
            for _ in range(3):
                if off + 8 * size > len(raw):
                    raise CheckpointError(f"{path}: truncated payload")
                arrs.append(np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape))
                off += 8 * size
            p.data[...] = arrs[0]
            p.adam_m[...] = arrs[1]
            p.adam_v[...] = arrs[2]
            p.step_count = steps
    except (struct.error, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return bundle, header.get("meta", {})
