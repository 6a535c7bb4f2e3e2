"""Mean-centred matrix factorization: pretrained embeddings and rating simulator.

Binary embedding file layout (all little-endian)::

    offset  size        field
    0       8           magic  b"DRREMBED"
    8       1           version (1)
    9       8 x 3       int64  k, num_users, num_items
    33      8           float64 global_mean
    41      8 x 2       float64 min_rating, max_rating   (clamp range)
    57      8*U*k       float64 user vectors, row-major
    ...     8*I*k       float64 item vectors, row-major
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import Dataset

log = logging.getLogger(__name__)

MAGIC = b"DRREMBED"
VERSION = 1
_HEADER = struct.Struct("<8sBqqqddd")


class PmfDivergence(FloatingPointError):
    pass


class EmbeddingFileError(ValueError):
    pass


@dataclass
class PmfConfig:
    k: int = 100
    learning_rate: float = 0.005
    l2_lambda: float = 0.02
    epochs: int = 30
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        if self.k < 1 or self.epochs < 1 or self.l2_lambda < 0:
            raise ValueError(f"invalid PmfConfig {self}")


@dataclass(eq=False)
class EmbeddingTable:
    user_vectors: np.ndarray
    item_vectors: np.ndarray
    global_mean: float
    min_rating: float = 1.0
    max_rating: float = 5.0

    @property
    def k(self) -> int:
        return self.user_vectors.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_vectors.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_vectors.shape[0]

    def predict_raw(self, users, items) -> np.ndarray:
        return self.global_mean + np.einsum("ij,ij->i", self.user_vectors[users], self.item_vectors[items])

    def predict(self, users, items) -> np.ndarray:
        return np.clip(self.predict_raw(users, items), self.min_rating, self.max_rating)

    def predict_user(self, user: int) -> np.ndarray:
        """Clamped predictions for every item."""
        return np.clip(self.global_mean + self.item_vectors @ self.user_vectors[user],
                       self.min_rating, self.max_rating)

    def equals(self, other: "EmbeddingTable") -> bool:
        return (np.array_equal(self.user_vectors, other.user_vectors)
                and np.array_equal(self.item_vectors, other.item_vectors)
                and self.global_mean == other.global_mean
                and self.min_rating == other.min_rating and self.max_rating == other.max_rating)


def predict_rating(tbl: EmbeddingTable, u: int, i: int) -> float:
    if not (0 <= u < tbl.num_users and 0 <= i < tbl.num_items):
        raise IndexError(f"(user={u}, item={i}) outside table {tbl.num_users}x{tbl.num_items}")
    raw = tbl.global_mean + float(tbl.user_vectors[u] @ tbl.item_vectors[i])
    return min(max(raw, tbl.min_rating), tbl.max_rating)


def objective(tbl: EmbeddingTable, ds: Dataset, l2_lambda: float) -> float:
    # a diverging run reports inf/nan through the caller's check, not warnings
    with np.errstate(over="ignore", invalid="ignore"):
        err = ds.ratings - tbl.predict_raw(ds.users, ds.items)
        reg = l2_lambda * (np.sum(tbl.user_vectors ** 2) + np.sum(tbl.item_vectors ** 2))
        return float(err @ err + reg)


def rmse(tbl: EmbeddingTable, ds: Dataset) -> float:
    err = ds.ratings - tbl.predict(ds.users, ds.items)
    return float(np.sqrt(np.mean(err * err)))


def train_pmf(train: Dataset, cfg: PmfConfig = PmfConfig()) -> EmbeddingTable:
    """Plain SGD over shuffled observed entries.

    Minimizes sum (r - mu - U_u.V_i)^2 + lambda(|U|^2 + |V|^2), with the
    regularizer applied per visited entry as in the usual Funk-style update.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    U = rng.normal(0.0, cfg.init_scale, size=(train.num_users, cfg.k))
    V = rng.normal(0.0, cfg.init_scale, size=(train.num_items, cfg.k))
    mu = float(train.ratings.mean())
    tbl = EmbeddingTable(U, V, mu, train.scale.min_rating, train.scale.max_rating)
    lr, lam = cfg.learning_rate, cfg.l2_lambda
    users, items, resid = train.users, train.items, train.ratings - mu
    prev = objective(tbl, train, lam)
    for epoch in range(1, cfg.epochs + 1):
        if lr != 0.0:
            # overflow is caught below as a non-finite or rising loss
            with np.errstate(over="ignore", invalid="ignore"):
                for idx in rng.permutation(len(train)):
                    u, i = users[idx], items[idx]
                    pu, qi = U[u], V[i]
                    err = resid[idx] - pu @ qi
                    pu_old = pu.copy()
                    pu += lr * (err * qi - lam * pu)
                    qi += lr * (err * pu_old - lam * qi)
        loss = objective(tbl, train, lam)
        if not np.isfinite(loss):
            raise PmfDivergence(f"PMF loss became non-finite at epoch {epoch}")
        if loss > prev * 1.05:
            raise PmfDivergence(f"PMF loss rose from {prev:.4g} to {loss:.4g} at epoch {epoch}; "
                                f"lower learning_rate (now {lr})")
        if loss > prev * 1.01:
            log.warning("PMF epoch %d: loss rose %.4g -> %.4g", epoch, prev, loss)
        log.debug("PMF epoch %d loss %.6g", epoch, loss)
        prev = loss
    return tbl


def save_embeddings(tbl: EmbeddingTable, path) -> None:
    header = _HEADER.pack(MAGIC, VERSION, tbl.k, tbl.num_users, tbl.num_items,
                          float(tbl.global_mean), float(tbl.min_rating), float(tbl.max_rating))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(tbl.user_vectors, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(tbl.item_vectors, dtype="<f8").tobytes())


def load_embeddings(path) -> EmbeddingTable:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise EmbeddingFileError(f"{path}: truncated header")
    magic, version, k, nu, ni, mu, lo, hi = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise EmbeddingFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise EmbeddingFileError(f"{path}: unsupported version {version}")
    if k < 1 or nu < 0 or ni < 0:
        raise EmbeddingFileError(f"{path}: corrupt header (k={k}, users={nu}, items={ni})")
    expect = _HEADER.size + 8 * k * (nu + ni)
    if len(raw) != expect:
        raise EmbeddingFileError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, "
                                 f"header declares {expect - _HEADER.size}")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    U = body[: nu * k].reshape(nu, k).copy()
    V = body[nu * k:].reshape(ni, k).copy()
    return EmbeddingTable(U, V, mu, lo, hi)
