"""State representation module f(H).

Four structures map the user vector and the n most recent positive items to a
fixed-length state:

* ``drr_n``   concat(i_1..i_n)                                    n*k
* ``drr_p``   concat(i_1..i_n, p_ab for a<b)                      k(n + n(n-1)/2)
* ``drr_u``   concat(u*w_a i_a for a=1..n, p_ab for a<b)          k(n + n(n-1)/2)
* ``drr_ave`` concat(u, u*g, g), g = (1/n) sum_a w_a i_a          3k

with p_ab = (w_a i_a) * (w_b i_b) elementwise. The slot weights w are
attached to history positions, not item identities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkit as nk

VARIANTS = ("drr_n", "drr_p", "drr_u", "drr_ave")


def state_dim(variant: str, n: int, k: int) -> int:
    if variant == "drr_n":
        return n * k
    if variant in ("drr_p", "drr_u"):
        return k * (n + n * (n - 1) // 2)
    if variant == "drr_ave":
        return 3 * k
    raise ValueError(f"unknown variant {variant!r}")


def pair_index(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Lexicographic (a, b) pairs with a < b."""
    a, b = np.triu_indices(n, k=1)
    return a, b


@dataclass
class History:
    """The n latest positive items, oldest first."""

    item_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.item_ids)


def update_history(h: History, recommended_item: int, reward: float) -> History:
    if reward > 0:
        return History(tuple(h.item_ids[1:]) + (int(recommended_item),))
    return h


class StateRep:
    """Batched f(H) with learnable slot weights (owned by the actor)."""

    def __init__(self, variant: str, n: int, k: int):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if n < 1 or k < 1:
            raise ValueError("n and k must be >= 1")
        self.variant = variant
        self.n = n
        self.k = k
        self.weights = nk.Param(np.ones(n), name="state.w")
        self._pairs = pair_index(n)

    @property
    def dim(self) -> int:
        return state_dim(self.variant, self.n, self.k)

    def params(self) -> list[nk.Param]:
        # drr_n has no learnable part
        return [] if self.variant == "drr_n" else [self.weights]

    def __call__(self, user_vecs: np.ndarray, item_vecs: np.ndarray, weights: nk.Tensor | None = None) -> nk.Tensor:
        """user_vecs [B, k], item_vecs [B, n, k] -> state [B, dim]."""
        w = self.weights if weights is None else weights
        return build_state(self.variant, nk.Tensor(user_vecs), nk.Tensor(item_vecs), w, self._pairs)


def _pair_block(weighted: nk.Tensor, pairs) -> nk.Tensor | None:
    a_idx, b_idx = pairs
    if len(a_idx) == 0:
        return None
    lhs = nk.take(weighted, a_idx, axis=-2)
    rhs = nk.take(weighted, b_idx, axis=-2)
    prod = nk.mul(lhs, rhs)
    return nk.reshape(prod, prod.shape[:-2] + (prod.shape[-2] * prod.shape[-1],))


def _flatten_slots(x: nk.Tensor) -> nk.Tensor:
    return nk.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def build_state(variant: str, user: nk.Tensor, items: nk.Tensor, weights: nk.Tensor, pairs=None) -> nk.Tensor:
    """Differentiable core shared by the batched module and the single-history helpers.

    ``items`` has shape [..., n, k]; ``user`` has shape [..., k].
    """
    n = items.shape[-2]
    if pairs is None:
        pairs = pair_index(n)
    if variant == "drr_n":
        return _flatten_slots(items)
    if variant == "drr_ave":
        g = nk.weighted_average(items, weights)
        return nk.concat([user, nk.mul(user, g), g], axis=-1)
    weighted = nk.scale_slots(items, weights)
    pair_part = _pair_block(weighted, pairs)
    if variant == "drr_p":
        head = _flatten_slots(items)
    elif variant == "drr_u":
        u = nk.reshape(user, user.shape[:-1] + (1, user.shape[-1]))
        head = _flatten_slots(nk.mul(u, weighted))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return head if pair_part is None else nk.concat([head, pair_part], axis=-1)


# single-history helpers (unbatched) -------------------------------------------

def _item_block(h: History | Sequence[int], item_vectors: np.ndarray) -> np.ndarray:
    ids = np.asarray(h.item_ids if isinstance(h, History) else h, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= item_vectors.shape[0]):
        raise IndexError(f"history id outside [0, {item_vectors.shape[0]})")
    return item_vectors[ids]


def _weights_of(params, n: int) -> nk.Tensor:
    if params is None:
        return nk.Tensor(np.ones(n))
    return params.weights if isinstance(params, StateRep) else params


def state_drr_n(h, tbl) -> np.ndarray:
    items = _item_block(h, tbl.item_vectors)
    return build_state("drr_n", nk.Tensor(np.zeros(items.shape[1])), nk.Tensor(items), nk.Tensor(np.ones(len(items)))).data


def state_drr_p(h, tbl, params=None) -> np.ndarray:
    items = _item_block(h, tbl.item_vectors)
    return build_state("drr_p", nk.Tensor(np.zeros(items.shape[1])), nk.Tensor(items), _weights_of(params, len(items))).data


def state_drr_u(h, u_vec, tbl, params=None) -> np.ndarray:
    items = _item_block(h, tbl.item_vectors)
    return build_state("drr_u", nk.Tensor(u_vec), nk.Tensor(items), _weights_of(params, len(items))).data


def state_drr_ave(h, u_vec, tbl, params=None) -> np.ndarray:
    items = _item_block(h, tbl.item_vectors)
    return build_state("drr_ave", nk.Tensor(u_vec), nk.Tensor(items), _weights_of(params, len(items))).data
