"""Parameter-free graph propagation over the user-item graph.

Each layer moves embeddings across the symmetric-normalised adjacency
without self-loops, weights or nonlinearity; the final representation is
the mean of layers ``0..L``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from diffkg import numgrad as ng
from diffkg.numgrad import Tensor


@dataclass
class EmbeddingTable:
    """Base user and item embeddings, initialised uniformly in ``+-1/sqrt(d)``."""

    user_emb: Tensor
    item_emb: Tensor
    n_layers: int = 2

    @classmethod
    def init(
        cls,
        n_users: int,
        n_items: int,
        dim: int,
        rng: np.random.Generator,
        n_layers: int = 2,
    ) -> EmbeddingTable:
        scale = 1.0 / np.sqrt(dim)
        return cls(
            user_emb=ng.parameter(rng.uniform(-scale, scale, size=(n_users, dim)), name="user_emb"),
            item_emb=ng.parameter(rng.uniform(-scale, scale, size=(n_items, dim)), name="item_emb"),
            n_layers=n_layers,
        )

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.user_emb, self.item_emb]


def propagate_layer(
    x_u: Tensor,
    x_i: Tensor,
    adjacency: sp.csr_matrix,
    adjacency_t: sp.csr_matrix | None = None,
) -> tuple[Tensor, Tensor]:
    """One propagation step; *adjacency* is the normalised |U| x |I| matrix."""
    if adjacency_t is None:
        adjacency_t = adjacency.T.tocsr()
    return ng.spmm(adjacency, x_i), ng.spmm(adjacency_t, x_u)


def encode(
    item_inputs: Tensor,
    user_emb: Tensor,
    adjacency: sp.csr_matrix,
    n_layers: int,
) -> tuple[Tensor, Tensor]:
    """Final ``(x_u, x_i)`` as the mean over propagation layers ``0..n_layers``."""
    adjacency_t = adjacency.T.tocsr()
    x_u, x_i = user_emb, item_inputs
    sum_u, sum_i = x_u, x_i
    for _ in range(n_layers):
        x_u, x_i = propagate_layer(x_u, x_i, adjacency, adjacency_t)
        sum_u = sum_u + x_u
        sum_i = sum_i + x_i
    scale = 1.0 / (n_layers + 1)
    return sum_u * scale, sum_i * scale


def predict_scores(x_u: Tensor | np.ndarray, x_i: Tensor | np.ndarray) -> np.ndarray:
    """Inner-product scores ``x_u @ x_i.T`` as a plain array."""
    users = x_u.data if isinstance(x_u, Tensor) else np.asarray(x_u)
    items = x_i.data if isinstance(x_i, Tensor) else np.asarray(x_i)
    if users.ndim == 1:
        users = users[None, :]
    return users @ items.T
