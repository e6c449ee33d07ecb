"""Two knowledge-enhanced views and the InfoNCE objective between them."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from diffkg import numgrad as ng
from diffkg.aggregator import kg_dropout
from diffkg.graph import KnowledgeGraph
from diffkg.numgrad import ShapeError, Tensor

COSINE_FLOOR = 1e-8

EncodeFn = Callable[[KnowledgeGraph], tuple[Tensor, Tensor]]


@dataclass
class ViewPair:
    """Encodings of the dropout view of G_k and of the denoised view G_k'."""

    user_a: Tensor
    item_a: Tensor
    user_b: Tensor
    item_b: Tensor
    temperature: float = 1.0


def build_views(
    encode_fn: EncodeFn,
    kg: KnowledgeGraph,
    kg_denoised: KnowledgeGraph,
    dropout_rate: float,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
) -> ViewPair:
    """Encode ``kg_dropout(kg)`` and ``kg_denoised`` over the same interaction graph."""
    user_a, item_a = encode_fn(kg_dropout(kg, dropout_rate, rng))
    user_b, item_b = encode_fn(kg_denoised)
    return ViewPair(user_a, item_a, user_b, item_b, temperature)


def infonce(
    view_a: Tensor,
    view_b: Tensor,
    nodes: np.ndarray | None = None,
    temperature: float = 1.0,
) -> Tensor:
    """Mean per-node InfoNCE with cosine similarity and in-batch negatives.

    Row ``n`` of *view_b* is the positive for row ``n`` of *view_a*; every
    other selected row of *view_b* is a negative.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if view_a.shape != view_b.shape:
        raise ShapeError(f"infonce: view shapes differ: {view_a.shape} vs {view_b.shape}")
    if nodes is not None:
        view_a = ng.gather_rows(view_a, nodes)
        view_b = ng.gather_rows(view_b, nodes)
    a = ng.l2_normalize(view_a, axis=1, eps=COSINE_FLOOR)
    b = ng.l2_normalize(view_b, axis=1, eps=COSINE_FLOOR)
    inv_tau = 1.0 / temperature
    logits = ng.matmul(a, ng.transpose(b)) * inv_tau
    positive = ng.sum(a * b, axis=1) * inv_tau
    return ng.mean(ng.logsumexp(logits, axis=1) - positive)


def contrastive_loss(views: ViewPair, users: np.ndarray, items: np.ndarray) -> Tensor:
    """User-side plus item-side InfoNCE over the given node batches."""
    user_loss = infonce(views.user_a, views.user_b, users, views.temperature)
    item_loss = infonce(views.item_a, views.item_b, items, views.temperature)
    return user_loss + item_loss
