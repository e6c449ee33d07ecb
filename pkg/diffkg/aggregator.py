"""Relation-aware attentive aggregation of entity embeddings into items.

For every item ``i`` with KG neighbours ``N_i`` the aggregated embedding is::

    alpha(e, r, i) = softmax_{e in N_i} LeakyReLU(r^T W [x_e || x_i])
    x_i'           = Drop(Norm(x_i + sum_e alpha(e, r, i) x_e))

with ``Norm`` the L2 row normalisation.  Items without neighbours reduce to
``Drop(Norm(x_i))``.  A tail that is itself an item contributes that item's
embedding rather than a separate entity row.  The whole computation is
vectorised over the edge list of a :class:`~diffkg.graph.KnowledgeGraph` view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from diffkg import numgrad as ng
from diffkg.graph import KnowledgeGraph
from diffkg.numgrad import Tensor


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


@dataclass
class RelationAttention:
    """Trainable state of the KG aggregator.

    ``weight`` is ``d x 2d`` and multiplies ``[x_e || x_i]``; there is one
    relation embedding per dense relation id and one entity embedding per
    entity.
    """

    weight: Tensor
    relation_emb: Tensor
    entity_emb: Tensor
    kg_dropout: float = 0.5
    out_dropout: float = 0.1
    slope: float = 0.2
    depth: int = 1

    @classmethod
    def init(
        cls,
        dim: int,
        n_relations: int,
        n_entities: int,
        rng: np.random.Generator,
        kg_dropout: float = 0.5,
        out_dropout: float = 0.1,
        slope: float = 0.2,
        depth: int = 1,
    ) -> RelationAttention:
        scale = 1.0 / np.sqrt(dim)
        return cls(
            weight=ng.parameter(xavier_uniform(rng, dim, 2 * dim), name="attention.weight"),
            relation_emb=ng.parameter(
                rng.uniform(-scale, scale, size=(max(n_relations, 1), dim)),
                name="attention.relation_emb",
            ),
            entity_emb=ng.parameter(
                rng.uniform(-scale, scale, size=(n_entities, dim)),
                name="attention.entity_emb",
            ),
            kg_dropout=kg_dropout,
            out_dropout=out_dropout,
            slope=slope,
            depth=depth,
        )

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.relation_emb, self.entity_emb]


def kg_dropout(
    kg: KnowledgeGraph,
    rate: float,
    seed: int | np.random.Generator | None = None,
) -> KnowledgeGraph:
    """Keep each triplet independently with probability ``1 - rate``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"KG dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return kg
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return kg.subset(rng.random(kg.n_triplets) >= rate)


def tail_embeddings(item_emb: Tensor, kg: KnowledgeGraph, params: RelationAttention) -> Tensor:
    """Embeddings of ``kg.tails``; tails that are items read *item_emb*."""
    entities = ng.gather_rows(params.entity_emb, kg.tails)
    shared = kg.item_tails
    if not shared.any():
        return entities
    items = ng.gather_rows(item_emb, np.where(shared, kg.tails, 0))
    mask = shared.astype(entities.dtype)[:, None]
    return entities * (1.0 - mask) + items * mask


def attention_weights(
    item_emb: Tensor,
    kg: KnowledgeGraph,
    params: RelationAttention,
    neighbours: Tensor | None = None,
) -> Tensor:
    """Per-edge attention weights, aligned with ``kg.heads``; they sum to 1 per item."""
    if item_emb.shape != (kg.n_items, params.dim):
        raise ng.ShapeError(
            f"item embeddings have shape {item_emb.shape}, expected {(kg.n_items, params.dim)}"
        )
    if neighbours is None:
        neighbours = tail_embeddings(item_emb, kg, params)
    pair = ng.concat([neighbours, ng.gather_rows(item_emb, kg.heads)], axis=1)
    projected = ng.matmul(pair, ng.transpose(params.weight))
    relation = ng.gather_rows(params.relation_emb, kg.relations)
    logits = ng.leaky_relu(ng.sum(relation * projected, axis=1), params.slope)
    return ng.segment_softmax(logits, kg.heads, kg.n_items)


def aggregate(
    item_emb: Tensor,
    kg: KnowledgeGraph,
    params: RelationAttention,
    rng: np.random.Generator | None = None,
    training: bool = True,
) -> Tensor:
    """Apply the residual attention layer ``params.depth`` times on *kg*.

    Neighbour embeddings are taken once, before the first layer.
    """
    x = item_emb
    neighbours = tail_embeddings(item_emb, kg, params)
    for _ in range(params.depth):
        alpha = attention_weights(x, kg, params, neighbours)
        message = ng.segment_sum(ng.reshape(alpha, (-1, 1)) * neighbours, kg.heads, kg.n_items)
        x = ng.dropout(ng.l2_normalize(x + message), params.out_dropout, rng, training)
    return x
