"""Unit tests for diffkg/aggregator.py."""

import numpy as np
import pytest

from diffkg import numgrad as ng
from diffkg.aggregator import RelationAttention, aggregate, attention_weights, kg_dropout
from diffkg.graph import KnowledgeGraph


def _kg(triplets, n_items, n_entities, n_relations=1):
    h, r, t = (np.array(col) for col in zip(*triplets))
    return KnowledgeGraph.from_triplets(h, r, t, n_items, n_entities, np.arange(n_relations))


def _scalar_attention(entity_values):
    """One-dimensional attention whose logit is exactly the entity value."""
    return RelationAttention(
        weight=ng.parameter([[1.0, 0.0]]),
        relation_emb=ng.parameter([[1.0]]),
        entity_emb=ng.parameter(np.asarray(entity_values, dtype=float).reshape(-1, 1)),
        out_dropout=0.0,
    )


class TestAttentionWeights:
    def test_softmax_over_neighbours(self):
        kg = _kg([(0, 0, 0), (0, 0, 1)], n_items=1, n_entities=2)
        alpha = attention_weights(ng.tensor([[0.5]]), kg, _scalar_attention([1.0, 0.0]))
        np.testing.assert_allclose(alpha.data, [0.7310586, 0.2689414], rtol=1e-5)

    def test_weights_sum_to_one_per_item(self):
        rng = np.random.default_rng(0)
        kg = _kg([(0, 0, 0), (0, 1, 2), (1, 0, 1), (1, 1, 1), (1, 0, 3)], 3, 4, n_relations=2)
        params = RelationAttention.init(4, 2, 4, rng)
        item_emb = ng.tensor(rng.normal(size=(3, 4)))
        alpha = attention_weights(item_emb, kg, params)
        totals = np.bincount(kg.heads, weights=alpha.data, minlength=3)
        np.testing.assert_allclose(totals[:2], [1.0, 1.0], rtol=1e-5)

    def test_item_embedding_shape_checked(self):
        params = RelationAttention.init(4, 1, 2, np.random.default_rng(0))
        kg = _kg([(0, 0, 0)], n_items=2, n_entities=2)
        with pytest.raises(ng.ShapeError, match="item embeddings have shape"):
            attention_weights(ng.tensor(np.zeros((2, 3))), kg, params)


class TestAggregate:
    def test_item_without_neighbours_is_normalised(self):
        kg = _kg([(0, 0, 0)], n_items=2, n_entities=1)
        params = _scalar_attention([1.0])
        params.weight = ng.parameter([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
        params.relation_emb = ng.parameter([[1.0, 1.0]])
        params.entity_emb = ng.parameter([[1.0, 0.0]])
        out = aggregate(ng.tensor([[1.0, 0.0], [3.0, 4.0]]), kg, params, training=False)
        np.testing.assert_allclose(out.data[1], [0.6, 0.8], rtol=1e-6)

    def test_single_neighbour_residual(self):
        kg = _kg([(0, 0, 0)], n_items=1, n_entities=1)
        out = aggregate(ng.tensor([[2.0]]), kg, _scalar_attention([-5.0]), training=False)
        np.testing.assert_allclose(out.data, [[-1.0]], rtol=1e-6)

    def test_rows_have_unit_norm(self):
        rng = np.random.default_rng(1)
        kg = _kg([(0, 0, 0), (1, 0, 1), (1, 0, 2)], n_items=2, n_entities=3)
        params = RelationAttention.init(5, 1, 3, rng, out_dropout=0.0, depth=2)
        out = aggregate(ng.tensor(rng.normal(size=(2, 5))), kg, params, training=False)
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), [1.0, 1.0], rtol=1e-5)

    def test_gradients_match_finite_differences(self):
        with ng.default_dtype(np.float64):
            rng = np.random.default_rng(2)
            kg = _kg([(0, 0, 0), (0, 1, 1), (1, 1, 1), (2, 0, 2)], 3, 3, n_relations=2)
            params = RelationAttention.init(3, 2, 3, rng, out_dropout=0.0)
            items = ng.parameter(rng.normal(size=(3, 3)))
            w = rng.normal(size=(3, 3))

            def loss():
                return ng.sum(aggregate(items, kg, params, training=False) * w)

            assert ng.finite_diff_check(loss, [items, *params.parameters()]) < 1e-4


# ---------------------------------------------------------------------------
# Items as entities
# ---------------------------------------------------------------------------


class TestItemValuedTails:
    def _kg(self):
        # Item 0 links item 1 and the plain entity 2.
        h, r, t = np.array([0, 0]), np.array([0, 0]), np.array([1, 2])
        return KnowledgeGraph.from_triplets(h, r, t, 2, 3, np.arange(1), item_entities=2)

    def test_single_item_neighbour_uses_item_embedding(self):
        kg = KnowledgeGraph.from_triplets(
            np.array([0]), np.array([0]), np.array([1]), 2, 3, np.arange(1), item_entities=2
        )
        params = RelationAttention.init(2, 1, 3, np.random.default_rng(0), out_dropout=0.0)
        params.entity_emb = ng.parameter(np.full((3, 2), 50.0))
        out = aggregate(ng.tensor([[1.0, 0.0], [0.0, 1.0]]), kg, params, training=False)
        np.testing.assert_allclose(out.data[0], [np.sqrt(0.5), np.sqrt(0.5)], rtol=1e-5)

    def test_item_tails_train_items_not_entity_rows(self):
        rng = np.random.default_rng(4)
        params = RelationAttention.init(3, 1, 3, rng, out_dropout=0.0)
        items = ng.parameter(rng.normal(size=(2, 3)))
        only_item_0 = rng.normal(size=(2, 3)) * np.array([[1.0], [0.0]])
        loss = ng.sum(aggregate(items, self._kg(), params, training=False) * only_item_0)
        ng.backward(loss, [items, *params.parameters()])
        np.testing.assert_array_equal(params.entity_emb.grad[:2], 0.0)
        assert np.abs(params.entity_emb.grad[2]).sum() > 0
        assert np.abs(items.grad[1]).sum() > 0

    def test_gradients_match_finite_differences(self):
        with ng.default_dtype(np.float64):
            rng = np.random.default_rng(5)
            params = RelationAttention.init(3, 1, 3, rng, out_dropout=0.0)
            items = ng.parameter(rng.normal(size=(2, 3)))
            kg = self._kg()
            w = rng.normal(size=(2, 3))

            def loss():
                return ng.sum(aggregate(items, kg, params, training=False) * w)

            assert ng.finite_diff_check(loss, [items, *params.parameters()]) < 1e-4


class TestKgDropout:
    def test_zero_rate_is_identity(self):
        kg = _kg([(0, 0, 0)], n_items=1, n_entities=1)
        assert kg_dropout(kg, 0.0) is kg

    def test_keeps_about_half(self):
        pairs = [(i, 0, e) for i in range(100) for e in range(100)]
        kg = _kg(pairs, n_items=100, n_entities=100)
        dropped = kg_dropout(kg, 0.5, seed=0)
        # Binomial(10_000, 0.5): standard deviation 50.
        assert abs(dropped.n_triplets - 5000) <= 3 * 50
        assert dropped.n_items == kg.n_items

    def test_rate_one_rejected(self):
        kg = _kg([(0, 0, 0)], n_items=1, n_entities=1)
        with pytest.raises(ValueError, match="KG dropout rate"):
            kg_dropout(kg, 1.0)
