"""Unit tests for diffkg/graph.py."""

import logging
import textwrap

import numpy as np
import pytest
from scipy.stats import chisquare

from diffkg.graph import (
    GraphError,
    InteractionGraph,
    KnowledgeGraph,
    build_norm_adjacency,
    inject_noise,
    k_core_filter,
    load_dataset,
    load_interactions,
    load_triplets,
    rows_to_triplets,
    sample_bpr_triples,
    split,
    write_dataset,
)


def _graph(pairs, n_users=None, n_items=None):
    users, items = zip(*pairs)
    return InteractionGraph.from_pairs(np.array(users), np.array(items), n_users, n_items)


def _kg(triplets, n_items, n_entities, n_relations=2):
    h, r, t = (np.array(col) for col in zip(*triplets))
    return KnowledgeGraph.from_triplets(h, r, t, n_items, n_entities, np.arange(n_relations))


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


class TestLoadInteractions:
    def test_deduplicates_and_densifies(self, tmp_path):
        path = tmp_path / "interactions.txt"
        path.write_text("10 5\n10 5\n\n20 7\n20 5\n")
        g = load_interactions(path)
        assert (g.n_users, g.n_items, g.n_interactions) == (2, 2, 3)
        assert g.user_ids.tolist() == [10, 20]
        assert g.item_ids.tolist() == [5, 7]
        assert g.user_map == {10: 0, 20: 1}

    def test_wrong_field_count_names_line(self, tmp_path):
        path = tmp_path / "interactions.txt"
        path.write_text("1 2\n3\n")
        with pytest.raises(GraphError, match=r":2: expected 2 integers"):
            load_interactions(path)

    def test_non_integer_rejected(self, tmp_path):
        path = tmp_path / "interactions.txt"
        path.write_text("a b\n")
        with pytest.raises(GraphError, match="expected integers"):
            load_interactions(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "interactions.txt"
        path.write_text("\n")
        with pytest.raises(GraphError, match="contains no interactions"):
            load_interactions(path)


class TestLoadTriplets:
    def test_relation_labels_densified(self, tmp_path):
        path = tmp_path / "kg.txt"
        path.write_text("0 7 1\n1 3 0\n0 7 1\n")
        kg = load_triplets(path)
        assert kg.n_triplets == 2
        assert kg.relation_ids.tolist() == [3, 7]
        assert kg.relations.tolist() == [1, 0]

    def test_unknown_item_rejected(self, tmp_path):
        path = tmp_path / "kg.txt"
        path.write_text("4 0 1\n5 0 1\n")
        with pytest.raises(GraphError, match=r"triplet \(5, 0, 1\) has a head that is not a known item"):
            load_triplets(path, item_map={4: 0})

    def test_unknown_item_dropped_with_warning(self, tmp_path, caplog):
        path = tmp_path / "kg.txt"
        path.write_text("4 0 1\n5 0 1\n")
        with caplog.at_level(logging.WARNING, logger="diffkg.graph"):
            kg = load_triplets(path, item_map={4: 0}, drop_unknown_items=True)
        assert kg.n_triplets == 1
        assert kg.heads.tolist() == [0]
        assert any(getattr(r, "event", None) == "triplets_dropped" for r in caplog.records)

    def test_entity_out_of_range(self, tmp_path):
        path = tmp_path / "kg.txt"
        path.write_text("0 0 1\n0 0 2\n")
        with pytest.raises(GraphError, match=r":2: triplet \(0, 0, 2\) has an entity id outside \[0, 2\)"):
            load_triplets(path, n_entities=2)

    def test_item_valued_tails_share_item_ids(self, tmp_path):
        path = tmp_path / "kg.txt"
        path.write_text("10 0 11\n10 0 500\n11 1 300\n")
        kg = load_triplets(path, item_map={10: 0, 11: 1})
        assert (kg.n_items, kg.n_entities, kg.item_entities) == (2, 4, 2)
        assert list(zip(kg.heads.tolist(), kg.tails.tolist())) == [(0, 1), (0, 3), (1, 2)]
        assert kg.item_tails.tolist() == [True, False, False]

    def test_dense_tails_below_item_count_are_items(self, tmp_path):
        path = tmp_path / "kg.txt"
        path.write_text("0 0 1\n1 0 5\n")
        kg = load_triplets(path)
        assert (kg.n_items, kg.n_entities, kg.item_entities) == (2, 6, 2)
        assert kg.item_tails.tolist() == [True, False]

    def test_entity_count_derived_with_item_map(self, tmp_path):
        path = tmp_path / "kg.txt"
        path.write_text("4 0 1\n")
        with pytest.raises(ValueError, match="n_entities is derived"):
            load_triplets(path, n_entities=3, item_map={4: 0})


# ---------------------------------------------------------------------------
# Knowledge graph
# ---------------------------------------------------------------------------


class TestKnowledgeGraph:
    def test_rows_are_binary_over_relations(self):
        kg = _kg([(0, 0, 1), (0, 1, 1), (1, 0, 2)], n_items=2, n_entities=3)
        assert kg.n_triplets == 3
        np.testing.assert_array_equal(kg.rows.toarray(), [[0, 1, 0], [0, 0, 1]])
        heads, tails = rows_to_triplets(kg)
        assert list(zip(heads.tolist(), tails.tolist())) == [(0, 1), (1, 2)]

    def test_sorted_by_item_entity_relation(self):
        kg = _kg([(1, 0, 0), (0, 1, 2), (0, 0, 2), (0, 1, 0)], n_items=2, n_entities=3)
        triplets = list(zip(kg.heads.tolist(), kg.tails.tolist(), kg.relations.tolist()))
        assert triplets == [(0, 0, 1), (0, 2, 0), (0, 2, 1), (1, 0, 0)]

    def test_most_frequent_relation_tie_goes_low(self):
        kg = _kg([(0, 1, 0), (0, 0, 1)], n_items=1, n_entities=2)
        assert kg.most_frequent_relation() == 0

    def test_head_out_of_range(self):
        with pytest.raises(GraphError, match="head out of range"):
            _kg([(3, 0, 0)], n_items=2, n_entities=2)

    def test_item_entities_bounded_by_item_count(self):
        with pytest.raises(GraphError, match="item_entities must be in"):
            KnowledgeGraph.from_triplets(
                np.array([0]), np.array([0]), np.array([0]), 1, 3, np.arange(1), item_entities=2
            )


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


class TestKCore:
    def _graph(self):
        return _graph([(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (3, 0), (3, 2)])

    def test_removal_cascades(self):
        filtered = k_core_filter(self._graph(), 2)
        assert (filtered.n_users, filtered.n_items) == (2, 2)
        assert filtered.user_ids.tolist() == [0, 1]
        assert filtered.user_degrees.min() >= 2
        assert filtered.item_degrees.min() >= 2

    def test_empty_result_rejected(self):
        with pytest.raises(GraphError, match="removed every interaction"):
            k_core_filter(self._graph(), 3)

    def test_k_must_be_positive(self):
        with pytest.raises(GraphError, match="k must be >= 1"):
            k_core_filter(self._graph(), 0)

    @staticmethod
    def _core_by_deletion(pairs, k):
        """Remove one under-degree node at a time until none is left."""
        neighbours = {}
        for u, i in pairs:
            neighbours.setdefault(("u", u), set()).add(("i", i))
            neighbours.setdefault(("i", i), set()).add(("u", u))
        pending = [node for node, links in neighbours.items() if len(links) < k]
        while pending:
            node = pending.pop()
            if node not in neighbours:
                continue
            for other in neighbours.pop(node):
                neighbours[other].discard(node)
                if len(neighbours[other]) < k:
                    pending.append(other)
        return {(u, i) for (side, u), links in neighbours.items() if side == "u" for _, i in links}

    def test_random_graphs_match_deletion_fixpoint(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            density, k = rng.uniform(0.02, 0.12), int(rng.integers(2, 6))
            users, items = np.nonzero(rng.random((100, 100)) < density)
            g = InteractionGraph.from_pairs(users, items, 100, 100)
            expected = self._core_by_deletion(zip(users.tolist(), items.tolist()), k)
            if not expected:
                with pytest.raises(GraphError, match="removed every interaction"):
                    k_core_filter(g, k)
                continue
            filtered = k_core_filter(g, k)
            kept = zip(filtered.user_ids[filtered.users].tolist(), filtered.item_ids[filtered.items].tolist())
            assert set(kept) == expected


class TestSplit:
    def _graph(self):
        pairs = [(0, i) for i in range(5)] + [(1, 0)] + [(2, 0), (2, 1)] + [(3, 0), (3, 1), (3, 2)]
        return _graph(pairs, n_items=5)

    def test_per_user_counts(self):
        data = split(self._graph(), 0.2, seed=1)
        assert data.test.user_degrees.tolist() == [1, 0, 0, 1]
        assert data.train.user_degrees.tolist() == [4, 1, 2, 2]
        assert data.test_users.tolist() == [0, 3]

    def test_partition_is_disjoint_and_complete(self):
        g = self._graph()
        data = split(g, 0.2, seed=1)
        assert not set(data.train.keys.tolist()) & set(data.test.keys.tolist())
        assert sorted(data.train.keys.tolist() + data.test.keys.tolist()) == g.keys.tolist()

    def test_same_seed_same_split(self):
        a, b = split(self._graph(), 0.2, seed=4), split(self._graph(), 0.2, seed=4)
        np.testing.assert_array_equal(a.test.keys, b.test.keys)

    def test_ratio_range(self):
        with pytest.raises(GraphError, match="test_ratio"):
            split(self._graph(), 1.0)


class TestAdjacency:
    def test_symmetric_normalisation(self):
        g = _graph([(0, 0), (0, 1), (1, 0)])
        adj = build_norm_adjacency(g).toarray()
        assert adj[0, 0] == pytest.approx(0.5)
        assert adj[0, 1] == pytest.approx(1.0 / np.sqrt(2.0))
        assert adj[1, 0] == pytest.approx(1.0 / np.sqrt(2.0))
        assert adj[1, 1] == 0.0


class TestBprSampling:
    def test_positives_observed_negatives_not(self):
        g = _graph([(0, 0), (0, 1), (1, 2), (2, 0), (2, 3)], n_items=5)
        triples = sample_bpr_triples(g, 200, seed=0)
        assert triples.shape == (200, 3)
        observed = set(zip(g.users.tolist(), g.items.tolist()))
        for u, i, j in triples.tolist():
            assert (u, i) in observed
            assert (u, j) not in observed

    def test_saturated_users_skipped(self, caplog):
        g = _graph([(0, 0), (0, 1), (1, 0)], n_items=2)
        with caplog.at_level(logging.WARNING, logger="diffkg.graph"):
            triples = sample_bpr_triples(g, 50, seed=0)
        assert set(triples[:, 0].tolist()) == {1}
        assert any(getattr(r, "event", None) == "bpr_users_skipped" for r in caplog.records)

    def test_no_eligible_user(self):
        g = _graph([(0, 0), (0, 1)], n_items=2)
        with pytest.raises(GraphError, match="no user"):
            sample_bpr_triples(g, 10, seed=0)

    def test_negatives_uniform_over_unobserved_items(self):
        g = _graph([(0, 0), (0, 1), (0, 2)], n_items=10)
        negatives = sample_bpr_triples(g, 100_000, seed=4)[:, 2]
        counts = np.bincount(negatives, minlength=10)
        assert counts[:3].sum() == 0
        statistic = chisquare(counts[3:]).statistic
        df = 6
        # Chi-square(df) has mean df and standard deviation sqrt(2 df).
        assert statistic <= df + 3 * np.sqrt(2 * df)


class TestNoise:
    def test_adds_rounded_share_of_new_triplets(self):
        kg = _kg([(0, 0, 0), (0, 1, 1), (1, 0, 2), (2, 1, 3)], n_items=3, n_entities=4)
        noisy = inject_noise(kg, 0.5, seed=2)
        assert noisy.n_triplets == 6
        original = set(zip(kg.heads.tolist(), kg.relations.tolist(), kg.tails.tolist()))
        assert original <= set(zip(noisy.heads.tolist(), noisy.relations.tolist(), noisy.tails.tolist()))

    def test_zero_ratio_is_identity(self):
        kg = _kg([(0, 0, 0)], n_items=1, n_entities=2)
        assert inject_noise(kg, 0.0) is kg

    def test_negative_ratio(self):
        kg = _kg([(0, 0, 0)], n_items=1, n_entities=2)
        with pytest.raises(GraphError, match="noise ratio"):
            inject_noise(kg, -0.1)


class TestProcessedDataset:
    def test_reload_keeps_ids_and_triplets(self, tmp_path):
        raw = tmp_path / "interactions.txt"
        raw.write_text(textwrap.dedent("""\
            100 7
            100 8
            100 9
            200 7
            200 9
        """))
        g = load_interactions(raw)
        data = split(g, 0.3, seed=0)
        kg = _kg([(0, 1, 0), (2, 0, 1)], n_items=g.n_items, n_entities=2)
        write_dataset(tmp_path / "processed", data, kg)

        loaded, loaded_kg = load_dataset(tmp_path / "processed")
        assert loaded.train.user_ids.tolist() == [100, 200]
        assert loaded.train.item_ids.tolist() == [7, 8, 9]
        np.testing.assert_array_equal(loaded.test.keys, data.test.keys)
        assert loaded_kg.heads.tolist() == [0, 2]
        assert loaded_kg.n_items == 3
        # Entities are written after the three items and read back as such.
        assert loaded_kg.tails.tolist() == [3, 4]
        assert loaded_kg.item_entities == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="train.txt"):
            load_dataset(tmp_path)
