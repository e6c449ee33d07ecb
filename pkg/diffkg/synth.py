"""Synthetic datasets with known structure.

``planted``      20 items x 15 entities; every item links to the 3 entities of
                 its block plus 2 random noise entities.  No interactions.
``communities``  200 users and 100 items in 2 latent communities; the KG links
                 items to entities of their own community, then 30% random
                 triplets are injected.

Written files number entities after the items, so entity ``e`` becomes
``n_items + e`` on disk.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from diffkg.graph import (
    InteractionGraph,
    KnowledgeGraph,
    inject_noise,
    write_pairs,
    write_triplets,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PlantedKG:
    kg: KnowledgeGraph
    true_entities: np.ndarray  # items x per_block, sorted

    def precision_at_k(self, rebuilt: KnowledgeGraph) -> float:
        """Share of rebuilt item-entity pairs that are planted ones."""
        truth = set(
            (item, int(e)) for item, row in enumerate(self.true_entities) for e in row
        )
        pairs = set(zip(rebuilt.heads.tolist(), rebuilt.tails.tolist()))
        if not pairs:
            return 0.0
        return len(pairs & truth) / len(pairs)


def make_planted_kg(
    seed: int | None = 0,
    n_items: int = 20,
    n_blocks: int = 5,
    per_block: int = 3,
    noise_per_item: int = 2,
    n_relations: int = 2,
) -> PlantedKG:
    rng = np.random.default_rng(seed)
    n_entities = n_blocks * per_block
    block = np.arange(n_items) * n_blocks // n_items
    true_entities = block[:, None] * per_block + np.arange(per_block)[None, :]

    heads, tails = [], []
    for item in range(n_items):
        others = np.setdiff1d(np.arange(n_entities), true_entities[item])
        noise = rng.choice(others, size=noise_per_item, replace=False)
        linked = np.concatenate([true_entities[item], noise])
        heads.extend([item] * linked.size)
        tails.extend(linked.tolist())
    heads_arr = np.asarray(heads, dtype=np.int64)
    relations = rng.integers(0, n_relations, size=heads_arr.size)
    kg = KnowledgeGraph.from_triplets(
        heads_arr, relations, np.asarray(tails), n_items, n_entities, np.arange(n_relations)
    )
    return PlantedKG(kg=kg, true_entities=true_entities)


def make_community_dataset(
    seed: int | None = 0,
    n_users: int = 200,
    n_items: int = 100,
    n_communities: int = 2,
    per_user: int = 10,
    affinity: float = 0.95,
    zipf_exponent: float = 1.2,
    n_entities: int = 20,
    entities_per_item: int = 3,
    n_relations: int = 3,
    noise_ratio: float = 0.3,
) -> tuple[InteractionGraph, KnowledgeGraph]:
    """Community-structured interactions plus a community-aligned, partly noisy KG."""
    rng = np.random.default_rng(seed)
    user_comm = np.arange(n_users) * n_communities // n_users
    item_comm = np.arange(n_items) * n_communities // n_items
    entity_comm = np.arange(n_entities) * n_communities // n_entities

    # Zipf popularity by rank inside each community.
    popularity = np.empty(n_items)
    for c in range(n_communities):
        members = np.flatnonzero(item_comm == c)
        popularity[members] = 1.0 / np.arange(1, members.size + 1) ** zipf_exponent

    users, items = [], []
    for u in range(n_users):
        inside = item_comm == user_comm[u]
        weights = np.where(
            inside,
            affinity * popularity / popularity[inside].sum(),
            (1.0 - affinity) * popularity / popularity[~inside].sum(),
        )
        chosen = rng.choice(n_items, size=per_user, replace=False, p=weights / weights.sum())
        users.extend([u] * per_user)
        items.extend(chosen.tolist())
    graph = InteractionGraph.from_pairs(np.asarray(users), np.asarray(items), n_users, n_items)

    heads, tails = [], []
    for i in range(n_items):
        pool = np.flatnonzero(entity_comm == item_comm[i])
        linked = rng.choice(pool, size=entities_per_item, replace=False)
        heads.extend([i] * entities_per_item)
        tails.extend(linked.tolist())
    relations = rng.integers(0, n_relations, size=len(heads))
    clean = KnowledgeGraph.from_triplets(
        np.asarray(heads), relations, np.asarray(tails), n_items, n_entities, np.arange(n_relations)
    )
    return graph, inject_noise(clean, noise_ratio, rng)


def write_synthetic(
    directory: Path | str,
    kind: str = "communities",
    seed: int | None = 0,
    noise_ratio: float | None = None,
) -> list[Path]:
    """Write raw input files for ``kind``; returns the paths written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if kind == "planted":
        planted = make_planted_kg(seed)
        write_triplets(planted.kg, directory / "kg.txt")
        truth = directory / "planted_truth.txt"
        rows = np.repeat(np.arange(planted.true_entities.shape[0]), planted.true_entities.shape[1])
        write_pairs(truth, rows, planted.true_entities.reshape(-1) + planted.kg.n_items)
        written += [directory / "kg.txt", truth]
    elif kind == "communities":
        kwargs = {} if noise_ratio is None else {"noise_ratio": noise_ratio}
        graph, kg = make_community_dataset(seed, **kwargs)
        write_pairs(directory / "interactions.txt", graph.users, graph.items)
        write_triplets(kg, directory / "kg.txt")
        written += [directory / "interactions.txt", directory / "kg.txt"]
    else:
        raise ValueError(f"synth kind must be 'planted' or 'communities', got {kind!r}")
    logger.info(
        "Wrote %s dataset (seed %s) to %s",
        kind,
        seed,
        directory,
        extra={"event": "synth_written"},
    )
    return written
