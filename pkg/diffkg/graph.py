"""User-item interaction graph and knowledge-graph storage.

Loading, k-core filtering, train/test splitting, BPR triple sampling, and
the sparse matrices every other module consumes.  Both graph types are
immutable after construction, so concurrent reads are safe.

File formats
------------
- interactions: ``user item`` integer pairs, one per line
- triplets:     ``head relation tail`` integers, one per line; heads are items,
                and a tail equal to an item id is that item
- id maps:      ``original_id dense_id`` lines
"""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    """Raised for malformed, out-of-range or degenerate graph data."""


def _rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Interaction graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    """Bipartite user-item graph with binary interactions.

    ``users``/``items`` hold one entry per distinct interaction, sorted by
    ``(user, item)``.  ``user_ids``/``item_ids`` map dense ids back to the
    ids found in the source file.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray

    @classmethod
    def from_pairs(
        cls,
        users: np.ndarray,
        items: np.ndarray,
        n_users: int | None = None,
        n_items: int | None = None,
        user_ids: np.ndarray | None = None,
        item_ids: np.ndarray | None = None,
    ) -> InteractionGraph:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.shape != items.shape:
            raise GraphError(f"users and items differ in length: {users.shape} vs {items.shape}")
        n_users = int(users.max()) + 1 if n_users is None and users.size else (n_users or 0)
        n_items = int(items.max()) + 1 if n_items is None and items.size else (n_items or 0)
        if users.size and (users.min() < 0 or users.max() >= n_users):
            raise GraphError(f"user id out of range [0, {n_users})")
        if items.size and (items.min() < 0 or items.max() >= n_items):
            raise GraphError(f"item id out of range [0, {n_items})")

        keys = np.unique(users * max(n_items, 1) + items)
        return cls(
            n_users=n_users,
            n_items=n_items,
            users=keys // max(n_items, 1),
            items=keys % max(n_items, 1),
            user_ids=np.arange(n_users) if user_ids is None else np.asarray(user_ids),
            item_ids=np.arange(n_items) if item_ids is None else np.asarray(item_ids),
        )

    @property
    def n_interactions(self) -> int:
        return int(self.users.size)

    @cached_property
    def keys(self) -> np.ndarray:
        """Sorted ``user * n_items + item`` keys, for membership tests."""
        return self.users * max(self.n_items, 1) + self.items

    @cached_property
    def user_items(self) -> sp.csr_matrix:
        """|U| x |I| binary matrix; row u lists the items of user u."""
        values = np.ones(self.n_interactions)
        return sp.csr_matrix(
            (values, (self.users, self.items)), shape=(self.n_users, self.n_items)
        )

    @cached_property
    def item_users(self) -> sp.csr_matrix:
        """|I| x |U| binary matrix; row i lists the users of item i."""
        values = np.ones(self.n_interactions)
        return sp.csr_matrix(
            (values, (self.items, self.users)), shape=(self.n_items, self.n_users)
        )

    @cached_property
    def user_degrees(self) -> np.ndarray:
        return np.diff(self.user_items.indptr)

    @cached_property
    def item_degrees(self) -> np.ndarray:
        return np.diff(self.item_users.indptr)

    def items_of(self, user: int) -> np.ndarray:
        csr = self.user_items
        return csr.indices[csr.indptr[user]:csr.indptr[user + 1]]

    @property
    def item_map(self) -> dict[int, int]:
        """Original item id -> dense item id."""
        return {int(raw): dense for dense, raw in enumerate(self.item_ids)}

    @property
    def user_map(self) -> dict[int, int]:
        return {int(raw): dense for dense, raw in enumerate(self.user_ids)}


# ---------------------------------------------------------------------------
# Knowledge graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Triplet store linking items (heads) to entities (tails).

    Relations are stored as dense ids; ``relation_ids`` maps them back to
    the original labels.  Distinct ``(item, relation, entity)`` triplets are
    kept, sorted by ``(item, entity, relation)``, which is also the edge list
    the attention aggregator iterates over (one edge per distinct relation).

    Entity ids below ``item_entities`` are items: entity ``e`` is item ``e``
    and shares its embedding.  Loaded graphs put every item first
    (``item_entities == n_items``); synthetic graphs may use a pure entity
    space (``item_entities == 0``).
    """

    n_items: int
    n_entities: int
    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray
    relation_ids: np.ndarray
    item_entities: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.item_entities <= min(self.n_items, self.n_entities):
            raise GraphError(
                f"item_entities must be in [0, {min(self.n_items, self.n_entities)}], "
                f"got {self.item_entities}"
            )

    @classmethod
    def from_triplets(
        cls,
        heads: np.ndarray,
        relations: np.ndarray,
        tails: np.ndarray,
        n_items: int,
        n_entities: int,
        relation_ids: np.ndarray,
        item_entities: int = 0,
    ) -> KnowledgeGraph:
        heads = np.asarray(heads, dtype=np.int64)
        relations = np.asarray(relations, dtype=np.int64)
        tails = np.asarray(tails, dtype=np.int64)
        n_relations = max(len(relation_ids), 1)
        if heads.size:
            if heads.min() < 0 or heads.max() >= n_items:
                raise GraphError(f"triplet head out of range [0, {n_items})")
            if tails.min() < 0 or tails.max() >= n_entities:
                raise GraphError(f"triplet tail out of range [0, {n_entities})")
            if relations.min() < 0 or relations.max() >= n_relations:
                raise GraphError(f"triplet relation out of range [0, {n_relations})")
        keys = np.unique((heads * n_entities + tails) * n_relations + relations)
        pair, rel = np.divmod(keys, n_relations)
        head, tail = np.divmod(pair, n_entities)
        return cls(
            n_items=n_items,
            n_entities=n_entities,
            heads=head,
            relations=rel,
            tails=tail,
            relation_ids=np.asarray(relation_ids, dtype=np.int64),
            item_entities=item_entities,
        )

    @property
    def n_triplets(self) -> int:
        return int(self.heads.size)

    @property
    def n_relations(self) -> int:
        return int(self.relation_ids.size)

    @cached_property
    def rows(self) -> sp.csr_matrix:
        """|I| x |E| binary matrix of z_i rows: 1 iff item and entity are linked."""
        rows = sp.csr_matrix(
            (np.ones(self.n_triplets), (self.heads, self.tails)),
            shape=(self.n_items, self.n_entities),
        )
        rows.sum_duplicates()
        rows.data[:] = 1.0
        return rows

    @cached_property
    def item_tails(self) -> np.ndarray:
        """Mask over the triplets whose tail is an item."""
        return self.tails < self.item_entities

    @cached_property
    def neighbor_counts(self) -> np.ndarray:
        """Number of aggregator edges per item."""
        return np.bincount(self.heads, minlength=self.n_items)

    def most_frequent_relation(self) -> int:
        """Dense id of the most common relation; ties go to the lower id."""
        if self.n_triplets == 0:
            return 0
        return int(np.argmax(np.bincount(self.relations, minlength=self.n_relations)))

    def subset(self, mask: np.ndarray) -> KnowledgeGraph:
        """View keeping only the triplets where *mask* is true."""
        return KnowledgeGraph(
            n_items=self.n_items,
            n_entities=self.n_entities,
            heads=self.heads[mask],
            relations=self.relations[mask],
            tails=self.tails[mask],
            relation_ids=self.relation_ids,
            item_entities=self.item_entities,
        )


def rows_to_triplets(kg: KnowledgeGraph) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild the ``(item, entity)`` edge set from the z_i rows."""
    coo = kg.rows.tocoo()
    order = np.lexsort((coo.col, coo.row))
    return coo.row[order].astype(np.int64), coo.col[order].astype(np.int64)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _read_int_rows(path: Path, width: int, layout: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse *width* integers per non-blank line; return (rows, line numbers)."""
    values: list[list[int]] = []
    line_numbers: list[int] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != width:
                raise GraphError(
                    f"{path}:{lineno}: expected {width} integers ({layout}), got {line.strip()!r}"
                )
            try:
                values.append([int(f) for f in fields])
            except ValueError:
                raise GraphError(
                    f"{path}:{lineno}: expected integers ({layout}), got {line.strip()!r}"
                ) from None
            line_numbers.append(lineno)
    rows = np.asarray(values, dtype=np.int64).reshape(-1, width)
    return rows, np.asarray(line_numbers, dtype=np.int64)


def load_interactions(path: Path | str) -> InteractionGraph:
    """Load ``user item`` pairs, deduplicate, and reindex to dense ids.

    Raises:
        GraphError: on a malformed line (with its number) or an empty file.
    """
    path = Path(path)
    rows, _ = _read_int_rows(path, 2, "user item")
    if rows.shape[0] == 0:
        raise GraphError(f"{path} contains no interactions")

    user_ids, users = np.unique(rows[:, 0], return_inverse=True)
    item_ids, items = np.unique(rows[:, 1], return_inverse=True)
    graph = InteractionGraph.from_pairs(
        users, items, len(user_ids), len(item_ids), user_ids=user_ids, item_ids=item_ids
    )
    logger.info(
        "Loaded %d interactions (%d users, %d items) from %s",
        graph.n_interactions,
        graph.n_users,
        graph.n_items,
        path,
        extra={"event": "interactions_loaded"},
    )
    return graph


def load_triplets(
    path: Path | str,
    n_items: int | None = None,
    n_entities: int | None = None,
    item_map: Mapping[int, int] | None = None,
    drop_unknown_items: bool = False,
) -> KnowledgeGraph:
    """Load ``head relation tail`` triplets into a :class:`KnowledgeGraph`.

    Heads are items, and items come first in the entity id space: a tail
    equal to an item id is that item.  Without *item_map* ids are already
    dense, so tails below ``n_items`` are items and ``n_entities`` defaults
    to ``max(n_items, largest tail + 1)``.  With *item_map* heads and
    item-valued tails are translated from original to dense item ids, the
    other tails are numbered after the items in ascending original order,
    and ``n_entities`` is derived.  Heads missing from the map are an error
    unless *drop_unknown_items* is set (used after k-core filtering).
    Relation labels are densified into a vocabulary.

    Raises:
        GraphError: naming the offending triplet for any out-of-range id.
    """
    path = Path(path)
    if item_map is not None and n_entities is not None:
        raise ValueError("n_entities is derived from the triplets when item_map is given")
    rows, line_numbers = _read_int_rows(path, 3, "head relation tail")
    if rows.shape[0] == 0:
        raise GraphError(f"{path} contains no triplets")

    def _reject(k: int, reason: str) -> GraphError:
        h, r, t = (int(v) for v in rows[k])
        return GraphError(f"{path}:{line_numbers[k]}: triplet ({h}, {r}, {t}) {reason}")

    heads = rows[:, 0].copy()
    tails = rows[:, 2].copy()
    keep = np.ones(rows.shape[0], dtype=bool)
    if item_map is not None:
        for k, raw in enumerate(rows[:, 0]):
            dense = item_map.get(int(raw))
            if dense is None:
                if not drop_unknown_items:
                    raise _reject(k, "has a head that is not a known item")
                keep[k] = False
            else:
                heads[k] = dense
        dropped = int((~keep).sum())
        if dropped:
            logger.warning(
                "Dropped %d triplets whose item is not in the interaction graph",
                dropped,
                extra={"event": "triplets_dropped"},
            )
        if n_items is None:
            n_items = max(item_map.values()) + 1 if item_map else 0

        tail_items = np.array([item_map.get(int(raw), -1) for raw in rows[:, 2]], dtype=np.int64)
        entity = keep & (tail_items < 0)
        others, rank = np.unique(rows[entity, 2], return_inverse=True)
        tails[tail_items >= 0] = tail_items[tail_items >= 0]
        tails[entity] = n_items + rank
        n_entities = n_items + len(others)

    rows, heads, tails = rows[keep], heads[keep], tails[keep]
    line_numbers = line_numbers[keep]
    if rows.shape[0] == 0:
        raise GraphError(f"{path} has no triplets left after mapping items")

    n_items = int(heads.max()) + 1 if n_items is None else n_items
    n_entities = max(n_items, int(tails.max()) + 1) if n_entities is None else n_entities
    for k in range(rows.shape[0]):
        if not 0 <= heads[k] < n_items:
            raise _reject(k, f"has an item id outside [0, {n_items})")
        if not 0 <= tails[k] < n_entities:
            raise _reject(k, f"has an entity id outside [0, {n_entities})")

    relation_ids, relations = np.unique(rows[:, 1], return_inverse=True)
    kg = KnowledgeGraph.from_triplets(
        heads,
        relations,
        tails,
        n_items,
        n_entities,
        relation_ids,
        item_entities=min(n_items, n_entities),
    )
    logger.info(
        "Loaded %d triplets (%d entities, %d relations, %d item-valued tails) from %s",
        kg.n_triplets,
        kg.n_entities,
        kg.n_relations,
        int(kg.item_tails.sum()),
        path,
        extra={"event": "triplets_loaded"},
    )
    return kg


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def k_core_filter(g: InteractionGraph, k: int) -> InteractionGraph:
    """Drop users and items with degree < k until every survivor has degree >= k.

    Surviving ids are re-densified; ``user_ids``/``item_ids`` keep pointing
    at the original ids.
    """
    if k < 1:
        raise GraphError(f"k must be >= 1, got {k}")
    users, items = g.users, g.items
    while True:
        user_deg = np.bincount(users, minlength=g.n_users)
        item_deg = np.bincount(items, minlength=g.n_items)
        keep = (user_deg[users] >= k) & (item_deg[items] >= k)
        if keep.all():
            break
        users, items = users[keep], items[keep]
    if users.size == 0:
        raise GraphError(f"{k}-core filtering removed every interaction; try a smaller k")

    kept_users = np.unique(users)
    kept_items = np.unique(items)
    filtered = InteractionGraph.from_pairs(
        np.searchsorted(kept_users, users),
        np.searchsorted(kept_items, items),
        len(kept_users),
        len(kept_items),
        user_ids=g.user_ids[kept_users],
        item_ids=g.item_ids[kept_items],
    )
    logger.info(
        "%d-core kept %d/%d users, %d/%d items",
        k,
        filtered.n_users,
        g.n_users,
        filtered.n_items,
        g.n_items,
        extra={"event": "kcore_filtered"},
    )
    return filtered


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """Train/test partition of one interaction graph; both share id spaces."""

    train: InteractionGraph
    test: InteractionGraph
    seed: int | None = None

    @cached_property
    def test_users(self) -> np.ndarray:
        """Users with at least one held-out interaction."""
        return np.flatnonzero(self.test.user_degrees > 0)


def split(g: InteractionGraph, test_ratio: float = 0.2, seed: int | None = 0) -> DatasetSplit:
    """Hold out ``round(n * test_ratio)`` interactions per user, at least one kept in train."""
    if not 0.0 < test_ratio < 1.0:
        raise GraphError(f"test_ratio must be in (0, 1), got {test_ratio}")
    rng = np.random.default_rng(seed)
    train_u: list[np.ndarray] = []
    train_i: list[np.ndarray] = []
    test_u: list[np.ndarray] = []
    test_i: list[np.ndarray] = []
    for user in range(g.n_users):
        items = g.items_of(user)
        n = items.size
        if n == 0:
            continue
        n_test = min(n - 1, int(np.floor(n * test_ratio + 0.5)))
        shuffled = rng.permutation(items)
        test_u.append(np.full(n_test, user))
        test_i.append(shuffled[:n_test])
        train_u.append(np.full(n - n_test, user))
        train_i.append(shuffled[n_test:])

    def _build(us: list[np.ndarray], its: list[np.ndarray]) -> InteractionGraph:
        return InteractionGraph.from_pairs(
            np.concatenate(us) if us else np.empty(0, dtype=np.int64),
            np.concatenate(its) if its else np.empty(0, dtype=np.int64),
            g.n_users,
            g.n_items,
            user_ids=g.user_ids,
            item_ids=g.item_ids,
        )

    return DatasetSplit(train=_build(train_u, train_i), test=_build(test_u, test_i), seed=seed)


def build_norm_adjacency(train: InteractionGraph) -> sp.csr_matrix:
    """|U| x |I| matrix with entry ``1 / sqrt(|N_u| * |N_i|)`` per train edge.

    The item-to-user direction is the transpose.  Isolated nodes get empty rows.
    """
    du = train.user_degrees[train.users].astype(np.float64)
    di = train.item_degrees[train.items].astype(np.float64)
    weights = 1.0 / np.sqrt(du * di)
    return sp.csr_matrix((weights, (train.users, train.items)), shape=(train.n_users, train.n_items))


def sample_bpr_triples(
    g: InteractionGraph,
    batch_size: int,
    seed: int | np.random.Generator | None = None,
) -> np.ndarray:
    """Draw ``batch_size`` ``(u, i, j)`` rows with ``y_ui = 1`` and ``y_uj = 0``.

    Users are drawn uniformly among users with at least one interaction and
    at least one unobserved item; ``i`` is uniform over the user's items and
    ``j`` uniform over the rest (by rejection).
    """
    rng = _rng(seed)
    degrees = g.user_degrees
    saturated = np.flatnonzero(degrees >= g.n_items)
    if saturated.size:
        logger.warning(
            "Skipping %d users who interacted with every item",
            saturated.size,
            extra={"event": "bpr_users_skipped"},
        )
    eligible = np.flatnonzero((degrees > 0) & (degrees < g.n_items))
    if eligible.size == 0:
        raise GraphError("no user has both observed and unobserved items to sample from")

    users = rng.choice(eligible, size=batch_size)
    indptr, indices = g.user_items.indptr, g.user_items.indices
    offsets = (rng.random(batch_size) * degrees[users]).astype(np.int64)
    positives = indices[indptr[users] + offsets]

    negatives = rng.integers(0, g.n_items, size=batch_size)
    keys = g.keys
    while True:
        pair_keys = users * g.n_items + negatives
        slot = np.minimum(np.searchsorted(keys, pair_keys), keys.size - 1)
        clash = keys[slot] == pair_keys
        if not clash.any():
            break
        negatives[clash] = rng.integers(0, g.n_items, size=int(clash.sum()))
    return np.stack([users, positives, negatives], axis=1).astype(np.int64)


def inject_noise(
    kg: KnowledgeGraph,
    ratio: float,
    seed: int | np.random.Generator | None = None,
) -> KnowledgeGraph:
    """Add ``round(ratio * n_triplets)`` random triplets not already present."""
    if ratio < 0:
        raise GraphError(f"noise ratio must be >= 0, got {ratio}")
    n_new = int(np.floor(ratio * kg.n_triplets + 0.5))
    if n_new == 0:
        return kg
    n_relations = max(kg.n_relations, 1)
    capacity = kg.n_items * kg.n_entities * n_relations
    if kg.n_triplets + n_new > capacity:
        raise GraphError(f"cannot add {n_new} distinct triplets; only {capacity} exist")

    rng = _rng(seed)
    existing = set(((kg.heads * kg.n_entities + kg.tails) * n_relations + kg.relations).tolist())
    added: list[int] = []
    while len(added) < n_new:
        h = rng.integers(0, kg.n_items, size=n_new)
        t = rng.integers(0, kg.n_entities, size=n_new)
        r = rng.integers(0, n_relations, size=n_new)
        for key in ((h * kg.n_entities + t) * n_relations + r).tolist():
            if key not in existing:
                existing.add(key)
                added.append(key)
                if len(added) == n_new:
                    break

    new_keys = np.asarray(added, dtype=np.int64)
    pair, rel = np.divmod(new_keys, n_relations)
    head, tail = np.divmod(pair, kg.n_entities)
    noisy = KnowledgeGraph.from_triplets(
        np.concatenate([kg.heads, head]),
        np.concatenate([kg.relations, rel]),
        np.concatenate([kg.tails, tail]),
        kg.n_items,
        kg.n_entities,
        kg.relation_ids,
        kg.item_entities,
    )
    logger.info(
        "Injected %d noise triplets (ratio %.2f)",
        n_new,
        ratio,
        extra={"event": "kg_noise_injected"},
    )
    return noisy


# ---------------------------------------------------------------------------
# Writers and processed-dataset loader
# ---------------------------------------------------------------------------


def write_pairs(path: Path | str, users: np.ndarray, items: np.ndarray) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for u, i in zip(users.tolist(), items.tolist()):
            fh.write(f"{u} {i}\n")


def write_triplets(kg: KnowledgeGraph, path: Path | str) -> None:
    """Write ``head relation tail`` lines using the original relation labels.

    Tails are written items first: entities that are not items are shifted
    past the item ids so a reader cannot mistake them for items.
    """
    labels = kg.relation_ids[kg.relations] if kg.n_relations else kg.relations
    tails = np.where(kg.item_tails, kg.tails, kg.tails + kg.n_items - kg.item_entities)
    with Path(path).open("w", encoding="utf-8") as fh:
        for h, r, t in zip(kg.heads.tolist(), labels.tolist(), tails.tolist()):
            fh.write(f"{h} {r} {t}\n")


def write_id_map(path: Path | str, ids: np.ndarray) -> None:
    """Write ``original_id dense_id`` lines."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for dense, raw in enumerate(ids.tolist()):
            fh.write(f"{raw} {dense}\n")


def _read_id_map(path: Path) -> np.ndarray:
    rows, _ = _read_int_rows(path, 2, "original_id dense_id")
    ids = np.empty(rows.shape[0], dtype=np.int64)
    ids[rows[:, 1]] = rows[:, 0]
    return ids


def write_dataset(directory: Path | str, data: DatasetSplit, kg: KnowledgeGraph) -> None:
    """Write a processed dataset directory readable by :func:`load_dataset`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_pairs(directory / "train.txt", data.train.users, data.train.items)
    write_pairs(directory / "test.txt", data.test.users, data.test.items)
    write_triplets(kg, directory / "kg.txt")
    write_id_map(directory / "user_map.txt", data.train.user_ids)
    write_id_map(directory / "item_map.txt", data.train.item_ids)


def load_dataset(directory: Path | str) -> tuple[DatasetSplit, KnowledgeGraph]:
    """Read train.txt, test.txt, kg.txt and the id maps written by :func:`write_dataset`."""
    directory = Path(directory)
    for name in ("train.txt", "test.txt", "kg.txt", "user_map.txt", "item_map.txt"):
        if not (directory / name).exists():
            raise FileNotFoundError(f"Dataset file not found: {directory / name}")

    user_ids = _read_id_map(directory / "user_map.txt")
    item_ids = _read_id_map(directory / "item_map.txt")

    def _pairs(name: str) -> InteractionGraph:
        rows, _ = _read_int_rows(directory / name, 2, "user item")
        return InteractionGraph.from_pairs(
            rows[:, 0], rows[:, 1], len(user_ids), len(item_ids), user_ids, item_ids
        )

    data = DatasetSplit(train=_pairs("train.txt"), test=_pairs("test.txt"))
    kg = load_triplets(directory / "kg.txt", n_items=len(item_ids))
    return data, kg
