"""Full-rank Recall@N / NDCG@N with train-item masking.

Every test user is scored against all items; items seen in training are
pushed to ``-inf`` before ranking and never returned.  Ties go to the lower
item id.  Metrics are macro-averaged over users with at least one test item,
and broken down by user and by item train degree.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from diffkg.graph import DatasetSplit, InteractionGraph
from diffkg.models import EvaluationReport, GroupMetrics

logger = logging.getLogger(__name__)


def recall_at_n(ranked: Iterable[int], relevant: Iterable[int], n: int) -> float:
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise ValueError("recall is undefined for an empty relevant set")
    top = [int(r) for r in list(ranked)[:n]]
    return len(relevant.intersection(top)) / len(relevant)


def ndcg_at_n(ranked: Iterable[int], relevant: Iterable[int], n: int) -> float:
    """Binary-relevance NDCG with gain ``1 / log2(position + 1)``, positions from 1."""
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise ValueError("NDCG is undefined for an empty relevant set")
    top = [int(r) for r in list(ranked)[:n]]
    dcg = sum(1.0 / np.log2(pos + 2) for pos, item in enumerate(top) if item in relevant)
    ideal = sum(1.0 / np.log2(pos + 2) for pos in range(min(len(relevant), n)))
    return float(dcg / ideal)


def rank_top_n(scores: np.ndarray, seen: sp.csr_matrix | None, n: int) -> np.ndarray:
    """Indices of the *n* best unseen items per row.

    Rows with fewer than *n* unseen items are padded with ``-1`` after their
    last unseen item.
    """
    scores = np.array(scores, dtype=np.float64)
    n = min(n, scores.shape[1])
    if seen is None:
        return np.argsort(-scores, axis=1, kind="stable")[:, :n]
    coo = sp.coo_matrix(seen)
    masked = np.zeros(scores.shape, dtype=bool)
    masked[coo.row, coo.col] = True
    scores[masked] = -np.inf
    top = np.argsort(-scores, axis=1, kind="stable")[:, :n]
    top[np.take_along_axis(masked, top, axis=1)] = -1
    return top


@dataclass
class RankingResult:
    """Per-user top-N lists and metrics for the users with test items.

    ``ranked`` rows are padded with ``-1`` when a user has fewer than
    ``cutoff`` unseen items.
    """

    cutoff: int
    users: np.ndarray
    ranked: np.ndarray
    recall: np.ndarray
    ndcg: np.ndarray

    @property
    def mean_recall(self) -> float:
        return float(self.recall.mean()) if self.recall.size else 0.0

    @property
    def mean_ndcg(self) -> float:
        return float(self.ndcg.mean()) if self.ndcg.size else 0.0


def _ranked_hits(ranked: np.ndarray, users: np.ndarray, test: InteractionGraph) -> np.ndarray:
    """``hits[r, k]`` is true iff ``ranked[r, k]`` is a test item of ``users[r]``."""
    if test.n_interactions == 0:
        return np.zeros(ranked.shape, dtype=bool)
    keys = users[:, None] * max(test.n_items, 1) + np.maximum(ranked, 0)
    slot = np.minimum(np.searchsorted(test.keys, keys), test.keys.size - 1)
    return (ranked >= 0) & (test.keys[slot] == keys)


def _recall_ndcg(hits: np.ndarray, n_relevant: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    discounts = 1.0 / np.log2(np.arange(2, n + 2))
    recall = hits.sum(axis=1) / n_relevant
    dcg = (hits * discounts[: hits.shape[1]]).sum(axis=1)
    ideal = np.cumsum(discounts)[np.minimum(n_relevant, n) - 1]
    return recall, dcg / ideal


def evaluate_full_rank(
    x_u: np.ndarray,
    x_i: np.ndarray,
    split: DatasetSplit,
    n: int = 20,
    batch_size: int = 1024,
) -> RankingResult:
    """Rank all items for every test user and score the top *n*."""
    users = split.test_users
    train_rows = split.train.user_items
    n_relevant = split.test.user_degrees[users]
    ranked = np.empty((users.size, min(n, split.train.n_items)), dtype=np.int64)
    recall = np.empty(users.size)
    ndcg = np.empty(users.size)

    for start in range(0, users.size, batch_size):
        batch = users[start:start + batch_size]
        rows = slice(start, start + batch.size)
        scores = np.asarray(x_u)[batch] @ np.asarray(x_i).T
        ranked[rows] = rank_top_n(scores, train_rows[batch], n)
        hits = _ranked_hits(ranked[rows], batch, split.test)
        recall[rows], ndcg[rows] = _recall_ndcg(hits, n_relevant[rows], n)

    return RankingResult(cutoff=n, users=users, ranked=ranked, recall=recall, ndcg=ndcg)


def _empty_group(side: str, index: int) -> GroupMetrics:
    return GroupMetrics(
        side=side, group=index, min_degree=0, max_degree=0, n_users=0, recall=0.0, ndcg=0.0
    )


def user_group_metrics(
    result: RankingResult, split: DatasetSplit, n_groups: int = 5
) -> list[GroupMetrics]:
    """Split evaluated users by train degree into near-equal groups."""
    degrees = split.train.user_degrees[result.users]
    order = np.lexsort((result.users, degrees))
    groups = []
    for index, members in enumerate(np.array_split(order, n_groups)):
        if members.size == 0:
            groups.append(_empty_group("user", index))
            continue
        groups.append(
            GroupMetrics(
                side="user",
                group=index,
                min_degree=int(degrees[members].min()),
                max_degree=int(degrees[members].max()),
                n_users=int(members.size),
                recall=float(result.recall[members].mean()),
                ndcg=float(result.ndcg[members].mean()),
            )
        )
    return groups


def item_group_metrics(
    result: RankingResult, split: DatasetSplit, n_groups: int = 5
) -> list[GroupMetrics]:
    """Split all items by train degree into near-equal groups.

    Each group is scored on its own test items: a user counts toward a
    group when some of their test items fall in it, and only those items
    are relevant for that user's recall and NDCG.
    """
    degrees = split.train.item_degrees
    order = np.lexsort((np.arange(degrees.size), degrees))
    test = split.test
    hits = _ranked_hits(result.ranked, result.users, test)
    groups = []
    for index, members in enumerate(np.array_split(order, n_groups)):
        if members.size == 0:
            groups.append(_empty_group("item", index))
            continue
        in_group = np.zeros(degrees.size, dtype=bool)
        in_group[members] = True
        per_user = np.bincount(test.users[in_group[test.items]], minlength=test.n_users)
        n_relevant = per_user[result.users]
        scored = n_relevant > 0
        recall = ndcg = np.zeros(0)
        if scored.any():
            group_hits = hits & in_group[np.maximum(result.ranked, 0)]
            recall, ndcg = _recall_ndcg(group_hits[scored], n_relevant[scored], result.cutoff)
        groups.append(
            GroupMetrics(
                side="item",
                group=index,
                min_degree=int(degrees[members].min()),
                max_degree=int(degrees[members].max()),
                n_users=int(scored.sum()),
                recall=float(recall.mean()) if recall.size else 0.0,
                ndcg=float(ndcg.mean()) if ndcg.size else 0.0,
            )
        )
    return groups


def group_metrics(result: RankingResult, split: DatasetSplit, n_groups: int = 5) -> list[GroupMetrics]:
    """User degree groups followed by item degree groups."""
    return user_group_metrics(result, split, n_groups) + item_group_metrics(result, split, n_groups)


def evaluate_by_group(
    x_u: np.ndarray,
    x_i: np.ndarray,
    split: DatasetSplit,
    n: int = 20,
    n_groups: int = 5,
) -> list[GroupMetrics]:
    return group_metrics(evaluate_full_rank(x_u, x_i, split, n), split, n_groups)


def build_report(
    result: RankingResult,
    groups: list[GroupMetrics] | None = None,
) -> EvaluationReport:
    return EvaluationReport(
        cutoff=result.cutoff,
        n_users=int(result.users.size),
        recall=result.mean_recall,
        ndcg=result.mean_ndcg,
        groups=groups or [],
    )


def write_report(report: EvaluationReport, path: Path | str) -> Path:
    """CSV with one row per user group, one per item group, and a final ``all`` row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = report.cutoff
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["side", "group", "min_degree", "max_degree", "n_users", f"recall@{n}", f"ndcg@{n}"]
        )
        for g in report.groups:
            writer.writerow(
                [g.side, g.group, g.min_degree, g.max_degree, g.n_users, f"{g.recall:.6f}", f"{g.ndcg:.6f}"]
            )
        writer.writerow(
            ["all", "", "", "", report.n_users, f"{report.recall:.6f}", f"{report.ndcg:.6f}"]
        )
    return path


def format_summary(report: EvaluationReport) -> str:
    n = report.cutoff
    lines = [f"Recall@{n}={report.recall:.4f} NDCG@{n}={report.ndcg:.4f} over {report.n_users} users"]
    for g in report.groups:
        lines.append(
            f"  {g.side} group {g.group} (degree {g.min_degree}-{g.max_degree}, {g.n_users} users): "
            f"Recall@{n}={g.recall:.4f} NDCG@{n}={g.ndcg:.4f}"
        )
    return "\n".join(lines)
