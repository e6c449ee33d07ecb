"""Pydantic records for the artefacts a run writes: metrics, reports, recommendations."""

from __future__ import annotations

from datetime import datetime, timezone
from typing import Literal

from pydantic import BaseModel, Field, field_validator


def _normalise_to_utc(v: datetime) -> datetime:
    """Normalise *v* to an aware UTC datetime; naive values are taken as UTC."""
    if v.tzinfo is None:
        return v.replace(tzinfo=timezone.utc)
    return v.astimezone(timezone.utc)


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


# ---------------------------------------------------------------------------
# Training metrics
# ---------------------------------------------------------------------------


class EpochMetrics(BaseModel):
    """Mean phase losses of one epoch plus the optional evaluation result.

    Phases that did not run (ablations) report ``0.0``.
    """

    epoch: int = Field(..., ge=1)
    elbo: float = 0.0
    ckgc: float = 0.0
    bpr: float = 0.0
    cl: float = 0.0
    recall: float | None = Field(None, ge=0.0, le=1.0)
    ndcg: float | None = Field(None, ge=0.0, le=1.0)

    @staticmethod
    def csv_header(cutoff: int) -> str:
        return f"epoch,elbo,ckgc,bpr,cl,recall@{cutoff},ndcg@{cutoff}"

    def csv_row(self) -> str:
        # repr keeps every bit of the loss so reruns can be compared byte for byte.
        losses = ",".join(repr(float(v)) for v in (self.elbo, self.ckgc, self.bpr, self.cl))
        return f"{self.epoch},{losses},{_fmt(self.recall)},{_fmt(self.ndcg)}"


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class GroupMetrics(BaseModel):
    """Metrics for one sparsity bucket of users or of items, by train degree."""

    side: Literal["user", "item"] = "user"
    group: int = Field(..., ge=0)
    min_degree: int = Field(..., ge=0)
    max_degree: int = Field(..., ge=0)
    n_users: int = Field(..., ge=0)
    recall: float = Field(..., ge=0.0, le=1.0)
    ndcg: float = Field(..., ge=0.0, le=1.0)


class EvaluationReport(BaseModel):
    cutoff: int = Field(..., ge=1, description="Top-N list length")
    n_users: int = Field(..., ge=0, description="Users with a non-empty test set")
    recall: float = Field(..., ge=0.0, le=1.0)
    ndcg: float = Field(..., ge=0.0, le=1.0)
    groups: list[GroupMetrics] = Field(default_factory=list)
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))

    @field_validator("timestamp")
    @classmethod
    def ensure_utc(cls, v: datetime) -> datetime:
        return _normalise_to_utc(v)


class Recommendation(BaseModel):
    """Top-N list for one user, in the ids of the source files."""

    user: int
    items: list[int]
    scores: list[float]
