"""Gaussian diffusion over the binary item-entity rows of the knowledge graph.

Each item row ``z_i`` (1 where the item links to an entity) is the clean
state ``x_0``.  Training corrupts rows with the closed-form forward process
and fits an MLP that predicts ``x_0`` from ``(x_t, t)``.  Inference runs the
deterministic reverse chain (posterior means, no sampled noise) and keeps
the ``k`` highest-scoring entities per item to rebuild a denoised KG.

Public surface
--------------
- :class:`NoiseSchedule`, :func:`build_schedule`
- :class:`Denoiser`, :func:`step_embedding`, :func:`predict_x0`
- :class:`DiffusionBatch`, :func:`make_batch`, :func:`q_sample`
- :func:`elbo_terms`, :func:`elbo_loss`, :func:`posterior_mean`
- :func:`reverse_generate`, :func:`topk_rebuild`, :func:`ckgc_loss`
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from diffkg import numgrad as ng
from diffkg.aggregator import xavier_uniform
from diffkg.graph import GraphError, KnowledgeGraph
from diffkg.numgrad import NumericalError, ShapeError, Tensor

logger = logging.getLogger(__name__)


class ScheduleError(ValueError):
    """Raised for out-of-range noise schedule parameters."""


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step schedule arrays of length ``steps + 1``.

    Index ``t`` holds the value for step ``t``; index 0 is the clean state
    (``alpha_bar[0] == 1``, ``beta[0] == 0``).
    """

    steps: int
    inference_steps: int
    scale: float
    noise_min: float
    noise_max: float
    alpha_bar: np.ndarray
    beta: np.ndarray

    @property
    def one_minus_alpha_bar(self) -> np.ndarray:
        return 1.0 - self.alpha_bar

    @property
    def alpha(self) -> np.ndarray:
        out = np.ones_like(self.alpha_bar)
        out[1:] = self.alpha_bar[1:] / self.alpha_bar[:-1]
        return out

    @property
    def posterior_variance(self) -> np.ndarray:
        out = np.zeros_like(self.alpha_bar)
        out[1:] = self.beta[1:] * (1.0 - self.alpha_bar[:-1]) / (1.0 - self.alpha_bar[1:])
        return out

    @property
    def posterior_coef_x0(self) -> np.ndarray:
        out = np.zeros_like(self.alpha_bar)
        out[1:] = np.sqrt(self.alpha_bar[:-1]) * self.beta[1:] / (1.0 - self.alpha_bar[1:])
        return out

    @property
    def posterior_coef_xt(self) -> np.ndarray:
        out = np.zeros_like(self.alpha_bar)
        out[1:] = (
            np.sqrt(self.alpha[1:]) * (1.0 - self.alpha_bar[:-1]) / (1.0 - self.alpha_bar[1:])
        )
        return out

    def elbo_weights(self, t: np.ndarray | int) -> np.ndarray:
        """Weight of the squared error at step *t*; steps equal to 1 get weight 1."""
        t = np.asarray(t, dtype=np.int64)
        prev = self.alpha_bar[np.maximum(t - 1, 0)]
        cur = self.alpha_bar[t]
        with np.errstate(divide="ignore", invalid="ignore"):
            weighted = 0.5 * (prev / (1.0 - prev) - cur / (1.0 - cur))
        return np.where(t >= 2, weighted, 1.0)


def build_schedule(
    steps: int,
    inference_steps: int = 0,
    scale: float = 0.1,
    noise_min: float = 1e-4,
    noise_max: float = 1e-2,
) -> NoiseSchedule:
    """Linear schedule: ``1 - alpha_bar_t = scale * (min + (t-1)/(T-1) * (max - min))``.

    With ``steps == 1`` only the ``t = 1`` endpoint ``scale * min`` exists.

    Raises:
        ScheduleError: naming the parameter that is out of range.
    """
    if steps < 1:
        raise ScheduleError(f"steps must be >= 1, got {steps}")
    if not 0 <= inference_steps <= steps:
        raise ScheduleError(f"inference_steps must be in [0, {steps}], got {inference_steps}")
    if not 0.0 < scale <= 1.0:
        raise ScheduleError(f"noise_scale must be in (0, 1], got {scale}")
    if not 0.0 < noise_min < noise_max < 1.0:
        raise ScheduleError(
            f"noise bounds must satisfy 0 < noise_min < noise_max < 1, "
            f"got noise_min={noise_min}, noise_max={noise_max}"
        )

    t = np.arange(1, steps + 1, dtype=np.float64)
    fraction = (t - 1.0) / (steps - 1) if steps > 1 else np.zeros(1)
    noise = scale * (noise_min + fraction * (noise_max - noise_min))

    alpha_bar = np.ones(steps + 1, dtype=np.float64)
    alpha_bar[1:] = 1.0 - noise
    beta = np.zeros(steps + 1, dtype=np.float64)
    beta[1:] = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    return NoiseSchedule(
        steps=steps,
        inference_steps=inference_steps,
        scale=scale,
        noise_min=noise_min,
        noise_max=noise_max,
        alpha_bar=alpha_bar,
        beta=beta,
    )


def _per_row(values: np.ndarray, t: np.ndarray | int, ndim: int) -> np.ndarray:
    picked = values[np.asarray(t, dtype=np.int64)]
    if picked.ndim == 0:
        return picked
    return picked.reshape(picked.shape + (1,) * (ndim - 1))


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------


def step_embedding(t: np.ndarray | int, dim: int = 10, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of integer steps, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / max(half, 1))
    angles = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(angles), np.sin(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.size, 1))], axis=1)
    return emb


@dataclass
class Denoiser:
    """MLP mapping ``[x_t || emb(t)]`` to a predicted clean row of width ``n_entities``."""

    n_entities: int
    step_dim: int
    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)
    slope: float = 0.2

    @classmethod
    def init(
        cls,
        n_entities: int,
        rng: np.random.Generator,
        hidden_dims: Sequence[int] = (1024,),
        step_dim: int = 10,
        slope: float = 0.2,
        zero_last: bool = False,
    ) -> Denoiser:
        widths = [n_entities + step_dim, *hidden_dims, n_entities]
        weights: list[Tensor] = []
        biases: list[Tensor] = []
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = k == len(widths) - 2
            w = np.zeros((fan_in, fan_out)) if last and zero_last else xavier_uniform(rng, fan_in, fan_out)
            weights.append(ng.parameter(w, name=f"denoiser.weight{k}"))
            biases.append(ng.parameter(np.zeros(fan_out), name=f"denoiser.bias{k}"))
        return cls(n_entities=n_entities, step_dim=step_dim, weights=weights, biases=biases, slope=slope)

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def __call__(self, x_t: Tensor | np.ndarray, t: np.ndarray | int) -> Tensor:
        x_t = x_t if isinstance(x_t, Tensor) else ng.tensor(x_t)
        if x_t.ndim != 2 or x_t.shape[1] != self.n_entities:
            raise ShapeError(
                f"denoiser expects rows of width {self.n_entities}, got shape {x_t.shape}"
            )
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x_t.shape[0],))
        h = ng.concat([x_t, ng.tensor(step_embedding(t, self.step_dim))], axis=1)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ng.matmul(h, w) + b
            if k < last:
                h = ng.leaky_relu(h, self.slope)
        return h


def predict_x0(x_t: Tensor | np.ndarray, t: np.ndarray | int, denoiser: Denoiser) -> Tensor:
    return denoiser(x_t, t)


# ---------------------------------------------------------------------------
# Forward process and training loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiffusionBatch:
    """Item rows with their sampled steps (``1..T``) and noise draws."""

    items: np.ndarray
    x0: np.ndarray
    t: np.ndarray
    noise: np.ndarray


def make_batch(
    kg: KnowledgeGraph,
    items: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> DiffusionBatch:
    items = np.asarray(items, dtype=np.int64)
    x0 = kg.rows[items].toarray()
    return DiffusionBatch(
        items=items,
        x0=x0,
        t=rng.integers(1, schedule.steps + 1, size=items.size),
        noise=rng.standard_normal(x0.shape),
    )


def q_sample(
    x0: np.ndarray,
    t: np.ndarray | int,
    noise: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Closed-form forward sample ``sqrt(ab_t) x0 + sqrt(1 - ab_t) noise``."""
    x0 = np.asarray(x0)
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {noise.shape} does not match rows {x0.shape}")
    keep = _per_row(np.sqrt(schedule.alpha_bar), t, x0.ndim)
    spread = _per_row(np.sqrt(1.0 - schedule.alpha_bar), t, x0.ndim)
    return keep * x0 + spread * noise


def elbo_terms(
    batch: DiffusionBatch,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
) -> tuple[Tensor, Tensor]:
    """Return the weighted reconstruction loss and the ``x_0`` prediction."""
    x_t = q_sample(batch.x0, batch.t, batch.noise, schedule)
    prediction = predict_x0(x_t, batch.t, denoiser)
    per_row = ng.squared_error(prediction, ng.tensor(batch.x0), axis=1)
    loss = ng.mean(per_row * ng.tensor(schedule.elbo_weights(batch.t)))
    return loss, prediction


def elbo_loss(batch: DiffusionBatch, denoiser: Denoiser, schedule: NoiseSchedule) -> Tensor:
    loss, _ = elbo_terms(batch, denoiser, schedule)
    if not np.isfinite(loss.item()):
        raise NumericalError(f"ELBO loss is not finite ({loss.item()})")
    return loss


# ---------------------------------------------------------------------------
# Reverse process
# ---------------------------------------------------------------------------


def posterior_mean(
    x_t: np.ndarray,
    x0_hat: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Mean of ``q(x_{t-1} | x_t, x_0)`` with ``x_0`` replaced by its prediction."""
    if not 1 <= t <= schedule.steps:
        raise ScheduleError(f"t must be in [1, {schedule.steps}], got {t}")
    return schedule.posterior_coef_x0[t] * x0_hat + schedule.posterior_coef_xt[t] * x_t


def reverse_generate(
    x0: np.ndarray,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    rng: np.random.Generator | None = None,
    batch_size: int | None = None,
) -> np.ndarray:
    """Denoise item rows with the deterministic reverse chain.

    Rows are first corrupted to step ``inference_steps`` (no corruption when
    it is 0); the result is then walked from ``t = steps`` down to 1 using
    posterior means only.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    batch_size = batch_size or max(x0.shape[0], 1)
    out = np.empty_like(x0)
    with ng.no_grad():
        for start in range(0, x0.shape[0], batch_size):
            rows = x0[start:start + batch_size]
            if schedule.inference_steps > 0:
                rng = rng if rng is not None else np.random.default_rng()
                rows = q_sample(rows, schedule.inference_steps, rng.standard_normal(rows.shape), schedule)
            x = rows
            for t in range(schedule.steps, 0, -1):
                x0_hat = predict_x0(x, t, denoiser).data.astype(np.float64)
                x = posterior_mean(x, x0_hat, t, schedule)
            out[start:start + batch_size] = x
    return out


def topk_rebuild(scores: np.ndarray, k: int, kg: KnowledgeGraph) -> KnowledgeGraph:
    """Keep the *k* best-scoring entities of every item.

    Ties go to the lower entity id.  A rebuilt ``(item, entity)`` pair keeps
    every relation it had in *kg*; new pairs get the most frequent relation.

    Raises:
        GraphError: if ``k`` is not in ``[1, n_entities]`` or *scores* has the
            wrong shape.
    """
    scores = np.asarray(scores)
    if scores.shape != (kg.n_items, kg.n_entities):
        raise GraphError(
            f"scores have shape {scores.shape}, expected {(kg.n_items, kg.n_entities)}"
        )
    if not 1 <= k <= kg.n_entities:
        raise GraphError(f"k must be in [1, {kg.n_entities}], got {k}")

    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    heads = np.repeat(np.arange(kg.n_items, dtype=np.int64), k)
    tails = top.reshape(-1).astype(np.int64)

    original = kg.heads * kg.n_entities + kg.tails
    wanted = heads * kg.n_entities + tails
    lo = np.searchsorted(original, wanted, side="left")
    hi = np.searchsorted(original, wanted, side="right")
    counts = hi - lo
    known = counts > 0

    copied = np.repeat(lo[known], counts[known])
    copied += np.arange(copied.size) - np.repeat(np.cumsum(counts[known]) - counts[known], counts[known])
    fresh = ~known
    fallback = kg.most_frequent_relation()

    rebuilt = KnowledgeGraph.from_triplets(
        np.concatenate([kg.heads[copied], heads[fresh]]),
        np.concatenate([kg.relations[copied], np.full(int(fresh.sum()), fallback)]),
        np.concatenate([kg.tails[copied], tails[fresh]]),
        kg.n_items,
        kg.n_entities,
        kg.relation_ids,
        kg.item_entities,
    )
    logger.debug(
        "Rebuilt KG: %d pairs kept, %d new",
        int(known.sum()),
        int(fresh.sum()),
        extra={"event": "kg_rebuilt"},
    )
    return rebuilt


# ---------------------------------------------------------------------------
# Collaborative KG convolution
# ---------------------------------------------------------------------------


def ckgc_loss(
    interactions: sp.spmatrix,
    x0_hat: Tensor,
    user_emb: Tensor | np.ndarray,
    item_emb: Tensor | np.ndarray,
) -> Tensor:
    """Tie predicted item-entity rows to interaction-derived item embeddings.

    ``interactions`` is the ``|U| x B`` slice of the train matrix for the B
    items in ``x0_hat`` (``B x |E|``).  User-entity affinities carry user
    embeddings onto entities, the predicted rows carry them back onto items,
    and the result is compared with ``item_emb`` (``B x d``) by mean squared
    L2 distance.
    """
    user_emb = user_emb if isinstance(user_emb, Tensor) else ng.tensor(user_emb)
    item_emb = item_emb if isinstance(item_emb, Tensor) else ng.tensor(item_emb)
    n_users, n_items = interactions.shape
    if x0_hat.ndim != 2 or x0_hat.shape[0] != n_items:
        raise ShapeError(
            f"ckgc: interaction matrix {interactions.shape} does not match predictions {x0_hat.shape}"
        )
    if user_emb.shape[0] != n_users:
        raise ShapeError(
            f"ckgc: interaction matrix {interactions.shape} does not match user embeddings {user_emb.shape}"
        )
    if item_emb.shape != (n_items, user_emb.shape[1]):
        raise ShapeError(
            f"ckgc: item embeddings {item_emb.shape} do not match {(n_items, user_emb.shape[1])}"
        )

    user_entity = ng.spmm(sp.csr_matrix(interactions), x0_hat)
    entity_emb = ng.matmul(ng.row_normalize(ng.transpose(user_entity)), user_emb)
    rebuilt = ng.matmul(ng.row_normalize(x0_hat), entity_emb)
    return ng.mean(ng.squared_error(rebuilt, item_emb, axis=1))
