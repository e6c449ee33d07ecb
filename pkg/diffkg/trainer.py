"""Joint optimisation of the diffusion model and the recommender.

One epoch runs three phases:

1. ``kgdm``    minimise ``(1 - lambda0) * ELBO + lambda0 * CKGC`` over item-row
               mini-batches (denoiser parameters only)
2. ``rebuild`` reverse inference plus top-k to refresh the denoised KG
3. ``rec``     minimise ``BPR + lambda1 * InfoNCE + lambda2 * ||Theta||^2`` over
               BPR batches (embedding and attention parameters only)

``disable_dm`` skips phases 1 and 2 and contrasts against the raw KG;
``disable_cl`` drops the InfoNCE term; ``disable_ckgc`` forces ``lambda0 = 0``.
"""

from __future__ import annotations

import logging
import queue
import threading
from collections.abc import Callable
from pathlib import Path

import numpy as np

from diffkg import numgrad as ng
from diffkg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from diffkg.config import HyperParams
from diffkg.contrast import build_views, contrastive_loss
from diffkg.diffusion import ckgc_loss, elbo_terms, make_batch
from diffkg.evaluator import RankingResult, evaluate_full_rank
from diffkg.graph import DatasetSplit, KnowledgeGraph, sample_bpr_triples
from diffkg.model import DiffKGModel
from diffkg.models import EpochMetrics
from diffkg.numgrad import Adam, AdamState, NumericalError, Tensor

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Loss combinations
# ---------------------------------------------------------------------------


def combine_kgdm(elbo: Tensor | float, ckgc: Tensor | float, lambda0: float) -> Tensor | float:
    return (1.0 - lambda0) * elbo + lambda0 * ckgc


def combine_rec(
    bpr: Tensor | float,
    cl: Tensor | float,
    l2: Tensor | float,
    lambda1: float,
    lambda2: float,
) -> Tensor | float:
    return bpr + lambda1 * cl + lambda2 * l2


def bpr_loss(positive: Tensor, negative: Tensor) -> Tensor:
    """Mean of ``-log sigmoid(pos - neg)`` over the triples."""
    return ng.mean(-ng.log_sigmoid(positive - negative))


def triple_scores(x_u: Tensor, x_i: Tensor, triples: np.ndarray) -> tuple[Tensor, Tensor]:
    users = ng.gather_rows(x_u, triples[:, 0])
    positive = ng.sum(users * ng.gather_rows(x_i, triples[:, 1]), axis=1)
    negative = ng.sum(users * ng.gather_rows(x_i, triples[:, 2]), axis=1)
    return positive, negative


def _ensure_finite(value: float, epoch: int, phase: str, what: str) -> None:
    if not np.isfinite(value):
        raise NumericalError(f"epoch {epoch}, phase {phase}: {what} is not finite ({value})")


# ---------------------------------------------------------------------------
# Generator state
# ---------------------------------------------------------------------------

_WORD = 0xFFFFFFFF


def pack_rng_state(rng: np.random.Generator) -> np.ndarray:
    """PCG64 state as ten 32-bit words held exactly in float64.

    Layout: four words of the state, four of the increment (least
    significant first), then ``has_uint32`` and ``uinteger``.
    """
    state = rng.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise TypeError(f"cannot pack {state['bit_generator']} state")
    words = [(state["state"][key] >> (32 * k)) & _WORD for key in ("state", "inc") for k in range(4)]
    words += [state["has_uint32"], state["uinteger"]]
    return np.array(words, dtype=np.float64)


def unpack_rng_state(rng: np.random.Generator, words: np.ndarray) -> None:
    """Restore a state written by :func:`pack_rng_state` into *rng*."""
    w = [int(x) for x in words]
    if len(w) != 10 or any(not 0 <= x <= _WORD for x in w):
        raise ValueError("generator state must be ten 32-bit words")
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {
            "state": sum(x << (32 * k) for k, x in enumerate(w[0:4])),
            "inc": sum(x << (32 * k) for k, x in enumerate(w[4:8])),
        },
        "has_uint32": w[8],
        "uinteger": w[9],
    }


# ---------------------------------------------------------------------------
# Batch prefetching
# ---------------------------------------------------------------------------


class BatchPrefetcher:
    """Produce BPR batches on a background thread into a bounded queue.

    A single producer draws from *seed* in order, so the batch sequence is
    identical across runs with the same seed.  With *count* the producer
    stops after that many batches, leaving a shared generator exactly
    ``count`` draws further on.
    """

    def __init__(
        self,
        sample: Callable[[np.random.Generator], np.ndarray],
        seed: int | np.random.SeedSequence | np.random.Generator,
        depth: int = 4,
        count: int | None = None,
    ) -> None:
        self._sample = sample
        self._rng = np.random.default_rng(seed)
        self._count = count
        self._queue: queue.Queue[np.ndarray | BaseException] = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="bpr-prefetch", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        produced = 0
        while not self._stop.is_set() and (self._count is None or produced < self._count):
            try:
                item: np.ndarray | BaseException = self._sample(self._rng)
            except BaseException as exc:  # handed to the consumer
                item = exc
            while not self._stop.is_set():
                try:
                    self._queue.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if isinstance(item, BaseException):
                return
            produced += 1

    def get(self) -> np.ndarray:
        item = self._queue.get()
        if isinstance(item, BaseException):
            raise item
        return item

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5.0)


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


class Trainer:
    """Owns the model, both optimisers and the current denoised KG."""

    def __init__(
        self,
        model: DiffKGModel,
        data: DatasetSplit,
        kg: KnowledgeGraph,
        hp: HyperParams,
        eval_every: int = 1,
    ) -> None:
        self.model = model
        self.data = data
        self.kg = kg
        self.hp = hp
        self.eval_every = eval_every
        self.epoch = 0
        self.kg_denoised = kg

        train_seq, sample_seq = np.random.SeedSequence(hp.seed).spawn(2)
        self.rng = np.random.default_rng(train_seq)
        self._sample_rng = np.random.default_rng(sample_seq)
        self._prefetcher: BatchPrefetcher | None = None

        self.rec_opt = Adam(model.rec_parameters(), lr=hp.rec_lr)
        self.diff_opt = Adam(model.diffusion_parameters(), lr=hp.diffusion_lr)
        self.interactions = data.train.user_items.tocsc()

    @property
    def lambda0(self) -> float:
        return 0.0 if self.hp.disable_ckgc else self.hp.lambda0

    # ------------------------------------------------------------------
    # Losses
    # ------------------------------------------------------------------

    def kgdm_loss(self, items: np.ndarray) -> tuple[Tensor, float, float]:
        """Diffusion loss on one item batch; returns (total, elbo, ckgc)."""
        batch = make_batch(self.kg, items, self.model.schedule, self.rng)
        elbo, prediction = elbo_terms(batch, self.model.denoiser, self.model.schedule)
        if self.lambda0 == 0.0:
            return elbo, elbo.item(), 0.0
        # Embeddings enter as constants; this loss only trains the denoiser.
        ckgc = ckgc_loss(
            self.interactions[:, batch.items],
            ng.relu(prediction),
            self.model.embeddings.user_emb.data,
            self.model.embeddings.item_emb.data[batch.items],
        )
        return combine_kgdm(elbo, ckgc, self.lambda0), elbo.item(), ckgc.item()

    def rec_loss(self, triples: np.ndarray) -> tuple[Tensor, float, float]:
        """Recommendation loss on one BPR batch; returns (total, bpr, cl)."""
        hp = self.hp
        if hp.disable_cl:
            x_u, x_i = self.model.encode(self.kg_denoised, self.rng)
            cl: Tensor | float = 0.0
        else:
            views = build_views(
                lambda view: self.model.encode(view, self.rng),
                self.kg,
                self.kg_denoised,
                hp.kg_dropout,
                self.rng,
                hp.temperature,
            )
            x_u, x_i = views.user_b, views.item_b
            cl = contrastive_loss(
                views, np.unique(triples[:, 0]), np.unique(triples[:, 1:])
            )
        bpr = bpr_loss(*triple_scores(x_u, x_i, triples))
        lambda1 = 0.0 if hp.disable_cl else hp.lambda1
        total = combine_rec(bpr, cl, self.model.regularization(), lambda1, hp.lambda2)
        return total, bpr.item(), cl.item() if isinstance(cl, Tensor) else 0.0

    # ------------------------------------------------------------------
    # Epochs
    # ------------------------------------------------------------------

    def _batches(self, count: int) -> BatchPrefetcher:
        """Prefetch exactly *count* BPR batches from the sampling generator."""
        train, size = self.data.train, self.hp.batch_size
        self._prefetcher = BatchPrefetcher(
            lambda rng: sample_bpr_triples(train, size, rng), self._sample_rng, count=count
        )
        return self._prefetcher

    def _step(self, loss: Tensor, optimiser: Adam, epoch: int, phase: str) -> None:
        _ensure_finite(loss.item(), epoch, phase, "loss")
        optimiser.zero_grad()
        ng.backward(loss, optimiser.params)
        try:
            optimiser.step()
        except NumericalError as exc:
            raise NumericalError(f"epoch {epoch}, phase {phase}: {exc}") from exc

    def train_epoch(self) -> EpochMetrics:
        epoch = self.epoch + 1
        hp = self.hp
        elbo_sum = ckgc_sum = 0.0
        n_diff = 0

        if not hp.disable_dm:
            order = self.rng.permutation(self.kg.n_items)
            for start in range(0, order.size, hp.diffusion_batch_size):
                loss, elbo, ckgc = self.kgdm_loss(order[start:start + hp.diffusion_batch_size])
                self._step(loss, self.diff_opt, epoch, "kgdm")
                elbo_sum += elbo
                ckgc_sum += ckgc
                n_diff += 1
            self.kg_denoised = self.model.denoise(self.kg, self.rng)
            logger.debug(
                "Denoised KG has %d triplets",
                self.kg_denoised.n_triplets,
                extra={"event": "kg_refreshed", "epoch": epoch, "phase": "rebuild"},
            )
        else:
            self.kg_denoised = self.kg

        n_rec = max(1, -(-self.data.train.n_interactions // hp.batch_size))
        bpr_sum = cl_sum = 0.0
        batches = self._batches(n_rec)
        try:
            for _ in range(n_rec):
                loss, bpr, cl = self.rec_loss(batches.get())
                self._step(loss, self.rec_opt, epoch, "rec")
                bpr_sum += bpr
                cl_sum += cl
        finally:
            self.close()

        self.epoch = epoch
        return EpochMetrics(
            epoch=epoch,
            elbo=elbo_sum / max(n_diff, 1),
            ckgc=ckgc_sum / max(n_diff, 1),
            bpr=bpr_sum / n_rec,
            cl=cl_sum / n_rec,
        )

    def evaluate(self, cutoff: int | None = None) -> RankingResult:
        x_u, x_i = self.model.final_embeddings(self.kg_denoised)
        return evaluate_full_rank(x_u, x_i, self.data, cutoff or self.hp.cutoff)

    def fit(
        self,
        epochs: int | None = None,
        metrics_csv: Path | str | None = None,
        stop_event: threading.Event | None = None,
        checkpoint_path: Path | str | None = None,
    ) -> list[EpochMetrics]:
        """Train for *epochs*, evaluating every ``eval_every`` epochs.

        A set *stop_event* ends training at the next epoch boundary; the
        checkpoint is still written.
        """
        epochs = self.hp.epochs if epochs is None else epochs
        history: list[EpochMetrics] = []
        csv_path = Path(metrics_csv) if metrics_csv is not None else None
        if csv_path is not None:
            csv_path.parent.mkdir(parents=True, exist_ok=True)
            csv_path.write_text(EpochMetrics.csv_header(self.hp.cutoff) + "\n", encoding="utf-8")

        try:
            for _ in range(epochs):
                metrics = self.train_epoch()
                if self.epoch % self.eval_every == 0:
                    result = self.evaluate()
                    metrics = metrics.model_copy(
                        update={"recall": result.mean_recall, "ndcg": result.mean_ndcg}
                    )
                history.append(metrics)
                if csv_path is not None:
                    with csv_path.open("a", encoding="utf-8") as fh:
                        fh.write(metrics.csv_row() + "\n")
                logger.info(
                    "Epoch %d: elbo=%.4f ckgc=%.4f bpr=%.4f cl=%.4f",
                    metrics.epoch,
                    metrics.elbo,
                    metrics.ckgc,
                    metrics.bpr,
                    metrics.cl,
                    extra={
                        "event": "epoch_completed",
                        "epoch": metrics.epoch,
                        "losses": metrics.model_dump(exclude={"epoch"}, exclude_none=True),
                    },
                )
                if stop_event is not None and stop_event.is_set():
                    logger.warning(
                        "Stop requested; ending after epoch %d",
                        self.epoch,
                        extra={"event": "training_interrupted", "epoch": self.epoch},
                    )
                    break
        finally:
            self.close()

        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return history

    def close(self) -> None:
        if self._prefetcher is not None:
            self._prefetcher.close()
            self._prefetcher = None

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def _optimisers(self) -> dict[str, Adam]:
        return {"rec": self.rec_opt, "diff": self.diff_opt}

    def state_entries(self) -> dict[str, np.ndarray]:
        entries: dict[str, np.ndarray] = {}
        for name, p in self.model.named_parameters().items():
            entries[f"param/{name}"] = p.data
        for group, opt in self._optimisers().items():
            for p, m, v in zip(opt.params, opt.state.m, opt.state.v):
                entries[f"adam/{group}/m/{p.name}"] = m
                entries[f"adam/{group}/v/{p.name}"] = v
            entries[f"adam/{group}/step"] = np.array([opt.state.step], dtype=np.float64)
        entries["meta/epoch"] = np.array([self.epoch], dtype=np.float64)
        entries["meta/rng/train"] = pack_rng_state(self.rng)
        entries["meta/rng/sample"] = pack_rng_state(self._sample_rng)
        kg = self.kg_denoised
        entries["kg/heads"] = kg.heads.astype(np.float64)
        entries["kg/relations"] = kg.relations.astype(np.float64)
        entries["kg/tails"] = kg.tails.astype(np.float64)
        return entries

    def save(self, path: Path | str) -> None:
        save_checkpoint(path, self.state_entries())
        logger.info(
            "Saved checkpoint after epoch %d to %s",
            self.epoch,
            path,
            extra={"event": "checkpoint_saved", "epoch": self.epoch},
        )

    def load(self, path: Path | str) -> None:
        """Restore parameters, optimiser moments, generator states and the denoised KG.

        Training resumed from a checkpoint continues exactly as the
        uninterrupted run would have.

        Raises:
            CheckpointError: if any expected entry is missing or mis-shaped;
                nothing is modified in that case.
        """
        entries = load_checkpoint(path)
        expected = {name: value.shape for name, value in self.state_entries().items()}
        for name, shape in expected.items():
            if name.startswith("kg/"):
                continue
            if name not in entries:
                raise CheckpointError(f"Checkpoint {path} has no entry {name!r}")
            if entries[name].shape != shape:
                raise CheckpointError(
                    f"Entry {name!r} in {path} has shape {entries[name].shape}, expected {shape}"
                )
        unknown = sorted(set(entries) - set(expected) - {"kg/heads", "kg/relations", "kg/tails"})
        if unknown:
            raise CheckpointError(f"Checkpoint {path} has unexpected entries: {', '.join(unknown)}")
        kg_view = self._restore_kg(entries, path)
        for key in ("train", "sample"):
            try:
                unpack_rng_state(np.random.default_rng(), entries[f"meta/rng/{key}"])
            except ValueError as exc:
                raise CheckpointError(f"Checkpoint {path} has a bad {key} generator state: {exc}") from None

        for name, p in self.model.named_parameters().items():
            p.data[...] = entries[f"param/{name}"]
        for group, opt in self._optimisers().items():
            state: AdamState = opt.state
            for p, m, v in zip(opt.params, state.m, state.v):
                m[...] = entries[f"adam/{group}/m/{p.name}"]
                v[...] = entries[f"adam/{group}/v/{p.name}"]
            state.step = int(entries[f"adam/{group}/step"][0])
        self.epoch = int(entries["meta/epoch"][0])
        unpack_rng_state(self.rng, entries["meta/rng/train"])
        unpack_rng_state(self._sample_rng, entries["meta/rng/sample"])
        self.kg_denoised = kg_view
        logger.info(
            "Loaded checkpoint from %s (epoch %d)",
            path,
            self.epoch,
            extra={"event": "checkpoint_loaded", "epoch": self.epoch},
        )

    def _restore_kg(self, entries: dict[str, np.ndarray], path: Path | str) -> KnowledgeGraph:
        try:
            heads, relations, tails = (
                entries[f"kg/{key}"].astype(np.int64) for key in ("heads", "relations", "tails")
            )
        except KeyError as exc:
            raise CheckpointError(f"Checkpoint {path} has no denoised KG entry {exc}") from None
        if not heads.shape == relations.shape == tails.shape:
            raise CheckpointError(f"Checkpoint {path} has inconsistent KG entries")
        try:
            return KnowledgeGraph.from_triplets(
                heads,
                relations,
                tails,
                self.kg.n_items,
                self.kg.n_entities,
                self.kg.relation_ids,
                self.kg.item_entities,
            )
        except ValueError as exc:
            raise CheckpointError(f"Checkpoint {path} holds an invalid KG: {exc}") from exc
