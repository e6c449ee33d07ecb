"""The DiffKG parameter bundle: embeddings, KG attention, denoiser and schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from diffkg import numgrad as ng
from diffkg.aggregator import RelationAttention, aggregate
from diffkg.config import HyperParams
from diffkg.diffusion import Denoiser, NoiseSchedule, build_schedule, reverse_generate, topk_rebuild
from diffkg.encoder import EmbeddingTable, encode
from diffkg.graph import KnowledgeGraph
from diffkg.numgrad import Tensor


@dataclass
class DiffKGModel:
    embeddings: EmbeddingTable
    attention: RelationAttention
    denoiser: Denoiser
    schedule: NoiseSchedule
    adjacency: sp.csr_matrix
    topk: int = 10
    diffusion_batch_size: int = 256

    @classmethod
    def init(
        cls,
        hp: HyperParams,
        n_users: int,
        kg: KnowledgeGraph,
        adjacency: sp.csr_matrix,
        rng: np.random.Generator,
    ) -> DiffKGModel:
        embeddings = EmbeddingTable.init(n_users, kg.n_items, hp.dim, rng, hp.n_layers)
        attention = RelationAttention.init(
            hp.dim,
            kg.n_relations,
            kg.n_entities,
            rng,
            kg_dropout=hp.kg_dropout,
            out_dropout=hp.out_dropout,
            slope=hp.leaky_slope,
            depth=hp.kg_depth,
        )
        denoiser = Denoiser.init(
            kg.n_entities,
            rng,
            hidden_dims=(hp.denoiser_hidden,),
            step_dim=hp.step_embedding_dim,
            slope=hp.leaky_slope,
        )
        schedule = build_schedule(
            hp.steps, hp.inference_steps, hp.noise_scale, hp.noise_min, hp.noise_max
        )
        return cls(
            embeddings=embeddings,
            attention=attention,
            denoiser=denoiser,
            schedule=schedule,
            adjacency=adjacency,
            topk=hp.topk,
            diffusion_batch_size=hp.diffusion_batch_size,
        )

    # ------------------------------------------------------------------
    # Parameter groups
    # ------------------------------------------------------------------

    def rec_parameters(self) -> list[Tensor]:
        """Embedding and attention parameters, trained by the recommendation loss."""
        return self.embeddings.parameters() + self.attention.parameters()

    def diffusion_parameters(self) -> list[Tensor]:
        return self.denoiser.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.rec_parameters() + self.diffusion_parameters()}

    def regularization(self) -> Tensor:
        """Squared L2 norm of the recommendation parameters."""
        total = ng.tensor(0.0)
        for p in self.rec_parameters():
            total = total + ng.sum(p * p)
        return total

    # ------------------------------------------------------------------
    # Forward passes
    # ------------------------------------------------------------------

    def encode(
        self,
        kg_view: KnowledgeGraph,
        rng: np.random.Generator | None = None,
        training: bool = True,
    ) -> tuple[Tensor, Tensor]:
        """Aggregate *kg_view* into the items, then propagate over the interaction graph."""
        items = aggregate(self.embeddings.item_emb, kg_view, self.attention, rng, training)
        return encode(items, self.embeddings.user_emb, self.adjacency, self.embeddings.n_layers)

    def final_embeddings(self, kg_view: KnowledgeGraph) -> tuple[np.ndarray, np.ndarray]:
        with ng.no_grad():
            x_u, x_i = self.encode(kg_view, training=False)
        return x_u.data, x_i.data

    def denoise(self, kg: KnowledgeGraph, rng: np.random.Generator | None = None) -> KnowledgeGraph:
        """Run reverse inference on every item row and rebuild the top-k KG."""
        scores = reverse_generate(
            kg.rows.toarray(), self.schedule, self.denoiser, rng, self.diffusion_batch_size
        )
        return topk_rebuild(scores, self.topk, kg)
