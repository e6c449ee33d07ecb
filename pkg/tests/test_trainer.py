"""Unit tests for diffkg/trainer.py and diffkg/model.py."""

import threading

import numpy as np
import pytest

from diffkg import numgrad as ng
from diffkg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from diffkg.config import RunConfig
from diffkg.graph import GraphError, build_norm_adjacency, sample_bpr_triples, split
from diffkg.model import DiffKGModel
from diffkg.numgrad import NumericalError
from diffkg.synth import make_community_dataset
from diffkg.trainer import (
    BatchPrefetcher,
    Trainer,
    bpr_loss,
    combine_kgdm,
    combine_rec,
    pack_rng_state,
    triple_scores,
    unpack_rng_state,
)


def _hp(**overrides):
    settings = dict(
        dim=8,
        denoiser_hidden=16,
        topk=3,
        batch_size=64,
        diffusion_batch_size=8,
        epochs=2,
        cutoff=5,
        seed=11,
    )
    settings.update(overrides)
    return RunConfig(**settings)


@pytest.fixture(scope="module")
def dataset():
    graph, kg = make_community_dataset(
        seed=3, n_users=30, n_items=20, per_user=5, n_entities=10, entities_per_item=2
    )
    return split(graph, 0.2, seed=3), kg


def _trainer(dataset, **overrides):
    data, kg = dataset
    hp = _hp(**overrides)
    adjacency = build_norm_adjacency(data.train)
    model = DiffKGModel.init(hp, data.train.n_users, kg, adjacency, np.random.default_rng(hp.seed))
    return Trainer(model, data, kg, hp, eval_every=hp.eval_every)


# ---------------------------------------------------------------------------
# Loss arithmetic
# ---------------------------------------------------------------------------


class TestLossCombination:
    def test_kgdm_weights(self):
        assert combine_kgdm(2.0, 4.0, 0.5) == pytest.approx(3.0)
        assert combine_kgdm(2.0, 4.0, 0.0) == pytest.approx(2.0)

    def test_rec_weights(self):
        assert combine_rec(1.0, 2.0, 3.0, 0.5, 0.1) == pytest.approx(2.3)

    def test_bpr_equal_scores(self):
        loss = bpr_loss(ng.tensor([0.3, -1.0]), ng.tensor([0.3, -1.0]))
        assert loss.item() == pytest.approx(np.log(2.0), rel=1e-6)

    def test_bpr_unit_margin(self):
        loss = bpr_loss(ng.tensor([2.0]), ng.tensor([1.0]))
        assert loss.item() == pytest.approx(0.3133, abs=1e-4)

    def test_triple_scores(self):
        x_u = ng.tensor([[1.0, 0.0], [0.0, 2.0]])
        x_i = ng.tensor([[3.0, 1.0], [1.0, 1.0]])
        positive, negative = triple_scores(x_u, x_i, np.array([[0, 0, 1], [1, 1, 0]]))
        np.testing.assert_allclose(positive.data, [3.0, 2.0])
        np.testing.assert_allclose(negative.data, [1.0, 2.0])


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class TestModel:
    def test_parameter_groups_disjoint(self, dataset):
        trainer = _trainer(dataset)
        rec = {p.name for p in trainer.model.rec_parameters()}
        diff = {p.name for p in trainer.model.diffusion_parameters()}
        assert rec == {"user_emb", "item_emb", "attention.weight", "attention.relation_emb", "attention.entity_emb"}
        assert not rec & diff
        assert set(trainer.model.named_parameters()) == rec | diff

    def test_regularization_is_sum_of_squares(self, dataset):
        model = _trainer(dataset).model
        expected = sum(float((p.data.astype(np.float64) ** 2).sum()) for p in model.rec_parameters())
        assert model.regularization().item() == pytest.approx(expected, rel=1e-4)

    def test_denoise_keeps_topk_per_item(self, dataset):
        trainer = _trainer(dataset)
        rebuilt = trainer.model.denoise(trainer.kg)
        np.testing.assert_array_equal(np.asarray(rebuilt.rows.sum(axis=1)).ravel(), 3)

    def test_denoise_rejects_topk_above_entities(self, dataset):
        trainer = _trainer(dataset, topk=11)
        with pytest.raises(GraphError, match="k must be in"):
            trainer.model.denoise(trainer.kg)


# ---------------------------------------------------------------------------
# Training phases
# ---------------------------------------------------------------------------


class TestTrainEpoch:
    def test_full_epoch(self, dataset):
        trainer = _trainer(dataset)
        try:
            metrics = trainer.train_epoch()
        finally:
            trainer.close()
        assert metrics.epoch == 1 and trainer.epoch == 1
        assert all(np.isfinite(v) for v in (metrics.elbo, metrics.ckgc, metrics.bpr, metrics.cl))
        assert metrics.elbo > 0 and metrics.cl > 0
        np.testing.assert_array_equal(np.asarray(trainer.kg_denoised.rows.sum(axis=1)).ravel(), 3)

    def test_without_diffusion(self, dataset):
        trainer = _trainer(dataset, disable_dm=True)
        try:
            metrics = trainer.train_epoch()
        finally:
            trainer.close()
        assert metrics.elbo == 0.0 and metrics.ckgc == 0.0
        assert trainer.kg_denoised is trainer.kg

    def test_without_contrast(self, dataset):
        trainer = _trainer(dataset, disable_cl=True)
        try:
            metrics = trainer.train_epoch()
        finally:
            trainer.close()
        assert metrics.cl == 0.0
        assert metrics.bpr > 0

    def test_without_ckgc(self, dataset):
        trainer = _trainer(dataset, disable_ckgc=True)
        assert trainer.lambda0 == 0.0
        try:
            metrics = trainer.train_epoch()
        finally:
            trainer.close()
        assert metrics.ckgc == 0.0

    def test_kgdm_loss_leaves_embeddings_untouched(self, dataset):
        trainer = _trainer(dataset)
        loss, elbo, ckgc = trainer.kgdm_loss(np.arange(6))
        ng.backward(loss, trainer.model.diffusion_parameters())
        assert trainer.model.embeddings.user_emb.grad is None
        assert trainer.model.attention.entity_emb.grad is None
        assert loss.item() == pytest.approx(0.5 * elbo + 0.5 * ckgc, rel=1e-5)

    def test_rec_loss_leaves_denoiser_untouched(self, dataset):
        trainer = _trainer(dataset)
        triples = sample_bpr_triples(trainer.data.train, 16, seed=0)
        loss, _, _ = trainer.rec_loss(triples)
        ng.backward(loss, trainer.model.rec_parameters())
        assert all(p.grad is None for p in trainer.model.diffusion_parameters())
        assert np.abs(trainer.model.embeddings.item_emb.grad).sum() > 0

    def test_same_seed_same_losses(self, dataset):
        runs = []
        for _ in range(2):
            trainer = _trainer(dataset)
            try:
                runs.append(trainer.train_epoch().csv_row())
            finally:
                trainer.close()
        assert runs[0] == runs[1]

    def test_non_finite_loss_names_epoch_and_phase(self, dataset):
        trainer = _trainer(dataset, disable_dm=True)
        trainer.model.embeddings.user_emb.data[:] = np.nan
        with pytest.raises(NumericalError, match="epoch 1, phase rec"):
            trainer.fit(1)

    @pytest.mark.parametrize("disable_cl", [True, False])
    def test_entities_only_in_raw_kg_train_through_contrast(self, dataset, disable_cl):
        trainer = _trainer(dataset, disable_cl=disable_cl, kg_dropout=0.0, lambda2=0.0)
        entity = int(trainer.kg.tails[0])
        trainer.kg_denoised = trainer.kg.subset(trainer.kg.tails != entity)
        loss, _, _ = trainer.rec_loss(sample_bpr_triples(trainer.data.train, 64, seed=0))
        ng.backward(loss, trainer.model.rec_parameters())
        reached = np.abs(trainer.model.attention.entity_emb.grad[entity]).sum()
        if disable_cl:
            assert reached == 0.0
        else:
            assert reached > 0.0

    def test_contrast_settings_ignored_without_contrast(self, dataset):
        grads = []
        for lambda1, temperature in ((0.1, 0.2), (5.0, 3.0)):
            trainer = _trainer(dataset, disable_cl=True, lambda1=lambda1, temperature=temperature)
            loss, _, _ = trainer.rec_loss(sample_bpr_triples(trainer.data.train, 64, seed=0))
            ng.backward(loss, trainer.model.rec_parameters())
            grads.append([p.grad.copy() for p in trainer.model.rec_parameters()])
        for first, second in zip(*grads):
            np.testing.assert_array_equal(first, second)

    def test_bpr_decreases_over_first_epochs(self, dataset):
        curves = []
        for seed in range(3):
            trainer = _trainer(
                dataset,
                seed=seed,
                disable_dm=True,
                disable_cl=True,
                out_dropout=0.0,
                batch_size=4096,
                rec_lr=2e-2,
                eval_every=100,
            )
            curves.append([m.bpr for m in trainer.fit(10)])
        assert np.all(np.diff(np.mean(curves, axis=0)) < 0)


class TestFit:
    def test_metrics_csv(self, dataset, tmp_path):
        trainer = _trainer(dataset, eval_every=2)
        history = trainer.fit(2, metrics_csv=tmp_path / "metrics.csv")
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,elbo,ckgc,bpr,cl,recall@5,ndcg@5"
        assert len(lines) == 3
        assert lines[1].endswith(",,")
        assert history[1].recall is not None

    def test_float64_runs_write_identical_csvs(self, dataset, tmp_path):
        with ng.default_dtype(np.float64):
            for name in ("a", "b"):
                _trainer(dataset, precision=64).fit(3, metrics_csv=tmp_path / f"{name}.csv")
        first = (tmp_path / "a.csv").read_bytes()
        assert first == (tmp_path / "b.csv").read_bytes()
        assert len(first.splitlines()) == 4

    def test_two_short_fits_match_one_long_fit(self, dataset):
        with ng.default_dtype(np.float64):
            long_run = _trainer(dataset)
            long_run.fit(2)
            split_run = _trainer(dataset)
            split_run.fit(1)
            split_run.fit(1)
        for name, p in long_run.model.named_parameters().items():
            np.testing.assert_array_equal(split_run.model.named_parameters()[name].data, p.data)

    def test_stop_event_ends_after_current_epoch(self, dataset, tmp_path):
        stop = threading.Event()
        stop.set()
        trainer = _trainer(dataset)
        history = trainer.fit(5, stop_event=stop, checkpoint_path=tmp_path / "model.ckpt")
        assert len(history) == 1
        assert load_checkpoint(tmp_path / "model.ckpt")["meta/epoch"][0] == 1.0


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


class TestCheckpoint:
    def test_resume_restores_state(self, dataset, tmp_path):
        trainer = _trainer(dataset)
        trainer.fit(1, checkpoint_path=tmp_path / "model.ckpt")

        restored = _trainer(dataset)
        restored.load(tmp_path / "model.ckpt")
        assert restored.epoch == 1
        assert restored.rec_opt.state.step == trainer.rec_opt.state.step
        for name, p in trainer.model.named_parameters().items():
            np.testing.assert_array_equal(restored.model.named_parameters()[name].data, p.data)
        np.testing.assert_array_equal(restored.kg_denoised.tails, trainer.kg_denoised.tails)
        np.testing.assert_array_equal(restored.evaluate().ranked, trainer.evaluate().ranked)

    def test_resumed_run_matches_uninterrupted_run(self, dataset, tmp_path):
        with ng.default_dtype(np.float64):
            whole = _trainer(dataset)
            whole.fit(2, metrics_csv=tmp_path / "whole.csv")

            _trainer(dataset).fit(1, checkpoint_path=tmp_path / "half.ckpt")
            resumed = _trainer(dataset)
            resumed.load(tmp_path / "half.ckpt")
            resumed.fit(1, metrics_csv=tmp_path / "resumed.csv")

        last = (tmp_path / "whole.csv").read_text().splitlines()[-1]
        assert (tmp_path / "resumed.csv").read_text().splitlines()[-1] == last
        for name, p in whole.model.named_parameters().items():
            np.testing.assert_array_equal(resumed.model.named_parameters()[name].data, p.data)

    def test_bad_generator_state_rejected(self, dataset, tmp_path):
        trainer = _trainer(dataset)
        entries = trainer.state_entries()
        entries["meta/rng/sample"] = np.full(10, 2.0**40)
        save_checkpoint(tmp_path / "model.ckpt", entries)
        before = trainer.model.embeddings.user_emb.data.copy()
        with pytest.raises(CheckpointError, match="bad sample generator state"):
            trainer.load(tmp_path / "model.ckpt")
        np.testing.assert_array_equal(trainer.model.embeddings.user_emb.data, before)

    def test_shape_mismatch_rejected(self, dataset, tmp_path):
        _trainer(dataset, dim=4).save(tmp_path / "small.ckpt")
        trainer = _trainer(dataset)
        before = trainer.model.embeddings.user_emb.data.copy()
        with pytest.raises(CheckpointError, match="has shape"):
            trainer.load(tmp_path / "small.ckpt")
        np.testing.assert_array_equal(trainer.model.embeddings.user_emb.data, before)

    def test_unexpected_entry_rejected(self, dataset, tmp_path):
        trainer = _trainer(dataset)
        entries = trainer.state_entries()
        entries["param/extra"] = np.zeros(2)
        save_checkpoint(tmp_path / "model.ckpt", entries)
        with pytest.raises(CheckpointError, match="unexpected entries: param/extra"):
            trainer.load(tmp_path / "model.ckpt")

    def test_missing_kg_rejected(self, dataset, tmp_path):
        trainer = _trainer(dataset)
        entries = {k: v for k, v in trainer.state_entries().items() if not k.startswith("kg/")}
        save_checkpoint(tmp_path / "model.ckpt", entries)
        with pytest.raises(CheckpointError, match="denoised KG"):
            trainer.load(tmp_path / "model.ckpt")


# ---------------------------------------------------------------------------
# Batch prefetching
# ---------------------------------------------------------------------------


class TestBatchPrefetcher:
    def test_sequence_matches_direct_sampling(self):
        prefetcher = BatchPrefetcher(lambda rng: rng.integers(0, 100, size=3), seed=5)
        try:
            fetched = [prefetcher.get() for _ in range(4)]
        finally:
            prefetcher.close()
        rng = np.random.default_rng(5)
        expected = [rng.integers(0, 100, size=3) for _ in range(4)]
        for got, want in zip(fetched, expected):
            np.testing.assert_array_equal(got, want)

    def test_count_bounds_draws_from_shared_generator(self):
        shared = np.random.default_rng(9)
        prefetcher = BatchPrefetcher(lambda rng: rng.integers(0, 100, size=3), shared, count=2)
        try:
            fetched = [prefetcher.get() for _ in range(2)]
        finally:
            prefetcher.close()
        reference = np.random.default_rng(9)
        for got in fetched:
            np.testing.assert_array_equal(got, reference.integers(0, 100, size=3))
        assert shared.integers(0, 1 << 30) == reference.integers(0, 1 << 30)

    def test_producer_error_reaches_consumer(self):
        def failing(rng):
            raise GraphError("no user has both observed and unobserved items")

        prefetcher = BatchPrefetcher(failing, seed=0)
        try:
            with pytest.raises(GraphError, match="no user"):
                prefetcher.get()
        finally:
            prefetcher.close()


# ---------------------------------------------------------------------------
# Generator state
# ---------------------------------------------------------------------------


class TestGeneratorState:
    def test_restored_generator_continues_the_sequence(self):
        rng = np.random.default_rng(17)
        rng.random(5)
        words = pack_rng_state(rng)
        expected = rng.random(3)
        restored = np.random.default_rng(0)
        unpack_rng_state(restored, words)
        np.testing.assert_array_equal(restored.random(3), expected)

    def test_words_fit_in_32_bits(self):
        words = pack_rng_state(np.random.default_rng(3))
        assert words.shape == (10,)
        assert np.all((words >= 0) & (words < 2.0**32))
        np.testing.assert_array_equal(words, np.floor(words))

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError, match="ten 32-bit words"):
            unpack_rng_state(np.random.default_rng(), np.zeros(4))
