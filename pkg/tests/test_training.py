"""
Unit tests for batching, loss computation, checkpoints and the training loop.
"""

import math

import numpy as np
import pytest
import torch

from creative_dp_utils.config import DecodeConfig, RunConfig
from creative_dp_utils.creative import creative_forward, generate_title
from creative_dp_utils.datamodel import Ad, DatasetRecord, Item, Vocabulary
from creative_dp_utils.objectives import generative_loss
from creative_dp_utils.training import (
    CheckpointError,
    CheckpointMismatchError,
    CheckpointVersionError,
    ChecksumMismatchError,
    TrainingDivergedError,
    batch_indices,
    build_batch,
    build_item_corpus,
    compute_losses,
    load_checkpoint,
    sample_negatives,
    save_checkpoint,
    total_steps,
    train,
)
from conftest import tiny_config_dict


def config_with(**training):
    return RunConfig.model_validate(tiny_config_dict(training=training))


class TestNegativeSampling:
    def test_never_returns_history_items(self):
        rng = np.random.default_rng(0)
        corpus = [f"i{n}" for n in range(20)]
        history = corpus[:15]
        for _ in range(50):
            assert not set(sample_negatives(history, corpus, 3, rng)) & set(history)

    def test_exclude_and_exhausted_corpus(self):
        rng = np.random.default_rng(0)
        assert sample_negatives(["a"], ["a", "b"], 2, rng, exclude=["b"]) == []
        assert sample_negatives(["a"], ["a", "b"], 3, rng) == ["b", "b", "b"]
        assert sample_negatives(["a"], ["a", "b"], 0, rng) == []

    def test_seeded(self):
        corpus = [f"i{n}" for n in range(30)]
        first = sample_negatives([], corpus, 5, np.random.default_rng([0, 3]))
        assert first == sample_negatives([], corpus, 5, np.random.default_rng([0, 3]))


class TestBatchOrder:
    def test_each_epoch_is_a_permutation(self):
        seen = np.concatenate([batch_indices(10, 4, seed=1, step=s) for s in range(3)])
        assert sorted(seen.tolist()) == list(range(10))

    def test_last_batch_is_partial(self):
        assert len(batch_indices(10, 4, seed=1, step=2)) == 2

    def test_pure_function_of_step(self):
        assert batch_indices(10, 4, 5, 7).tolist() == batch_indices(10, 4, 5, 7).tolist()

    def test_total_steps_caps_at_max_steps(self):
        assert total_steps(10, config_with(epochs=3).training) == 9
        assert total_steps(10, config_with(epochs=3, max_steps=4).training) == 4


class TestItemCorpus:
    def test_conflicting_duplicate_ids_keep_first_and_warn(self, fixture_records, caplog):
        first = fixture_records[0].history[0]
        clash = Item(item_id=first.item_id, title=first.title + " deluxe edition")
        changed = fixture_records[1].model_copy(update={"history": [clash, *fixture_records[1].history]})
        with caplog.at_level("WARNING", logger="creative_dp_utils.training"):
            corpus = build_item_corpus([fixture_records[0], changed])
        assert corpus[first.item_id] == first
        assert first.item_id in caplog.text

    def test_identical_duplicates_are_silent(self, fixture_records, caplog):
        with caplog.at_level("WARNING", logger="creative_dp_utils.training"):
            build_item_corpus(list(fixture_records) * 2)
        assert "different content" not in caplog.text


class TestBuildBatch:
    def test_cls_pairs_from_labels_and_ad_fallback(self, fixture_records, tiny_model, tiny_config):
        corpus = build_item_corpus(fixture_records)
        batch = build_batch(fixture_records[:2], corpus, tiny_config.training, np.random.default_rng(0), tiny_model)
        # record 0: labelled positive + one sampled negative + labelled negative
        assert batch.cls_rows == [0, 0, 0, 1, 1]
        assert batch.cls_labels == [1, 0, 0, 1, 0]
        assert batch.cls_items[0].item_id == "o2"
        assert batch.cls_items[2].item_id == "k0"
        assert batch.cls_items[3].item_id == "ad-1"
        history = {item.item_id for item in fixture_records[0].history}
        assert batch.cls_items[1].item_id not in history

    def test_responses_end_with_eos(self, fixture_records, tiny_model, tiny_config):
        corpus = build_item_corpus(fixture_records)
        batch = build_batch(fixture_records, corpus, tiny_config.training, np.random.default_rng(0), tiny_model)
        assert all(tokens[-1] == tiny_model.vocab.eos_id for tokens in batch.responses)
        assert all(prompt[-1] == tiny_model.vocab.bos_id for prompt in batch.prompts)

    def test_missing_interest_with_align_enabled(self, fixture_records, tiny_model, tiny_config):
        record = fixture_records[0].model_copy(update={"interest_text": ""})
        with pytest.raises(ValueError):
            build_batch([record], build_item_corpus(fixture_records), tiny_config.training,
                        np.random.default_rng(0), tiny_model)

    def test_empty_batch(self, fixture_records, tiny_model, tiny_config):
        with pytest.raises(ValueError):
            build_batch([], build_item_corpus(fixture_records), tiny_config.training, np.random.default_rng(0),
                        tiny_model)


class TestComputeLosses:
    def _losses(self, records, config, vocab):
        from creative_dp_utils.modeling import build_model

        model = build_model(config, vocab)
        batch = build_batch(records, build_item_corpus(records), config.training, np.random.default_rng(0), model)
        return compute_losses(model, batch, config.training)

    def test_all_components_finite(self, fixture_records, tiny_config, fixture_vocab):
        total, logged = self._losses(fixture_records, tiny_config, fixture_vocab)
        assert total.requires_grad
        assert all(math.isfinite(logged[name]) for name in ("gen", "cls", "align", "recon", "total"))

    def test_disabled_losses_are_none_unless_logged(self, fixture_records, fixture_vocab):
        weights = {"cls": 0.0, "align": 0.0, "recon": 0.0}
        config = config_with(loss_weights=weights)
        total, logged = self._losses(fixture_records, config, fixture_vocab)
        assert logged["cls"] is None and logged["align"] is None and logged["recon"] is None
        assert logged["total"] == pytest.approx(logged["gen"])

        config = config_with(loss_weights=weights, log_disabled_losses=True)
        total, logged = self._losses(fixture_records, config, fixture_vocab)
        assert logged["align"] is not None
        assert logged["total"] == pytest.approx(logged["gen"])

    def test_predictor_gets_no_gradient_without_cls(self, fixture_records, fixture_vocab):
        from creative_dp_utils.modeling import build_model

        config = config_with(loss_weights={"cls": 0.0}, log_disabled_losses=True)
        model = build_model(config, fixture_vocab)
        batch = build_batch(fixture_records, build_item_corpus(fixture_records), config.training,
                            np.random.default_rng(0), model)
        total, _ = compute_losses(model, batch, config.training)
        total.backward()
        assert all(p.grad is None for p in model.predictor.parameters())
        assert any(p.grad is not None for p in model.creative.parameters())

    def test_gen_matches_per_record_forward(self, fixture_records, tiny_config, fixture_vocab):
        """Padded batch loss equals the mean of single-record losses."""
        from creative_dp_utils.modeling import build_model

        config = config_with(loss_weights={"cls": 0.0, "align": 0.0, "recon": 0.0}, dtype="float64")
        model = build_model(config, fixture_vocab).eval()
        batch = build_batch(fixture_records, build_item_corpus(fixture_records), config.training,
                            np.random.default_rng(0), model)
        _, logged = compute_losses(model, batch, config.training)

        users = model.user_embeddings([r.history for r in fixture_records])
        singles = []
        for record, user in zip(fixture_records, users):
            prompt = model.build_prompt(user, record.ad, record.ad.query)
            response = model.response_tokens(record.response)
            singles.append(generative_loss(creative_forward(prompt, response, model.creative), response).item())
        assert logged["gen"] == pytest.approx(sum(singles) / len(singles), rel=1e-8)


class TestCheckpoints:
    @pytest.fixture
    def checkpoint(self, fixture_records):
        return train(fixture_records, config_with(max_steps=1))

    def test_round_trip(self, checkpoint, temp_config_dir):
        path = save_checkpoint(checkpoint, temp_config_dir / "model.ckpt")
        loaded = load_checkpoint(path)
        assert loaded.step == checkpoint.step == 1
        assert loaded.vocab.tokens == checkpoint.vocab.tokens
        assert loaded.config == checkpoint.config
        for name, tensor in checkpoint.model_state.items():
            assert torch.equal(loaded.model_state[name], tensor)
        assert loaded.metrics == checkpoint.metrics
        assert torch.equal(loaded.rng_state["torch"], checkpoint.rng_state["torch"])

    def test_corrupted_body(self, checkpoint, temp_config_dir):
        path = save_checkpoint(checkpoint, temp_config_dir / "model.ckpt")
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatchError):
            load_checkpoint(path)

    def test_unsupported_version(self, checkpoint, temp_config_dir):
        path = save_checkpoint(checkpoint, temp_config_dir / "model.ckpt")
        raw = path.read_bytes().replace(b'"version": 1', b'"version": 99', 1)
        path.write_bytes(raw)
        with pytest.raises(CheckpointVersionError) as excinfo:
            load_checkpoint(path)
        assert excinfo.value.found == 99

    def test_header_hash_must_match_body(self, checkpoint, temp_config_dir):
        path = save_checkpoint(checkpoint, temp_config_dir / "model.ckpt")
        raw = path.read_bytes().replace(b'"vocab_hash": "', b'"vocab_hash": "0', 1)
        path.write_bytes(raw)
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(path)

    def test_rejects_a_different_vocabulary(self, checkpoint, temp_config_dir):
        path = save_checkpoint(checkpoint, temp_config_dir / "model.ckpt")
        assert load_checkpoint(path, expected_vocab=checkpoint.vocab).step == 1
        other = Vocabulary.build(["completely different words"], min_freq=1)
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(path, expected_vocab=other)

    def test_not_a_checkpoint(self, temp_config_dir):
        path = temp_config_dir / "junk.ckpt"
        path.write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestTrainLoop:
    def test_empty_dataset(self, tiny_config):
        with pytest.raises(ValueError):
            train([], tiny_config)

    def test_metrics_per_step(self, fixture_records):
        config = config_with(batch_size=2, epochs=2)
        ckpt = train(fixture_records, config)
        assert ckpt.step == 4
        assert [row["step"] for row in ckpt.metrics] == [1, 2, 3, 4]
        assert set(ckpt.metrics[0]) == {"step", "gen", "cls", "align", "recon", "total"}

    def test_same_seed_same_weights(self, fixture_records):
        config = config_with(max_steps=3)
        a, b = train(fixture_records, config), train(fixture_records, config)
        for name, tensor in a.model_state.items():
            assert torch.equal(tensor, b.model_state[name])

    def test_resume_replays_uninterrupted_run(self, fixture_records, temp_config_dir):
        config = config_with(batch_size=2, max_steps=6)
        full = train(fixture_records, config)

        partial = train(fixture_records, config, stop_after=3)
        assert partial.step == 3
        path = save_checkpoint(partial, temp_config_dir / "partial.ckpt")
        resumed = train(fixture_records, config, resume_from=load_checkpoint(path))

        assert resumed.step == 6
        assert [row["step"] for row in resumed.metrics] == list(range(1, 7))
        for name, tensor in full.model_state.items():
            assert torch.allclose(tensor, resumed.model_state[name], atol=1e-6)

    def test_resume_restores_torch_rng_state(self, fixture_records):
        config = config_with(batch_size=2, max_steps=3)
        partial = train(fixture_records, config)
        torch.manual_seed(12345)
        resumed = train(fixture_records, config, resume_from=partial)
        assert resumed.step == 3
        assert torch.equal(resumed.rng_state["torch"], partial.rng_state["torch"])

    def test_predictor_weights_frozen_without_cls(self, fixture_records):
        from creative_dp_utils.modeling import build_model

        config = config_with(max_steps=3, loss_weights={"cls": 0.0})
        ckpt = train(fixture_records, config)
        fresh = build_model(config, ckpt.vocab)
        for name, tensor in fresh.predictor.state_dict().items():
            assert torch.equal(ckpt.model_state[f"predictor.{name}"], tensor)

    def test_periodic_checkpoints(self, fixture_records, temp_config_dir):
        config = config_with(batch_size=2, max_steps=4, checkpoint_every=2)
        train(fixture_records, config, checkpoint_dir=temp_config_dir)
        assert sorted(p.name for p in temp_config_dir.glob("*.ckpt")) == ["step_000002.ckpt", "step_000004.ckpt"]

    def test_divergence_reports_step(self, fixture_records, monkeypatch):
        import creative_dp_utils.training as training

        def exploding(model, batch, cfg):
            loss = sum(p.sum() for p in model.parameters()) * float("nan")
            return loss, {"gen": float("nan"), "cls": None, "align": None, "recon": None, "total": float("nan")}

        monkeypatch.setattr(training, "compute_losses", exploding)
        with pytest.raises(TrainingDivergedError) as excinfo:
            train(fixture_records, config_with(max_steps=2))
        assert excinfo.value.step == 1


PERSONAS = ["hikers", "cooks", "gamers", "runners", "painters", "gardeners", "readers", "bakers"]
PRODUCTS = ["trail boots", "coffee grinder", "desk lamp", "travel mug"]


def learning_config(**training):
    """Wider decoder than the unit-test config, generative loss only unless overridden."""
    return RunConfig.model_validate(tiny_config_dict(
        model={
            "item_encoder": {"d_model": 16, "n_heads": 2, "n_layers": 1, "max_positions": 20, "ffn_multiplier": 2},
            "user_encoder": {"d_model": 16, "n_heads": 2, "n_layers": 1, "max_positions": 24, "ffn_multiplier": 2},
            "creative_decoder": {"d_model": 32, "n_heads": 4, "n_layers": 2, "max_positions": 96,
                                 "ffn_multiplier": 2},
            "predictor": {"n_layers": 1, "hidden_dim": 8},
        },
        training={"learning_rate": 0.005, "loss_weights": {"cls": 0.0, "align": 0.0, "recon": 0.0}, **training},
    ))


def memorization_records():
    """32 records: every persona sees every product, each pair with its own title."""
    ads = [Ad(ad_id=f"ad-{n}", original_title=title, selling_points=["free shipping"])
           for n, title in enumerate(PRODUCTS)]
    records = []
    for n, persona in enumerate(PERSONAS):
        history = [Item(item_id=f"{persona}-{k}", title=f"{persona} {thing}")
                   for k, thing in enumerate(["kit", "guide", "bag"])]
        for ad in ads:
            records.append(DatasetRecord(user_id=f"u{n}", history=history, ad=ad,
                                         interest_text=f"into {persona} gear",
                                         response=f"{ad.original_title} for {persona}"))
    return records


def greedy_titles(ckpt, records):
    model = ckpt.build_model()
    decode_cfg = DecodeConfig(max_new_tokens=12)
    with torch.no_grad():
        users = model.user_embeddings([record.history for record in records])
        return [generate_title(model.build_prompt(user, record.ad, record.ad.query), model.creative, model.vocab,
                               decode_cfg)
                for user, record in zip(users, records)]


@pytest.fixture(scope="module")
def memorized():
    records = memorization_records()
    return records, train(records, learning_config(batch_size=32, max_steps=500))


@pytest.mark.slow
class TestLearning:
    """A few hundred steps on small fixtures."""

    def test_memorizes_32_records(self, memorized):
        records, ckpt = memorized
        assert len(records) == 32
        assert ckpt.metrics[-1]["gen"] < 0.05
        titles = greedy_titles(ckpt, records)
        exact = sum(title == record.response for title, record in zip(titles, records))
        assert exact >= 0.9 * len(records)

    def test_single_pair_decodes_exactly(self):
        record = memorization_records()[0]
        ckpt = train([record], learning_config(batch_size=1, max_steps=200))
        assert greedy_titles(ckpt, [record]) == [record.response]

    def test_recon_converges_on_single_pair(self):
        record = memorization_records()[0]
        weights = {"cls": 0.0, "align": 0.0, "recon": 1.0}
        ckpt = train([record], learning_config(batch_size=1, max_steps=300, loss_weights=weights))
        assert ckpt.metrics[-1]["recon"] < 0.05

    def test_each_user_decodes_own_title_for_shared_ad(self):
        ad = Ad(ad_id="ad-shared", original_title="trail boots", selling_points=["free shipping"])
        records = [
            DatasetRecord(user_id="hiker", ad=ad, interest_text="likes camping",
                          history=[Item(item_id="h0", title="rain jacket"), Item(item_id="h1", title="camping tent")],
                          response="trail boots for muddy hikes"),
            DatasetRecord(user_id="cook", ad=ad, interest_text="enjoys cooking",
                          history=[Item(item_id="c0", title="chef knife"), Item(item_id="c1", title="tea kettle")],
                          response="comfy boots for long kitchen shifts"),
        ]
        ckpt = train(records, learning_config(batch_size=2, max_steps=300))
        assert greedy_titles(ckpt, records) == [record.response for record in records]

    def test_memorizes_and_personalizes(self, fixture_records):
        ckpt = train(fixture_records, config_with(max_steps=300, learning_rate=0.01))
        assert ckpt.metrics[-1]["gen"] < 0.2 * ckpt.metrics[0]["gen"]

        # u1 and u2 share ad-1 but were trained on different responses
        model = ckpt.build_model()
        with torch.no_grad():
            user = model.user_embeddings([fixture_records[0].history])[0]
            prompt = model.build_prompt(user, fixture_records[0].ad, fixture_records[0].ad.query)
            own = model.response_tokens(fixture_records[0].response)
            other = model.response_tokens(fixture_records[1].response)
            loss_own = generative_loss(creative_forward(prompt, own, model.creative), own)
            loss_other = generative_loss(creative_forward(prompt, other, model.creative), other)
        assert loss_own < loss_other
