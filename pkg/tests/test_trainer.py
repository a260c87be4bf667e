"""Alternating-loop control flow, stage isolation, checkpoints, fine-tuning."""

import numpy as np
import pytest

from patchebm.backbones import PatchGrid
from patchebm.datakit import SynthConfig, generate_synthetic
from patchebm.ebm import EbmTrainConfig
from patchebm.evalstats import stratified_split
from patchebm.trainer import (
    AlternatingTrainer,
    TrainConfig,
    extract_features,
    finetune,
    inverse_frequency_weights,
    load_checkpoint,
    patience_loop,
    save_checkpoint,
    train_fc_model,
    train_glicnn,
    train_pipeline,
    warmup_glcnn,
    weighted_ce,
)


def simulate_patience_rule(losses, n_max, n_tolerate):
    """Independent re-simulation: reset on improvement over the previous epoch
    (loss_0 = +inf), save on a new global minimum, stop when the counter
    exceeds the tolerance."""
    prev = float("inf")
    best = float("inf")
    best_epoch = 0
    t = 0
    seen = []
    for epoch, loss in enumerate(losses[:n_max], start=1):
        seen.append(loss)
        if loss < best:
            best, best_epoch = loss, epoch
        t = 0 if loss < prev else t + 1
        prev = loss
        if t > n_tolerate:
            return seen, best_epoch, epoch, True
    return seen, best_epoch, len(seen), False


class TestPatienceLoop:
    def test_matches_simulation_on_random_sequences(self):
        rng = np.random.default_rng(0)
        for trial in range(50):
            n_max = int(rng.integers(1, 12))
            n_tol = int(rng.integers(0, 4))
            losses = list(np.round(rng.random(n_max) * (1 + (trial % 3)), 3))
            saved = []
            result = patience_loop(lambda e: losses[e - 1], n_max, n_tol, saved.append)
            exp_losses, exp_best, exp_stop, exp_early = simulate_patience_rule(losses, n_max, n_tol)
            assert result.losses == exp_losses
            assert result.best_epoch == exp_best
            assert result.stop_epoch == exp_stop
            assert result.stopped_early == exp_early
            assert saved[-1] == exp_best  # last snapshot is the argmin epoch

    def test_zero_tolerance_stops_at_first_stagnation(self):
        losses = [1.0, 0.9, 0.95, 0.1]
        result = patience_loop(lambda e: losses[e - 1], 4, 0)
        assert result.stop_epoch == 3
        assert result.best_epoch == 2
        assert result.stopped_early

    def test_n_max_one_runs_exactly_one_epoch(self):
        result = patience_loop(lambda e: 0.5, 1, 3)
        assert result.losses == [0.5]
        assert result.best_epoch == 1 and result.stop_epoch == 1

    def test_first_epoch_always_saves(self):
        saved = []
        patience_loop(lambda e: 123.0, 1, 0, saved.append)
        assert saved == [1]

    def test_saved_best_losses_strictly_decrease(self):
        losses = [0.8, 0.9, 0.7, 0.75, 0.6, 0.65, 0.64]
        bests = []
        result = patience_loop(lambda e: losses[e - 1], 7, 5,
                               lambda e: bests.append(losses[e - 1]))
        assert bests == [0.8, 0.7, 0.6]
        assert all(b2 < b1 for b1, b2 in zip(bests, bests[1:]))
        assert result.best_loss == min(losses)


@pytest.fixture(scope="module")
def tiny_world():
    cfg = SynthConfig(volume_shape=(8, 8, 8), patch_shape=(4, 4, 4), signal_patches=(0, 7),
                      effect_size=0.5, noise_sigma=0.1, subjects_per_class=(30, 30), seed=3)
    ds = generate_synthetic(cfg)
    tr, va, te = stratified_split(ds.labels, seed=1)
    grid = PatchGrid((8, 8, 8), (4, 4, 4))
    return ds.subset(tr), ds.subset(va), ds.subset(te), grid


def tiny_config(**overrides):
    base = dict(n_max=3, n_tolerate=1, warmup_epochs=2, batch_size=16, seed=0,
                ebm=EbmTrainConfig(max_rounds=80, bag_count=2))
    base.update(overrides)
    return TrainConfig(**base)


class TestWarmup:
    def test_zero_epochs_returns_untouched_weights(self, tiny_world):
        train, _, _, grid = tiny_world
        a, _ = warmup_glcnn(train, grid, tiny_config(warmup_epochs=0))
        b, _ = warmup_glcnn(train, grid, tiny_config(warmup_epochs=0))
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_training_reduces_loss(self, tiny_world):
        train, _, _, grid = tiny_world
        config = tiny_config(warmup_epochs=3)
        weights = inverse_frequency_weights(train.labels)
        fresh, head0 = warmup_glcnn(train, grid, tiny_config(warmup_epochs=0))
        feats = extract_features(fresh, train.volumes)
        from patchebm.backbones import forward_logits
        from patchebm import nn

        with nn.no_grad():
            before = weighted_ce(
                forward_logits(fresh, head0, train.volumes).data.reshape(-1),
                train.labels, weights)
        trained, head = warmup_glcnn(train, grid, config)
        with nn.no_grad():
            after = weighted_ce(
                forward_logits(trained, head, train.volumes).data.reshape(-1),
                train.labels, weights)
        assert after < before

    def test_identical_seeds_identical_weights(self, tiny_world):
        train, _, _, grid = tiny_world
        a, _ = warmup_glcnn(train, grid, tiny_config())
        b, _ = warmup_glcnn(train, grid, tiny_config())
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_single_class_rejected(self, tiny_world):
        train, _, _, grid = tiny_world
        bad = train.subset(np.flatnonzero(train.labels == 0))
        with pytest.raises(ValueError, match="both classes"):
            warmup_glcnn(bad, grid, tiny_config())


class TestAlternatingLoop:
    def test_ebm_refit_leaves_cnn_weights_untouched(self, tiny_world):
        train, valid, _, grid = tiny_world
        backbones, _ = warmup_glcnn(train, grid, tiny_config(warmup_epochs=1))
        trainer = AlternatingTrainer(backbones, train, valid, tiny_config())
        before = [p.data.copy() for p in backbones.parameters()]
        trainer.refit_head(epoch=1)
        for prev, p in zip(before, backbones.parameters()):
            np.testing.assert_array_equal(prev, p.data)

    def test_cnn_steps_leave_head_untouched_and_move_weights(self, tiny_world):
        train, valid, _, grid = tiny_world
        backbones, _ = warmup_glcnn(train, grid, tiny_config(warmup_epochs=1))
        trainer = AlternatingTrainer(backbones, train, valid, tiny_config())
        head = trainer.refit_head(epoch=1)
        head_json = head.to_json()
        weights_before = [p.data.copy() for p in backbones.parameters()]
        trainer.cnn_steps(epoch=1)
        assert trainer.head.to_json() == head_json
        moved = any(not np.array_equal(prev, p.data)
                    for prev, p in zip(weights_before, backbones.parameters()))
        assert moved

    def test_returned_model_has_min_validation_loss(self, tiny_world):
        train, valid, _, grid = tiny_world
        backbones, _ = warmup_glcnn(train, grid, tiny_config())
        model, result = train_glicnn(backbones, train, valid, tiny_config(n_max=4, n_tolerate=3))
        feats = model.features(valid.volumes)
        weights = inverse_frequency_weights(train.labels)
        loss = weighted_ce(np.asarray(model.head.predict_logit(feats)), valid.labels, weights)
        assert loss == pytest.approx(result.best_loss, abs=1e-9)
        assert result.best_loss == min(result.losses)

    def test_empty_validation_rejected(self, tiny_world):
        train, _, _, grid = tiny_world
        backbones, _ = warmup_glcnn(train, grid, tiny_config(warmup_epochs=0))
        empty = train.subset(np.array([], dtype=int))
        with pytest.raises(ValueError, match="validation set is empty"):
            AlternatingTrainer(backbones, train, empty, tiny_config())

    def test_pipeline_deterministic(self, tiny_world):
        train, valid, _, grid = tiny_world
        m1, r1 = train_pipeline(train, valid, grid, tiny_config(n_max=2))
        m2, r2 = train_pipeline(train, valid, grid, tiny_config(n_max=2))
        assert r1.losses == r2.losses
        np.testing.assert_array_equal(m1.predict_proba(valid.volumes),
                                      m2.predict_proba(valid.volumes))


class TestCheckpoint:
    def test_roundtrip_preserves_predictions(self, tiny_world, tmp_path):
        train, valid, test, grid = tiny_world
        model, _ = train_pipeline(train, valid, grid, tiny_config(n_max=2))
        before = model.predict_proba(test.volumes)
        path = tmp_path / "model.glic"
        save_checkpoint(path, model)
        back = load_checkpoint(path)
        np.testing.assert_array_equal(before, back.predict_proba(test.volumes))
        assert back.feature_names == model.feature_names

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.glic"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="bad magic"):
            load_checkpoint(path)

    def test_truncated_checkpoint_rejected(self, tiny_world, tmp_path):
        train, valid, _, grid = tiny_world
        model, _ = train_pipeline(train, valid, grid, tiny_config(n_max=1, warmup_epochs=0))
        path = tmp_path / "model.glic"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_header_starts_with_magic_and_version(self, tiny_world, tmp_path):
        train, valid, _, grid = tiny_world
        model, _ = train_pipeline(train, valid, grid, tiny_config(n_max=1, warmup_epochs=0))
        path = tmp_path / "model.glic"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        assert raw[:4] == b"GLIC"
        assert int.from_bytes(raw[4:8], "little") == 1


class TestFinetune:
    def test_feature_count_mismatch_rejected(self, tiny_world, tmp_path):
        train, valid, _, grid = tiny_world
        model, _ = train_pipeline(train, valid, grid, tiny_config(n_max=1, warmup_epochs=1))
        other = generate_synthetic(SynthConfig(volume_shape=(4, 4, 4), patch_shape=(2, 2, 2),
                                               signal_patches=(0,), subjects_per_class=(10, 10),
                                               seed=0))
        with pytest.raises(ValueError, match="shape"):
            finetune(model, other, other, tiny_config())

    def test_zero_epoch_finetune_disallowed(self):
        with pytest.raises(ValueError, match="n_max"):
            tiny_config(n_max=0)

    def test_finetune_continues_from_checkpoint(self, tiny_world, tmp_path):
        train, valid, test, grid = tiny_world
        model, first = train_pipeline(train, valid, grid, tiny_config(n_max=2))
        path = tmp_path / "model.glic"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        tuned, result = finetune(loaded, train, valid,
                                 tiny_config(n_max=2, learning_rate=1e-5))
        # tiny learning rate: validation loss stays within 5% of the checkpoint's
        assert result.best_loss <= first.best_loss * 1.05


class TestLossHelpers:
    def test_inverse_frequency_weights(self):
        w0, w1 = inverse_frequency_weights(np.array([0, 0, 0, 1]))
        assert w0 == pytest.approx(4 / 6)
        assert w1 == pytest.approx(4 / 2)

    def test_weighted_ce_matches_manual(self):
        z = np.array([0.0, 2.0])
        y = np.array([1, 0])
        # w1*BCE(sigma(0),1) = 2*ln2; w0*BCE(sigma(2),0) = softplus(2)
        manual = (2.0 * np.log(2) + np.log1p(np.exp(2.0))) / 2
        assert weighted_ce(z, y, (1.0, 2.0)) == pytest.approx(manual, rel=1e-12)
