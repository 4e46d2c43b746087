import json
import math

import numpy as np
import pytest

from precofact import autodiff as ad
from precofact import dataio, metrics, training
from precofact.errors import ConfigError, ContractError, TrainingAborted
from precofact.model import init_model_params
from precofact.training import AdamState, TrainConfig, cross_entropy, optimizer_step

from sample_factory import toy_config


def synthetic_config(**overrides):
    base = dict(
        input_width_text=6, input_width_image=8, d=8, heads=2, d_ff=12,
        d_m1=6, dropout=0.0, activation="relu", dtype="float32",
    )
    base.update(overrides)
    return toy_config(**base)


def synthetic_data(samples_per_class=6, seed=0, separation=4.0):
    return dataio.generate_synthetic(
        samples_per_class=samples_per_class, token_range=(2, 4),
        text_width=6, image_width=8, separation=separation, seed=seed,
    )


def train_accuracy(samples, params):
    preds = metrics.argmax_predict(training.predict_probs(samples, params))
    return float(np.mean(preds == np.array([s.label for s in samples])))


class TestTrainConfig:
    def test_defaults_match_published_setting(self):
        c = TrainConfig()
        assert (c.batch_size, c.epochs, c.learning_rate, c.seed) == (32, 30, 3e-5, 41)

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"batch_size": 4, "momentum": 0.9})


class TestCrossEntropy:
    def test_one_hot_correct_is_zero(self):
        probs = np.eye(5)[[2]]
        loss = cross_entropy(ad.constant(probs), [2])
        assert loss.value.item() == 0.0

    def test_uniform_is_log5(self):
        probs = np.full((1, 5), 0.2)
        loss = cross_entropy(ad.constant(probs), [3])
        assert loss.value.item() == pytest.approx(math.log(5.0), abs=1e-12)

    def test_two_row_batch(self):
        probs = np.array([
            [0.5, 0.2, 0.1, 0.1, 0.1],
            [0.25, 0.25, 0.25, 0.2, 0.05],
        ])
        loss = cross_entropy(ad.constant(probs), [0, 2])
        expected = -(math.log(0.5) + math.log(0.25)) / 2
        assert loss.value.item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(1.03972, abs=1e-5)

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            cross_entropy(ad.constant(np.full((1, 5), 0.2)), [5])

    def test_gradient_through_softmax_is_p_minus_onehot(self):
        rng = np.random.default_rng(0)
        logits0 = rng.normal(size=(1, 5))
        logits = ad.parameter(logits0)
        probs = ad.softmax_rows(logits)
        loss = cross_entropy(probs, [3])
        ad.backward(loss)
        p = probs.value.data[0]
        expected = p - np.eye(5)[3]
        np.testing.assert_allclose(logits.grad[0], expected, atol=1e-12)

    def test_clamped_probability_floors_loss(self):
        probs = np.array([[1.0, 0.0, 0.0, 0.0, 0.0]])
        loss = cross_entropy(ad.constant(probs), [1])
        assert loss.value.item() == pytest.approx(-math.log(1e-12))


class TestOptimizerStep:
    def _single_param(self, value=1.0, dtype="float64"):
        config = synthetic_config(dtype=dtype)
        params = init_model_params(config, seed=1)
        return params

    def test_zero_gradients_leave_parameters_unchanged(self):
        params = self._single_param()
        state = AdamState.for_params(params)
        before = {n: node.value.data.copy() for n, node in params.named.items()}
        params.zero_grads()
        optimizer_step(params, state, lr=0.1)
        assert state.step == 1
        for n, node in params.named.items():
            np.testing.assert_array_equal(node.value.data, before[n])

    def test_zero_learning_rate_is_identity(self):
        params = self._single_param()
        state = AdamState.for_params(params)
        before = {n: node.value.data.copy() for n, node in params.named.items()}
        for node in params.named.values():
            node.grad += 1.0
        optimizer_step(params, state, lr=0.0)
        for n, node in params.named.items():
            np.testing.assert_array_equal(node.value.data, before[n])

    def test_constant_gradient_decreases_parameter(self):
        params = self._single_param()
        state = AdamState.for_params(params)
        node = params.named["cls.wm2"]
        history = [node.value.data.copy()]
        for _ in range(10):
            params.zero_grads()
            node.grad += 0.7
            optimizer_step(params, state, lr=1e-2)
            history.append(node.value.data.copy())
        for before, after in zip(history, history[1:]):
            assert np.all(after < before)

    def test_first_step_magnitude_is_lr(self):
        params = self._single_param()
        state = AdamState.for_params(params)
        node = params.named["cls.wm2"]
        before = node.value.data.copy()
        g = 0.37
        node.grad += g
        optimizer_step(params, state, lr=1e-3)
        delta = node.value.data - before
        np.testing.assert_allclose(delta, -1e-3 * np.sign(g), rtol=1e-6)

    def test_nan_gradient_aborts_with_diagnostics(self):
        params = self._single_param()
        state = AdamState.for_params(params)
        params.named["emb.ci.w"].grad[0, 0] = np.nan
        with pytest.raises(TrainingAborted, match="emb.ci.w"):
            optimizer_step(params, state, lr=1e-3)


class TestBatching:
    def test_every_sample_once_per_epoch(self):
        rng = np.random.default_rng(5)
        batches = training._make_batches(23, 4, rng)
        flat = np.concatenate(batches)
        assert sorted(flat.tolist()) == list(range(23))
        assert all(len(b) <= 4 for b in batches)

    def test_shuffle_changes_order_between_epochs(self):
        rng = np.random.default_rng(6)
        a = np.concatenate(training._make_batches(23, 4, rng))
        b = np.concatenate(training._make_batches(23, 4, rng))
        assert not np.array_equal(a, b)


class TestTrainLoop:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ContractError):
            training.train([], synthetic_config(), TrainConfig(epochs=1))

    def test_unlabeled_sample_rejected(self):
        samples = dataio.generate_synthetic(
            samples_per_class=1, text_width=6, image_width=8, seed=0, labeled=False
        )
        with pytest.raises(ContractError, match="unlabeled"):
            training.train(samples, synthetic_config(), TrainConfig(epochs=1))

    def test_unlabeled_pcf1_file_is_rejected_by_train(self, tmp_path):
        samples = dataio.generate_synthetic(
            samples_per_class=1, text_width=6, image_width=8, seed=0, labeled=False
        )
        path = tmp_path / "u.pcf1"
        dataio.write_dataset(samples, path)
        _, loaded = dataio.read_dataset(path)
        with pytest.raises(ContractError):
            training.train(loaded, synthetic_config(), TrainConfig(epochs=1))

    def test_same_seed_same_loss_sequence(self):
        samples = synthetic_data(samples_per_class=3)
        config = synthetic_config(dropout=0.1)
        tc = TrainConfig(batch_size=5, epochs=3, learning_rate=1e-3, seed=41)
        a = training.train(samples, config, tc)
        b = training.train(samples, config, tc)
        assert [r.train_loss for r in a.log] == [r.train_loss for r in b.log]

    def test_different_seed_different_losses(self):
        samples = synthetic_data(samples_per_class=3)
        config = synthetic_config()
        a = training.train(samples, config,
                           TrainConfig(batch_size=5, epochs=2, learning_rate=1e-3, seed=41))
        b = training.train(samples, config,
                           TrainConfig(batch_size=5, epochs=2, learning_rate=1e-3, seed=42))
        assert a.log[-1].train_loss != b.log[-1].train_loss

    def test_loss_strictly_decreases_on_fixed_batch(self):
        samples = synthetic_data(samples_per_class=4)
        config = synthetic_config()
        tc = TrainConfig(batch_size=len(samples), epochs=5, learning_rate=1e-3, seed=7)
        result = training.train(samples, config, tc)
        losses = [r.train_loss for r in result.log]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_epoch_log_format(self, tmp_path):
        samples = synthetic_data(samples_per_class=2)
        result = training.train(
            samples, synthetic_config(),
            TrainConfig(batch_size=4, epochs=2, learning_rate=1e-3, seed=1),
            val_samples=samples, out_dir=tmp_path / "run",
        )
        lines = (tmp_path / "run" / "epochs.jsonl").read_text().splitlines()
        assert len(lines) == 2
        for i, line in enumerate(lines):
            record = json.loads(line)
            assert record["epoch"] == i
            assert set(record) == {"epoch", "train_loss", "val_weighted_f1",
                                   "wall_seconds"}
        assert result.best_val_f1 is not None

    def test_best_checkpoint_written_and_loadable(self, tmp_path):
        samples = synthetic_data(samples_per_class=3)
        out = tmp_path / "run"
        training.train(
            samples, synthetic_config(),
            TrainConfig(batch_size=6, epochs=3, learning_rate=1e-3, seed=2),
            val_samples=samples, out_dir=out,
        )
        best = dataio.load_checkpoint(out / "model_best.pcfm")
        final = dataio.load_checkpoint(out / "model_final.pcfm")
        assert best.config == final.config

    def test_overfits_separated_clouds(self):
        samples = synthetic_data(samples_per_class=6, separation=5.0)
        config = synthetic_config()
        tc = TrainConfig(batch_size=10, epochs=25, learning_rate=3e-3, seed=3)
        result = training.train(samples, config, tc)
        assert train_accuracy(samples, result.params) >= 0.95

    def test_zero_separation_stays_at_chance(self):
        train_set = dataio.generate_synthetic(
            samples_per_class=8, token_range=(2, 4), text_width=6, image_width=8,
            separation=0.0, seed=11,
        )
        held_out = dataio.generate_synthetic(
            samples_per_class=20, token_range=(2, 4), text_width=6, image_width=8,
            separation=0.0, seed=12,
        )
        result = training.train(
            train_set, synthetic_config(),
            TrainConfig(batch_size=10, epochs=15, learning_rate=3e-3, seed=4),
        )
        acc = train_accuracy(held_out, result.params)
        assert acc <= 0.36, f"held-out accuracy {acc} on pure noise"


class TestResume:
    @pytest.mark.parametrize("dtype,exact", [("float32", True), ("float64", True)])
    def test_resume_matches_uninterrupted_run(self, tmp_path, dtype, exact):
        samples = synthetic_data(samples_per_class=3)
        config = synthetic_config(dropout=0.1, dtype=dtype)
        tc = TrainConfig(batch_size=5, epochs=6, learning_rate=1e-3, seed=9,
                         checkpoint_every=3)

        full = training.train(samples, config, tc, out_dir=tmp_path / "full")
        part = training.train(samples, config, tc, out_dir=tmp_path / "part")
        del part
        resumed = training.train(
            samples, config, tc, out_dir=tmp_path / "resumed",
            resume_from=tmp_path / "part" / "state_epoch0003.pcfs",
        )

        for name, node in full.params.named.items():
            a = node.value.data
            b = resumed.params.named[name].value.data
            if exact:
                np.testing.assert_array_equal(a, b, err_msg=name)
            else:
                np.testing.assert_allclose(a, b, atol=1e-6, err_msg=name)

    def test_resume_rejects_mismatched_config(self, tmp_path):
        samples = synthetic_data(samples_per_class=2)
        config = synthetic_config()
        tc = TrainConfig(batch_size=5, epochs=4, learning_rate=1e-3, seed=9,
                         checkpoint_every=2)
        training.train(samples, config, tc, out_dir=tmp_path / "a")
        other = TrainConfig(batch_size=5, epochs=4, learning_rate=2e-3, seed=9,
                            checkpoint_every=2)
        with pytest.raises(ConfigError):
            training.train(samples, config, other, out_dir=tmp_path / "b",
                           resume_from=tmp_path / "a" / "state_epoch0002.pcfs")
