import math

import numpy as np
import pytest

from s2fpn.errors import DivergenceError, InputError, ShapeError
from s2fpn.model import ModelSpec, build_model
from s2fpn.train import (AdamState, CapsDataset, TrainConfig, adam_step,
                         evaluate, fit, inverse_frequency_weights,
                         lr_schedule, softmax, synth_caps_dataset,
                         weighted_cross_entropy)


class TestCrossEntropy:
    def test_uniform_binary_is_ln2(self):
        logits = np.zeros((1, 2, 4))
        labels = np.zeros((1, 4), dtype=int)
        loss, grad = weighted_cross_entropy(logits, labels)
        assert loss == pytest.approx(math.log(2.0), rel=1e-12)

    def test_confident_correct_approaches_zero(self):
        logits = np.zeros((1, 3, 5))
        labels = np.full((1, 5), 1)
        logits[0, 1, :] = 50.0
        loss, _ = weighted_cross_entropy(logits, labels)
        assert loss < 1e-12

    def test_uniform_weights_match_unweighted(self, rng):
        logits = rng.standard_normal((2, 4, 9))
        labels = rng.integers(0, 4, size=(2, 9))
        base, gbase = weighted_cross_entropy(logits, labels)
        same, gsame = weighted_cross_entropy(logits, labels,
                                             weights=np.ones(4))
        assert base == pytest.approx(same, rel=1e-14)
        assert np.abs(gbase - gsame).max() < 1e-14

    def test_gradient_matches_finite_differences(self, rng):
        logits = rng.standard_normal((1, 3, 6))
        labels = rng.integers(0, 3, size=(1, 6))
        weights = np.array([0.5, 1.5, 1.0])
        _, grad = weighted_cross_entropy(logits, labels, weights)
        h = 1e-7
        flat = logits.ravel()
        for i in rng.choice(flat.size, size=10, replace=False):
            old = flat[i]
            flat[i] = old + h
            lp, _ = weighted_cross_entropy(logits, labels, weights)
            flat[i] = old - h
            lm, _ = weighted_cross_entropy(logits, labels, weights)
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            assert fd == pytest.approx(grad.ravel()[i], abs=1e-6)

    def test_ignore_index(self, rng):
        logits = rng.standard_normal((1, 3, 6))
        labels = np.array([[0, 1, 2, -1, -1, 1]])
        loss, grad = weighted_cross_entropy(logits, labels, ignore_index=-1)
        assert np.isfinite(loss)
        assert np.array_equal(grad[0, :, 3], np.zeros(3))
        kept_logits = logits[:, :, [0, 1, 2, 5]]
        kept_labels = labels[:, [0, 1, 2, 5]]
        ref, _ = weighted_cross_entropy(kept_logits, kept_labels)
        assert loss == pytest.approx(ref, rel=1e-12)

    def test_out_of_range_label_rejected(self, rng):
        logits = rng.standard_normal((1, 3, 4))
        with pytest.raises(InputError):
            weighted_cross_entropy(logits, np.full((1, 4), 3))

    def test_softmax_normalized(self, rng):
        probs = softmax(rng.standard_normal((2, 5, 7)), axis=1)
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-12

    def test_loss_nonnegative(self, rng):
        logits = rng.standard_normal((2, 3, 11)) * 4
        labels = rng.integers(0, 3, size=(2, 11))
        loss, _ = weighted_cross_entropy(logits, labels)
        assert loss >= 0.0


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState(params)
        adam_step(state, params, {"w": np.zeros(2)}, lr=0.1)
        assert np.array_equal(params["w"], [1.0, -2.0])

    def test_first_step_direction_and_magnitude(self):
        params = {"w": np.array([0.0])}
        grads = {"w": np.array([3.7])}
        state = AdamState(params)
        adam_step(state, params, grads, lr=0.01)
        # bias-corrected first step is -lr * g / (|g| + eps') ~ -lr * sign(g)
        assert params["w"][0] == pytest.approx(-0.01, rel=1e-6)

    def test_three_step_scalar_recurrence(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        params = {"w": np.array([0.3])}
        state = AdamState(params, b1, b2, eps)
        gs = [0.4, -0.2, 0.9]
        # independent hand computation of the update recurrence
        w, m, v = 0.3, 0.0, 0.0
        for t, g in enumerate(gs, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            w -= lr * mhat / (math.sqrt(vhat) + eps)
        for g in gs:
            adam_step(state, params, {"w": np.array([g])}, lr)
        assert params["w"][0] == pytest.approx(w, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        params = {"w": np.zeros(3)}
        state = AdamState(params)
        with pytest.raises(ShapeError):
            state.step(params, {"w": np.zeros(4)}, 0.1)


class TestSchedule:
    def test_stanford_epoch_25(self):
        config = TrainConfig(lr0=0.01, decay_factor=0.9, decay_every=20)
        assert lr_schedule(config, 25) == pytest.approx(0.009, rel=1e-12)

    def test_climate_epoch_45(self):
        config = TrainConfig(lr0=0.001, decay_factor=0.4, decay_every=20)
        assert lr_schedule(config, 45) == pytest.approx(0.00016, rel=1e-9)

    def test_epoch_zero(self):
        config = TrainConfig(lr0=0.7)
        assert lr_schedule(config, 0) == 0.7

    def test_negative_epoch_rejected(self):
        with pytest.raises(InputError):
            lr_schedule(TrainConfig(), -1)


class TestEvaluate:
    def _logits_for(self, pred, n_classes):
        out = np.zeros((pred.shape[0], n_classes, pred.shape[1]))
        for b in range(pred.shape[0]):
            out[b, pred[b], np.arange(pred.shape[1])] = 5.0
        return out

    def test_perfect_prediction(self, rng):
        labels = rng.integers(0, 3, size=(2, 30))
        report = evaluate(self._logits_for(labels, 3), labels, 3)
        assert report.pixel_accuracy == 1.0
        assert report.miou == 1.0

    def test_binary_hand_counts(self):
        # class 1: TP=2, FP=1, FN=1 -> IoU = 2/4
        labels = np.array([[1, 1, 1, 0, 0, 0]])
        pred = np.array([[1, 1, 0, 1, 0, 0]])
        report = evaluate(self._logits_for(pred, 2), labels, 2)
        assert report.per_class_iou[1] == pytest.approx(0.5)
        assert report.confusion.sum(axis=1).tolist() == [3, 3]

    def test_all_wrong_binary(self):
        labels = np.array([[0, 0, 1, 1]])
        pred = 1 - labels
        report = evaluate(self._logits_for(pred, 2), labels, 2)
        assert report.miou == 0.0
        assert report.pixel_accuracy == 0.0

    def test_absent_class_excluded_from_miou(self):
        labels = np.array([[0, 0, 0, 1]])
        pred = np.array([[0, 0, 0, 1]])
        report = evaluate(self._logits_for(pred, 3), labels, 3)
        assert math.isnan(report.per_class_iou[2])
        assert report.miou == 1.0

    def test_relabeling_invariance(self, rng):
        labels = rng.integers(0, 3, size=(1, 40))
        pred = rng.integers(0, 3, size=(1, 40))
        base = evaluate(self._logits_for(pred, 3), labels, 3)
        swap = {0: 2, 1: 0, 2: 1}
        labels_s = np.vectorize(swap.get)(labels)
        pred_s = np.vectorize(swap.get)(pred)
        swapped = evaluate(self._logits_for(pred_s, 3), labels_s, 3)
        assert swapped.pixel_accuracy == pytest.approx(base.pixel_accuracy)
        assert swapped.miou == pytest.approx(base.miou)

    def test_confusion_row_sums(self, rng):
        labels = rng.integers(0, 4, size=(2, 50))
        pred = rng.integers(0, 4, size=(2, 50))
        report = evaluate(self._logits_for(pred, 4), labels, 4)
        expected = [int((labels == c).sum()) for c in range(4)]
        assert report.confusion.sum(axis=1).tolist() == expected

    def test_map_perfect_ranker(self):
        labels = np.array([[0, 0, 1, 1]])
        logits = np.zeros((1, 2, 4))
        logits[0, 1] = [-5.0, -4.0, 4.0, 5.0]
        report = evaluate(logits, labels, 2)
        assert report.mean_average_precision == pytest.approx(1.0)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            evaluate(rng.standard_normal((1, 3, 5)),
                     np.zeros((1, 4), dtype=int), 3)
        with pytest.raises(ShapeError):
            evaluate(rng.standard_normal((1, 3, 5)),
                     np.zeros((1, 5), dtype=int), 4)


class TestWeights:
    def test_inverse_frequency_mean_one(self):
        labels = np.array([0] * 90 + [1] * 9 + [2])
        w = inverse_frequency_weights(labels, 3)
        assert w.mean() == pytest.approx(1.0)
        assert w[2] > w[1] > w[0]


class TestSynthCaps:
    def test_deterministic(self, meshes):
        a = synth_caps_dataset(meshes[2], 5, 3, seed=42)
        b = synth_caps_dataset(meshes[2], 5, 3, seed=42)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.labels, b.labels)
        c = synth_caps_dataset(meshes[2], 5, 3, seed=43)
        assert not np.array_equal(a.inputs, c.inputs)

    def test_single_class_rejected(self, meshes):
        with pytest.raises(InputError):
            synth_caps_dataset(meshes[1], 3, 1, seed=0)

    def test_shapes_and_labels(self, meshes):
        ds = synth_caps_dataset(meshes[2], 4, 4, seed=1)
        assert ds.inputs.shape == (4, 3, 162)
        assert ds.labels.shape == (4, 162)
        assert set(np.unique(ds.labels)) <= {0, 1, 2, 3}
        assert ds.n_classes == 4

    def test_class_frequencies_match_cap_area(self, meshes):
        # Monte-Carlo oracle over the closed-form cap area fraction
        # (1 - cos r) / 2 with r ~ U(0.2, 0.8); the last cap is never
        # overridden so its frequency estimates that mean directly.
        oracle_rng = np.random.default_rng(999)
        r = oracle_rng.uniform(0.2, 0.8, size=200_000)
        expected = ((1 - np.cos(r)) / 2).mean()
        ds = synth_caps_dataset(meshes[3], 100, 3, seed=5)
        freq_last = (ds.labels == 2).mean()
        assert abs(freq_last - expected) < 0.02
        # earlier caps lose the overridden overlap
        freq_first = (ds.labels == 1).mean()
        assert expected * (1 - expected) - 0.02 < freq_first < expected + 0.02


class TestFit:
    def _setup(self, meshes, n=6, epochs=1, **cfg_overrides):
        ds = synth_caps_dataset(meshes[2], n + 2, 3, seed=3)
        train = CapsDataset(2, ds.inputs[:n], ds.labels[:n])
        val = CapsDataset(2, ds.inputs[n:], ds.labels[n:])
        spec = ModelSpec(min_level=1, max_level=2, in_channels=2, n_classes=3,
                         base_channels=4, pyramid_channels=4, head_channels=4)
        model = build_model(spec, meshes, seed=0)
        defaults = dict(epochs=epochs, batch_size=4, lr0=0.01, seed=0)
        defaults.update(cfg_overrides)
        return model, train, val, TrainConfig(**defaults)

    def test_single_epoch_log(self, meshes):
        model, train, val, config = self._setup(meshes)
        result = fit(model, train, val, config)
        assert len(result.log) == 1
        record = result.log[0]
        assert np.isfinite(record["train_loss"])
        assert {"epoch", "lr", "train_loss", "val_accuracy",
                "val_miou"} <= set(record)

    def test_bit_reproducible(self, meshes):
        states = []
        for _ in range(2):
            model, train, val, config = self._setup(meshes, epochs=2)
            fit(model, train, val, config)
            states.append(model.state_dict())
        assert all(np.array_equal(states[0][k], states[1][k])
                   for k in states[0])

    def test_best_state_tracked(self, meshes):
        model, train, val, config = self._setup(meshes, epochs=3)
        result = fit(model, train, val, config)
        assert result.best_epoch >= 0
        assert result.best_miou == max(r["val_miou"] for r in result.log)

    def test_divergence_raises(self, meshes):
        model, train, val, config = self._setup(meshes)
        train.inputs[0, 0, 0] = np.nan
        with pytest.raises(DivergenceError) as err:
            fit(model, train, val, config)
        assert err.value.epoch == 0

    def test_level_mismatch_rejected(self, meshes):
        model, train, val, config = self._setup(meshes)
        bad = CapsDataset(1, train.inputs[:, :, :42], train.labels[:, :42])
        with pytest.raises(ShapeError):
            fit(model, bad, val, config)

    def test_single_step_decreases_loss(self, meshes):
        # one tiny Adam step on one sample reduces that sample's loss
        model, train, _, _ = self._setup(meshes)
        x = train.inputs[:1]
        y = train.labels[:1]
        params = model.named_parameters()
        adam = AdamState(params)
        logits = model.forward(x, training=True)
        loss0, grad = weighted_cross_entropy(logits, y)
        model.zero_grad()
        model.backward(grad)
        adam.step(params, model.named_gradients(), lr=1e-6)
        loss1, _ = weighted_cross_entropy(model.forward(x, training=True), y)
        assert loss1 < loss0
