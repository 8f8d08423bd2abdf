"""Losses, schedule, optimizer, metrics, and the training loop."""

import math

import numpy as np
import pytest

from painvit import numerics as nx
from painvit.augment import AugmentConfig
from painvit.errors import ConfigurationError, DataError, StateError
from painvit.model import PROFILES, PainViT
from painvit.numerics import Tensor
from painvit.training import (
    AdamW,
    Metrics,
    MultiTaskLossState,
    TrainConfig,
    adamw_step,
    ce_label_smoothing,
    confusion_matrix,
    evaluate,
    lr_at,
    metrics_from_confusion,
    multitask_loss,
    restore_state,
    train,
)


class TestCrossEntropy:
    def test_strong_logits_drive_loss_to_zero(self):
        logits = Tensor(np.array([[30.0, 0.0, 0.0], [0.0, 30.0, 0.0]]))
        loss = ce_label_smoothing(logits, [0, 1], 0.0)
        assert float(loss.data) < 1e-12

    def test_uniform_logits_give_log_c_for_any_smoothing(self):
        logits = Tensor(np.zeros((4, 3)))
        for smoothing in (0.0, 0.1, 0.4, 0.8):
            loss = ce_label_smoothing(logits, [0, 1, 2, 1], smoothing)
            assert abs(float(loss.data) - math.log(3.0)) < 1e-12

    def test_matches_per_sample_formula(self):
        rng = np.random.default_rng(0)
        logits_arr = rng.normal(scale=3.0, size=(8, 5))
        targets = rng.integers(0, 5, size=8)
        smoothing = 0.23
        loss = ce_label_smoothing(Tensor(logits_arr), targets, smoothing)

        total = 0.0
        for i in range(8):
            row = logits_arr[i]
            log_probs = row - (row.max() + np.log(np.exp(row - row.max()).sum()))
            q = np.full(5, smoothing / 4.0)
            q[targets[i]] = 1.0 - smoothing
            total += -(q * log_probs).sum()
        assert abs(float(loss.data) - total / 8.0) < 1e-12

    def test_target_out_of_range(self):
        with pytest.raises(DataError):
            ce_label_smoothing(Tensor(np.zeros((2, 3))), [0, 3], 0.0)

    def test_loss_bounded_below_by_target_entropy(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            classes = int(rng.integers(2, 6))
            batch = int(rng.integers(1, 7))
            smoothing = float(rng.uniform(0.0, 0.9))
            logits = Tensor(rng.normal(scale=4.0, size=(batch, classes)))
            targets = rng.integers(0, classes, size=batch)
            loss = float(ce_label_smoothing(logits, targets, smoothing).data)
            q = np.full(classes, smoothing / (classes - 1))
            q[0] = 1.0 - smoothing
            entropy = -(q[q > 0] * np.log(q[q > 0])).sum()
            assert loss >= entropy - 1e-12

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        targets = rng.integers(0, 3, size=4)

        def loss():
            return ce_label_smoothing(logits, targets, 0.1)

        assert nx.check_gradients(loss, [logits]) < 1e-6


class TestMultiTaskLoss:
    def test_zero_weights_reduce_to_plain_sum(self):
        state = MultiTaskLossState.create(3)
        values = [1.5, 0.25, 2.0]
        state.task_losses = [Tensor(np.array(v)) for v in values]
        total = multitask_loss(state)
        assert float(total.data) == sum(values)

    def test_single_task_arithmetic(self):
        state = MultiTaskLossState.create(1)
        state.weights.data = np.array([math.log(2.0)])
        state.task_losses = [Tensor(np.array(2.0))]
        total = multitask_loss(state)
        assert abs(float(total.data) - (2.0 * 2.0 + math.log(2.0))) < 1e-14

    def test_weight_gradient_matches_closed_form_and_fd(self):
        rng = np.random.default_rng(3)
        state = MultiTaskLossState.create(4)
        state.weights.data = rng.normal(scale=0.5, size=4)
        losses = rng.uniform(0.5, 3.0, size=4)
        state.task_losses = [Tensor(np.array(v)) for v in losses]

        total = multitask_loss(state)
        total.backward()
        expected = np.exp(state.weights.data) * losses + 1.0
        assert np.max(np.abs(state.weights.grad - expected)) < 1e-12
        state.weights.zero_grad()

        err = nx.check_gradients(lambda: multitask_loss(state), [state.weights])
        assert err < 1e-6

    def test_attenuating_sign_variant(self):
        state = MultiTaskLossState.create(2)
        state.weights.data = np.array([0.3, -0.7])
        losses = np.array([1.0, 2.0])
        state.task_losses = [Tensor(np.array(v)) for v in losses]
        total = multitask_loss(state, uncertainty_sign=-1)
        expected = (np.exp(-state.weights.data) * losses + state.weights.data).sum()
        assert abs(float(total.data) - expected) < 1e-14
        total.backward()
        grad_expected = -np.exp(-state.weights.data) * losses + 1.0
        assert np.max(np.abs(state.weights.grad - grad_expected)) < 1e-12

    def test_missing_loss_raises(self):
        state = MultiTaskLossState.create(2)
        state.task_losses = [Tensor(np.array(1.0))]
        with pytest.raises(StateError):
            multitask_loss(state)

    def test_gradient_flows_through_task_losses(self):
        state = MultiTaskLossState.create(2)
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        state.task_losses = [nx.tensor_sum(x * x), nx.tensor_sum(x)]
        multitask_loss(state).backward()
        assert np.allclose(x.grad, 2.0 * x.data + 1.0, atol=1e-14)


class TestSchedule:
    def cfg(self, **kw):
        defaults = dict(lr=2e-5, epochs=100, warmup_epochs=10, cooldown_epochs=10, steps_per_epoch=4)
        defaults.update(kw)
        return TrainConfig(**defaults)

    def test_warmup_starts_at_zero(self):
        assert lr_at(0, self.cfg()) == 0.0

    def test_end_of_warmup_hits_peak(self):
        config = self.cfg()
        assert lr_at(10 * 4, config) == 2e-5

    def test_non_increasing_after_warmup(self):
        config = self.cfg()
        values = [lr_at(s, config) for s in range(10 * 4, 100 * 4)]
        assert all(b <= a + 1e-18 for a, b in zip(values, values[1:]))

    def test_cooldown_is_constant_floor(self):
        config = self.cfg()
        floor = 2e-5 * 0.01
        for step in range(90 * 4, 100 * 4):
            assert lr_at(step, config) == floor

    def test_invalid_warmup_cooldown(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=10, warmup_epochs=8, cooldown_epochs=5).validate()


class TestAdamW:
    def test_zero_gradient_no_decay_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        adamw_step([p], [np.zeros(2)], {}, lr=1e-3, weight_decay=0.0)
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_minus_lr(self):
        p = Tensor(np.array([0.5]), requires_grad=True)
        lr = 1e-3
        adamw_step([p], [np.ones(1)], {}, lr=lr, weight_decay=0.0)
        # bias-corrected first step: -lr * 1 / (1 + eps)
        assert abs(float(p.data[0]) - (0.5 - lr)) < lr * 1e-6

    def test_decoupled_decay_shrinks_params(self):
        p = Tensor(np.array([2.0, -4.0]), requires_grad=True)
        lr, wd = 1e-2, 0.1
        adamw_step([p], [np.zeros(2)], {}, lr=lr, weight_decay=wd)
        assert np.allclose(p.data, np.array([2.0, -4.0]) * (1.0 - lr * wd), atol=1e-15)

    def test_moments_accumulate_across_steps(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = {}
        for _ in range(3):
            adamw_step([p], [np.ones(1)], state, lr=1e-3, weight_decay=0.0)
        assert state["t"] == 3
        assert float(p.data[0]) < 0.0


class TestMetrics:
    def test_perfect_predictions(self):
        confusion = np.diag([5, 3, 7])
        m = metrics_from_confusion(confusion)
        assert m.accuracy == 1.0
        assert m.macro_f1 == 1.0

    def test_constant_predictor_on_balanced_classes(self):
        labels = np.array([0] * 10 + [1] * 10 + [2] * 10)
        predictions = np.zeros(30, dtype=np.int64)
        m = metrics_from_confusion(confusion_matrix(labels, predictions, 3))
        assert abs(m.accuracy - 1.0 / 3.0) < 1e-15
        assert abs(m.macro_recall - 1.0 / 3.0) < 1e-15

    def test_matches_sklearn_macro_metrics(self):
        from sklearn.metrics import accuracy_score, precision_recall_fscore_support

        rng = np.random.default_rng(4)
        for _ in range(50):
            classes = int(rng.integers(2, 6))
            n = int(rng.integers(5, 60))
            labels = rng.integers(0, classes, size=n)
            predictions = rng.integers(0, classes, size=n)
            m = metrics_from_confusion(confusion_matrix(labels, predictions, classes))
            p, r, f1, _ = precision_recall_fscore_support(
                labels, predictions, labels=range(classes), average="macro", zero_division=0
            )
            assert abs(m.accuracy - accuracy_score(labels, predictions)) < 1e-12
            assert abs(m.macro_precision - p) < 1e-12
            assert abs(m.macro_recall - r) < 1e-12
            assert abs(m.macro_f1 - f1) < 1e-12

    def test_zero_support_class_contributes_zero(self):
        labels = np.array([0, 0, 1, 1])
        predictions = np.array([0, 0, 1, 1])
        m = metrics_from_confusion(confusion_matrix(labels, predictions, 3))
        assert abs(m.macro_recall - 2.0 / 3.0) < 1e-15

    def test_accuracy_equals_trace_over_sum(self):
        rng = np.random.default_rng(5)
        confusion = rng.integers(0, 20, size=(4, 4))
        confusion[0, 0] += 1  # ensure nonzero total
        m = metrics_from_confusion(confusion)
        assert m.accuracy == np.trace(confusion) / confusion.sum()

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            metrics_from_confusion(np.zeros((3, 3), dtype=int))


def make_synthetic_classes(rng, per_class, size=96):
    """Class-coded gratings: orientation and frequency identify the class."""
    images, labels = [], []
    freqs = [(3, 0), (0, 3), (4, 4)]
    coords = np.linspace(0.0, 2.0 * np.pi, size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    for label, (fy, fx) in enumerate(freqs):
        for _ in range(per_class):
            phase = rng.uniform(0, 2 * np.pi)
            pattern = 0.5 + 0.45 * np.sin(fy * yy + fx * xx + phase)
            img = np.stack([pattern, pattern * 0.8, pattern * 0.6])
            img += rng.normal(scale=0.05, size=img.shape)
            images.append(img)
            labels.append(label)
    return np.stack(images), np.array(labels)


class TestTrainLoop:
    def test_step_count_arithmetic(self):
        model = PainViT(PROFILES["tiny"], seed=0)
        rng = np.random.default_rng(1)
        images, labels = make_synthetic_classes(rng, 4)  # 12 samples
        config = TrainConfig(lr=1e-3, epochs=1, warmup_epochs=0, cooldown_epochs=0, batch_size=6)
        train(model, images, labels, config, np.random.default_rng(2))
        assert config.steps_per_epoch == 2

    def test_fixed_seed_reproduces_loss_curve_and_weights(self):
        config = TrainConfig(
            lr=1e-3, epochs=2, warmup_epochs=0, cooldown_epochs=0, batch_size=6,
            label_smoothing=0.1,
        )
        histories, snapshots = [], []
        for _ in range(2):
            model = PainViT(PROFILES["tiny"], seed=3)
            images, labels = make_synthetic_classes(np.random.default_rng(4), 4)
            augment = AugmentConfig.uniform(0.5, squares=2, noise_amplitude=0.05)
            history, best = train(
                model, images, labels, config, np.random.default_rng(5), augment=augment
            )
            histories.append([h.train_loss for h in history])
            snapshots.append(best)
        assert histories[0] == histories[1]
        for name in snapshots[0]["params"]:
            assert np.array_equal(snapshots[0]["params"][name], snapshots[1]["params"][name])

    def test_loss_decreases_on_separable_data(self):
        model = PainViT(PROFILES["tiny"], seed=6)
        images, labels = make_synthetic_classes(np.random.default_rng(7), 6)
        config = TrainConfig(
            lr=3e-3, epochs=10, warmup_epochs=1, cooldown_epochs=1, batch_size=9
        )
        history, _ = train(model, images, labels, config, np.random.default_rng(8))
        first, last = history[0].train_loss, history[-1].train_loss
        assert last < first

    def test_empty_dataset_rejected(self):
        model = PainViT(PROFILES["tiny"], seed=9)
        with pytest.raises(DataError):
            train(model, [], [], TrainConfig(epochs=1, warmup_epochs=0, cooldown_epochs=0),
                  np.random.default_rng(0))

    def test_best_checkpoint_tracks_validation(self):
        model = PainViT(PROFILES["tiny"], seed=10)
        rng = np.random.default_rng(11)
        images, labels = make_synthetic_classes(rng, 4)
        val_images, val_labels = make_synthetic_classes(rng, 2)
        config = TrainConfig(lr=1e-3, epochs=2, warmup_epochs=0, cooldown_epochs=0, batch_size=6)
        history, best = train(
            model, images, labels, config, np.random.default_rng(12),
            val_images=val_images, val_labels=val_labels,
        )
        assert all(h.val is not None for h in history)
        restore_state(model, best)
        repeat = evaluate(model, val_images, val_labels)
        assert repeat.accuracy == max(h.val.accuracy for h in history)

    def test_evaluate_is_side_effect_free(self):
        model = PainViT(PROFILES["tiny"], seed=13)
        images, labels = make_synthetic_classes(np.random.default_rng(14), 2)
        model.forward(Tensor(images[:4]), training=True)
        a = evaluate(model, images, labels)
        b = evaluate(model, images, labels)
        assert a.accuracy == b.accuracy
        assert np.array_equal(a.confusion, b.confusion)

    def test_evaluate_uninitialized_stats_raises(self):
        model = PainViT(PROFILES["tiny"], seed=15)
        images, labels = make_synthetic_classes(np.random.default_rng(16), 1)
        with pytest.raises(StateError):
            evaluate(model, images, labels)
