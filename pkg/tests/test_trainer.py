import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src_python')))

from config import TrainConfig
from errors import DivergedTraining, TooFewWindows
from nn import Activation, Conv1d, Dense, GlobalAvgPool1d, Network
from trainer import loss_and_accuracy, predict_batches, train_network

TOY = [Conv1d(2, 4, 3), Activation("ELU"), GlobalAvgPool1d(), Dense(4, 1), Activation("Sigmoid")]


def _toy_data(n, seed):
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(np.float32)
    x = rng.normal(size=(n, 2, 20)).astype(np.float32)
    x[:, 0, :] += (2.0 * y - 1.0)[:, None]
    return x, y


@pytest.fixture
def toy():
    x_train, y_train = _toy_data(120, 0)
    x_val, y_val = _toy_data(40, 1)
    return x_train, y_train, x_val, y_val


class TestTrainNetwork:
    def test_loss_decreases_on_separable_data(self, toy):
        x_train, y_train, x_val, y_val = toy
        net = Network(TOY, seed=0)
        cfg = TrainConfig(batch_size=16, learning_rate=1e-2, max_epochs=30, early_stop_patience=30, seed=0)
        result = train_network(net, x_train, y_train, x_val, y_val, cfg, stage="toy")
        assert result.history[-1].train_loss < result.history[0].train_loss
        probs = predict_batches(net, x_val, 16)
        _, accuracy = loss_and_accuracy(probs, y_val, 0.0)
        assert accuracy >= 0.9

    def test_same_seed_same_weights(self, toy):
        x_train, y_train, x_val, y_val = toy
        cfg = TrainConfig(batch_size=32, learning_rate=1e-2, max_epochs=3, seed=5)
        a, b = Network(TOY, seed=1), Network(TOY, seed=1)
        train_network(a, x_train, y_train, x_val, y_val, cfg)
        train_network(b, x_train, y_train, x_val, y_val, cfg)
        for key, value in a.state_dict().items():
            np.testing.assert_array_equal(value, b.state_dict()[key])

    def test_early_stop_without_progress(self, toy):
        x_train, y_train, x_val, y_val = toy
        cfg = TrainConfig(batch_size=32, learning_rate=1e-12, min_lr=1e-13, max_epochs=50,
                          early_stop_patience=3, seed=0)
        seen = []
        result = train_network(Network(TOY, seed=2), x_train, y_train, x_val, y_val, cfg, on_epoch=seen.append)
        assert result.stopped_early
        assert result.best_epoch == 0
        assert result.epochs_run == 4
        assert [e.epoch for e in seen] == [0, 1, 2, 3]

    def test_frozen_layers_untouched(self, toy):
        x_train, y_train, _, _ = toy
        net = Network(TOY, seed=3)
        net.freeze(3)
        conv_before = net.state_dict()["0.Conv1d.weight"].copy()
        dense_before = net.state_dict()["3.Dense.weight"].copy()
        cfg = TrainConfig(batch_size=32, learning_rate=1e-2, max_epochs=3)
        result = train_network(net, x_train, y_train, None, None, cfg, stage="head")
        np.testing.assert_array_equal(net.state_dict()["0.Conv1d.weight"], conv_before)
        assert not np.array_equal(net.state_dict()["3.Dense.weight"], dense_before)
        # no validation data: every epoch logs train metrics only
        assert all(e.val_loss is None for e in result.history)

    def test_train_from_pooled_features(self):
        rng = np.random.default_rng(4)
        y = (np.arange(60) % 2).astype(np.float32)
        features = rng.normal(size=(60, 4)).astype(np.float32) + y[:, None]
        net = Network(TOY, seed=4)
        cfg = TrainConfig(batch_size=20, learning_rate=1e-2, max_epochs=2)
        result = train_network(net, features, y, features, y, cfg, start=3)
        assert result.epochs_run == 2
        assert predict_batches(net, features, 20, start=3).shape == (60,)

    def test_diverged(self, toy):
        x_train, y_train, _, _ = toy
        x_bad = x_train.copy()
        x_bad[0, 0, 0] = np.nan
        cfg = TrainConfig(batch_size=len(x_bad), max_epochs=2)
        with pytest.raises(DivergedTraining) as exc:
            train_network(Network(TOY), x_bad, y_train, None, None, cfg, fold=7)
        assert exc.value.fold == 7
        assert exc.value.epoch == 0

    def test_empty_training_set(self):
        with pytest.raises(TooFewWindows):
            train_network(Network(TOY), np.zeros((0, 2, 20), dtype=np.float32), np.zeros(0),
                          None, None, TrainConfig())

    def test_result_serializes(self, toy):
        x_train, y_train, x_val, y_val = toy
        result = train_network(Network(TOY), x_train, y_train, x_val, y_val,
                               TrainConfig(batch_size=64, max_epochs=1), stage="stage1")
        data = result.to_dict()
        assert data["stage"] == "stage1"
        assert data["epochs_run"] == 1
        assert set(data["history"][0]) >= {"epoch", "lr", "train_loss", "val_loss", "grad_norm"}


def test_predict_batches_covers_every_row():
    x, _ = _toy_data(50, 9)
    net = Network(TOY)
    np.testing.assert_allclose(predict_batches(net, x, 7), net.forward(x).reshape(-1), rtol=1e-6)
