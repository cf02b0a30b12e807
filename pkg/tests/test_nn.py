import math

import numpy as np
import pytest

from oracles import gradient_check, lstm_step_oracle, random_small_net
from wavestack.learners.nn import (
    LSTM, Conv1D, Dense, Dropout, MaxPool1D, Sequential, TrainConfig, TrainingDiverged,
    build_conv_seq_net, build_recurrent_net, lstm_forward, train_network,
)


@pytest.mark.parametrize("seed", range(8))
def test_random_configs_gradients(seed):
    net, x = random_small_net(np.random.default_rng(seed))
    assert gradient_check(net, x, training=True, seed=seed) < 1e-4


def test_two_unit_three_step_gradient(rng):
    net = Sequential([LSTM(2, 2, rng=rng), Dense(2, 2, rng=rng)])
    assert gradient_check(net, rng.normal(size=(3, 3, 2))) < 1e-4


def test_builders_gradients(rng):
    net = build_conv_seq_net(3, 2, filters=3, kernel_size=3, units=2, dropout=0.3, seed=1)
    assert gradient_check(net, rng.normal(size=(2, 9, 3)), training=True) < 1e-4
    net = build_recurrent_net(3, 2, units=3, seed=2)
    assert gradient_check(net, rng.normal(size=(2, 4, 3)), training=True) < 1e-4


def test_zero_weights_zero_hidden(rng):
    layer = LSTM(3, 4, return_sequences=True, rng=rng)
    for p in layer.params.values():
        p[...] = 0.0
    assert np.all(layer.forward(rng.normal(size=(2, 5, 3))) == 0.0)


def test_single_step_hand_oracle():
    layer = LSTM(1, 1, rng=np.random.default_rng(0))
    for p in layer.params.values():
        p[...] = 0.0
    layer.params["b"][2] = 10.0  # output gate
    layer.params["b"][3] = 10.0  # candidate
    h = layer.forward(np.array([[[0.7]]]))[0, 0]
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    c = sig(0.0) * math.tanh(10.0)
    assert abs(h - sig(10.0) * math.tanh(c)) < 1e-12


def test_multi_step_matches_loop_oracle(rng):
    D, H, T = 2, 3, 4
    layer = LSTM(D, H, return_sequences=True, rng=rng)
    x = rng.normal(size=(1, T, D))
    hs = layer.forward(x)[0]
    h, c = [0.0] * H, [0.0] * H
    Wx, Wh, b = (layer.params[k].tolist() for k in ("Wx", "Wh", "b"))
    for t in range(T):
        h, c = lstm_step_oracle(x[0, t].tolist(), h, c, Wx, Wh, b)
        assert np.allclose(hs[t], h, atol=1e-12)


def test_constant_input_contracts(rng):
    net = build_recurrent_net(3, 2, units=8, seed=3)
    h = lstm_forward(net, np.tile(rng.normal(size=3), (200, 1)))
    steps = np.abs(np.diff(h, axis=0)).max(axis=1)
    assert steps[-1] < 1e-6 and steps[-1] < steps[10]
    assert np.all(np.abs(h) < 1.0)


def test_parameter_count():
    net = build_recurrent_net(3, 2, units=64)
    assert net.n_params() == 4 * 64 * (3 + 64 + 1) + 64 * 2 + 2


def test_conv_identity_kernel(rng):
    conv = Conv1D(1, 1, 5, rng=rng)
    conv.params["W"][...] = np.array([0, 0, 1, 0, 0], dtype=float).reshape(5, 1, 1)
    conv.params["b"][...] = 0.0
    x = rng.normal(size=(2, 12, 1))
    out = conv.forward(x)
    assert out.shape == (2, 8, 1) and np.array_equal(out, x[:, 2:-2])


def test_conv_rejects_short_window(rng):
    with pytest.raises(ValueError):
        Conv1D(1, 2, 5, rng=rng).forward(np.zeros((1, 4, 1)))


def test_maxpool_example():
    out = MaxPool1D(2).forward(np.array([1.0, 3.0, 2.0, 5.0]).reshape(1, 4, 1))
    assert out.ravel().tolist() == [3.0, 5.0]
    assert MaxPool1D(2).forward(np.zeros((1, 7, 2))).shape == (1, 3, 2)


def test_zero_input_gives_output_bias():
    net = build_conv_seq_net(3, 2, filters=4, units=5, seed=0)
    net.layers[-1].params["b"][...] = [0.25, -1.5]
    for layer in net.layers:
        if "b" in layer.params and layer is not net.layers[-1]:
            layer.params["b"][...] = 0.0
    pred = net.predict(np.zeros((3, 20, 3)))
    assert np.allclose(pred, [[0.25, -1.5]] * 3, atol=1e-12)


def test_dropout_identity_at_predict(rng):
    x = rng.normal(size=(4, 5))
    assert np.array_equal(Dropout(0.5).forward(x), x)
    y = Dropout(0.5).forward(np.ones((2000, 50)), training=True, rng=rng)
    assert abs(y.mean() - 1.0) < 0.02 and set(np.unique(y)) <= {0.0, 2.0}


def test_zero_targets_exit_immediately(rng):
    net = build_recurrent_net(2, 1, units=3, seed=0)
    for p in net.layers[-1].params.values():
        p[...] = 0.0
    before = [p.copy() for _, _, p in net.parameters()]
    hist = train_network(net, rng.normal(size=(40, 5, 2)), np.zeros(40), TrainConfig(epochs=5))
    assert hist.train_loss == [0.0]
    assert all(np.array_equal(a, p) for a, (_, _, p) in zip(before, net.parameters()))


def test_learns_linear_map(rng):
    X = rng.normal(size=(50, 4, 2))
    y = X[:, -1, :] @ np.array([[0.5], [-0.3]])
    net = build_recurrent_net(2, 1, units=8, dropout=0.0, seed=0)
    train_network(net, X, y, TrainConfig(epochs=400, batch_size=10, patience=400, val_fraction=0.0,
                                         learning_rate=1e-2), seed=0)
    assert float(np.mean((net.predict(X) - y) ** 2)) < 1e-3


def test_training_deterministic(rng):
    X, y = rng.normal(size=(60, 5, 2)), rng.normal(size=(60, 2))
    preds = []
    for _ in range(2):
        net = build_recurrent_net(2, 2, units=4, seed=7)
        train_network(net, X, y, TrainConfig(epochs=3), seed=11)
        preds.append(net.predict(X))
    assert np.array_equal(*preds)


def test_divergence_raises(rng):
    net = build_recurrent_net(2, 1, units=3, seed=0)
    X = rng.normal(size=(30, 4, 2))
    with pytest.raises(TrainingDiverged):
        train_network(net, X, np.full(30, np.inf), TrainConfig(epochs=2))


def test_early_stopping_restores_best(rng):
    X, y = rng.normal(size=(100, 4, 2)), rng.normal(size=(100, 1))
    net = build_recurrent_net(2, 1, units=4, seed=0)
    hist = train_network(net, X, y, TrainConfig(epochs=40, patience=2, learning_rate=5e-2), seed=0)
    val = float(np.mean((net.predict(X[90:]) - y[90:]) ** 2))
    assert abs(val - min(hist.val_loss)) < 1e-9


def test_spec_round_trip(rng):
    net = build_conv_seq_net(3, 2, filters=4, units=5, seed=0)
    clone = Sequential.from_spec(net.spec())
    for (_, _, a), (_, _, b) in zip(net.parameters(), clone.parameters()):
        b[...] = a
    x = rng.normal(size=(2, 12, 3))
    assert np.array_equal(net.predict(x), clone.predict(x))
