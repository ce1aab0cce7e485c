import numpy as np
import pytest

from gridse import kernels
from gridse.nn import (LSTM, AdamState, BatchNorm1D, Conv1D, Dense, Dropout, Flatten,
                       OutputAffine, ReLU, Reshape, Sequential, SimpleRNN, StaleCacheError,
                       TimeDistributedDense, TrainingError, adam_step, fit, load_checkpoint,
                       loss, rnn_step, save_checkpoint, stacked_rnn_forward)
from gridse.nn.layers import Activation

from conftest import gradcheck_error


GRAD_MODELS = {
    "dense_tanh": ([Dense(4, "tanh"), Dense(3)], (5,)),
    "dense_relu": ([Dense(6, "relu"), Dense(2, "sigmoid")], (4,)),
    "conv": ([Reshape((7, 1)), Conv1D(3, 3), ReLU(), Conv1D(2, 3), Flatten(), Dense(2)], (7,)),
    "conv_even_kernel": ([Conv1D(2, 4), Flatten()], (6, 2)),
    "simple_rnn": ([SimpleRNN(4), OutputAffine(2)], (5, 3)),
    "simple_rnn_seq": ([SimpleRNN(3, return_sequences=True), TimeDistributedDense(2, "tanh"),
                        SimpleRNN(3), OutputAffine(2)], (4, 2)),
    "lstm": ([LSTM(3), OutputAffine(2)], (4, 2)),
    "lstm_seq": ([TimeDistributedDense(3), LSTM(3, return_sequences=True), Flatten()], (3, 2)),
    "batchnorm": ([Dense(4), BatchNorm1D(), Activation("tanh"), Dense(2)], (3,)),
}


@pytest.mark.parametrize("name", sorted(GRAD_MODELS))
@pytest.mark.parametrize("mode", ["infer", "train"])
def test_gradients_match_finite_differences(name, mode):
    layers, shape = GRAD_MODELS[name]
    # fresh layer objects per parametrization
    layers = [type(l)(**l.config()) if l.config() else type(l)() for l in layers]
    model = Sequential(layers, shape, seed=1)
    x = np.random.default_rng(2).standard_normal((3, *shape)) + 0.3
    assert gradcheck_error(model, x, mode) < 1e-6


def test_dropout_gradient_in_train_mode():
    model = Sequential([Dense(5, "tanh"), Dropout(0.4), Dense(2)], (3,), seed=0)
    x = np.random.default_rng(1).standard_normal((4, 3))
    assert gradcheck_error(model, x, "train") < 1e-6


def _conv_sum(x, w, b):
    # direct cross-correlation with zero 'same' padding
    k, c, f = w.shape
    batch, length, _ = x.shape
    left = (k - 1) // 2
    y = np.tile(b, (batch, length, 1)).astype(float)
    for n in range(batch):
        for i in range(length):
            for j in range(k):
                src = i + j - left
                if 0 <= src < length:
                    y[n, i] += x[n, src] @ w[j]
    return y


def _single_conv(w):
    conv = Conv1D(1, len(w))
    model = Sequential([conv], (5, 1), seed=0)
    conv.params["w"] = np.array(w, dtype=float).reshape(-1, 1, 1)
    return model


def test_conv_center_tap_is_identity():
    x = np.arange(1.0, 6.0).reshape(1, 5, 1)
    y, _ = _single_conv([0, 1, 0]).forward(x)
    assert np.array_equal(y, x)


def test_conv_first_tap_shifts_right():
    x = np.arange(1.0, 6.0).reshape(1, 5, 1)
    y, _ = _single_conv([1, 0, 0]).forward(x)
    assert y.ravel().tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]
    assert np.array_equal(y, _conv_sum(x, np.array([1.0, 0, 0]).reshape(3, 1, 1), np.zeros(1)))


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_conv_matches_direct_sum(k):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((3, 9, 2))
    w = rng.standard_normal((k, 2, 4))
    b = rng.standard_normal(4)
    assert np.allclose(kernels.conv1d_forward(x, w, b), _conv_sum(x, w, b), atol=1e-12)


def test_relu_and_dense_identity():
    x = np.array([[-1.0, 0.0, 2.5]])
    assert ReLU().forward(x)[0].tolist() == [[0.0, 0.0, 2.5]]
    d = Dense(3)
    Sequential([d], (3,), seed=0)
    d.params["w"] = np.eye(3)
    assert np.array_equal(d.forward(x)[0], x)


def test_unknown_activation():
    with pytest.raises(ValueError):
        Dense(3, "swish")


def test_shape_errors_name_the_layer():
    model = Sequential([Dense(3), Dense(2)], (4,), seed=0)
    with pytest.raises(ValueError, match="layer 0"):
        model.forward(np.ones((2, 5)))


def test_rnn_step_oracle():
    cell = SimpleRNN(2)
    Sequential([cell], (1, 3), seed=0)
    x = np.array([[0.1, -0.2, 0.3]])
    s = np.array([[0.5, -0.5]])
    p = cell.params
    want = np.tanh(x @ p["w_in"] + s @ p["w_rec"] + p["b"])
    assert np.allclose(rnn_step(cell, x, s), want, atol=1e-15)
    with pytest.raises(ValueError):
        rnn_step(cell, np.ones((1, 2)), s)


def _cells(depth, d=2, h=3):
    cells = [SimpleRNN(h) for _ in range(depth)]
    rng = np.random.default_rng(4)
    dim = d
    for c in cells:
        c.build((1, dim), rng)
        dim = h
    return cells


def test_stacked_forward_matches_hand_unroll():
    cells = _cells(2)
    x = np.random.default_rng(0).standard_normal((4, 2))
    out = stacked_rnn_forward(cells, x)
    s1, s2 = np.zeros((1, 3)), np.zeros((1, 3))
    for t in range(4):
        s1 = np.tanh(x[t:t + 1] @ cells[0].params["w_in"] + s1 @ cells[0].params["w_rec"] + cells[0].params["b"])
        s2 = np.tanh(s1 @ cells[1].params["w_in"] + s2 @ cells[1].params["w_rec"] + cells[1].params["b"])
        assert np.allclose(out[0][t], s1[0], atol=1e-14)
        assert np.allclose(out[1][t], s2[0], atol=1e-14)


def test_depth_one_stack_equals_layer():
    cells = _cells(1)
    x = np.random.default_rng(1).standard_normal((2, 5, 2))
    seq = SimpleRNN(3, return_sequences=True)
    seq.params = cells[0].params
    assert np.array_equal(stacked_rnn_forward(cells, x)[0], seq.forward(x)[0])


def test_zero_upstream_gradient():
    model = Sequential([LSTM(3), OutputAffine(2)], (4, 2), seed=0)
    x = np.ones((2, 4, 2))
    _, cache = model.forward(x)
    grads, dx = model.backward(cache, np.zeros((2, 2)))
    assert not np.any(dx) and all(not np.any(g) for g in grads.values())


def test_dropout_expectation_and_inference():
    layer = Dropout(0.3)
    x = np.ones((2000, 50))
    y, _ = layer.forward(x, train=True, rng=np.random.default_rng(0))
    assert y.mean() == pytest.approx(1.0, abs=0.01)
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.7}
    assert np.array_equal(layer.forward(x)[0], x)
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_batchnorm_statistics():
    bn = BatchNorm1D()
    bn.build((3,), None)
    x = np.random.default_rng(0).standard_normal((500, 3)) * [1.0, 5.0, 0.1] + [2.0, -1.0, 0.0]
    y, _ = bn.forward(x, train=True)
    assert np.allclose(y.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(y.std(axis=0), 1.0, atol=1e-6)
    assert np.allclose(bn.buffers["running_mean"], 0.01 * x.mean(axis=0))


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -4.0, 0.0])}
    adam_step(p, g, AdamState(lr=0.1))
    # bias correction makes the first step lr * g / (|g| + eps)
    assert np.allclose(p["w"], [0.9, -1.9, 0.5], atol=1e-7)


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(0)
    gs = rng.standard_normal(20)
    theta, m, v = 0.7, 0.0, 0.0
    p = {"a": np.array([0.7])}
    st = AdamState(lr=0.01)
    for t, g in enumerate(gs, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        adam_step(p, {"a": np.array([g])}, st)
    assert p["a"][0] == pytest.approx(theta, abs=1e-14)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState())


def test_losses():
    v, g = loss("MAE", [1.0, 2.0, 3.0], [1.0, 0.0, 4.0])
    assert v == 1.0 and g.tolist() == [0.0, 1 / 3, -1 / 3]
    v, g = loss("mse", [1.0, 3.0], [0.0, 3.0])
    assert v == 0.5 and g.tolist() == [1.0, 0.0]
    with pytest.raises(ValueError):
        loss("MAE", [1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        loss("huber", [1.0], [1.0])


def test_stale_cache_is_rejected():
    model = Sequential([Dense(2)], (2,), seed=0)
    _, old = model.forward(np.ones((1, 2)))
    model.forward(np.ones((1, 2)))
    with pytest.raises(StaleCacheError):
        model.backward(old, np.ones((1, 2)))


def test_checkpoint_round_trip_is_exact(tmp_path):
    layers = [Reshape((6, 1)), Conv1D(4, 3), ReLU(), Flatten(), BatchNorm1D(), Dropout(0.2),
              Dense(3)]
    model = Sequential(layers, (6,), seed=5)
    x = np.random.default_rng(0).standard_normal((8, 6))
    fit(model, x, np.zeros((8, 3)), 2, batch_size=4, seed=0)
    save_checkpoint(model, tmp_path / "m.npz", {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "m.npz")
    assert meta == {"note": "x"}
    assert np.array_equal(back.predict(x), model.predict(x))
    assert back.spec() == model.spec()


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", __meta__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.npz")


def _toy(seed):
    return Sequential([Dense(8, "tanh"), Dropout(0.1), Dense(2)], (3,), seed=seed)


def test_fit_is_deterministic_and_learns():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 3))
    y = np.stack([x[:, 0] - x[:, 1], 0.5 * x[:, 2]], axis=1)
    a, ha, _ = fit(_toy(0), x, y, 30, batch_size=16, lr=1e-2, seed=1, loss_kind="MSE")
    b, hb, _ = fit(_toy(0), x, y, 30, batch_size=16, lr=1e-2, seed=1, loss_kind="MSE")
    assert ha.train_loss == hb.train_loss
    assert np.array_equal(a.predict(x), b.predict(x))
    assert ha.train_loss[-1] < 0.2 * ha.train_loss[0]
    times = [r.train_time for r in ha.records]
    assert times == sorted(times)


def test_fit_resumes_exactly():
    x = np.random.default_rng(0).standard_normal((20, 3))
    y = np.zeros((20, 2))
    full, _, _ = fit(_toy(0), x, y, 6, batch_size=8, seed=np.random.default_rng(2))
    rng = np.random.default_rng(2)
    part, hist, st = fit(_toy(0), x, y, 4, batch_size=8, seed=rng)
    part, hist, _ = fit(part, x, y, 2, batch_size=8, seed=rng, state=st, history=hist)
    assert [r.epoch for r in hist.records] == list(range(1, 7))
    assert np.array_equal(part.predict(x), full.predict(x))


def test_fit_raises_on_divergence():
    x = np.full((4, 3), np.inf)
    with pytest.raises(TrainingError) as info, np.errstate(invalid="ignore"):
        fit(_toy(0), x, np.zeros((4, 2)), 3, seed=0)
    assert info.value.epoch == 1
