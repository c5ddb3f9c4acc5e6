import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from activeload.errors import InvalidInputError, NumericalError
from activeload.nn import (
    LayerSpec,
    ParameterSet,
    Sequential,
    TrainConfig,
    backward,
    dataset_loss,
    forward,
    init_params,
    mse_loss,
    train,
)

from oracles import finite_difference, max_relative_error, random_specs


# ------------------------------------------------------------------ forward

def test_dense_identity():
    spec = LayerSpec.dense(3, 3, "linear")
    params = ParameterSet([np.eye(3), np.zeros(3)])
    np.testing.assert_array_equal(forward(params, [spec], [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])


def test_dense_zero_relu():
    spec = LayerSpec.dense(4, 5, "relu")
    params = ParameterSet([np.zeros((4, 5)), np.zeros(5)])
    np.testing.assert_array_equal(forward(params, [spec], [3.0, -1.0, 2.0, 7.0]), np.zeros(5))


def test_conv1d_sliding_dot_product():
    # one channel (1, 2, 3), one filter with kernel (1, 1)
    spec = LayerSpec.conv1d(1, 3, 1, 2, "linear")
    params = ParameterSet([np.array([[1.0], [1.0]]), np.zeros(1)])
    np.testing.assert_array_equal(forward(params, [spec], [1.0, 2.0, 3.0]), [3.0, 5.0])


def test_conv1d_multichannel_layout():
    # channel-major input, position-major output
    spec = LayerSpec.conv1d(2, 3, 2, 2, "linear")
    w = np.arange(8, dtype=float).reshape(4, 2)  # rows: (c0,k0), (c0,k1), (c1,k0), (c1,k1)
    b = np.array([0.5, -0.5])
    x = np.array([1.0, 2.0, 3.0, 10.0, 20.0, 30.0])
    expected = []
    for p in range(2):
        patch = np.array([x[p], x[p + 1], x[3 + p], x[3 + p + 1]])
        expected.extend(patch @ w + b)
    np.testing.assert_allclose(forward(ParameterSet([w, b]), [spec], x), expected)


def test_forward_shape_mismatch():
    spec = LayerSpec.dense(3, 2)
    with pytest.raises(InvalidInputError):
        forward(init_params([spec], np.random.default_rng(0)), [spec], [1.0, 2.0])


def test_forward_deterministic():
    specs = [LayerSpec.dense(4, 6), LayerSpec.dense(6, 2, "linear")]
    params = init_params(specs, np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(5, 4))
    np.testing.assert_array_equal(forward(params, specs, x), forward(params, specs, x))


@pytest.mark.parametrize("spec_kwargs", [
    dict(kind="dense", input_shape=(3,), output_width=0),
    dict(kind="conv1d", input_shape=(2, 4), filters=0, kernel_size=2),
    dict(kind="conv1d", input_shape=(2, 4), filters=1, kernel_size=5),
    dict(kind="dense", input_shape=(3,), output_width=2, activation="tanh"),
    dict(kind="lstm", input_shape=(3,)),
])
def test_layer_spec_validation(spec_kwargs):
    with pytest.raises(InvalidInputError):
        LayerSpec(**spec_kwargs)


# --------------------------------------------------------------------- loss

def test_mse_examples():
    assert mse_loss([0.3, -1.0], [0.3, -1.0]) == 0.0
    assert mse_loss([1.0, 1.0], [0.0, 0.0]) == 1.0
    assert mse_loss([2.0, 0.0, 1.0], [0.0, 0.0, 0.0]) == pytest.approx(5.0 / 3.0)


def test_mse_length_mismatch():
    with pytest.raises(InvalidInputError):
        mse_loss([1.0, 2.0], [1.0])


class _Fixed:
    def __init__(self, preds):
        self.preds = np.asarray(preds, dtype=float)

    def predict(self, x):
        return self.preds[np.asarray(x, dtype=int)[:, 0]]


def test_dataset_loss_means():
    model = _Fixed([[1.0], [2.0]])
    x = np.array([[0], [1]])
    assert dataset_loss(model, x[:1], [[0.0]]) == pytest.approx(1.0)
    # per-point losses 0.2 and 0.4
    model = _Fixed([[np.sqrt(0.2)], [np.sqrt(0.4)]])
    assert dataset_loss(model, x, [[0.0], [0.0]]) == pytest.approx(0.3)


def test_dataset_loss_matches_summation_oracle():
    rng = np.random.default_rng(3)
    specs = [LayerSpec.dense(3, 4), LayerSpec.dense(4, 2, "linear")]
    model = Sequential.build(specs, seed=4)
    x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    total = 0.0
    for i in range(5):
        pred = model.predict(x[i])
        total += sum((pred[k] - y[i, k]) ** 2 for k in range(2)) / 2
    assert dataset_loss(model, x, y, chunk=2) == pytest.approx(total / 5, rel=1e-12)


def test_dataset_loss_empty():
    with pytest.raises(InvalidInputError):
        dataset_loss(_Fixed([[0.0]]), np.zeros((0, 1)), np.zeros((0, 1)))


# ----------------------------------------------------------------- backward

def test_single_neuron_hand_gradient():
    spec = LayerSpec.dense(1, 1, "linear")
    params = ParameterSet([np.array([[1.0]]), np.array([0.0])])
    dw, db = backward(params, [spec], [[2.0]], [[0.0]])
    assert dw[0, 0] == pytest.approx(8.0)
    assert db[0] == pytest.approx(4.0)


def test_zero_gradient_at_exact_fit():
    specs = [LayerSpec.dense(3, 4), LayerSpec.dense(4, 2, "linear")]
    params = init_params(specs, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(6, 3))
    y = forward(params, specs, x)
    for g in backward(params, specs, x, y):
        np.testing.assert_array_equal(g, 0.0)


def test_backward_rejects_non_finite():
    spec = LayerSpec.dense(2, 1, "linear")
    params = ParameterSet([np.array([[np.inf], [1.0]]), np.zeros(1)])
    with pytest.raises(NumericalError):
        backward(params, [spec], [[1.0, 1.0]], [[0.0]])


def test_backward_empty_batch():
    spec = LayerSpec.dense(2, 1, "linear")
    with pytest.raises(InvalidInputError):
        backward(init_params([spec], np.random.default_rng(0)), [spec], np.zeros((0, 2)), np.zeros((0, 1)))


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    specs = random_specs(rng)
    params = init_params(specs, rng)
    x = rng.normal(size=(3, specs[0].input_size))
    y = rng.normal(size=(3, specs[-1].output_size))
    assert max_relative_error(backward(params, specs, x, y), finite_difference(params, specs, x, y)) < 1e-4


# ----------------------------------------------------------------- training

def test_small_step_does_not_increase_loss():
    rng = np.random.default_rng(5)
    specs = [LayerSpec.dense(3, 1, "linear")]
    params = init_params(specs, rng)
    x, y = rng.normal(size=(20, 3)), rng.normal(size=(20, 1))
    before = np.mean(mse_loss(forward(params, specs, x), y))
    for p, g in zip(params.arrays, backward(params, specs, x, y)):
        p -= 1e-3 * g
    assert np.mean(mse_loss(forward(params, specs, x), y)) <= before


def test_train_fits_linear_map():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 2))
    x = rng.normal(size=(200, 3))
    y = x @ w + 0.5
    xv = rng.normal(size=(50, 3))
    model = Sequential.build([LayerSpec.dense(3, 2, "linear")], seed=1)
    _, curve = train(model, (x, y), (xv, xv @ w + 0.5), TrainConfig(max_epochs=60, learning_rate=0.05))
    assert curve.train[curve.best_epoch - 1] < 1e-3
    assert dataset_loss(model, x, y) < 1e-3


class _Scripted:
    """Model whose validation loss follows a script; parameters count epochs."""

    def __init__(self, val_losses):
        self.val_losses = list(val_losses)
        self.params = ParameterSet([np.zeros(1)])
        self.calls = 0

    def loss_and_grad(self, x, y):
        return 0.0, [np.array([-1.0])]  # each step adds learning_rate to the counter

    def predict(self, x):
        self.calls += 1
        if self.calls % 2 == 1:  # train-set evaluation
            return np.zeros((len(x), 1))
        epoch = self.calls // 2
        return np.full((len(x), 1), np.sqrt(self.val_losses[epoch - 1]))


def test_early_stopping_restores_best_epoch():
    model = _Scripted([1.0, 2.0, 3.0, 4.0])
    cfg = TrainConfig(max_epochs=4, patience=1, learning_rate=1.0, minibatch_size=1)
    _, curve = train(model, (np.zeros((1, 1)), np.zeros((1, 1))), (np.zeros((1, 1)), np.zeros((1, 1))), cfg)
    assert len(curve) == 2
    assert curve.best_epoch == 1
    assert model.params.arrays[0][0] == 1.0  # weights after the first epoch


def test_early_stopping_never_returns_worse_than_best():
    model = _Scripted([3.0, 1.0, 2.0, 0.5, 4.0, 5.0, 6.0])
    cfg = TrainConfig(max_epochs=7, patience=2, learning_rate=1.0, minibatch_size=1)
    _, curve = train(model, (np.zeros((1, 1)), np.zeros((1, 1))), (np.zeros((1, 1)), np.zeros((1, 1))), cfg)
    assert curve.val[curve.best_epoch - 1] == min(curve.val)
    assert model.params.arrays[0][0] == curve.best_epoch


def test_train_deterministic_and_param_count_stable():
    rng = np.random.default_rng(2)
    specs = [LayerSpec.dense(4, 8), LayerSpec.dense(8, 2, "linear")]
    x, y = rng.normal(size=(40, 4)), rng.normal(size=(40, 2))
    val = (rng.normal(size=(10, 4)), rng.normal(size=(10, 2)))
    curves = []
    for _ in range(2):
        model = Sequential.build(specs, seed=7)
        count = model.params.total_count
        _, curve = train(model, (x, y), val, TrainConfig(max_epochs=5, patience=2, seed=11, learning_rate=0.01))
        assert model.params.total_count == count
        curves.append((curve.train, curve.val))
    assert curves[0] == curves[1]


def test_train_divergence_reports_epoch():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 2)) * 1e3
    model = Sequential.build([LayerSpec.dense(2, 8), LayerSpec.dense(8, 1, "linear")], seed=0)
    with pytest.raises(NumericalError, match="epoch"):
        train(model, (x, x[:, :1] * 1e3), (x, x[:, :1]), TrainConfig(learning_rate=10.0))


def test_train_rejects_empty_sets():
    model = Sequential.build([LayerSpec.dense(2, 1, "linear")])
    with pytest.raises(InvalidInputError):
        train(model, (np.zeros((0, 2)), np.zeros((0, 1))), (np.zeros((1, 2)), np.zeros((1, 1))), TrainConfig())
    with pytest.raises(InvalidInputError):
        train(model, (np.zeros((1, 2)), np.zeros((1, 1))), (np.zeros((0, 2)), np.zeros((0, 1))), TrainConfig())


@pytest.mark.parametrize("kwargs", [
    dict(max_epochs=0), dict(patience=31), dict(learning_rate=0.0), dict(minibatch_size=0),
])
def test_train_config_validation(kwargs):
    with pytest.raises(InvalidInputError):
        TrainConfig(**kwargs)


@settings(max_examples=25, deadline=None)
@given(
    widths=st.lists(st.integers(1, 6), min_size=1, max_size=4),
    n_in=st.integers(1, 6),
)
def test_param_count_matches_arrays(widths, n_in):
    specs, prev = [], n_in
    for w in widths:
        specs.append(LayerSpec.dense(prev, w))
        prev = w
    params = init_params(specs, np.random.default_rng(0))
    assert params.total_count == sum(a.size for a in params.arrays) == sum(s.n_params for s in specs)
    vec = params.flatten()
    clone = params.copy()
    clone.load_flat(vec)
    assert np.array_equal(clone.flatten(), vec)
