"""Small feed-forward network engine: dense and 1-D convolution layers,
mean-squared-error loss, minibatch SGD with early stopping.

Everything runs on float64 numpy arrays in batch layout ``(n_samples, n_features)``.
A 1-D convolution consumes a flat channel-major vector (``channels * length``)
and emits a flat position-major vector (``positions * filters``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError, NumericalError

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "linear")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    input_shape: tuple
    output_width: int = 0
    filters: int = 0
    kernel_size: int = 0
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if self.kind == "dense":
            if len(self.input_shape) != 1 or self.input_shape[0] < 1:
                raise InvalidInputError(f"dense input_shape must be (n_in,), got {self.input_shape}")
            if self.output_width < 1:
                raise InvalidInputError("dense output_width must be >= 1")
        elif self.kind == "conv1d":
            if len(self.input_shape) != 2 or min(self.input_shape) < 1:
                raise InvalidInputError(
                    f"conv1d input_shape must be (channels, length), got {self.input_shape}"
                )
            if self.filters < 1:
                raise InvalidInputError("conv1d filters must be >= 1")
            if not 1 <= self.kernel_size <= self.input_shape[1]:
                raise InvalidInputError(
                    f"conv1d kernel_size must lie in [1, {self.input_shape[1]}], got {self.kernel_size}"
                )
        else:
            raise InvalidInputError(f"unknown layer kind {self.kind!r}")

    @classmethod
    def dense(cls, n_in, n_out, activation="relu"):
        return cls("dense", (int(n_in),), output_width=int(n_out), activation=activation)

    @classmethod
    def conv1d(cls, channels, length, filters, kernel_size, activation="relu"):
        return cls(
            "conv1d",
            (int(channels), int(length)),
            filters=int(filters),
            kernel_size=int(kernel_size),
            activation=activation,
        )

    @property
    def input_size(self):
        return int(np.prod(self.input_shape))

    @property
    def output_size(self):
        if self.kind == "dense":
            return self.output_width
        return (self.input_shape[1] - self.kernel_size + 1) * self.filters

    @property
    def weight_shape(self):
        if self.kind == "dense":
            return (self.input_shape[0], self.output_width)
        return (self.input_shape[0] * self.kernel_size, self.filters)

    @property
    def bias_shape(self):
        return (self.weight_shape[1],)

    @property
    def n_params(self):
        w = self.weight_shape
        return w[0] * w[1] + w[1]

    def fans(self):
        if self.kind == "dense":
            return self.input_shape[0], self.output_width
        return self.input_shape[0] * self.kernel_size, self.filters * self.kernel_size


def check_chain(specs):
    """Raise if consecutive layer sizes do not line up."""
    for a, b in zip(specs, specs[1:]):
        if a.output_size != b.input_size:
            raise InvalidInputError(
                f"layer output size {a.output_size} does not feed input size {b.input_size}"
            )


@dataclass
class ParameterSet:
    """Flat list of parameter arrays in layer order: W0, b0, W1, b1, ..."""

    arrays: list = field(default_factory=list)

    @property
    def total_count(self):
        return int(sum(a.size for a in self.arrays))

    def copy(self):
        return ParameterSet([a.copy() for a in self.arrays])

    def assign(self, other):
        # in place so that views held by composite models stay valid
        for dst, src in zip(self.arrays, other.arrays):
            np.copyto(dst, src)

    def flatten(self):
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.arrays])

    def load_flat(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.total_count:
            raise InvalidInputError(f"expected {self.total_count} values, got {vector.size}")
        pos = 0
        for a in self.arrays:
            a[...] = vector[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def is_finite(self):
        return all(np.isfinite(a).all() for a in self.arrays)


def init_params(specs, rng):
    """Glorot-uniform weights, zero biases."""
    arrays = []
    for spec in specs:
        fan_in, fan_out = spec.fans()
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays.append(rng.uniform(-limit, limit, size=spec.weight_shape))
        arrays.append(np.zeros(spec.bias_shape))
    return ParameterSet(arrays)


def _as_batch(x, n_in):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != n_in:
        raise InvalidInputError(f"expected inputs of width {n_in}, got shape {np.shape(x)}")
    return x, single


def _conv_patches(x, spec):
    channels, length = spec.input_shape
    k = spec.kernel_size
    x3 = x.reshape(x.shape[0], channels, length)
    # (n, C, P, K) -> (n, P, C, K) -> (n, P, C*K)
    windows = sliding_window_view(x3, k, axis=2).transpose(0, 2, 1, 3)
    return windows.reshape(x.shape[0], length - k + 1, channels * k)


def forward_layers(arrays, specs, x):
    """Run ``x`` (batch) through the layers; return output and cache for backprop."""
    cache = []
    h = x
    for i, spec in enumerate(specs):
        w, b = arrays[2 * i], arrays[2 * i + 1]
        if spec.kind == "dense":
            z = h @ w + b
            patches = None
        else:
            patches = _conv_patches(h, spec)
            z = (patches @ w + b).reshape(h.shape[0], -1)
        out = np.maximum(z, 0.0) if spec.activation == "relu" else z
        cache.append((h, patches, z))
        h = out
    return h, cache


def backward_layers(arrays, specs, cache, grad_out):
    """Propagate ``grad_out`` (d loss / d output) back through the layers.

    Returns gradients aligned with ``arrays`` and the gradient w.r.t. the input.
    """
    grads = [None] * len(arrays)
    g = grad_out
    for i in range(len(specs) - 1, -1, -1):
        spec = specs[i]
        w = arrays[2 * i]
        h, patches, z = cache[i]
        if spec.activation == "relu":
            g = g * (z > 0)
        if spec.kind == "dense":
            grads[2 * i] = h.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ w.T
        else:
            channels, length = spec.input_shape
            k = spec.kernel_size
            n, positions = h.shape[0], length - k + 1
            g3 = g.reshape(n, positions, spec.filters)
            grads[2 * i] = patches.reshape(-1, channels * k).T @ g3.reshape(-1, spec.filters)
            grads[2 * i + 1] = g3.sum(axis=(0, 1))
            dpatch = (g3 @ w.T).reshape(n, positions, channels, k)
            dx = np.zeros((n, channels, length))
            for j in range(k):
                dx[:, :, j:j + positions] += dpatch[:, :, :, j].transpose(0, 2, 1)
            g = dx.reshape(n, channels * length)
    return grads, g


def forward(params, specs, x):
    """Activations of the final layer for one vector or a batch."""
    check_chain(specs)
    xb, single = _as_batch(x, specs[0].input_size)
    out, _ = forward_layers(params.arrays, specs, xb)
    return out[0] if single else out


def mse_loss(y_hat, y):
    """Mean of squared per-dimension errors; batches give per-sample losses."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise InvalidInputError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    if y.shape[-1] == 0:
        raise InvalidInputError("empty label vector")
    return np.mean((y_hat - y) ** 2, axis=-1)


def mse_grad(y_hat, y):
    """Gradient of the mean (over samples) per-sample MSE w.r.t. predictions."""
    n, d = y.shape
    return 2.0 * (y_hat - y) / (n * d)


def backward(params, specs, x, y):
    """Gradients of the mean minibatch loss w.r.t. every parameter array."""
    check_chain(specs)
    xb, _ = _as_batch(x, specs[0].input_size)
    yb = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if xb.shape[0] == 0:
        raise InvalidInputError("empty minibatch")
    out, cache = forward_layers(params.arrays, specs, xb)
    if not np.isfinite(out).all():
        raise NumericalError("non-finite activations in forward pass")
    grads, _ = backward_layers(params.arrays, specs, cache, mse_grad(out, yb))
    return grads


class Sequential:
    """A plain stack of layers; the simplest model accepted by :func:`train`."""

    def __init__(self, specs, params):
        check_chain(specs)
        self.specs = list(specs)
        self.params = params

    @classmethod
    def build(cls, specs, seed=0):
        return cls(specs, init_params(specs, np.random.default_rng(seed)))

    def predict(self, x):
        return forward(self.params, self.specs, x)

    def loss_and_grad(self, x, y):
        out, cache = forward_layers(self.params.arrays, self.specs, x)
        if not np.isfinite(out).all():
            raise NumericalError("non-finite activations in forward pass")
        grads, _ = backward_layers(self.params.arrays, self.specs, cache, mse_grad(out, y))
        return float(np.mean(mse_loss(out, y))), grads


def dataset_loss(model, x, y, chunk=4096):
    """Average per-point MSE of ``model`` over a dataset."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0:
        raise InvalidInputError("dataset is empty")
    if len(x) != len(y):
        raise InvalidInputError(f"{len(x)} inputs but {len(y)} labels")
    total = 0.0
    for start in range(0, len(x), chunk):
        total += float(np.sum(mse_loss(model.predict(x[start:start + chunk]), y[start:start + chunk])))
    return total / len(x)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    patience: int = 10
    learning_rate: float = 1e-3
    minibatch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise InvalidInputError("max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise InvalidInputError("patience must lie in [0, max_epochs]")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.minibatch_size < 1:
            raise InvalidInputError("minibatch_size must be >= 1")


@dataclass
class LossCurve:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    best_epoch: int = 0

    def __len__(self):
        return len(self.train)


def train(model, train_set, val_set, cfg):
    """Minibatch SGD with early stopping on validation loss.

    Stops after ``cfg.max_epochs`` or once validation loss has not improved for
    ``cfg.patience`` consecutive epochs, then restores the parameters of the
    best-validation epoch. The model is updated in place and returned.
    """
    x, y = (np.asarray(a, dtype=np.float64) for a in train_set)
    xv, yv = (np.asarray(a, dtype=np.float64) for a in val_set)
    if len(x) == 0:
        raise InvalidInputError("training set is empty")
    if len(xv) == 0:
        raise InvalidInputError("validation set is empty")

    rng = np.random.default_rng(cfg.seed)
    params = model.params
    curve = LossCurve()
    best_val = np.inf
    best = None
    wait = 0
    # overflow is caught by the finite checks below and reported with its epoch
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(x))
            for start in range(0, len(x), cfg.minibatch_size):
                idx = order[start:start + cfg.minibatch_size]
                try:
                    _, grads = model.loss_and_grad(x[idx], y[idx])
                except NumericalError as exc:
                    raise NumericalError("training diverged", epoch=epoch) from exc
                for p, g in zip(params.arrays, grads):
                    p -= cfg.learning_rate * g
            train_loss = dataset_loss(model, x, y)
            val_loss = dataset_loss(model, xv, yv)
            if not (np.isfinite(train_loss) and np.isfinite(val_loss) and params.is_finite()):
                raise NumericalError("training diverged", epoch=epoch)
            curve.train.append(train_loss)
            curve.val.append(val_loss)
            if val_loss < best_val:
                best_val = val_loss
                best = params.copy()
                curve.best_epoch = epoch
                wait = 0
            else:
                wait += 1
                if wait >= cfg.patience:
                    log.debug("early stop at epoch %d (best %d)", epoch, curve.best_epoch)
                    break
    params.assign(best)
    return model, curve
