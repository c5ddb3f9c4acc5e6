"""Multi-encoder embedding network.

Three feature encoders (time, space, space-time) each end in a linear
embedding layer. Their embeddings are concatenated and passed through a
joint encoder, whose embedding feeds the prediction head::

    x_t  -> dense(hidden) -> dense(emb) --+
    x_s  -> dense(hidden) -> dense(emb) --+--> dense(hidden) -> dense(emb) -> dense(hidden) -> dense(D_y)
    x_st -> conv1d(filters) -> dense(emb) +     (joint encoder)                (head)

All encoders share parameters with the predictor, so training the predictor
moves every embedding.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import astuple, dataclass, fields

import numpy as np

from .errors import FormatError, InvalidInputError, NumericalError
from .nn import (
    LayerSpec,
    ParameterSet,
    backward_layers,
    forward_layers,
    init_params,
    mse_grad,
    mse_loss,
)

log = logging.getLogger(__name__)

BLOCKS = ("time", "space", "space_time", "joint", "head")
ENCODERS = ("time", "space", "space_time", "joint", "predicted_label", "true_label")


@dataclass(frozen=True)
class EmbeddingNetConfig:
    d_t: int = 4
    d_s: int = 300
    d_st: int = 216
    st_channels: int = 9
    hidden_width: int = 1000
    embedding_dim: int = 100
    conv_filters: int = 16
    conv_kernel: int = 3
    output_dim: int = 96

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise InvalidInputError(f"{f.name} must be >= 1")
        if self.d_st % self.st_channels:
            raise InvalidInputError(f"d_st={self.d_st} is not a multiple of st_channels={self.st_channels}")
        if self.conv_kernel > self.st_length:
            raise InvalidInputError(f"conv_kernel={self.conv_kernel} exceeds series length {self.st_length}")

    @property
    def d_x(self):
        return self.d_t + self.d_s + self.d_st

    @property
    def st_length(self):
        return self.d_st // self.st_channels


def layer_specs(cfg):
    h, e = cfg.hidden_width, cfg.embedding_dim
    conv = LayerSpec.conv1d(cfg.st_channels, cfg.st_length, cfg.conv_filters, cfg.conv_kernel)
    return {
        "time": [LayerSpec.dense(cfg.d_t, h), LayerSpec.dense(h, e, "linear")],
        "space": [LayerSpec.dense(cfg.d_s, h), LayerSpec.dense(h, e, "linear")],
        "space_time": [conv, LayerSpec.dense(conv.output_size, e, "linear")],
        "joint": [LayerSpec.dense(3 * e, h), LayerSpec.dense(h, e, "linear")],
        "head": [LayerSpec.dense(e, h), LayerSpec.dense(h, cfg.output_dim, "linear")],
    }


class EmbeddingNetwork:
    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.specs = layer_specs(config)
        self._slices = {}
        pos = 0
        for name in BLOCKS:
            n = 2 * len(self.specs[name])
            self._slices[name] = slice(pos, pos + n)
            pos += n
        if params is None:
            rng = np.random.default_rng(seed)
            arrays = []
            for name in BLOCKS:
                arrays += init_params(self.specs[name], rng).arrays
            params = ParameterSet(arrays)
        expected = [s for name in BLOCKS for spec in self.specs[name] for s in (spec.weight_shape, spec.bias_shape)]
        if [a.shape for a in params.arrays] != expected:
            raise InvalidInputError("parameter shapes do not match the network config")
        self.params = params

    def block(self, name):
        return self.params.arrays[self._slices[name]]

    def split_features(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.d_x:
            raise InvalidInputError(f"expected features of width {self.config.d_x}, got shape {x.shape}")
        c = self.config
        return x[:, :c.d_t], x[:, c.d_t:c.d_t + c.d_s], x[:, c.d_t + c.d_s:]

    def _forward(self, x, upto="head"):
        parts = self.split_features(x)
        caches = {}
        embs = []
        for name, part in zip(("time", "space", "space_time"), parts):
            out, caches[name] = forward_layers(self.block(name), self.specs[name], part)
            embs.append(out)
        if upto in ("time", "space", "space_time"):
            return embs[("time", "space", "space_time").index(upto)], caches
        joint, caches["joint"] = forward_layers(self.block("joint"), self.specs["joint"], np.hstack(embs))
        if upto == "joint":
            return joint, caches
        out, caches["head"] = forward_layers(self.block("head"), self.specs["head"], joint)
        return out, caches

    def predict(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out, _ = self._forward(x[None, :] if single else x)
        return out[0] if single else out

    def loss_and_grad(self, x, y):
        out, caches = self._forward(x)
        if not np.isfinite(out).all():
            raise NumericalError("non-finite activations in forward pass")
        grads = [None] * len(self.params.arrays)

        def put(name, g):
            grads[self._slices[name]] = g

        g_head, g = backward_layers(self.block("head"), self.specs["head"], caches["head"], mse_grad(out, y))
        put("head", g_head)
        g_joint, g = backward_layers(self.block("joint"), self.specs["joint"], caches["joint"], g)
        put("joint", g_joint)
        e = self.config.embedding_dim
        for i, name in enumerate(("time", "space", "space_time")):
            g_b, _ = backward_layers(self.block(name), self.specs[name], caches[name], g[:, i * e:(i + 1) * e])
            put(name, g_b)
        return float(np.mean(mse_loss(out, y))), grads

    def copy(self):
        return EmbeddingNetwork(self.config, self.params.copy())


def build_network(cfg, seed=0):
    net = EmbeddingNetwork(cfg, seed=seed)
    log.info("built embedding network with %d trainable parameters", net.params.total_count)
    return net


def predict(net, x):
    return net.predict(x)


def param_count(net):
    return net.params.total_count


def encode(net, encoder, x, labels=None, oracle=False, chunk=4096):
    """Embed feature rows with one of the network's encoders.

    ``predicted_label`` uses the network output as the embedding; ``true_label``
    returns the stored labels and is only allowed with ``oracle=True``.
    """
    if encoder not in ENCODERS:
        raise InvalidInputError(f"unknown encoder {encoder!r}; choose from {ENCODERS}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if encoder == "true_label":
        if not oracle:
            raise InvalidInputError("true_label embeddings require oracle mode")
        if labels is None:
            raise InvalidInputError("true_label embeddings need labelled points")
        out = np.atleast_2d(np.asarray(labels, dtype=np.float64)).copy()
        if len(out) != len(x):
            raise InvalidInputError("labels and features differ in length")
    else:
        net.split_features(x)
        upto = "head" if encoder == "predicted_label" else encoder
        pieces = [net._forward(x[s:s + chunk], upto)[0] for s in range(0, len(x), chunk)]
        out = np.vstack(pieces) if pieces else net._forward(x, upto)[0]
    return out[0] if single else out


_MAGIC = b"EMBNET\x00\x00"
_VERSION = 1
_HEADER = struct.Struct("<8sI9qq")


def save_weights(net, path):
    """Flat binary: magic, version, config ints, parameter count, then float64 LE values."""
    header = _HEADER.pack(_MAGIC, _VERSION, *astuple(net.config), net.params.total_count)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(net.params.flatten().astype("<f8").tobytes())


def load_weights(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, *rest = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"{path}: not an embedding-network file")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported weights version {version} (expected {_VERSION})")
    cfg = EmbeddingNetConfig(*rest[:9])
    count = rest[9]
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise FormatError(f"{path}: expected {count} parameters, found {len(body) // 8}")
    net = EmbeddingNetwork(cfg)
    if net.params.total_count != count:
        raise FormatError(f"{path}: parameter count {count} does not match config")
    net.params.load_flat(np.frombuffer(body, dtype="<f8"))
    return net
