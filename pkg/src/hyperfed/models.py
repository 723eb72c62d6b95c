"""The three networks of the system and the descriptor/model-generation ops.

Client model: LeNet-style ConvNet on 32x32x3 images with a C-way softmax.
Embedding network: either the same ConvNet with C extra one-hot label
channels and a linear l-dimensional output, or a single linear projection
of the one-hot label.  Hypernetwork: fully connected, descriptor in, flat
client parameter vector out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net

IMAGE_SHAPE = (3, 32, 32)

EMBED_LINEAR = "linear-onehot"
EMBED_CONV = "lenet-conv"

# hidden 100x100 blocks between the input and output projections
HYPER_SIZE_LAYERS = {"S": 1, "M": 3, "L": 5}


class UnsupportedEmbeddingError(ValueError):
    """The embedding kind cannot serve the requested descriptor mode."""


@dataclass(frozen=True)
class HyperConfig:
    l: int
    D: int
    hidden_layers: int = 3
    hidden_width: int = 100

    def __post_init__(self):
        if min(self.l, self.D, self.hidden_layers, self.hidden_width) < 1:
            raise ValueError("HyperConfig fields must be positive")


def descriptor_dim_for(n_clients: int) -> int:
    """Recommended descriptor length: a quarter of the client count."""
    return max(1, n_clients // 4)


def build_client_model(C: int) -> net.NetworkSpec:
    """Personalized client ConvNet; convolutions are unpadded."""
    if C < 2:
        raise ValueError("need at least 2 classes")
    return net.NetworkSpec(
        layers=(
            net.conv2d(3, 16, 5), net.relu(),
            net.maxpool2d(2),
            net.conv2d(16, 32, 5), net.relu(),
            net.maxpool2d(2),
            net.flatten(),
            net.dense(800, 120), net.relu(),
            net.dense(120, 84), net.relu(),
            net.dense(84, C),
            net.softmax_output(),
        ),
        input_shape=IMAGE_SHAPE,
    )


def build_embedding_net(kind: str, C: int, l: int) -> net.NetworkSpec:
    """Per-example embedding network with an l-dimensional linear output."""
    if l < 1:
        raise ValueError("descriptor length must be >= 1")
    if kind == EMBED_LINEAR:
        return net.NetworkSpec(layers=(net.dense(C, l),), input_shape=(C,))
    if kind == EMBED_CONV:
        in_ch = IMAGE_SHAPE[0] + C  # one-hot label planes appended to the image
        return net.NetworkSpec(
            layers=(
                net.conv2d(in_ch, 16, 5), net.relu(),
                net.maxpool2d(2),
                net.conv2d(16, 32, 5), net.relu(),
                net.maxpool2d(2),
                net.flatten(),
                net.dense(800, 120), net.relu(),
                net.dense(120, 84), net.relu(),
                net.dense(84, l),
            ),
            input_shape=(in_ch,) + IMAGE_SHAPE[1:],
        )
    raise ValueError(f"unknown embedding kind {kind!r}")


def build_hypernetwork(cfg: HyperConfig) -> net.NetworkSpec:
    layers = [net.dense(cfg.l, cfg.hidden_width), net.relu()]
    for _ in range(cfg.hidden_layers):
        layers += [net.dense(cfg.hidden_width, cfg.hidden_width), net.relu()]
    layers.append(net.dense(cfg.hidden_width, cfg.D))
    return net.NetworkSpec(layers=tuple(layers), input_shape=(cfg.l,))


def init_hyper_params(hyper: net.NetworkSpec, client_spec: net.NetworkSpec,
                      rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Hypernetwork init whose round-0 output is a sane client-model init.

    The final projection's weights are damped by 0.01 and its bias is set to
    a freshly sampled client initialization, so generated models start close
    to a standard init instead of near-zero noise.
    """
    params = net.init_params(hyper, rng, dtype=dtype)
    w, b = net.unflatten_params(hyper, params)[-1]
    w *= np.asarray(0.01, dtype=dtype)
    b[...] = net.init_params(client_spec, rng, dtype=dtype)
    return params


def with_label_channels(x: np.ndarray, y: np.ndarray | None, C: int) -> np.ndarray:
    """Append C constant planes to each image: 1 on the true class, else 0.

    y=None produces all-zero label planes (the unlabeled descriptor path).
    """
    b, _, h, w = x.shape
    planes = np.zeros((b, C, h, w), dtype=x.dtype)
    if y is not None:
        planes[np.arange(b), np.asarray(y, dtype=np.int64)] = 1
    return np.concatenate([x, planes], axis=1)


def one_hot(y: np.ndarray, C: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(y), C), dtype=dtype)
    out[np.arange(len(y)), np.asarray(y, dtype=np.int64)] = 1
    return out


def embedding_inputs(x: np.ndarray | None, y: np.ndarray | None, kind: str, C: int,
                     dtype=np.float32) -> np.ndarray:
    """Per-example input batch for the embedding network."""
    if kind == EMBED_LINEAR:
        if y is None:
            raise UnsupportedEmbeddingError("linear-onehot embedding consumes only labels")
        return one_hot(y, C, dtype=dtype)
    if kind == EMBED_CONV:
        if x is None:
            raise ValueError("image batch required for the convolutional embedding")
        return with_label_channels(np.asarray(x, dtype=dtype), y, C)
    raise ValueError(f"unknown embedding kind {kind!r}")


def compute_descriptor(x: np.ndarray | None, y: np.ndarray, eta_v: np.ndarray,
                       embed: net.NetworkSpec, kind: str, C: int) -> np.ndarray:
    """Client descriptor: the batch mean of per-example embeddings."""
    if y is None or len(y) == 0:
        raise ValueError("descriptor batch must be nonempty")
    inputs = embedding_inputs(x, y, kind, C, dtype=eta_v.dtype)
    return net.forward(embed, eta_v, inputs).mean(axis=0)


def compute_descriptor_unlabeled(x: np.ndarray, eta_v: np.ndarray, embed: net.NetworkSpec,
                                 kind: str, C: int) -> np.ndarray:
    """Descriptor from images only; the label planes are zeroed."""
    if kind != EMBED_CONV:
        raise UnsupportedEmbeddingError("unlabeled descriptors need the convolutional embedding")
    if x is None or len(x) == 0:
        raise ValueError("descriptor batch must be nonempty")
    inputs = embedding_inputs(x, None, kind, C, dtype=eta_v.dtype)
    return net.forward(embed, eta_v, inputs).mean(axis=0)


def descriptor_backprop(delta_v: np.ndarray, x: np.ndarray | None, y: np.ndarray | None,
                        eta_v: np.ndarray, embed: net.NetworkSpec, kind: str, C: int) -> np.ndarray:
    """Vector-Jacobian product of the batch-mean descriptor w.r.t. eta_v."""
    inputs = embedding_inputs(x, y, kind, C, dtype=eta_v.dtype)
    upstream = np.broadcast_to(np.asarray(delta_v, dtype=eta_v.dtype) / len(inputs),
                               (len(inputs), len(delta_v)))
    grad, _ = net.backward(embed, eta_v, inputs, np.ascontiguousarray(upstream))
    return grad


def generate_personal_model(v: np.ndarray, eta_h: np.ndarray, hyper: net.NetworkSpec) -> np.ndarray:
    """Hypernetwork forward pass: descriptor in, flat client parameters out."""
    if v.shape != tuple(hyper.input_shape):
        raise net.ShapeError(f"descriptor length {v.shape} != hypernetwork input {hyper.input_shape}")
    return net.forward(hyper, eta_h, v[None, :].astype(eta_h.dtype, copy=False))[0]
