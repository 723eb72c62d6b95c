"""Minimal deterministic neural-network kernel on flat parameter vectors.

Supported layers: valid-padding 2d convolution, non-overlapping max pooling,
dense, relu, flatten and a softmax output layer.  Tensors are plain numpy
arrays with an explicit batch axis (images are channel-first), network
parameters live in a single flat vector with a canonical layout: weights
then biases per layer, layers in spec order, row-major within each tensor.

Compute precision follows the dtype of the parameter vector; float32 is the
default for training, float64 is used by the gradient-oracle tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Layer sizes do not chain together or a tensor has the wrong shape."""


class NumericError(ArithmeticError):
    """A forward pass produced a non-finite intermediate value."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    pool: int = 0
    in_features: int = 0
    out_features: int = 0


def conv2d(in_channels: int, out_channels: int, kernel: int) -> LayerSpec:
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels, kernel=kernel)


def maxpool2d(pool: int = 2) -> LayerSpec:
    return LayerSpec("maxpool2d", pool=pool)


def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def softmax_output() -> LayerSpec:
    return LayerSpec("softmax_output")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus the (batch-free) input shape.

    Images use (channels, height, width); flat inputs use (features,).
    """

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    output_dim: int = field(default=0)

    def __post_init__(self):
        if any(d < 1 for d in self.input_shape):
            raise ShapeError(f"input shape {self.input_shape} has a non-positive dim")
        out = _infer_shapes(self.layers, self.input_shape)[-1]
        if len(out) != 1:
            raise ShapeError(f"network output shape {out} is not a flat vector")
        if self.output_dim == 0:
            object.__setattr__(self, "output_dim", out[0])
        elif self.output_dim != out[0]:
            raise ShapeError(f"declared output_dim {self.output_dim} != inferred {out[0]}")


def _infer_shapes(layers, input_shape) -> list[tuple[int, ...]]:
    """Shape after each layer; raises ShapeError naming the offending layer."""
    shapes = [tuple(input_shape)]
    cur = tuple(input_shape)
    for idx, layer in enumerate(layers):
        name = f"layer {idx} ({layer.kind})"
        if layer.kind == "conv2d":
            if len(cur) != 3:
                raise ShapeError(f"{name}: expected (c,h,w) input, got {cur}")
            c, h, w = cur
            if layer.in_channels != c:
                raise ShapeError(f"{name}: in_channels {layer.in_channels} != incoming {c}")
            if layer.kernel < 1 or layer.out_channels < 1:
                raise ShapeError(f"{name}: non-positive kernel/channels")
            oh, ow = h - layer.kernel + 1, w - layer.kernel + 1
            if oh < 1 or ow < 1:
                raise ShapeError(f"{name}: kernel {layer.kernel} larger than input {h}x{w}")
            cur = (layer.out_channels, oh, ow)
        elif layer.kind == "maxpool2d":
            if len(cur) != 3:
                raise ShapeError(f"{name}: expected (c,h,w) input, got {cur}")
            c, h, w = cur
            if layer.pool < 1 or h < layer.pool or w < layer.pool:
                raise ShapeError(f"{name}: pool {layer.pool} does not fit {h}x{w}")
            cur = (c, h // layer.pool, w // layer.pool)
        elif layer.kind == "dense":
            feat = int(np.prod(cur))
            if len(cur) != 1:
                raise ShapeError(f"{name}: dense needs a flat input, got {cur} (missing flatten?)")
            if layer.in_features != feat:
                raise ShapeError(f"{name}: in_features {layer.in_features} != incoming {feat}")
            if layer.out_features < 1:
                raise ShapeError(f"{name}: non-positive out_features")
            cur = (layer.out_features,)
        elif layer.kind == "flatten":
            cur = (int(np.prod(cur)),)
        elif layer.kind in ("relu", "softmax_output"):
            pass
        else:
            raise ShapeError(f"{name}: unknown layer kind")
        shapes.append(cur)
    return shapes


def layer_param_shapes(spec: NetworkSpec) -> list[tuple[tuple[int, ...], tuple[int, ...]] | None]:
    """(weight_shape, bias_shape) per layer, None for parameter-free layers."""
    _infer_shapes(spec.layers, spec.input_shape)
    out = []
    for layer in spec.layers:
        if layer.kind == "conv2d":
            out.append(((layer.out_channels, layer.in_channels, layer.kernel, layer.kernel),
                        (layer.out_channels,)))
        elif layer.kind == "dense":
            out.append(((layer.in_features, layer.out_features), (layer.out_features,)))
        else:
            out.append(None)
    return out


def param_count(spec: NetworkSpec) -> int:
    total = 0
    for shapes in layer_param_shapes(spec):
        if shapes is not None:
            w, b = shapes
            total += int(np.prod(w)) + int(np.prod(b))
    return total


def unflatten_params(spec: NetworkSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray] | None]:
    """Views into the flat vector as per-layer (weights, biases)."""
    if params.ndim != 1 or params.shape[0] != param_count(spec):
        raise ShapeError(f"parameter vector length {params.shape} != {param_count(spec)}")
    out, off = [], 0
    for shapes in layer_param_shapes(spec):
        if shapes is None:
            out.append(None)
            continue
        wshape, bshape = shapes
        wn, bn = int(np.prod(wshape)), int(np.prod(bshape))
        out.append((params[off:off + wn].reshape(wshape), params[off + wn:off + wn + bn].reshape(bshape)))
        off += wn + bn
    return out


def flatten_params(spec: NetworkSpec, per_layer) -> np.ndarray:
    """Inverse of unflatten_params for the same spec."""
    parts = []
    for entry in per_layer:
        if entry is None:
            continue
        w, b = entry
        parts.append(np.asarray(w).ravel())
        parts.append(np.asarray(b).ravel())
    if not parts:
        return np.zeros(0)
    vec = np.concatenate(parts)
    if vec.shape[0] != param_count(spec):
        raise ShapeError("per-layer tensors do not match the spec")
    return vec


def init_params(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    params = np.zeros(param_count(spec), dtype=dtype)
    for layer, views in zip(spec.layers, unflatten_params(spec, params)):
        if views is None:
            continue
        w, _ = views
        if layer.kind == "conv2d":
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            fan_out = layer.out_channels * layer.kernel * layer.kernel
        else:
            fan_in, fan_out = layer.in_features, layer.out_features
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-bound, bound, size=w.shape).astype(dtype)
    return params


def _check_finite(arr: np.ndarray, idx: int, kind: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value after layer {idx} ({kind})")


def _conv_cols(x: np.ndarray, kernel: int) -> np.ndarray:
    b, c, h, w = x.shape
    oh, ow = h - kernel + 1, w - kernel + 1
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))  # (b,c,oh,ow,k,k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, c * kernel * kernel)


def _layer_forward(layer: LayerSpec, x: np.ndarray, views) -> np.ndarray:
    if layer.kind == "conv2d":
        w, b = views
        bsz, _, h, ww = x.shape
        oh, ow = h - layer.kernel + 1, ww - layer.kernel + 1
        cols = _conv_cols(x, layer.kernel)
        y = cols @ w.reshape(layer.out_channels, -1).T + b
        return y.reshape(bsz, oh, ow, layer.out_channels).transpose(0, 3, 1, 2)
    if layer.kind == "maxpool2d":
        p = layer.pool
        bsz, c, h, w = x.shape
        oh, ow = h // p, w // p
        win = x[:, :, :oh * p, :ow * p].reshape(bsz, c, oh, p, ow, p)
        return win.transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, oh, ow, p * p).max(axis=-1)
    if layer.kind == "dense":
        w, b = views
        return x @ w + b
    if layer.kind == "relu":
        return np.maximum(x, 0)
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if layer.kind == "softmax_output":
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    raise ShapeError(f"unknown layer kind {layer.kind!r}")


def _run_layers(spec: NetworkSpec, params: np.ndarray, x: np.ndarray, *, logits: bool,
                keep: bool):
    if x.shape[1:] != tuple(spec.input_shape):
        raise ShapeError(f"input shape {x.shape[1:]} != spec input {tuple(spec.input_shape)}")
    x = np.ascontiguousarray(x, dtype=params.dtype)
    layers = spec.layers
    if logits and layers and layers[-1].kind == "softmax_output":
        layers = layers[:-1]
    acts = [x] if keep else None
    cur = x
    for idx, (layer, views) in enumerate(zip(layers, unflatten_params(spec, params))):
        cur = _layer_forward(layer, cur, views)
        _check_finite(cur, idx, layer.kind)
        if keep:
            acts.append(cur)
    return cur, acts, layers


def forward(spec: NetworkSpec, params: np.ndarray, x: np.ndarray, *, logits: bool = False) -> np.ndarray:
    """Evaluate the network on a batch; logits=True skips a trailing softmax."""
    out, _, _ = _run_layers(spec, params, x, logits=logits, keep=False)
    return out


def _layer_backward(layer: LayerSpec, x: np.ndarray, y: np.ndarray, dy: np.ndarray, views):
    """Returns (dW, db, dx); dW/db are None for parameter-free layers."""
    if layer.kind == "conv2d":
        w, _ = views
        k = layer.kernel
        bsz, _, h, ww = x.shape
        oh, ow = h - k + 1, ww - k + 1
        cols = _conv_cols(x, k)
        dymat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(bsz * oh * ow, layer.out_channels)
        dw = (dymat.T @ cols).reshape(w.shape)
        db = dymat.sum(axis=0)
        dcols = (dymat @ w.reshape(layer.out_channels, -1)).reshape(bsz, oh, ow, layer.in_channels, k, k)
        dx = np.zeros_like(x)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dw, db, dx
    if layer.kind == "maxpool2d":
        p = layer.pool
        bsz, c, h, w = x.shape
        oh, ow = h // p, w // p
        win = x[:, :, :oh * p, :ow * p].reshape(bsz, c, oh, p, ow, p)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, oh, ow, p * p)
        idx = win.argmax(axis=-1)  # first maximum wins: deterministic routing
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dx = np.zeros_like(x)
        dx[:, :, :oh * p, :ow * p] = (
            dwin.reshape(bsz, c, oh, ow, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, oh * p, ow * p))
        return None, None, dx
    if layer.kind == "dense":
        w, _ = views
        return x.T @ dy, dy.sum(axis=0), dy @ w.T
    if layer.kind == "relu":
        return None, None, dy * (x > 0)
    if layer.kind == "flatten":
        return None, None, dy.reshape(x.shape)
    if layer.kind == "softmax_output":
        s = y
        return None, None, s * (dy - (dy * s).sum(axis=1, keepdims=True))
    raise ShapeError(f"unknown layer kind {layer.kind!r}")


def backward(spec: NetworkSpec, params: np.ndarray, x: np.ndarray, output_grad: np.ndarray,
             *, logits: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode (param_grad, input_grad) for the given upstream gradient.

    logits=True treats output_grad as the gradient at the pre-softmax logits.
    Activations are recomputed internally.
    """
    out, acts, layers = _run_layers(spec, params, x, logits=logits, keep=True)
    if output_grad.shape != out.shape:
        raise ShapeError(f"output_grad shape {output_grad.shape} != output {out.shape}")
    param_views = unflatten_params(spec, params)[:len(layers)]
    param_grad = np.zeros(param_count(spec), dtype=params.dtype)
    grad_views = unflatten_params(spec, param_grad)[:len(layers)]
    dy = np.ascontiguousarray(output_grad, dtype=params.dtype)
    for idx in range(len(layers) - 1, -1, -1):
        dw, db, dy = _layer_backward(layers[idx], acts[idx], acts[idx + 1], dy, param_views[idx])
        if dw is not None:
            gw, gb = grad_views[idx]
            gw[...] = dw
            gb[...] = db
    return param_grad, dy


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, ncls = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= ncls:
        raise ValueError(f"label out of range [0, {ncls})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    grad = np.exp(z - lse[:, None])
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float, momentum: float,
             state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """state <- momentum*state + grad; params <- params - lr*state."""
    if params.shape != grad.shape or params.shape != state.shape:
        raise ShapeError("params/grad/state length mismatch")
    new_state = momentum * state + grad
    return params - params.dtype.type(lr) * new_state, new_state


def finite_diff_grad(spec: NetworkSpec, params: np.ndarray, x: np.ndarray, scalar_loss_fn,
                     *, step: float = 1e-5, logits: bool = False) -> np.ndarray:
    """Central-difference gradient of scalar_loss_fn(output, params) w.r.t. params.

    Test oracle; run with float64 params for tight tolerances.
    """
    grad = np.zeros_like(params, dtype=np.float64)
    p = params.astype(np.float64)
    for i in range(p.shape[0]):
        orig = p[i]
        p[i] = orig + step
        hi = scalar_loss_fn(forward(spec, p, x, logits=logits), p)
        p[i] = orig - step
        lo = scalar_loss_fn(forward(spec, p, x, logits=logits), p)
        p[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad
