import numpy as np
import pytest

from hyperfed import net


def tiny_conv_spec(in_ch=2, hw=8, classes=4):
    """Small image network (< 5000 params) exercising every layer kind."""
    return net.NetworkSpec(
        layers=(
            net.conv2d(in_ch, 3, 3),
            net.relu(),
            net.maxpool2d(2),
            net.flatten(),
            net.dense(3 * (hw - 2) // 2 * ((hw - 2) // 2), 8),
            net.relu(),
            net.dense(8, classes),
            net.softmax_output(),
        ),
        input_shape=(in_ch, hw, hw),
    )


def tiny_mlp_spec(d_in=5, d_hidden=7, d_out=3, softmax=False):
    layers = [net.dense(d_in, d_hidden), net.relu(), net.dense(d_hidden, d_out)]
    if softmax:
        layers.append(net.softmax_output())
    return net.NetworkSpec(layers=tuple(layers), input_shape=(d_in,))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom
