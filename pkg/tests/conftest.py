import numpy as np
import pytest

from bangforge.layers import Conv2D, Dense, Dropout, Flatten, MaxPool2, Pool, ReLU
from bangforge.network import Network, Normalization


def make_toy_net(seed=0, input_scale=1.0, with_dropout=False):
    """conv(3@3x3) on 1x8x8 -> maxpool2 -> fc(16) -> ReLU [-> Dropout] -> fc(4)."""
    layers = [Conv2D("conv1", 1, 3, 3), MaxPool2(), Flatten(),
              Dense("fc1", 27, 16), ReLU()]
    if with_dropout:
        layers.append(Dropout(0.5))
    layers.append(Dense("fc2", 16, 4))
    net = Network("toy", (1, 8, 8), layers, Normalization(0.0, input_scale), seed)
    rng = np.random.default_rng(seed)
    for layer in net.param_layers:
        layer.init_xavier_uniform(rng)
    return net


def make_two_layer_net(seed=0):
    """conv(2@3x3) on 1x6x6 -> flatten -> fc(3): the minimal net with both
    weighted layer types, for exhaustive per-weight finite differences."""
    layers = [Conv2D("conv1", 1, 2, 3), Flatten(), Dense("fc1", 32, 3)]
    net = Network("toy2", (1, 6, 6), layers, Normalization(0.0, 1.0), seed)
    rng = np.random.default_rng(seed)
    for layer in net.param_layers:
        layer.init_xavier_uniform(rng)
    return net


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), floor)
    return np.linalg.norm((a - b).ravel()) / denom


def fd_grad(scalar_fn, arr, step=1e-5):
    """Central finite differences of scalar_fn w.r.t. every entry of arr
    (mutated in place and restored)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.ravel(), grad.ravel()
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        up = scalar_fn()
        flat[j] = orig - step
        down = scalar_fn()
        flat[j] = orig
        gflat[j] = (up - down) / (2.0 * step)
    return grad


def fd_grad_vector(vector_fn, arr, step=1e-5):
    """Central differences of a vector-valued function: result shape
    (len(vector_fn()),) + arr.shape."""
    base = np.asarray(vector_fn())
    grad = np.zeros((base.size,) + arr.shape)
    flat = arr.ravel()
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        up = np.asarray(vector_fn())
        flat[j] = orig - step
        down = np.asarray(vector_fn())
        flat[j] = orig
        grad.reshape(base.size, flat.size)[:, j] = (up - down) / (2.0 * step)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
