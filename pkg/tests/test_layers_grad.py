"""Gradient correctness for every layer type against central finite
differences, plus per-sample/batch consistency against the loop-based
reference implementation."""

import numpy as np
import pytest

from bangforge.layers import Conv2D, Dense, Dropout, Flatten, MaxPool2, Pool, ReLU
from bangforge.network import backward_per_sample, forward, loss_seed_delta

from conftest import fd_grad, make_toy_net, make_two_layer_net, rel_err
from reference_impl import ToyNetRef, conv_backward_ref, conv_forward_ref

FD_TOL = 1e-4


def layer_cases(rng):
    # feature maps are NHWC inside layers
    return [
        (Conv2D("c", 2, 3, 3), (4, 7, 7, 2)),
        (Conv2D("cp", 3, 4, 5, pad=2), (2, 8, 8, 3)),
        (Dense("d", 12, 5), (6, 12)),
        (ReLU(), (5, 6, 6, 4)),
        (MaxPool2(), (3, 8, 8, 2)),
        (Pool("max", 3, 2), (3, 8, 8, 2)),      # last window clipped at border
        (Pool("avg", 3, 2), (3, 7, 7, 2)),
        (Pool("avg", 3, 2), (2, 8, 8, 3)),
        (Flatten(), (4, 3, 3, 2)),
    ]


def init_layer(layer, rng):
    if layer.has_params:
        layer.init_xavier_uniform(rng)
        layer.b = rng.normal(size=layer.b.shape) * 0.1


@pytest.mark.parametrize("case_idx", range(9))
def test_backward_matches_finite_differences(case_idx, rng):
    layer, shape = layer_cases(rng)[case_idx]
    init_layer(layer, rng)
    x = rng.normal(size=shape)
    y, cache = layer.forward(x)
    probe = rng.normal(size=y.shape)  # J = sum(probe * y)

    dx = layer.backward(probe, cache)
    dx_fd = fd_grad(lambda: float(np.sum(probe * layer.forward(x)[0])), x)
    assert rel_err(dx, dx_fd) < FD_TOL


@pytest.mark.parametrize("case_idx", [0, 1, 2])
def test_weight_grads_match_finite_differences(case_idx, rng):
    layer, shape = layer_cases(rng)[case_idx]
    init_layer(layer, rng)
    x = rng.normal(size=shape)
    y, cache = layer.forward(x)
    probe = rng.normal(size=y.shape)
    n = shape[0]

    gw, gb = layer.grads_combined(probe, cache)  # mean of per-sample contributions
    gw_fd = fd_grad(lambda: float(np.sum(probe * layer.forward(x)[0])), layer.w)
    gb_fd = fd_grad(lambda: float(np.sum(probe * layer.forward(x)[0])), layer.b)
    assert rel_err(gw * n, gw_fd) < FD_TOL
    assert rel_err(gb * n, gb_fd) < FD_TOL


@pytest.mark.parametrize("case_idx", [0, 1, 2])
def test_per_sample_grads_mean_equals_combined(case_idx, rng):
    layer, shape = layer_cases(rng)[case_idx]
    init_layer(layer, rng)
    x = rng.normal(size=shape)
    y, cache = layer.forward(x)
    probe = rng.normal(size=y.shape)

    gw_i, gb_i = layer.grads_per_sample(probe, cache)
    gw, gb = layer.grads_combined(probe, cache)
    assert rel_err(gw_i.mean(axis=0), gw) < 1e-12
    assert rel_err(gb_i.mean(axis=0), gb) < 1e-12


def test_weighted_combine_equals_scaled_per_sample_mean(rng):
    layer = Conv2D("c", 2, 3, 3)
    init_layer(layer, rng)
    x = rng.normal(size=(5, 7, 7, 2))
    y, cache = layer.forward(x)
    probe = rng.normal(size=y.shape)
    scales = rng.uniform(1.0, 3.0, size=5)

    gw_i, gb_i = layer.grads_per_sample(probe, cache)
    gw, gb = layer.grads_combined(probe, cache, scales)
    assert rel_err((gw_i * scales[:, None, None, None, None]).mean(axis=0), gw) < 1e-12
    assert rel_err((gb_i * scales[:, None]).mean(axis=0), gb) < 1e-12


def test_dropout_backward_with_replayed_mask(rng):
    layer = Dropout(0.5)
    x = rng.normal(size=(4, 10))
    y, mask = layer.forward(x, train=True, rng=np.random.default_rng(7))
    probe = rng.normal(size=y.shape)
    dx = layer.backward(probe, mask)

    def scalar():
        out, _ = layer.forward(x, train=True, mask=mask)
        return float(np.sum(probe * out))

    assert rel_err(dx, fd_grad(scalar, x)) < FD_TOL


def test_conv_against_loop_reference(rng):
    # the loop reference speaks NCHW; transpose at the boundary
    for pad in (0, 2):
        layer = Conv2D("c", 2, 3, 3, pad=pad)
        init_layer(layer, rng)
        x_nchw = rng.normal(size=(3, 2, 6, 6))
        x = np.ascontiguousarray(x_nchw.transpose(0, 2, 3, 1))
        y, cache = layer.forward(x)
        y_ref = conv_forward_ref(x_nchw, layer.w, layer.b, pad=pad)
        assert rel_err(y.transpose(0, 3, 1, 2), y_ref) < 1e-12

        dy = rng.normal(size=y.shape)
        dw_ref, db_ref, dx_ref = conv_backward_ref(
            x_nchw, layer.w, np.ascontiguousarray(dy.transpose(0, 3, 1, 2)), pad=pad)
        gw, gb = layer.grads_combined(dy, cache)
        assert rel_err(gw * 3, dw_ref) < 1e-12
        assert rel_err(gb * 3, db_ref) < 1e-12
        assert rel_err(layer.backward(dy, cache).transpose(0, 3, 1, 2), dx_ref) < 1e-12


def test_every_per_sample_weight_grad_matches_finite_differences():
    """Exhaustive dE_i/dw check on the two-layer net, step 1e-5."""
    net = make_two_layer_net(seed=3)
    rng = np.random.default_rng(9)
    x = rng.uniform(0, 255, size=(3, 1, 6, 6))
    labels = np.array([0, 2, 1])
    net.normalization.scale = 1.0 / 256.0

    grads = backward_per_sample(net, forward(net, x, labels), labels)

    for layer in net.param_layers:
        for arr, got in ((layer.w, grads.wgrads[layer.name]),
                         (layer.b, grads.bgrads[layer.name])):
            for i in range(3):
                def loss_i():
                    tr = forward(net, x, labels)
                    return float(tr.losses[i])
                fd = fd_grad(loss_i, arr)
                assert rel_err(got[i], fd) < FD_TOL, (layer.name, i)


def test_per_sample_mean_equals_independent_batch_backprop():
    """mean_i g_i vs the conventional combined gradient from the loop-based
    reference net, < 1e-10 relative."""
    net = make_toy_net(seed=5, input_scale=1.0 / 256.0)
    rng = np.random.default_rng(17)
    x = rng.uniform(0, 255, size=(6, 1, 8, 8))
    labels = rng.integers(0, 4, size=6)

    conv, fc1, fc2 = net.param_layers
    ref = ToyNetRef(conv.w, conv.b, fc1.w, fc1.b, fc2.w, fc2.b, input_scale=1.0 / 256.0)
    ref_grads, _ = ref.batch_gradient(x, labels)

    grads = backward_per_sample(net, forward(net, x, labels), labels)
    for name in ("conv1", "fc1", "fc2"):
        assert rel_err(grads.wgrads[name].mean(axis=0), ref_grads[f"{name}.w"]) < 1e-10
        assert rel_err(grads.bgrads[name].mean(axis=0), ref_grads[f"{name}.b"]) < 1e-10


def test_zero_loss_sample_has_zero_logit_delta():
    """A sample whose softmax already equals its one-hot label contributes a
    zero delta at the logits."""
    net = make_toy_net(seed=0)
    fc2 = net.param_layers[-1]
    fc2.w[:] = 0.0
    fc2.b[:] = np.array([900.0, 0.0, 0.0, 0.0])  # saturates softmax at class 0
    x = np.random.default_rng(0).uniform(0, 255, size=(2, 1, 8, 8))
    labels = np.array([0, 0])
    trace = forward(net, x, labels)
    delta = loss_seed_delta(trace, labels)
    np.testing.assert_array_equal(delta, np.zeros_like(delta))
    np.testing.assert_array_equal(trace.losses, [0.0, 0.0])
