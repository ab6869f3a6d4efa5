"""Model assembly, forward traces, and instrumented backpropagation.

The backward pass is split in two so gradient balancing can sit between them
without touching propagation:

  * backward_deltas walks the layers once and records, for every layer with
    weights, the per-sample delta at that layer's output (dE_i/dy_i) plus the
    gradient reaching the raw input pixels.  Deltas are the original,
    unscaled ones.
  * weight gradients are then produced from (delta, cache) pairs by the
    layers themselves, either per sample or as a scale-weighted mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2,
                     ParamLayer, Pool, ReLU)
from .tensorops import ShapeMismatch

_INIT_TAG = 101


class TraceMismatch(ValueError):
    """Trace does not belong to this network/batch."""


@dataclass
class Normalization:
    """Model-boundary input transform: normalized = (x - offset) * scale."""

    offset: np.ndarray | float = 0.0
    scale: float = 1.0

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.offset) * self.scale

    def to_meta(self) -> dict:
        offset = self.offset.tolist() if isinstance(self.offset, np.ndarray) else self.offset
        return {"offset": offset, "scale": self.scale}

    @staticmethod
    def from_meta(meta: dict) -> "Normalization":
        offset = meta["offset"]
        if isinstance(offset, list):
            offset = np.asarray(offset, dtype=np.float64)
        return Normalization(offset=offset, scale=meta["scale"])


class Network:
    def __init__(self, arch_id: str, input_shape: tuple[int, int, int],
                 layers: list[Layer], normalization: Normalization, seed: int):
        self.arch_id = arch_id
        self.input_shape = input_shape
        self.layers = layers
        self.normalization = normalization
        self.seed = seed
        shape = input_shape
        for layer in layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape

    @property
    def param_layers(self) -> list[ParamLayer]:
        return [l for l in self.layers if l.has_params]

    @property
    def param_count(self) -> int:
        return sum(l.param_count for l in self.param_layers)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for l in self.param_layers:
            out[f"{l.name}.w"] = l.w
            out[f"{l.name}.b"] = l.b
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for l in self.param_layers:
            l.w = np.array(params[f"{l.name}.w"], dtype=np.float64)
            l.b = np.array(params[f"{l.name}.b"], dtype=np.float64)


@dataclass
class ForwardTrace:
    """Everything one batch forward produced, replayable bit for bit."""

    net_id: int
    x_raw: np.ndarray
    outputs: list[np.ndarray]
    caches: list
    logits: np.ndarray
    probs: np.ndarray
    losses: np.ndarray | None
    dropout_masks: dict[int, np.ndarray]
    train: bool

    @property
    def batch_size(self) -> int:
        return self.x_raw.shape[0]


@dataclass
class PerSampleGradients:
    """Per-layer instrumentation of one backward pass.

    deltas[name][i] is dE_i at that layer's output; wgrads/bgrads[name][i]
    are the raw per-sample contributions dE_i/dw (no 1/N).
    """

    deltas: dict[str, np.ndarray]
    wgrads: dict[str, np.ndarray]
    bgrads: dict[str, np.ndarray]
    batch_size: int


def build_lenet_plus(seed: int) -> Network:
    """28x28x1 -> conv(20@5x5) -> maxpool2 -> conv(50@5x5) -> maxpool2
    -> fc(500) -> ReLU -> Dropout(0.5) -> fc(10).  431,080 parameters."""
    layers = [
        Conv2D("conv1", 1, 20, 5),
        MaxPool2(),
        Conv2D("conv2", 20, 50, 5),
        MaxPool2(),
        Flatten(),
        Dense("fc1", 800, 500),
        ReLU(),
        Dropout(0.5),
        Dense("fc2", 500, 10),
    ]
    net = Network("lenet", (1, 28, 28), layers,
                  Normalization(offset=0.0, scale=1.0 / 256.0), seed)
    _init_params(net, seed)
    return net


def build_cifar10_quick_plus(seed: int) -> Network:
    """32x32x3 -> conv(32@5x5,p2) -> maxpool3/2 -> ReLU -> conv(32@5x5,p2)
    -> ReLU -> avgpool3/2 -> conv(64@5x5,p2) -> ReLU -> avgpool3/2
    -> fc(64) -> Dropout(0.5) -> fc(10).  145,578 parameters.

    Pooling is 3x3 stride 2 in ceil mode with border-clipped windows; the
    normalization offset defaults to zero and is set to the per-channel
    training means by the harness."""
    layers = [
        Conv2D("conv1", 3, 32, 5, pad=2),
        Pool("max", 3, 2),
        ReLU(),
        Conv2D("conv2", 32, 32, 5, pad=2),
        ReLU(),
        Pool("avg", 3, 2),
        Conv2D("conv3", 32, 64, 5, pad=2),
        ReLU(),
        Pool("avg", 3, 2),
        Flatten(),
        Dense("fc1", 1024, 64),
        Dropout(0.5),
        Dense("fc2", 64, 10),
    ]
    net = Network("cifar10-quick", (3, 32, 32), layers,
                  Normalization(offset=np.zeros((3, 1, 1)), scale=1.0), seed)
    _init_params(net, seed)
    return net


ARCH_BUILDERS = {
    "lenet": build_lenet_plus,
    "cifar10-quick": build_cifar10_quick_plus,
}


def _init_params(net: Network, seed: int) -> None:
    rng = np.random.default_rng((_INIT_TAG, seed))
    for layer in net.param_layers:
        layer.init_xavier_uniform(rng)


def softmax_nll(logits: np.ndarray, labels: np.ndarray | None):
    """Stable softmax probabilities and, when labels are given, per-sample
    negative log-likelihoods."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total
    if labels is None:
        return probs, None
    logp = shifted - np.log(total)
    losses = -logp[np.arange(len(labels)), labels]
    return probs, losses


def forward(net: Network, batch: np.ndarray, labels: np.ndarray | None = None,
            *, train: bool = False, rng: np.random.Generator | None = None,
            masks: dict[int, np.ndarray] | None = None) -> ForwardTrace:
    """Run a batch through the net, capturing all intermediates.

    batch is raw pixels (N, C, H, W); eval mode is deterministic and ignores
    rng.  Passing masks replays a previous trace's dropout decisions.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1:] != net.input_shape:
        raise ShapeMismatch(
            f"batch shape {batch.shape} does not match input {net.input_shape}")
    if batch.shape[0] == 0:
        raise ShapeMismatch("empty batch")
    # layers run in NHWC internally; the public contract stays (N, C, H, W)
    x = np.ascontiguousarray(net.normalization.apply(batch).transpose(0, 2, 3, 1))
    outputs, caches, dropout_masks = [], [], {}
    for idx, layer in enumerate(net.layers):
        replay = masks.get(idx) if masks else None
        x, cache = layer.forward(x, train=train, rng=rng, mask=replay)
        if isinstance(layer, Dropout) and cache is not None:
            dropout_masks[idx] = cache
        outputs.append(x)
        caches.append(cache)
    logits = outputs[-1]
    probs, losses = softmax_nll(logits, labels)
    return ForwardTrace(net_id=id(net), x_raw=batch, outputs=outputs, caches=caches,
                        logits=logits, probs=probs, losses=losses,
                        dropout_masks=dropout_masks, train=train)


def loss_seed_delta(trace: ForwardTrace, labels: np.ndarray) -> np.ndarray:
    """dE_i/dlogits for softmax cross-entropy: probs - onehot, per sample."""
    delta = trace.probs.copy()
    delta[np.arange(len(labels)), labels] -= 1.0
    return delta


def backward_deltas(net: Network, trace: ForwardTrace, seed_delta: np.ndarray):
    """One backward sweep from a logits-space delta.

    Returns (per-layer list of (layer, delta_at_output, cache) for layers
    with weights, gradient w.r.t. raw input pixels).
    """
    if trace.net_id != id(net):
        raise TraceMismatch("trace was produced by a different network")
    if seed_delta.shape != trace.logits.shape:
        raise TraceMismatch(
            f"seed delta {seed_delta.shape} vs logits {trace.logits.shape}")
    entries = []
    delta = seed_delta
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        if layer.has_params:
            entries.append((layer, delta, trace.caches[idx]))
        delta = layer.backward(delta, trace.caches[idx])
    entries.reverse()
    if delta.ndim == 4:
        delta = delta.transpose(0, 3, 1, 2)
    dx_raw = delta * net.normalization.scale
    return entries, dx_raw


def backward_per_sample(net: Network, trace: ForwardTrace,
                        labels: np.ndarray) -> PerSampleGradients:
    """Per-sample deltas and raw weight-gradient contributions for a batch."""
    labels = np.asarray(labels)
    if labels.shape[0] != trace.batch_size:
        raise TraceMismatch(f"{labels.shape[0]} labels for batch {trace.batch_size}")
    entries, _ = backward_deltas(net, trace, loss_seed_delta(trace, labels))
    deltas, wgrads, bgrads = {}, {}, {}
    for layer, delta, cache in entries:
        deltas[layer.name] = delta
        gw, gb = layer.grads_per_sample(delta, cache)
        wgrads[layer.name] = gw
        bgrads[layer.name] = gb
    return PerSampleGradients(deltas, wgrads, bgrads, trace.batch_size)


def input_gradient(net: Network, image: np.ndarray, objective) -> np.ndarray:
    """Gradient of a scalar objective w.r.t. raw input pixels, eval mode.

    objective is ("loss", label) for cross-entropy at the given label, or
    ("logit_diff", hot, cold) for logit[hot] - logit[cold].
    """
    grads = input_gradient_batch(net, image[None], [objective])
    return grads[0]


def input_gradient_batch(net: Network, images: np.ndarray, objectives) -> np.ndarray:
    """Vectorized input_gradient: one objective per image."""
    trace = forward(net, images, train=False)
    n, k = trace.logits.shape
    seed = np.zeros((n, k))
    for i, obj in enumerate(objectives):
        kind = obj[0]
        if kind == "loss":
            label = obj[1]
            seed[i] = trace.probs[i]
            seed[i, label] -= 1.0
        elif kind == "logit_diff":
            hot, cold = obj[1], obj[2]
            seed[i, hot] += 1.0
            seed[i, cold] -= 1.0
        else:
            raise ValueError(f"unknown objective {obj!r}")
    _, dx = backward_deltas(net, trace, seed)
    return dx


def predict(net: Network, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Argmax class per image, eval mode, batched."""
    images = np.asarray(images)
    out = np.empty(images.shape[0], dtype=np.int64)
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start:start + batch_size].astype(np.float64)
        trace = forward(net, chunk, train=False)
        out[start:start + chunk.shape[0]] = trace.logits.argmax(axis=1)
    return out

