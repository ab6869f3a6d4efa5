"""Network layers with batched forward/backward and per-sample weight gradients.

Feature maps flow through layers in NHWC layout, (N, H, W, C): im2col then
reduces to contiguous block copies and every gemm reshape is free, which is
what makes double-precision CPU training workable.  The network boundary
(and every public weight tensor) keeps the conventional layout: images enter
as (N, C, H, W) and convolution weights read (out_ch, in_ch, k, k).

backward() propagates the per-sample loss deltas exactly as a conventional
backward pass would -- gradient balancing never touches them.  Weight
gradients are exposed two ways:

  * grads_per_sample: one raw contribution per batch element, g_i = dE_i/dw
    (no 1/N factor), for instrumentation and gradient checking.
  * grads_combined: mean_i s_i * g_i for per-sample scale factors s_i; with
    unit scales this is the conventional batch gradient.

Both contract the same (delta, cached activation) pair, so the combined path
is a fused, allocation-light equivalent of scaling per-sample grads.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensorops import ShapeMismatch


class Layer:
    """Stateless unless it has parameters; caches flow through the trace."""

    name: str = ""

    def forward(self, x, *, train=False, rng=None, mask=None):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    @property
    def has_params(self) -> bool:
        return False

    def output_shape(self, in_shape):
        """Logical (C, H, W) or (D,) chain, independent of internal layout."""
        raise NotImplementedError


class ParamLayer(Layer):
    w: np.ndarray
    b: np.ndarray

    @property
    def has_params(self) -> bool:
        return True

    @property
    def param_count(self) -> int:
        return self.w.size + self.b.size

    def init_xavier_uniform(self, rng: np.random.Generator) -> None:
        """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); zero biases."""
        fan_in, fan_out = self._fans()
        a = math.sqrt(6.0 / (fan_in + fan_out))
        self.w = rng.uniform(-a, a, size=self.w.shape)
        self.b = np.zeros_like(self.b)

    def _fans(self) -> tuple[int, int]:
        raise NotImplementedError

    def grads_per_sample(self, dy, cache):
        raise NotImplementedError

    def grads_combined(self, dy, cache, sample_scales=None):
        raise NotImplementedError


class Conv2D(ParamLayer):
    """2-D cross-correlation, stride 1, optional symmetric zero padding.

    Weights are (out_ch, in_ch, k, k); activations are NHWC.  Internally the
    kernel acts as a (k*k*in_ch, out_ch) matrix against im2col columns, and
    im2col runs over batch chunks into a reused workspace so the k-squared
    blow-up never leaves cache or allocates per call.  The forward cache is
    just the input reference, so traces stay valid indefinitely.
    """

    _WORKSPACE_BYTES = 16 << 20

    def __init__(self, name, in_channels, out_channels, kernel, pad=0):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.pad = pad
        self.w = np.zeros((out_channels, in_channels, kernel, kernel))
        self.b = np.zeros(out_channels)
        self._pad_ws = None
        self._cols_ws = None
        self._dcols_ws = None

    def _fans(self):
        k2 = self.kernel * self.kernel
        return self.in_channels * k2, self.out_channels * k2

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeMismatch(f"{self.name}: expected {self.in_channels} channels, got {c}")
        k, p = self.kernel, self.pad
        return (self.out_channels, h + 2 * p - k + 1, w + 2 * p - k + 1)

    def _w_mat(self):
        # (F, C, k, k) -> (k, k, C, F) -> (k*k*C, F), matching im2col order
        return np.ascontiguousarray(
            self.w.transpose(2, 3, 1, 0).reshape(-1, self.out_channels))

    @staticmethod
    def _w_mat_to_conv(dw_mat, k, c, f):
        return np.ascontiguousarray(
            dw_mat.reshape(k, k, c, f).transpose(3, 2, 0, 1))

    def _geom(self, x_shape):
        n, h, w, c = x_shape
        k, p = self.kernel, self.pad
        hp, wp = h + 2 * p, w + 2 * p
        return hp - k + 1, wp - k + 1, hp, wp

    def _chunk(self, oh, ow):
        per_sample = oh * ow * self.kernel ** 2 * self.in_channels * 8
        return max(1, self._WORKSPACE_BYTES // per_sample)

    def _iter_cols(self, x):
        """Yield (start, count, cols_view) with cols (count, OH*OW, k*k*C),
        filled from a reused workspace chunk by chunk."""
        n = x.shape[0]
        k, p, c = self.kernel, self.pad, self.in_channels
        oh, ow, hp, wp = self._geom(x.shape)
        chunk = self._chunk(oh, ow)
        if self._cols_ws is None or self._cols_ws.shape != (chunk, oh, ow, k, k, c):
            self._cols_ws = np.empty((chunk, oh, ow, k, k, c))
        if p and (self._pad_ws is None or self._pad_ws.shape != (chunk, hp, wp, c)):
            self._pad_ws = np.zeros((chunk, hp, wp, c))  # borders stay zero
        for start in range(0, n, chunk):
            count = min(chunk, n - start)
            if p:
                xp = self._pad_ws[:count]
                xp[:, p:hp - p, p:wp - p, :] = x[start:start + count]
            else:
                xp = x[start:start + count]
            cols = self._cols_ws[:count]
            # one strided copy; view is (n, oh, ow, c, k, k), cols want kkC last
            swv = sliding_window_view(xp, (k, k), axis=(1, 2))
            cols[...] = swv.transpose(0, 1, 2, 4, 5, 3)
            yield start, count, cols.reshape(count, oh * ow, -1)

    def forward(self, x, *, train=False, rng=None, mask=None):
        n = x.shape[0]
        oh, ow, _, _ = self._geom(x.shape)
        f = self.out_channels
        w_mat = self._w_mat()
        y = np.empty((n, oh, ow, f))
        for start, count, cols in self._iter_cols(x):
            np.matmul(cols.reshape(count * oh * ow, -1), w_mat,
                      out=y[start:start + count].reshape(count * oh * ow, f))
        y += self.b
        return y, x

    def backward(self, dy, cache):
        x = cache
        n = dy.shape[0]
        k, p, c = self.kernel, self.pad, self.in_channels
        oh, ow, hp, wp = self._geom(x.shape)
        w_mat_t = self._w_mat().T
        dxp = np.zeros((n, hp, wp, c))
        chunk = self._chunk(oh, ow)
        if self._dcols_ws is None or self._dcols_ws.shape != (chunk, oh, ow, k, k, c):
            self._dcols_ws = np.empty((chunk, oh, ow, k, k, c))
        for start in range(0, n, chunk):
            count = min(chunk, n - start)
            dcols = self._dcols_ws[:count]
            np.matmul(dy[start:start + count].reshape(count * oh * ow, -1),
                      w_mat_t, out=dcols.reshape(count * oh * ow, -1))
            target = dxp[start:start + count]
            for u in range(k):
                for v in range(k):
                    target[:, u:u + oh, v:v + ow, :] += dcols[:, :, :, u, v, :]
        if p:
            return np.ascontiguousarray(dxp[:, p:hp - p, p:wp - p, :])
        return dxp

    def grads_per_sample(self, dy, cache):
        x = cache
        n = dy.shape[0]
        k, c, f = self.kernel, self.in_channels, self.out_channels
        oh, ow, _, _ = self._geom(x.shape)
        gw = np.empty((n, f, c, k, k))
        for start, count, cols in self._iter_cols(x):
            per = np.matmul(cols.transpose(0, 2, 1),
                            dy[start:start + count].reshape(count, oh * ow, f))
            for i in range(count):
                gw[start + i] = self._w_mat_to_conv(per[i], k, c, f)
        gb = dy.sum(axis=(1, 2))
        return gw, gb

    def grads_combined(self, dy, cache, sample_scales=None):
        x = cache
        n = dy.shape[0]
        k, c, f = self.kernel, self.in_channels, self.out_channels
        oh, ow, _, _ = self._geom(x.shape)
        gw_mat = np.zeros((k * k * c, f))
        for start, count, cols in self._iter_cols(x):
            dy_mat = dy[start:start + count].reshape(count, oh * ow, f)
            if sample_scales is not None:
                dy_mat = dy_mat * sample_scales[start:start + count, None, None]
            gw_mat += cols.reshape(count * oh * ow, -1).T \
                @ dy_mat.reshape(count * oh * ow, f)
        if sample_scales is not None:
            gb = (dy.sum(axis=(1, 2)) * sample_scales[:, None]).mean(axis=0)
        else:
            gb = dy.sum(axis=(1, 2)).mean(axis=0)
        return self._w_mat_to_conv(gw_mat, k, c, f) / n, gb


class Dense(ParamLayer):
    def __init__(self, name, in_features, out_features):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.w = np.zeros((out_features, in_features))
        self.b = np.zeros(out_features)

    def _fans(self):
        return self.in_features, self.out_features

    def output_shape(self, in_shape):
        (d,) = in_shape
        if d != self.in_features:
            raise ShapeMismatch(f"{self.name}: expected {self.in_features} features, got {d}")
        return (self.out_features,)

    def forward(self, x, *, train=False, rng=None, mask=None):
        return x @ self.w.T + self.b, x

    def backward(self, dy, cache):
        return dy @ self.w

    def grads_per_sample(self, dy, cache):
        x = cache
        gw = dy[:, :, None] * x[:, None, :]
        return gw, dy.copy()

    def grads_combined(self, dy, cache, sample_scales=None):
        x = cache
        if sample_scales is not None:
            dy = dy * sample_scales[:, None]
        n = dy.shape[0]
        return (dy.T @ x) / n, dy.mean(axis=0)


class ReLU(Layer):
    def forward(self, x, *, train=False, rng=None, mask=None):
        pos = x > 0
        return x * pos, pos

    def backward(self, dy, cache):
        return dy * cache

    def output_shape(self, in_shape):
        return in_shape


class MaxPool2(Layer):
    """2x2 max pooling, stride 2, non-overlapping; even input dims required.

    The winner index is only recovered in backward(), so evaluation-time
    forwards pay one strided max and nothing else.
    """

    def forward(self, x, *, train=False, rng=None, mask=None):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeMismatch(f"2x2 pooling needs even dims, got {h}x{w}")
        y = x.reshape(n, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))
        return y, (x, y)

    def backward(self, dy, cache):
        x, y = cache
        n, h, w, c = x.shape
        dx = np.zeros((n, h, w, c))
        taken = np.zeros(y.shape, dtype=bool)
        # first maximum in row-major block order wins
        for u in (0, 1):
            for v in (0, 1):
                shifted = x[:, u::2, v::2, :]
                hit = (shifted == y) & ~taken
                dx[:, u::2, v::2, :] += dy * hit
                taken |= hit
        return dx

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // 2, w // 2)


class Pool(Layer):
    """Max or average pooling with ceil-mode output size and clipped windows.

    Windows that run past the border are clipped; average pooling divides by
    the clipped window size.  Both passes are vectorized as size^2 strided
    sweeps over the whole map, one per in-window offset; the per-offset valid
    lengths realize the border clipping exactly.
    """

    def __init__(self, kind, size=3, stride=2):
        if kind not in ("max", "avg"):
            raise ValueError(f"unknown pooling kind {kind!r}")
        self.kind = kind
        self.size = size
        self.stride = stride

    def _out_len(self, dim):
        return max(1, math.ceil((dim - self.size) / self.stride) + 1)

    def _valid_len(self, dim, offset, out_len):
        # output positions whose window still contains row/col `offset`
        return min(out_len, (dim - offset + self.stride - 1) // self.stride)

    def _counts(self, h, w, oh, ow):
        rows = np.array([min(self.size, h - o * self.stride) for o in range(oh)])
        cols = np.array([min(self.size, w - o * self.stride) for o in range(ow)])
        return rows[:, None] * cols[None, :]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, self._out_len(h), self._out_len(w))

    def forward(self, x, *, train=False, rng=None, mask=None):
        n, h, w, c = x.shape
        oh, ow = self._out_len(h), self._out_len(w)
        s = self.stride
        if self.kind == "max":
            y = np.full((n, oh, ow, c), -np.inf)
        else:
            y = np.zeros((n, oh, ow, c))
        for u in range(self.size):
            lu = self._valid_len(h, u, oh)
            for v in range(self.size):
                lv = self._valid_len(w, v, ow)
                shifted = x[:, u::s, v::s, :][:, :lu, :lv, :]
                if self.kind == "max":
                    np.maximum(y[:, :lu, :lv, :], shifted, out=y[:, :lu, :lv, :])
                else:
                    y[:, :lu, :lv, :] += shifted
        if self.kind == "avg":
            y /= self._counts(h, w, oh, ow)[None, :, :, None]
        return y, (x, y)

    def backward(self, dy, cache):
        x, y = cache
        n, h, w, c = x.shape
        oh, ow = self._out_len(h), self._out_len(w)
        s = self.stride
        dx = np.zeros((n, h, w, c))
        if self.kind == "avg":
            scaled = dy / self._counts(h, w, oh, ow)[None, :, :, None]
        else:
            taken = np.zeros((n, oh, ow, c), dtype=bool)
        for u in range(self.size):
            lu = self._valid_len(h, u, oh)
            for v in range(self.size):
                lv = self._valid_len(w, v, ow)
                window = np.s_[:, :lu, :lv, :]
                target = dx[:, u::s, v::s, :][window]
                if self.kind == "avg":
                    target += scaled[window]
                else:
                    # first maximum in row-major window order wins
                    shifted = x[:, u::s, v::s, :][window]
                    hit = (shifted == y[window]) & ~taken[window]
                    target += dy[window] * hit
                    taken[window] |= hit
        return dx


class Dropout(Layer):
    """Inverted dropout: active only in training; masks are replayable."""

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate {rate} outside [0, 1)")
        self.rate = rate

    def forward(self, x, *, train=False, rng=None, mask=None):
        if not train or self.rate == 0.0:
            return x, None
        if mask is None:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng or a replay mask")
            mask = rng.random(x.shape) >= self.rate
        return x * (mask / (1.0 - self.rate)), mask

    def backward(self, dy, cache):
        if cache is None:
            return dy
        return dy * (cache / (1.0 - self.rate))

    def output_shape(self, in_shape):
        return in_shape


class Flatten(Layer):
    def forward(self, x, *, train=False, rng=None, mask=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache)

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)
