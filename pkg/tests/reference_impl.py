"""Independent reference implementations used as test oracles.

Everything here is written with plain loops and explicit arithmetic, on
purpose: these functions cross-check the vectorized package code, so they
must not share any of its machinery.
"""

import numpy as np


def conv_forward_ref(x, w, b, pad=0):
    n, c, h, ww = x.shape
    f, _, k, _ = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        h, ww = h + 2 * pad, ww + 2 * pad
    oh, ow = h - k + 1, ww - k + 1
    y = np.zeros((n, f, oh, ow))
    for i in range(n):
        for fo in range(f):
            for oy in range(oh):
                for ox in range(ow):
                    acc = b[fo]
                    for ci in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += x[i, ci, oy + u, ox + v] * w[fo, ci, u, v]
                    y[i, fo, oy, ox] = acc
    return y


def conv_backward_ref(x, w, dy, pad=0):
    """Returns (dw summed over batch, db summed, dx)."""
    n, c, h0, w0 = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    _, _, h, ww = xp.shape
    oh, ow = h - k + 1, ww - k + 1
    dw = np.zeros_like(w)
    db = np.zeros_like(np.zeros(f))
    dxp = np.zeros_like(xp)
    for i in range(n):
        for fo in range(f):
            for oy in range(oh):
                for ox in range(ow):
                    d = dy[i, fo, oy, ox]
                    db[fo] += d
                    for ci in range(c):
                        for u in range(k):
                            for v in range(k):
                                dw[fo, ci, u, v] += d * xp[i, ci, oy + u, ox + v]
                                dxp[i, ci, oy + u, ox + v] += d * w[fo, ci, u, v]
    dx = dxp[:, :, pad:h - pad, pad:ww - pad] if pad else dxp
    return dw, db, dx


def maxpool2_forward_ref(x):
    n, c, h, w = x.shape
    y = np.zeros((n, c, h // 2, w // 2))
    where = {}
    for i in range(n):
        for ci in range(c):
            for oy in range(h // 2):
                for ox in range(w // 2):
                    block = x[i, ci, 2 * oy:2 * oy + 2, 2 * ox:2 * ox + 2]
                    r, cc = np.unravel_index(np.argmax(block), (2, 2))
                    y[i, ci, oy, ox] = block[r, cc]
                    where[(i, ci, oy, ox)] = (2 * oy + r, 2 * ox + cc)
    return y, where


def maxpool2_backward_ref(dy, where, x_shape):
    dx = np.zeros(x_shape)
    for (i, ci, oy, ox), (r, cc) in where.items():
        dx[i, ci, r, cc] += dy[i, ci, oy, ox]
    return dx


def softmax_ce_ref(logits, labels):
    n = logits.shape[0]
    probs = np.zeros_like(logits)
    losses = np.zeros(n)
    for i in range(n):
        z = logits[i] - logits[i].max()
        e = np.exp(z)
        probs[i] = e / e.sum()
        losses[i] = -np.log(probs[i][labels[i]])
    return probs, losses


class ToyNetRef:
    """conv(k3) -> maxpool2 -> flatten -> fc -> relu -> fc, loss = mean CE.

    Weights are plain attribute arrays; batch_gradient returns the
    conventional combined gradient (mean of per-sample contributions).
    """

    def __init__(self, w_conv, b_conv, w_fc1, b_fc1, w_fc2, b_fc2, input_scale=1.0):
        self.w_conv = w_conv.copy()
        self.b_conv = b_conv.copy()
        self.w_fc1 = w_fc1.copy()
        self.b_fc1 = b_fc1.copy()
        self.w_fc2 = w_fc2.copy()
        self.b_fc2 = b_fc2.copy()
        self.input_scale = input_scale

    def forward(self, x):
        x = x * self.input_scale
        conv = conv_forward_ref(x, self.w_conv, self.b_conv)
        pooled, where = maxpool2_forward_ref(conv)
        # flatten in (H, W, C) order to match the framework's layout
        flat = pooled.transpose(0, 2, 3, 1).reshape(x.shape[0], -1)
        h = flat @ self.w_fc1.T + self.b_fc1
        hr = np.maximum(h, 0.0)
        logits = hr @ self.w_fc2.T + self.b_fc2
        return {"x": x, "conv": conv, "where": where, "pooled": pooled,
                "flat": flat, "h": h, "hr": hr, "logits": logits}

    def batch_gradient(self, x, labels):
        state = self.forward(x)
        n = x.shape[0]
        probs, losses = softmax_ce_ref(state["logits"], labels)
        dlogits = probs.copy()
        for i in range(n):
            dlogits[i, labels[i]] -= 1.0
        dlogits /= n  # mean loss
        g_w_fc2 = dlogits.T @ state["hr"]
        g_b_fc2 = dlogits.sum(axis=0)
        dhr = dlogits @ self.w_fc2
        dh = dhr * (state["h"] > 0)
        g_w_fc1 = dh.T @ state["flat"]
        g_b_fc1 = dh.sum(axis=0)
        dflat = dh @ self.w_fc1
        n, c, ph, pw = state["pooled"].shape
        dpooled = dflat.reshape(n, ph, pw, c).transpose(0, 3, 1, 2)
        dconv = maxpool2_backward_ref(dpooled, state["where"], state["conv"].shape)
        g_w_conv, g_b_conv, _ = conv_backward_ref(state["x"], self.w_conv, dconv)
        return {
            "conv1.w": g_w_conv, "conv1.b": g_b_conv,
            "fc1.w": g_w_fc1, "fc1.b": g_b_fc1,
            "fc2.w": g_w_fc2, "fc2.b": g_b_fc2,
        }, float(losses.mean())

    def sgd_momentum_train(self, batches, lr_fn, momentum):
        """Plain SGD-with-momentum loop: v <- m v - lr g; w <- w + v."""
        names = ["conv1.w", "conv1.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b"]
        attr = {"conv1.w": "w_conv", "conv1.b": "b_conv", "fc1.w": "w_fc1",
                "fc1.b": "b_fc1", "fc2.w": "w_fc2", "fc2.b": "b_fc2"}
        vel = {k: np.zeros_like(getattr(self, attr[k])) for k in names}
        for it, (x, labels) in enumerate(batches):
            grads, _ = self.batch_gradient(x, labels)
            lr = lr_fn(it)
            for k in names:
                vel[k] = momentum * vel[k] - lr * grads[k]
                setattr(self, attr[k], getattr(self, attr[k]) + vel[k])
        return {k: getattr(self, attr[k]).copy() for k in names}


def ssim_ref(a, b, window=8, c1=(0.01 * 255) ** 2, c2=(0.03 * 255) ** 2):
    """Loop-based SSIM: uniform window, valid placements, biased moments,
    channels averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    scores = []
    for ch in range(a.shape[0]):
        vals = []
        h, w = a.shape[1:]
        for y in range(h - window + 1):
            for x in range(w - window + 1):
                pa = a[ch, y:y + window, x:x + window].ravel()
                pb = b[ch, y:y + window, x:x + window].ravel()
                mu_a, mu_b = pa.mean(), pb.mean()
                var_a = ((pa - mu_a) ** 2).mean()
                var_b = ((pb - mu_b) ** 2).mean()
                cov = ((pa - mu_a) * (pb - mu_b)).mean()
                num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
                den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
                vals.append(num / den)
        scores.append(np.mean(vals))
    return float(np.mean(scores))
