"""Differentiable layers with hand-written backward passes.

Every layer keeps the cache of its last ``forward`` call and consumes it in
``backward``; calling ``backward`` twice, or before any forward, raises
``StaleCacheError``. Parameters live in ``layer.params`` and the matching
gradients land in ``layer.grads`` after ``backward``. Batch norm running
statistics are ``layer.buffers``: saved in checkpoints, never trained.
"""

import numpy as np

from . import _kernels as K


class StaleCacheError(RuntimeError):
    """``backward`` called without a matching ``forward``."""


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def _take_cache(self):
        if self._cache is None:
            raise StaleCacheError(f"{self.kind}: backward without a matching forward")
        cache, self._cache = self._cache, None
        return cache

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x, train=False):
        return self.forward(x, train)


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Layer):
    """Cross-correlation over NCHW input, weight shape ``(out, in, k, k)``."""

    kind = "conv2d"
    # False skips the input gradient (backward returns None); set on the stem while training.
    input_grad = True

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["w"] = he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, dtype)
        if bias:
            self.params["b"] = np.zeros(out_ch, dtype=dtype)

    def out_shape(self, c, h, w):
        if c != self.in_ch:
            raise ValueError(f"conv2d expects {self.in_ch} channels, got {c}")
        return (self.out_ch,
                K.conv_out_size(h, self.kernel, self.stride, self.padding),
                K.conv_out_size(w, self.kernel, self.stride, self.padding))

    def _cols(self, x):
        k, s, p = self.kernel, self.stride, self.padding
        if k == 1 and p == 0:
            xs = x[:, :, ::s, ::s] if s > 1 else x
            return np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, x.shape[1])
        return K.im2col(x, k, s, p)

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        _, oh, ow = self.out_shape(c, h, w)
        if oh < 1 or ow < 1:
            raise ValueError(f"conv2d input {h}x{w} too small for kernel {self.kernel}")
        cols = self._cols(x)
        wmat = self.params["w"].reshape(self.out_ch, -1)
        out = cols @ wmat.T
        if "b" in self.params:
            out += self.params["b"]
        self._cache = (x.shape, cols)
        return np.ascontiguousarray(out.reshape(n, oh, ow, self.out_ch).transpose(0, 3, 1, 2))

    def backward(self, dout):
        x_shape, cols = self._take_cache()
        k, s, p = self.kernel, self.stride, self.padding
        dflat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, self.out_ch)
        wmat = self.params["w"].reshape(self.out_ch, -1)
        self.grads["w"] = (dflat.T @ cols).reshape(self.params["w"].shape)
        if "b" in self.params:
            self.grads["b"] = dflat.sum(axis=0)
        if not self.input_grad:
            return None
        dcols = dflat @ wmat
        if k == 1 and p == 0:
            n, c, h, w = x_shape
            oh, ow = dout.shape[2], dout.shape[3]
            d = dcols.reshape(n, oh, ow, c).transpose(0, 3, 1, 2)
            if s == 1:
                return np.ascontiguousarray(d)
            dx = np.zeros(x_shape, dtype=dout.dtype)
            dx[:, :, ::s, ::s] = d
            return dx
        return K.col2im(dcols, x_shape, k, s, p)


class BatchNorm2d(Layer):
    """Per-channel batch norm; running variance uses the unbiased estimate."""

    kind = "batchnorm2d"

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False):
        if x.shape[1] != self.channels:
            raise ValueError(f"batchnorm2d expects {self.channels} channels, got {x.shape[1]}")
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if train:
            if x.shape[0] < 2:
                raise ValueError("batchnorm2d needs a batch of at least 2 in train mode")
            m = x.shape[0] * x.shape[2] * x.shape[3]
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            mom = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = (1 - mom) * rm + mom * mu
            rv[...] = (1 - mom) * rv + mom * var * (m / max(m - 1, 1))
        else:
            mu = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train)
        return gamma * xhat + beta

    def backward(self, dout):
        xhat, inv_std, train = self._take_cache()
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = dout.sum(axis=(0, 2, 3))
        dxhat = dout * gamma[None, :, None, None]
        if not train:
            return dxhat * inv_std[None, :, None, None]
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dout):
        return dout * self._take_cache()


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, kernel, stride=None, padding=0):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride or kernel, padding

    def forward(self, x, train=False):
        out, arg = K.maxpool_forward(x, self.kernel, self.stride, self.padding)
        self._cache = (x.shape, arg)
        return out

    def backward(self, dout):
        x_shape, arg = self._take_cache()
        return K.maxpool_backward(np.ascontiguousarray(dout), arg, x_shape, self.kernel, self.stride, self.padding)


class AvgPool2d(Layer):
    """Average pooling without padding."""

    kind = "avgpool"

    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel, self.stride = kernel, stride or kernel

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        k, s = self.kernel, self.stride
        oh, ow = K.conv_out_size(h, k, s, 0), K.conv_out_size(w, k, s, 0)
        if oh < 1 or ow < 1:
            raise ValueError(f"avgpool {k}x{k} does not fit a {h}x{w} input")
        out = np.zeros((n, c, oh, ow), dtype=x.dtype)
        for ki in range(k):
            for kj in range(k):
                out += x[:, :, ki:ki + s * (oh - 1) + 1:s, kj:kj + s * (ow - 1) + 1:s]
        self._cache = x.shape
        return out / x.dtype.type(k * k)

    def backward(self, dout):
        n, c, h, w = self._take_cache()
        k, s = self.kernel, self.stride
        oh, ow = dout.shape[2], dout.shape[3]
        dx = np.zeros((n, c, h, w), dtype=dout.dtype)
        g = dout / dout.dtype.type(k * k)
        for ki in range(k):
            for kj in range(k):
                dx[:, :, ki:ki + s * (oh - 1) + 1:s, kj:kj + s * (ow - 1) + 1:s] += g
        return dx


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1/(1-p)`` at train time."""

    kind = "dropout"

    def __init__(self, p):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError("drop probability must be in [0, 1)")
        self.p = p
        self.rng = np.random.default_rng(0)

    def forward(self, x, train=False):
        if not train or self.p == 0:
            self._cache = 1
            return x
        mask = (self.rng.random(x.shape) >= self.p).astype(x.dtype) / x.dtype.type(1 - self.p)
        self._cache = mask
        return x * mask

    def backward(self, dout):
        return dout * self._take_cache()


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._take_cache())


class Linear(Layer):
    """``y = x @ w.T + b`` with ``w`` of shape ``(out, in)``."""

    kind = "linear"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.params["w"] = he_normal(rng, (out_features, in_features), in_features, dtype)
        self.params["b"] = np.zeros(out_features, dtype=dtype)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"linear expects (N, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.params["w"].T + self.params["b"]

    def backward(self, dout):
        x = self._take_cache()
        self.grads["w"] = dout.T @ x
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["w"]


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        self._cache = p
        return p

    def backward(self, dout):
        p = self._take_cache()
        return p * (dout - (dout * p).sum(axis=1, keepdims=True))


class Bottleneck(Layer):
    """Pre-activation bottleneck: ``y = F(x) + shortcut(x)``.

    ``F`` is BN-ReLU-conv1x1, BN-ReLU-conv3x3 (carrying the stride),
    BN-ReLU-conv1x1. The shortcut is the identity when input and output
    shapes agree, otherwise a strided 1x1 projection applied to ``x``.
    """

    kind = "bottleneck"

    def __init__(self, in_ch, mid_ch, out_ch, stride=1, eps=1e-5, momentum=0.1, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.mid_ch, self.out_ch, self.stride = in_ch, mid_ch, out_ch, stride
        self.branch = [
            ("bn1", BatchNorm2d(in_ch, eps, momentum, dtype)),
            ("relu1", ReLU()),
            ("conv1", Conv2d(in_ch, mid_ch, 1, 1, 0, bias=False, rng=rng, dtype=dtype)),
            ("bn2", BatchNorm2d(mid_ch, eps, momentum, dtype)),
            ("relu2", ReLU()),
            ("conv2", Conv2d(mid_ch, mid_ch, 3, stride, 1, bias=False, rng=rng, dtype=dtype)),
            ("bn3", BatchNorm2d(mid_ch, eps, momentum, dtype)),
            ("relu3", ReLU()),
            ("conv3", Conv2d(mid_ch, out_ch, 1, 1, 0, bias=False, rng=rng, dtype=dtype)),
        ]
        self.projection = None
        if in_ch != out_ch or stride != 1:
            self.projection = Conv2d(in_ch, out_ch, 1, stride, 0, bias=False, rng=rng, dtype=dtype)

    def sublayers(self):
        """``(name, layer)`` pairs, projection last."""
        out = list(self.branch)
        if self.projection is not None:
            out.append(("proj", self.projection))
        return out

    def branch_convs(self):
        return [layer for _, layer in self.branch if isinstance(layer, Conv2d)]

    def forward(self, x, train=False):
        f = x
        for _, layer in self.branch:
            f = layer.forward(f, train)
        sc = x if self.projection is None else self.projection.forward(x, train)
        if f.shape != sc.shape:
            raise ValueError(f"residual branch {f.shape} does not match shortcut {sc.shape}")
        self._cache = True
        return f + sc

    def backward(self, dout):
        self._take_cache()
        d = dout
        for _, layer in reversed(self.branch):
            d = layer.backward(d)
        if self.projection is None:
            return d + dout
        return d + self.projection.backward(dout)


def bce_loss(probs, labels, eps=1e-7, class_weights=None):
    """Binary cross-entropy on two-column softmax output.

    Returns ``(loss, dprobs)``: the (weighted) mean of ``-log p[true]`` with
    ``p`` clamped to ``[eps, 1-eps]``, and its gradient w.r.t. ``probs``
    (zero where the clamp is active).
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[1] != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError(f"expected (N, 2) probabilities for {labels.shape[0]} labels, got {probs.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(np.int64)
    n = labels.shape[0]
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[labels]
    p_true = probs[np.arange(n), labels]
    clamped = np.clip(p_true, eps, 1 - eps)
    loss = float(np.sum(w * -np.log(clamped.astype(np.float64))) / w.sum())
    dprobs = np.zeros_like(probs)
    inside = (p_true >= eps) & (p_true <= 1 - eps)
    dprobs[np.arange(n), labels] = np.where(inside, -w / (w.sum() * np.where(inside, p_true, 1)), 0)
    return loss, dprobs
