"""Small forward-only networks with a flat weight vector.

The EnKF path only calls :meth:`ForwardNetwork.forward`. A hand-written
reverse pass (:meth:`ForwardNetwork.backward`) exists for the gradient
baselines and is checked against finite differences in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .problems import ForwardModel


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    relu: bool = True

    def param_shapes(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"Dense expects input {(self.in_features,)}, got {in_shape}")
        return [(self.out_features, self.in_features), (self.out_features,)], (self.out_features,)

    def forward(self, params, x):
        W, b = params
        z = x @ W.T + b
        out = np.maximum(z, 0.0) if self.relu else z
        return out, (x, z)

    def backward(self, params, cache, dout):
        W, _ = params
        x, z = cache
        if self.relu:
            dout = dout * (z > 0)
        return dout @ W, [dout.T @ x, dout.sum(axis=0)]


@dataclass(frozen=True)
class Conv2d:
    """'Same'-padded convolution, stride 1, odd kernel size."""

    in_channels: int
    out_channels: int
    kernel: int = 5
    relu: bool = True

    def param_shapes(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"Conv2d expects ({self.in_channels}, H, W), got {in_shape}")
        if self.kernel % 2 != 1:
            raise ConfigError("kernel size must be odd")
        _, H, W = in_shape
        k = self.kernel
        return ([(self.out_channels, self.in_channels * k * k), (self.out_channels,)],
                (self.out_channels, H, W))

    def _cols(self, x):
        s, C, H, W = x.shape
        k, p = self.kernel, self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        # (s, C, H, W, k, k) -> (s, H, W, C, k, k)
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(s * H * W, C * k * k)

    def forward(self, params, x):
        Wm, b = params
        s, _, H, W = x.shape
        cols = self._cols(x)
        z = (cols @ Wm.T + b).reshape(s, H, W, self.out_channels).transpose(0, 3, 1, 2)
        out = np.maximum(z, 0.0) if self.relu else z
        return out, (x.shape, cols, z)

    def backward(self, params, cache, dout):
        Wm, _ = params
        shape, cols, z = cache
        if self.relu:
            dout = dout * (z > 0)
        s, C, H, W = shape
        k, p = self.kernel, self.kernel // 2
        dflat = dout.transpose(0, 2, 3, 1).reshape(s * H * W, self.out_channels)
        dW = dflat.T @ cols
        db = dflat.sum(axis=0)
        dcols = (dflat @ Wm).reshape(s, H, W, C, k, k)
        dxp = np.zeros((s, C, H + 2 * p, W + 2 * p))
        for a in range(k):
            for c in range(k):
                dxp[:, :, a:a + H, c:c + W] += dcols[:, :, :, :, a, c].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + H, p:p + W], [dW, db]


@dataclass(frozen=True)
class AvgPool2d:
    size: int = 2

    def param_shapes(self, in_shape):
        C, H, W = in_shape
        if H % self.size or W % self.size:
            raise ShapeError(f"pool size {self.size} does not divide {H}x{W}")
        return [], (C, H // self.size, W // self.size)

    def forward(self, params, x):
        s, C, H, W = x.shape
        r = self.size
        return x.reshape(s, C, H // r, r, W // r, r).mean(axis=(3, 5)), x.shape

    def backward(self, params, cache, dout):
        r = self.size
        dx = np.repeat(np.repeat(dout, r, axis=2), r, axis=3) / (r * r)
        return dx, []


@dataclass(frozen=True)
class Flatten:
    def param_shapes(self, in_shape):
        return [], (int(np.prod(in_shape)),)

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dout):
        return dout.reshape(cache), []


class ForwardNetwork:
    """Sequential stack of layers evaluated on a flat parameter vector."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        shape = self.input_shape
        self._slices = []
        offset = 0
        for layer in self.layers:
            pshapes, shape = layer.param_shapes(shape)
            entry = []
            for ps in pshapes:
                size = int(np.prod(ps))
                entry.append((offset, offset + size, ps))
                offset += size
            self._slices.append(entry)
        if len(shape) != 1:
            raise ShapeError(f"network must end in a flat feature vector, got shape {shape}")
        self.feature_dim = shape[0]
        self.n_params = offset

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"theta has shape {theta.shape}, network has {self.n_params} weights")
        return [[theta[a:b].reshape(ps) for a, b, ps in entry] for entry in self._slices]

    def _reshape_input(self, X):
        X = np.asarray(X, dtype=float)
        return X.reshape((X.shape[0],) + self.input_shape)

    def forward(self, theta, X) -> np.ndarray:
        """Feature matrix ``s x p`` for the ``s`` examples in ``X``."""
        h = self._reshape_input(X)
        for layer, params in zip(self.layers, self.unpack(theta)):
            h, _ = layer.forward(params, h)
        return h

    def forward_with_cache(self, theta, X):
        h = self._reshape_input(X)
        caches = []
        for layer, params in zip(self.layers, self.unpack(theta)):
            h, cache = layer.forward(params, h)
            caches.append(cache)
        return h, caches

    def backward(self, theta, caches, dfeatures) -> np.ndarray:
        """Gradient w.r.t. the flat weights given ``d loss / d features``."""
        grads = []
        dh = dfeatures
        all_params = self.unpack(theta)
        for layer, params, cache in zip(reversed(self.layers), reversed(all_params), reversed(caches)):
            dh, g = layer.backward(params, cache, dh)
            grads.append(g)
        flat = [gi.ravel() for g in reversed(grads) for gi in g]
        return np.concatenate(flat) if flat else np.zeros(0)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """He-normal weights, zero biases."""
        theta = np.zeros(self.n_params)
        for entry in self._slices:
            if not entry:
                continue
            a, b, ps = entry[0]
            fan_in = ps[1]
            theta[a:b] = rng.standard_normal(b - a) * np.sqrt(2.0 / fan_in)
        return theta


def mlp(input_dim: int, hidden=(32, 64)) -> ForwardNetwork:
    """Perceptron with ReLU hidden layers; the last hidden layer is the feature output."""
    layers = []
    d = input_dim
    for h in hidden:
        layers.append(Dense(d, h, relu=True))
        d = h
    return ForwardNetwork(layers, (input_dim,))


def small_cnn(image_shape=(1, 28, 28), channels=(4, 8), kernel=5) -> ForwardNetwork:
    """Conv-ReLU-pool twice, then flatten (a scaled-down version of the MNIST CNN)."""
    layers = []
    c = image_shape[0]
    for out in channels:
        layers += [Conv2d(c, out, kernel), AvgPool2d(2)]
        c = out
    layers.append(Flatten())
    return ForwardNetwork(layers, image_shape)


class FeatureModel(ForwardModel):
    """Forward operator ``theta -> features of every example`` (flattened, example-major)."""

    def __init__(self, network: ForwardNetwork, X):
        self.network = network
        self.X = np.asarray(X, dtype=float)
        self.input_dim = network.n_params
        self.n_examples = self.X.shape[0]
        self.outputs_per_example = network.feature_dim

    def features(self, theta, batch=None) -> np.ndarray:
        theta = self.check_theta(theta)
        batch = self.check_batch(batch)
        X = self.X if batch is None else self.X[batch]
        return self.network.forward(theta, X)

    def evaluate(self, theta, batch=None):
        return self.features(theta, batch).ravel()

    def vjp(self, theta, v, batch=None):
        theta = self.check_theta(theta)
        batch = self.check_batch(batch)
        X = self.X if batch is None else self.X[batch]
        feats, caches = self.network.forward_with_cache(theta, X)
        return self.network.backward(theta, caches, np.asarray(v, dtype=float).reshape(feats.shape))
