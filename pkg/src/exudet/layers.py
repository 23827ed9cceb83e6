"""Network layers with explicit forward and backward passes.

Every layer caches whatever its backward pass needs (inputs, masks, argmax
positions) on forward and raises :class:`StateError` when backward is called
without a matching forward.  Parameter gradients are written in place into
preallocated arrays so optimizers can hold stable references.

Shape convention: activations are [N, C, H, W] through the convolutional
blocks and [N, features] after flattening.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor
from .errors import ConfigError, DataError, DegenerateBatchError, ShapeError, StateError


class Parameter:
    """A learnable array and its gradient, updated in place."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = data
        self.grad = np.zeros_like(data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Layer:
    """Base layer: stateless by default, train/eval mode aware."""

    def __init__(self):
        self.training = True

    def train(self):
        self.training = True

    def eval(self):
        self.training = False

    def parameters(self) -> list:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    """Fan-in He initialization with uniform draws on [-sqrt(6/fan_in), +)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ReLU(Layer):
    """Elementwise max(0, x); the subgradient at exactly 0 is taken as 0."""

    def __init__(self):
        super().__init__()
        self._mask: Optional[np.ndarray] = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, upstream):
        if self._mask is None:
            raise StateError("ReLU backward called before forward")
        if upstream.shape != self._mask.shape:
            raise ShapeError(
                f"upstream shape {upstream.shape} != forward shape {self._mask.shape}"
            )
        return np.where(self._mask, upstream, upstream.dtype.type(0))


class Conv2d(Layer):
    """Valid (unpadded) cross-correlation, stride 1, square kernel.

    Forward runs as im2col + matmul; backward recovers all three gradients
    from the transposed matmuls plus a col2im scatter-add.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if in_channels < 1 or out_channels < 1 or kernel_size < 1:
            raise ShapeError("channel counts and kernel size must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(
            "weight", he_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size),
                                 fan_in, dtype))
        self.bias = Parameter("bias", np.zeros(out_channels, dtype=dtype))
        self._cols: Optional[np.ndarray] = None
        self._x_shape: Optional[tuple] = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected [N,{self.in_channels},H,W], got {x.shape}")
        n = x.shape[0]
        k = self.kernel_size
        ho, wo = tensor.conv_output_hw(x.shape[2:], (k, k), 1)
        cols = tensor.im2col_batch(x, (k, k), 1)
        self._cols = cols
        self._x_shape = x.shape
        w2d = self.weight.data.reshape(self.out_channels, -1)
        out = w2d @ cols + self.bias.data[:, None]
        return np.ascontiguousarray(
            out.reshape(self.out_channels, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(self, upstream):
        if self._cols is None:
            raise StateError("Conv2d backward called before forward")
        n, _, ho, wo = upstream.shape
        up2d = upstream.transpose(1, 0, 2, 3).reshape(self.out_channels, n * ho * wo)
        self.weight.grad[...] = (up2d @ self._cols.T).reshape(self.weight.data.shape)
        self.bias.grad[...] = upstream.sum(axis=(0, 2, 3))
        w2d = self.weight.data.reshape(self.out_channels, -1)
        dcols = w2d.T @ up2d
        k = self.kernel_size
        return tensor.col2im_batch(dcols, self._x_shape, (k, k), 1)


class BatchNorm2d(Layer):
    """Per-channel batch normalization with learned affine.

    Train mode normalizes by batch mean and biased variance over the N*H*W
    axis and updates running statistics as
    ``running <- (1 - momentum) * running + momentum * batch_stat``, storing
    the unbiased variance.  Eval mode normalizes with the running statistics.
    """

    def __init__(self, num_channels: int, *, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        super().__init__()
        if eps <= 0:
            raise ConfigError("eps must be positive")
        if not 0 < momentum < 1:
            raise ConfigError("momentum must lie in (0, 1)")
        self.num_channels = num_channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter("gamma", np.ones(num_channels, dtype=dtype))
        self.beta = Parameter("beta", np.zeros(num_channels, dtype=dtype))
        self.running_mean = np.zeros(num_channels, dtype=dtype)
        self.running_var = np.ones(num_channels, dtype=dtype)
        self._xhat: Optional[np.ndarray] = None
        self._inv_std: Optional[np.ndarray] = None
        self._trained_forward = False

    def parameters(self):
        return [self.gamma, self.beta]

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.num_channels:
            raise ShapeError(
                f"expected [N,{self.num_channels},H,W], got {x.shape}")

    def forward(self, x):
        self._check(x)
        n, _, h, w = x.shape
        if self.training:
            m = n * h * w
            if m < 2:
                raise DegenerateBatchError(
                    "batch norm needs at least two values per channel in train mode")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))  # biased, divisor m
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
            mom = self.momentum
            self.running_mean[...] = (1 - mom) * self.running_mean + mom * mean
            self.running_var[...] = (1 - mom) * self.running_var + mom * var * (m / (m - 1))
            self._xhat = xhat
            self._inv_std = inv_std
            self._trained_forward = True
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
            self._trained_forward = False
        return self.gamma.data[None, :, None, None] * xhat + self.beta.data[None, :, None, None]

    def backward(self, upstream):
        if not self._trained_forward or self._xhat is None:
            raise StateError("BatchNorm2d backward requires a preceding train-mode forward")
        if upstream.shape != self._xhat.shape:
            raise ShapeError(
                f"upstream shape {upstream.shape} != forward shape {self._xhat.shape}")
        n, _, h, w = upstream.shape
        m = n * h * w
        sum_up = upstream.sum(axis=(0, 2, 3))
        sum_up_xhat = (upstream * self._xhat).sum(axis=(0, 2, 3))
        self.beta.grad[...] = sum_up
        self.gamma.grad[...] = sum_up_xhat
        coeff = (self.gamma.data * self._inv_std / m)[None, :, None, None]
        dx = coeff * (
            m * upstream
            - sum_up[None, :, None, None]
            - self._xhat * sum_up_xhat[None, :, None, None]
        )
        return dx


class MaxPool2d(Layer):
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped.

    Ties go to the first (lowest linear index) maximum within the window,
    and dropped rows/columns receive zero gradient.
    """

    def __init__(self, window: int = 2):
        super().__init__()
        self.window = window
        self._argmax: Optional[np.ndarray] = None
        self._x_shape: Optional[tuple] = None

    def forward(self, x):
        k = self.window
        if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
            raise ShapeError(f"input {x.shape} smaller than pooling window {k}")
        n, c, h, w = x.shape
        ho, wo = h // k, w // k
        windows = (
            x[:, :, : ho * k, : wo * k]
            .reshape(n, c, ho, k, wo, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho, wo, k * k)
        )
        self._argmax = windows.argmax(axis=-1)
        self._x_shape = x.shape
        out = np.take_along_axis(windows, self._argmax[..., None], axis=-1)[..., 0]
        return out

    @property
    def argmax(self) -> Optional[np.ndarray]:
        """Per-window linear index of the max from the last forward."""
        return self._argmax

    def backward(self, upstream):
        if self._argmax is None:
            raise StateError("MaxPool2d backward called before forward")
        k = self.window
        n, c, h, w = self._x_shape
        ho, wo = h // k, w // k
        if upstream.shape != (n, c, ho, wo):
            raise ShapeError(
                f"upstream shape {upstream.shape} != pooled shape {(n, c, ho, wo)}")
        dwindows = np.zeros((n, c, ho, wo, k * k), dtype=upstream.dtype)
        np.put_along_axis(dwindows, self._argmax[..., None], upstream[..., None], axis=-1)
        dcropped = (
            dwindows.reshape(n, c, ho, wo, k, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho * k, wo * k)
        )
        dx = np.zeros(self._x_shape, dtype=upstream.dtype)
        dx[:, :, : ho * k, : wo * k] = dcropped
        return dx


class Flatten(Layer):
    """[N, C, H, W] -> [N, C*H*W], channel-major then row-major."""

    def __init__(self):
        super().__init__()
        self._x_shape: Optional[tuple] = None

    def forward(self, x):
        self._x_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, upstream):
        if self._x_shape is None:
            raise StateError("Flatten backward called before forward")
        return upstream.reshape(self._x_shape)


class Linear(Layer):
    """Affine map [N, in] -> [N, out] computed as x @ W.T + b."""

    def __init__(self, in_features: int, out_features: int,
                 *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if in_features < 1 or out_features < 1:
            raise ShapeError("feature counts must be >= 1")
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            "weight", he_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter("bias", np.zeros(out_features, dtype=dtype))
        self._x: Optional[np.ndarray] = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"expected [N,{self.in_features}], got {x.shape}")
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, upstream):
        if self._x is None:
            raise StateError("Linear backward called before forward")
        if upstream.shape != (self._x.shape[0], self.out_features):
            raise ShapeError(
                f"upstream shape {upstream.shape} != {(self._x.shape[0], self.out_features)}")
        self.weight.grad[...] = upstream.T @ self._x
        self.bias.grad[...] = upstream.sum(axis=0)
        return upstream @ self.weight.data


class Dropout(Layer):
    """Inverted dropout: train-time zeroing with 1/(1-p) rescale, eval identity.

    Set ``frozen = True`` to reuse the last drawn mask on subsequent forwards;
    gradient checking needs the mask held fixed while probing.
    """

    def __init__(self, rate: float, *, rng: np.random.Generator):
        super().__init__()
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self.frozen = False
        self._keep: Optional[np.ndarray] = None
        self._identity = False

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self._identity = True
            return x
        self._identity = False
        if not (self.frozen and self._keep is not None and self._keep.shape == x.shape):
            self._keep = self.rng.random(x.shape) >= self.rate
        scale = x.dtype.type(1.0 / (1.0 - self.rate))
        return np.where(self._keep, x * scale, x.dtype.type(0))

    @property
    def mask(self) -> Optional[np.ndarray]:
        """Keep-mask from the last train-mode forward (None after identity)."""
        return None if self._identity else self._keep

    def backward(self, upstream):
        if self._identity:
            return upstream
        if self._keep is None:
            raise StateError("Dropout backward called before forward")
        if upstream.shape != self._keep.shape:
            raise ShapeError(
                f"upstream shape {upstream.shape} != mask shape {self._keep.shape}")
        scale = upstream.dtype.type(1.0 / (1.0 - self.rate))
        return np.where(self._keep, upstream * scale, upstream.dtype.type(0))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of softmax(logits) against integer class labels.

    Returns ``(loss, dloss_dlogits)`` where the gradient is
    ``(softmax - onehot) / N``, ready to feed straight into backward.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [N, classes], got {logits.shape}")
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        raise DataError(f"labels must be integers, got dtype {labels.dtype}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise DataError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)
