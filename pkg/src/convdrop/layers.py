"""Layers with explicit forward and backward passes.

Each layer caches what its backward pass needs during ``forward``.  The
``backward`` call consumes the upstream gradient, stores parameter gradients
in ``self.grads`` and returns the gradient with respect to the input.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, StateError


class Layer:
    """Base class: parameter dict, gradient dict and a train/eval flag."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def children(self) -> list["Layer"]:
        return []

    def modules(self):
        yield self
        for child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = ""):
        """Yield ``(qualified_name, owner, key)`` for every trainable array."""
        for key in self.params:
            yield prefix + key, self, key
        for i, child in enumerate(self.children()):
            yield from child.named_parameters(f"{prefix}{i}.")

    def num_trainable(self) -> int:
        return sum(owner.params[key].size for _, owner, key in self.named_parameters())

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for m in self.modules():
            for k, v in m.params.items():
                m.grads[k] = np.zeros_like(v)


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def conv_output_size(size: int, k: int, stride: int, padding: int, floor: bool = False) -> int:
    span = size + 2 * padding - k
    if span < 0 or (span % stride and not floor):
        raise ShapeError(
            f"input size {size} with kernel {k}, stride {stride}, padding "
            f"{padding} gives a non-integral output size")
    return span // stride + 1


class Conv2d(Layer):
    """Bias-free 2-D convolution with optional channel groups.

    Weights have shape ``(c_out, c_in // groups, kh, kw)``.  Output channel
    ``i`` in group ``g`` only reads input channels of group ``g``.  The
    computation is lowered to one batched matrix product per call.

    A non-integral output size is an error unless ``floor=True``, in which
    case trailing rows/columns that do not fit a full stride are skipped.
    """

    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=0, groups=1,
                 floor=False, dtype=np.float64):
        super().__init__()
        if groups < 1 or c_in % groups or c_out % groups:
            raise ConfigError(
                f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
        self.c_in, self.c_out = c_in, c_out
        self.kernel = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
        self.stride, self.padding, self.groups = stride, padding, groups
        self.floor = floor
        self.params["weight"] = np.zeros(
            (c_out, c_in // groups) + self.kernel, dtype=dtype)
        self._cache = None

    @property
    def weight(self) -> np.ndarray:
        return self.params["weight"]

    @property
    def fan_in(self) -> int:
        return (self.c_in // self.groups) * self.kernel[0] * self.kernel[1]

    def _columns(self, x):
        n, c, h, w = x.shape
        if c != self.c_in:
            raise ShapeError(f"conv expects {self.c_in} channels, got {c}")
        kh, kw = self.kernel
        s, p, g = self.stride, self.padding, self.groups
        ho = conv_output_size(h, kh, s, p, self.floor)
        wo = conv_output_size(w, kw, s, p, self.floor)
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, :s * ho:s, :s * wo:s]
        # (n, c, ho, wo, kh, kw) -> (g, n*ho*wo, c/g*kh*kw)
        win = win.reshape(n, g, c // g, ho, wo, kh, kw)
        cols = win.transpose(1, 0, 3, 4, 2, 5, 6).reshape(g, n * ho * wo, -1)
        return cols, (n, h, w, ho, wo)

    def forward(self, x):
        cols, dims = self._columns(x)
        n, _, _, ho, wo = dims
        g = self.groups
        wmat = self.weight.reshape(g, self.c_out // g, -1).transpose(0, 2, 1)
        out = np.matmul(cols, wmat)  # (g, n*ho*wo, c_out/g)
        out = out.reshape(g, n, ho, wo, -1).transpose(1, 0, 4, 2, 3)
        self._cache = (cols, dims)
        return np.ascontiguousarray(out.reshape(n, self.c_out, ho, wo))

    def backward(self, grad):
        if self._cache is None:
            raise StateError("conv backward called before forward")
        cols, (n, h, w, ho, wo) = self._cache
        if grad.shape != (n, self.c_out, ho, wo):
            raise ShapeError(f"grad shape {grad.shape} does not match output")
        g, kh, kw = self.groups, *self.kernel
        cg, og = self.c_in // g, self.c_out // g
        gmat = grad.reshape(n, g, og, ho, wo).transpose(1, 0, 3, 4, 2)
        gmat = gmat.reshape(g, n * ho * wo, og)
        gw = np.matmul(cols.transpose(0, 2, 1), gmat)  # (g, cg*kh*kw, og)
        self.grads["weight"] = np.ascontiguousarray(
            gw.transpose(0, 2, 1).reshape(self.weight.shape))

        p, s = self.padding, self.stride
        if s == 1 and p <= min(kh, kw) - 1:
            return self._input_grad_by_conv(grad, h, w)

        wmat = self.weight.reshape(g, og, -1)
        gcols = np.matmul(gmat, wmat)  # (g, n*ho*wo, cg*kh*kw)
        gcols = gcols.reshape(g, n, ho, wo, cg, kh, kw)
        # (kh, kw, n, g, cg, ho, wo) so each tap is a contiguous block
        gcols = np.ascontiguousarray(gcols.transpose(5, 6, 1, 0, 4, 2, 3)).reshape(
            kh, kw, n, self.c_in, ho, wo)
        gx = np.zeros((n, self.c_in, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[i, j]
        if p:
            gx = gx[:, :, p:p + h, p:p + w]
        return np.ascontiguousarray(gx)

    def _input_grad_by_conv(self, grad, h, w):
        # Stride 1: the input gradient is a full correlation of the output
        # gradient with the spatially flipped, group-transposed kernels.
        g, (kh, kw) = self.groups, self.kernel
        cg, og = self.c_in // g, self.c_out // g
        wt = self.weight.reshape(g, og, cg, kh, kw)[..., ::-1, ::-1]
        wt = wt.transpose(0, 2, 1, 3, 4).reshape(self.c_in, og, kh, kw)
        ph, pw = kh - 1 - self.padding, kw - 1 - self.padding
        if ph or pw:
            grad = np.pad(grad, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        n, _, gh, gw = grad.shape
        win = sliding_window_view(grad, (kh, kw), axis=(2, 3))
        win = win.reshape(n, g, og, h, w, kh, kw)
        cols = win.transpose(1, 0, 3, 4, 2, 5, 6).reshape(g, n * h * w, -1)
        wmat = wt.reshape(g, cg, -1).transpose(0, 2, 1)
        out = np.matmul(cols, wmat).reshape(g, n, h, w, cg).transpose(1, 0, 4, 2, 3)
        return np.ascontiguousarray(out.reshape(n, self.c_in, h, w))


class BatchNorm2d(Layer):
    """Per-channel batch normalization.

    Train mode normalizes with the biased batch variance and updates the
    running estimates as ``r <- (1 - momentum) * r + momentum * batch_stat``.
    The running variance is stored with the same biased estimator.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, init_running=True,
                 dtype=np.float64):
        super().__init__()
        if eps <= 0:
            raise ConfigError("batchnorm eps must be > 0")
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        if init_running:
            self.running_mean = np.zeros(channels, dtype=dtype)
            self.running_var = np.ones(channels, dtype=dtype)
        else:
            self.running_mean = self.running_var = None
        self._cache = None

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {x.shape[1]}")
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if self.training:
            mean = x.mean(axis=(0, 2, 3))
            centered = x - mean[None, :, None, None]
            var = (centered * centered).mean(axis=(0, 2, 3))
            if self.running_mean is None:
                self.running_mean, self.running_var = mean.copy(), var.copy()
            else:
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * mean
                self.running_var = (1 - m) * self.running_var + m * var
        else:
            if self.running_mean is None:
                raise StateError("batchnorm eval before running stats exist")
            mean, var = self.running_mean, self.running_var
            centered = x - mean[None, :, None, None]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, self.training)
        return gamma * xhat + beta

    def backward(self, grad):
        if self._cache is None:
            raise StateError("batchnorm backward called before forward")
        xhat, inv_std, training = self._cache
        self.grads["gamma"] = (grad * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = grad.sum(axis=(0, 2, 3))
        dxhat = grad * self.params["gamma"][None, :, None, None]
        if not training:
            return dxhat * inv_std[None, :, None, None]
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        sum_d = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return inv_std[None, :, None, None] / m * (m * dxhat - sum_d - xhat * sum_dx)


class Linear(Layer):
    """Fully connected layer on ``(n, in_features)`` inputs."""

    def __init__(self, in_features, out_features, dtype=np.float64):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.params["weight"] = np.zeros((out_features, in_features), dtype=dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self._x = None

    @property
    def fan_in(self) -> int:
        return self.in_features

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear expects (n, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        if self._x is None:
            raise StateError("linear backward called before forward")
        self.grads["weight"] = grad.T @ self._x
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"]


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class GlobalAvgPool(Layer):
    """``(n, c, h, w) -> (n, c)`` spatial mean."""

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._shape
        g = grad[:, :, None, None] / (h * w)
        return np.broadcast_to(g, self._shape).copy()


class MaxPool2d(Layer):
    """Max pooling; ties resolve to the first element in row-major order."""

    def __init__(self, kernel=2, stride=None):
        super().__init__()
        self.kernel = kernel
        self.stride = stride or kernel

    def forward(self, x):
        n, c, h, w = x.shape
        k, s = self.kernel, self.stride
        ho, wo = conv_output_size(h, k, s, 0), conv_output_size(w, k, s, 0)
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(n, c, ho, wo, k * k)
        idx = flat.argmax(axis=-1)  # argmax returns the first maximum
        self._cache = (x.shape, idx, ho, wo)
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        shape, idx, ho, wo = self._cache
        k, s = self.kernel, self.stride
        gx = np.zeros(shape, dtype=grad.dtype)
        dy, dx = np.divmod(idx, k)
        n, c = shape[:2]
        ni, ci, yi, xi = np.indices((n, c, ho, wo))
        np.add.at(gx, (ni, ci, yi * s + dy, xi * s + dx), grad)
        return gx


class Identity(Layer):
    def forward(self, x):
        return x

    def backward(self, grad):
        return grad
