"""Dense array kernels and a sequential layer graph with reverse-mode gradients.

Arrays are plain ``numpy.ndarray`` in NCHW layout; the leading axis is always
the mini-batch. Convolution kernels run through torch's CPU implementation on
zero-copy views of the numpy buffers. Each layer caches what it needs during a
train-mode forward pass and consumes that cache in ``backward``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view


class GraphError(ValueError):
    """Raised for malformed graphs or misuse of forward/backward.

    ``layer_index`` names the offending layer when one is known.
    """

    def __init__(self, message: str, layer_index: int | None = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"kernel {kernel} larger than padded extent {size + 2 * padding}")
    return span // stride + 1


def conv2d_forward(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``weight`` (F,C,kh,kw)."""
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv expects {weight.shape[1]} input channels, got {x.shape[1]}")
    out = F.conv2d(torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(weight),
                   None if bias is None else torch.from_numpy(bias), stride, padding)
    return out.numpy()


def conv2d_backward(dout, x, weight, stride=1, padding=0):
    """Return (dx, dweight, dbias) for ``conv2d_forward``."""
    dx, dw, db = torch.ops.aten.convolution_backward(
        torch.from_numpy(np.ascontiguousarray(dout)), torch.from_numpy(x),
        torch.from_numpy(weight), [weight.shape[0]], [stride, stride], [padding, padding],
        [1, 1], False, [0, 0], 1, [True, True, True])
    return dx.numpy(), dw.numpy(), db.numpy()


def dense_forward(x, weight, bias):
    """``weight`` has shape (out_features, in_features)."""
    out = x @ weight.T
    if bias is not None:
        out += bias
    return out


def dense_backward(dout, x, weight):
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def avg_pool2d_forward(x, kernel, stride):
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    out = None
    for i in range(kernel):
        for j in range(kernel):
            part = win[:, :, ::stride, ::stride, i, j]
            out = part.copy() if out is None else out + part
    return out * (1.0 / (kernel * kernel))


def avg_pool2d_backward(dout, x_shape, kernel, stride):
    n, c, h, w = x_shape
    ho, wo = dout.shape[2], dout.shape[3]
    share = dout / (kernel * kernel)
    if kernel == stride and h == ho * kernel and w == wo * kernel:
        return np.repeat(np.repeat(share, kernel, axis=2), kernel, axis=3)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
    return dx


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Accepts a single logit vector with a scalar label or a (N, C) batch. The
    returned gradient is ``softmax - one_hot`` divided by the batch size.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
        labels = np.asarray([labels])
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    grad /= n
    if single:
        grad = grad[0]
    return loss, grad


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def output_shape(self, input_shape: tuple) -> tuple:
        return tuple(input_shape)

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def zero_grad(self):
        for name, value in self.params.items():
            self.grads[name] = np.zeros_like(value)

    def astype(self, dtype):
        for name in self.params:
            self.params[name] = self.params[name].astype(dtype)
        self.zero_grad()

    def spec(self) -> dict:
        return {"type": self.kind}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k != "type")
        return f"{type(self).__name__}({args})"


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=0,
                 rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.params["weight"] = (rng.standard_normal((out_channels, in_channels, kernel, kernel))
                                 * math.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(f"conv expects ({self.in_channels}, H, W), got {tuple(input_shape)}")
        _, h, w = input_shape
        return (self.out_channels,
                conv_output_size(h, self.kernel, self.stride, self.padding),
                conv_output_size(w, self.kernel, self.stride, self.padding))

    def forward(self, x, train=False):
        x = np.ascontiguousarray(x)
        self._x = x if train else None
        return conv2d_forward(x, self.params["weight"], self.params["bias"],
                              self.stride, self.padding)

    def backward(self, grad):
        dx, dw, db = conv2d_backward(grad, self._x, self.params["weight"],
                                     self.stride, self.padding)
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx

    def spec(self):
        return {"type": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = (rng.standard_normal((out_features, in_features))
                                 * math.sqrt(2.0 / in_features)).astype(dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self.zero_grad()

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {tuple(input_shape)}")
        return (self.out_features,)

    def forward(self, x, train=False):
        self._x = x if train else None
        return dense_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, grad):
        dx, dw, db = dense_backward(grad, self._x, self.params["weight"])
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx

    def spec(self):
        return {"type": self.kind, "in_features": self.in_features,
                "out_features": self.out_features}


class AvgPool2d(Layer):
    kind = "avgpool"

    def __init__(self, kernel=2, stride=None):
        super().__init__()
        self.kernel = kernel
        self.stride = kernel if stride is None else stride

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"avgpool expects (C, H, W), got {tuple(input_shape)}")
        c, h, w = input_shape
        return (c, conv_output_size(h, self.kernel, self.stride, 0),
                conv_output_size(w, self.kernel, self.stride, 0))

    def forward(self, x, train=False):
        self._shape = x.shape
        return avg_pool2d_forward(x, self.kernel, self.stride)

    def backward(self, grad):
        return avg_pool2d_backward(grad, self._shape, self.kernel, self.stride)

    def spec(self):
        return {"type": self.kind, "kernel": self.kernel, "stride": self.stride}


class BatchNorm(Layer):
    """Per-channel batch normalization over the batch and spatial axes.

    Eval mode divides by ``sqrt(running_var + eps)``; ``running_sigma`` is the
    square root of the running variance.
    """

    kind = "batchnorm"

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.zero_grad()

    @property
    def running_sigma(self):
        return np.sqrt(self.running_var)

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)

    def output_shape(self, input_shape):
        if input_shape[0] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {input_shape[0]}")
        return tuple(input_shape)

    @staticmethod
    def _bcast(v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    @staticmethod
    def _channel_sum(x):
        if x.ndim == 2:
            return x.sum(axis=0)
        return x.reshape(x.shape[0], x.shape[1], -1).sum(axis=2).sum(axis=0)

    def scale_shift(self):
        """Eval-mode BN as ``x * scale + shift`` per channel."""
        scale = self.params["gamma"] / np.sqrt(self.running_var + self.eps)
        return scale, self.params["beta"] - self.running_mean * scale

    def forward(self, x, train=False):
        nd = x.ndim
        if not train:
            scale, shift = self.scale_shift()
            return x * self._bcast(scale, nd) + self._bcast(shift, nd)
        count = x.size // self.channels
        mu = self._channel_sum(x) / count
        centered = x - self._bcast(mu, nd)
        var = self._channel_sum(centered * centered) / count
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
        unbiased = var * count / max(count - 1, 1)
        self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * self._bcast(inv, nd)
        self._cache = (xhat, inv, count)
        return xhat * self._bcast(self.params["gamma"], nd) + self._bcast(self.params["beta"], nd)

    def backward(self, grad):
        xhat, inv, count = self._cache
        nd = grad.ndim
        dgamma = self._channel_sum(grad * xhat)
        dbeta = self._channel_sum(grad)
        self.grads["gamma"] += dgamma
        self.grads["beta"] += dbeta
        # dxhat = grad * gamma; its channel means reduce to dbeta and dgamma
        gamma = self.params["gamma"]
        coef = gamma * inv
        return (grad - self._bcast(dbeta / count, nd)
                - xhat * self._bcast(dgamma / count, nd)) * self._bcast(coef, nd)

    def spec(self):
        return {"type": self.kind, "channels": self.channels, "eps": self.eps,
                "momentum": self.momentum}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self._mask = x > 0 if train else None
        return np.maximum(x, 0)

    def backward(self, grad):
        return grad * self._mask


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


class ModelGraph:
    """Ordered layer list evaluated front to back.

    Construction propagates the declared per-sample ``input_shape`` through
    every layer, so geometry errors surface here rather than mid-training.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int]):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        seen = set()
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, Layer):
                raise GraphError(f"not a layer: {layer!r}", i)
            if id(layer) in seen:
                raise GraphError("layer instance appears twice; graphs must be acyclic", i)
            seen.add(id(layer))
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(str(exc), i) from None
        self._backward_ready = False
        self.provenance: dict = {}

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def dtype(self):
        for layer in self.layers:
            for value in layer.params.values():
                return value.dtype
        return np.dtype(np.float64)

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def forward(self, x, mode="eval"):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} != declared {self.input_shape}", 0)
        self._backward_ready = False
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, train)
            if not np.isfinite(x.sum()) and not np.isfinite(x).all():
                raise NonFiniteError("non-finite activation", i)
        self._backward_ready = train
        return x

    def backward(self, loss_grad):
        if not self._backward_ready:
            raise GraphError("backward requires a preceding train-mode forward")
        grad = loss_grad
        for layer in self.layers:
            layer.zero_grad()
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        self._backward_ready = False
        return grad

    def predict(self, x, batch_size=1000):
        outs = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0,) + self.output_shape)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        body = "\n".join(f"  {i}: {layer!r} -> {self.shapes[i + 1]}"
                         for i, layer in enumerate(self.layers))
        return f"ModelGraph(input={self.input_shape}\n{body}\n)"
