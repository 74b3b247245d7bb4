"""Trainable clipping layer: clamps non-negative activations at a learned ceiling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Layer, ShapeError

LAMBDA_INIT = 4.0
LAMBDA_MIN = 1e-3


@dataclass
class ClipParam:
    """Scalar clipping ceiling of one clip layer and its gradient accumulator."""

    value: float = LAMBDA_INIT
    grad: float = 0.0

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError(f"clip ceiling must be positive, got {self.value}")


def clip_forward(a, lam):
    """Elementwise ``min(a, lam)``; ``a`` is expected to be post-ReLU."""
    if not lam > 0:
        raise ValueError(f"clip ceiling must be positive, got {lam}")
    return np.minimum(a, lam)


def clip_backward(a, lam, upstream):
    """Gradients of ``clip_forward`` with respect to ``a`` and ``lam``.

    Elements with ``a >= lam`` are on the clipped branch: they pass nothing
    back to ``a`` and contribute their upstream gradient to ``lam``.
    """
    a = np.asarray(a)
    upstream = np.asarray(upstream)
    if a.shape != upstream.shape:
        raise ShapeError(f"activation shape {a.shape} != upstream shape {upstream.shape}")
    clipped = a >= lam
    grad_a = np.where(clipped, 0, upstream).astype(upstream.dtype, copy=False)
    grad_lam = float(upstream[clipped].sum(dtype=np.float64))
    return grad_a, grad_lam


class Clip(Layer):
    kind = "clip"

    def __init__(self, lam=LAMBDA_INIT):
        super().__init__()
        self.lam = ClipParam(float(lam))

    def zero_grad(self):
        self.lam.grad = 0.0

    def forward(self, x, train=False):
        self._a = x if train else None
        return clip_forward(x, self.lam.value)

    def backward(self, grad):
        grad_a, grad_lam = clip_backward(self._a, self.lam.value, grad)
        self.lam.grad += grad_lam
        return grad_a

    def spec(self):
        return {"type": self.kind, "lambda": self.lam.value}


def clip_layers(graph):
    return [layer for layer in graph.layers if isinstance(layer, Clip)]


def lambdas(graph):
    return [layer.lam.value for layer in clip_layers(graph)]
