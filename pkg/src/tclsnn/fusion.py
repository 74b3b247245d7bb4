"""Fold eval-mode batch normalization into the preceding conv/dense layer."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .tensor import BatchNorm, Conv2d, Dense, GraphError, ModelGraph


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mu: np.ndarray
    running_sigma: np.ndarray
    eps: float = 1e-5

    @classmethod
    def from_layer(cls, bn: BatchNorm):
        return cls(bn.params["gamma"], bn.params["beta"], bn.running_mean, bn.running_sigma, bn.eps)


@dataclass
class FusedLayer:
    weight: np.ndarray
    bias: np.ndarray


def fuse_batchnorm(weight, bias, bn: BatchNormParams) -> FusedLayer:
    """Scale output channel ``i`` by ``gamma_i / sqrt(sigma_i**2 + eps)`` and shift the bias.

    ``weight`` has the output channel on axis 0 (conv and dense alike).
    """
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.zeros(weight.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    gamma, beta, mu, sigma = (np.asarray(v, dtype=np.float64)
                              for v in (bn.gamma, bn.beta, bn.running_mu, bn.running_sigma))
    channels = weight.shape[0]
    for name, v in (("gamma", gamma), ("beta", beta), ("running_mu", mu), ("running_sigma", sigma)):
        if v.shape != (channels,):
            raise ValueError(f"batchnorm {name} has shape {v.shape}, layer has {channels} output channels")
    sigma_hat = np.sqrt(sigma * sigma + bn.eps)
    if not np.all(sigma_hat > 0):
        raise ValueError("batchnorm scale sqrt(sigma**2 + eps) must be positive")
    scale = gamma / sigma_hat
    return FusedLayer(weight * scale.reshape((-1,) + (1,) * (weight.ndim - 1)),
                      scale * (bias - mu) + beta)


def fuse_model(graph: ModelGraph) -> ModelGraph:
    """Return a float64 copy of ``graph`` with every BatchNorm folded away.

    Each BatchNorm must directly follow a conv or dense layer.
    """
    src = copy.deepcopy(graph).astype(np.float64)
    layers = []
    for i, layer in enumerate(src.layers):
        if isinstance(layer, BatchNorm):
            prev = layers[-1] if layers else None
            if not isinstance(prev, (Conv2d, Dense)):
                raise GraphError("batchnorm must follow a conv or dense layer to be fused", i)
            fused = fuse_batchnorm(prev.params["weight"], prev.params["bias"],
                                   BatchNormParams.from_layer(layer))
            prev.params["weight"] = fused.weight
            prev.params["bias"] = fused.bias
            prev.zero_grad()
            continue
        layers.append(layer)
    return ModelGraph(layers, src.input_shape)
