"""ANN to spiking-network conversion by per-layer data normalization.

Every hidden conv/dense layer is followed by ReLU (and, in a TCL model, a clip
layer). Its norm factor ``lam`` is the activation that maps to the maximum
spike rate. With unit thresholds the normalized weights are
``W * lam_prev / lam`` and biases ``b / lam``. The input layer factor is 1.0
and average pooling passes its input factor through unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .tcl import Clip, clip_layers
from .tensor import (AvgPool2d, BatchNorm, Conv2d, Dense, Flatten, GraphError, ModelGraph,
                     ReLU, avg_pool2d_forward, conv2d_forward, dense_forward)

RESERVOIR_CAP = 1_000_000
CALIBRATION_SAMPLES = 10_000


class ConversionError(ValueError):
    pass


@dataclass(frozen=True)
class NormFactorStrategy:
    kind: str = "tcl"  # tcl | percentile | max
    p: float = 1.0

    def __post_init__(self):
        if self.kind not in ("tcl", "percentile", "max"):
            raise ValueError(f"unknown norm-factor strategy {self.kind!r}")
        if self.kind == "percentile" and not 0 < self.p <= 1:
            raise ValueError(f"percentile must lie in (0, 1], got {self.p}")

    @classmethod
    def parse(cls, text):
        """Accept ``tcl``, ``max``, ``percentile:0.999`` or ``p99.9``."""
        text = text.strip().lower()
        if text in ("tcl", "max"):
            return cls(text)
        if text.startswith("percentile:"):
            return cls("percentile", float(text.split(":", 1)[1]))
        if text.startswith("p"):
            return cls("percentile", float(text[1:]) / 100.0)
        raise ValueError(f"cannot parse strategy {text!r}")

    @property
    def name(self):
        if self.kind == "percentile":
            return f"p{self.p * 100:g}"
        return self.kind

    @property
    def needs_calibration(self):
        return self.kind != "tcl"


# ---------------------------------------------------------------------------
# activation statistics
# ---------------------------------------------------------------------------


@dataclass
class ActivationStats:
    """Positive post-ReLU activations per hidden layer from a calibration pass.

    ``samples[l]`` is sorted ascending and holds at most ``RESERVOIR_CAP``
    values drawn uniformly from all positive activations of layer ``l``;
    ``a_max[l]`` is the exact maximum over every activation seen.
    """

    samples: list
    a_max: list
    seen: list = field(default_factory=list)

    def percentile(self, layer, p):
        """Sort-and-index percentile: the ``ceil(p * n)``-th smallest sample.

        ``p == 1`` returns the exact maximum even when the reservoir dropped it.
        """
        s = self.samples[layer]
        if len(s) == 0:
            return 0.0
        if p >= 1.0:
            return float(self.a_max[layer])
        k = min(max(math.ceil(p * len(s) - 1e-9), 1), len(s))
        return float(s[k - 1])


class _Reservoir:
    def __init__(self, cap, rng):
        self.cap, self.rng = cap, rng
        self.buf = np.empty(0)
        self.count = 0
        self.max = 0.0

    def add(self, values):
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size:
            self.max = max(self.max, float(values.max()))
        values = values[values > 0]
        m = values.size
        if m == 0:
            return
        room = self.cap - self.buf.size
        if room > 0:
            take = values[:room]
            self.buf = np.concatenate([self.buf, take])
            self.count += take.size
            values = values[room:]
            m = values.size
            if m == 0:
                return
        # Algorithm R: item number k (1-based) replaces slot j ~ U[0, k) when j < cap
        ks = np.arange(self.count + 1, self.count + m + 1)
        js = (self.rng.random(m) * ks).astype(np.int64)
        keep = js < self.cap
        self.buf[js[keep]] = values[keep]
        self.count += m


def hidden_layer_slots(model: ModelGraph):
    """Map layer index of each weighted layer to its hidden slot, or ``None`` for the output.

    Raises if a non-final weighted layer is not followed by ReLU.
    """
    weighted = [i for i, l in enumerate(model.layers) if isinstance(l, (Conv2d, Dense))]
    if not weighted:
        raise ConversionError("model has no conv or dense layers")
    slots = {}
    for n, i in enumerate(weighted):
        nxt = i + 1
        while nxt < len(model.layers) and isinstance(model.layers[nxt], BatchNorm):
            nxt += 1
        has_relu = nxt < len(model.layers) and isinstance(model.layers[nxt], ReLU)
        if i == weighted[-1]:
            if has_relu:
                raise ConversionError("output layer must not be followed by ReLU")
            slots[i] = None
        else:
            if not has_relu:
                raise ConversionError(f"hidden layer {i} is not followed by ReLU")
            slots[i] = n
    return slots


def _layer_outputs(model, x):
    """Eval-mode forward yielding (layer_index, output) pairs."""
    for i, layer in enumerate(model.layers):
        x = layer.forward(x, False)
        yield i, x


def collect_activation_stats(model: ModelGraph, calib, max_samples=CALIBRATION_SAMPLES,
                             cap=RESERVOIR_CAP, seed=0, batch_size=500) -> ActivationStats:
    images = calib.images if hasattr(calib, "images") else np.asarray(calib)
    images = images[:max_samples]
    relu_idx = [i for i, l in enumerate(model.layers) if isinstance(l, ReLU)]
    rng = np.random.default_rng(seed)
    res = {i: _Reservoir(cap, rng) for i in relu_idx}
    for s in range(0, len(images), batch_size):
        x = np.asarray(images[s:s + batch_size], dtype=model.dtype)
        for i, out in _layer_outputs(model, x):
            if i in res:
                res[i].add(out)
    return ActivationStats([np.sort(res[i].buf) for i in relu_idx],
                           [res[i].max for i in relu_idx],
                           [res[i].count for i in relu_idx])


def collect_norm_factors(model: ModelGraph, strategy: NormFactorStrategy, calib=None,
                         stats: ActivationStats | None = None):
    """One norm factor per hidden (ReLU-activated) layer."""
    n_hidden = sum(1 for l in model.layers if isinstance(l, ReLU))
    if strategy.kind == "tcl":
        clips = clip_layers(model)
        if not clips:
            raise ConversionError("tcl strategy needs a model with clip layers")
        if len(clips) != n_hidden:
            raise ConversionError(f"{len(clips)} clip layers for {n_hidden} hidden layers")
        return [c.lam.value for c in clips]
    if stats is None:
        if calib is None:
            raise ConversionError(f"{strategy.name} strategy needs calibration data")
        stats = collect_activation_stats(model, calib)
    if strategy.kind == "max":
        lams = list(stats.a_max)
    else:
        lams = [stats.percentile(l, strategy.p) for l in range(len(stats.samples))]
    for l, lam in enumerate(lams):
        if not lam > 0:
            raise ConversionError(f"hidden layer {l} never activated on calibration data")
    return lams


# ---------------------------------------------------------------------------
# spiking network container
# ---------------------------------------------------------------------------


@dataclass
class SpikingLayer:
    kind: str  # conv | dense | avgpool | flatten
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    v_thr: float = 1.0

    @property
    def spiking(self):
        return self.kind in ("conv", "dense")

    def current(self, x):
        """Synaptic input of one step: weighted sum plus bias, or the pooling window mean."""
        if self.kind == "conv":
            return conv2d_forward(x, self.weight, self.bias, self.stride, self.padding)
        if self.kind == "dense":
            return dense_forward(x, self.weight, self.bias)
        if self.kind == "avgpool":
            return avg_pool2d_forward(x, self.kernel, self.stride)
        return x.reshape(x.shape[0], -1)

    def spec(self):
        d = {"type": self.kind}
        if self.kind == "conv":
            d.update(out_channels=int(self.weight.shape[0]), in_channels=int(self.weight.shape[1]),
                     kernel=int(self.weight.shape[2]), stride=self.stride, padding=self.padding)
        elif self.kind == "dense":
            d.update(out_features=int(self.weight.shape[0]), in_features=int(self.weight.shape[1]))
        elif self.kind == "avgpool":
            d.update(kernel=self.kernel, stride=self.stride)
        if self.spiking:
            d["v_thr"] = self.v_thr
        return d


@dataclass
class SpikingNetwork:
    """Normalized integrate-and-fire network with real-coded input."""

    layers: list
    input_shape: tuple
    lambdas: list
    output_lambda: float
    strategy: str = "tcl"
    input_coding: str = "real"
    provenance: dict = field(default_factory=dict)

    @property
    def spiking_layers(self):
        return [l for l in self.layers if l.spiking]

    def cast(self, dtype):
        """Copy with weights in ``dtype``; returns ``self`` when nothing changes."""
        if all(l.weight is None or l.weight.dtype == dtype for l in self.layers):
            return self
        layers = [replace(l, weight=l.weight.astype(dtype), bias=l.bias.astype(dtype))
                  if l.weight is not None else l for l in self.layers]
        return replace(self, layers=layers)

    def analog_forward(self, x, record=False):
        """Rate-domain reference: each spiking layer outputs ``clip(relu(z), 0, v_thr) / v_thr``.

        This is the clipped, normalized ANN the spike rates approximate.
        """
        outs = []
        for layer in self.layers:
            x = layer.current(x)
            if layer.spiking:
                x = np.clip(x, 0.0, layer.v_thr) / layer.v_thr
                if record:
                    outs.append(x)
        return (x, outs) if record else x


def output_norm_factor(model, lambdas, calib, strategy: NormFactorStrategy, batch_size=500,
                       max_samples=CALIBRATION_SAMPLES):
    """Scale for the output layer, whose logits have no clip layer.

    Uses the maximum (or, for percentile strategies, that percentile) of the
    positive logits of the ANN with hidden activations clipped at ``lambdas``.
    Without calibration data the last hidden factor is reused.
    """
    if calib is None:
        return float(lambdas[-1])
    images = calib.images if hasattr(calib, "images") else np.asarray(calib)
    probe = normalize(model, lambdas, output_lambda=1.0)
    logits = np.concatenate([
        probe.layers[-1].current(_before_output(probe, np.asarray(images[s:s + batch_size],
                                                                  dtype=np.float64)))
        for s in range(0, min(len(images), max_samples), batch_size)])
    pos = np.sort(logits[logits > 0].ravel())
    if pos.size == 0:
        return float(lambdas[-1])
    if strategy.kind == "percentile":
        k = min(max(math.ceil(strategy.p * pos.size - 1e-9), 1), pos.size)
        return float(pos[k - 1])
    return float(pos[-1])


def _before_output(net, x):
    for layer in net.layers[:-1]:
        x = layer.current(x)
        if layer.spiking:
            x = np.clip(x, 0.0, layer.v_thr) / layer.v_thr
    return x


def normalize(model: ModelGraph, lambdas, output_lambda=None, strategy="tcl") -> SpikingNetwork:
    """Apply data normalization to a BN-free model and drop its ReLU/clip layers."""
    slots = hidden_layer_slots(model)
    n_hidden = sum(1 for s in slots.values() if s is not None)
    lambdas = [float(v) for v in lambdas]
    if len(lambdas) != n_hidden:
        raise ConversionError(f"expected {n_hidden} norm factors, got {len(lambdas)}")
    if output_lambda is None:
        output_lambda = lambdas[-1] if lambdas else 1.0
    for v in lambdas + [output_lambda]:
        if not v > 0:
            raise ConversionError(f"norm factors must be positive, got {v}")
    prev = 1.0
    layers = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, BatchNorm):
            raise GraphError("fuse batchnorm before normalizing", i)
        if isinstance(layer, (Conv2d, Dense)):
            slot = slots[i]
            lam = output_lambda if slot is None else lambdas[slot]
            w = np.asarray(layer.params["weight"], dtype=np.float64) * (prev / lam)
            b = np.asarray(layer.params["bias"], dtype=np.float64) / lam
            if isinstance(layer, Conv2d):
                layers.append(SpikingLayer("conv", w, b, layer.kernel, layer.stride, layer.padding))
            else:
                layers.append(SpikingLayer("dense", w, b))
            prev = lam
        elif isinstance(layer, AvgPool2d):
            layers.append(SpikingLayer("avgpool", kernel=layer.kernel, stride=layer.stride))
        elif isinstance(layer, Flatten):
            layers.append(SpikingLayer("flatten"))
        elif isinstance(layer, (ReLU, Clip)):
            continue
        else:
            raise GraphError(f"cannot convert layer type {layer.kind!r}", i)
    return SpikingNetwork(layers, model.input_shape, lambdas, float(output_lambda), strategy)


def denormalize_weights(net: SpikingNetwork):
    """Undo the normalization scaling; returns (weight, bias) per spiking layer."""
    out = []
    prev = 1.0
    factors = list(net.lambdas) + [net.output_lambda]
    for layer, lam in zip(net.spiking_layers, factors):
        out.append((layer.weight * (lam / prev), layer.bias * lam))
        prev = lam
    return out


def convert(model: ModelGraph, strategy: NormFactorStrategy, calib=None,
            stats: ActivationStats | None = None) -> SpikingNetwork:
    """Fuse, pick norm factors and normalize. ``model`` is left untouched."""
    from .fusion import fuse_model

    fused = fuse_model(model)
    lams = collect_norm_factors(fused, strategy, calib, stats)
    out_lam = output_norm_factor(fused, lams, calib, strategy)
    return normalize(fused, lams, out_lam, strategy.name)


# ---------------------------------------------------------------------------
# rate model
# ---------------------------------------------------------------------------


def estimate_rate(a, a_limit, T):
    """Spike rate a T-step rate code gives activation ``a`` with ceiling ``a_limit``.

    ``floor(a / delta) / T`` with ``delta = a_limit / T`` below the ceiling, 1.0 above.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    a = np.asarray(a, dtype=np.float64)
    rate = np.where(a > a_limit, 1.0, np.floor(a * T / a_limit) / T)
    return float(rate) if rate.ndim == 0 else rate


@dataclass
class LayerError:
    """Rate-model error of one hidden layer, in activation units."""

    mean_error: float
    max_error: float
    mean_quant_error: float
    max_quant_error: float
    mean_clip_error: float
    clipped_fraction: float


def predict_conversion_error(model, lambdas, calib=None, T=100, stats=None):
    """Per-layer ``|a - lam * estimate_rate(a, lam, T)|`` over positive calibration activations.

    Quantization error is measured on ``a <= lam``; clipping error on ``a > lam``.
    """
    if stats is None:
        if calib is None:
            raise ConversionError("conversion-error prediction needs calibration data")
        stats = collect_activation_stats(model, calib)
    if len(lambdas) != len(stats.samples):
        raise ConversionError(f"{len(lambdas)} norm factors for {len(stats.samples)} layers")
    out = []
    for a, lam in zip(stats.samples, lambdas):
        if a.size == 0:
            out.append(LayerError(0.0, 0.0, 0.0, 0.0, 0.0, 0.0))
            continue
        err = np.abs(a - lam * estimate_rate(a, lam, T))
        under = a <= lam
        q = err[under]
        c = err[~under]
        out.append(LayerError(
            float(err.mean()), float(err.max()),
            float(q.mean()) if q.size else 0.0, float(q.max()) if q.size else 0.0,
            float(c.mean()) if c.size else 0.0, float((~under).mean())))
    return out
