"""Clock-driven integrate-and-fire simulation with reset by subtraction.

All layers advance together each step: layer ``l`` integrates the spikes
layer ``l-1`` emitted in the same step. The first layer sees the analog
input image every step. The output class is the neuron with the most spikes,
ties going to the lowest index.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .converter import SpikingNetwork


@dataclass
class SimConfig:
    T: int = 100
    record_rates: bool = True
    input_coding: str = "real"
    checkpoints: tuple = ()  # extra step counts at which predictions are read out
    dtype: type = np.float32
    batch_size: int = 500

    def __post_init__(self):
        if int(self.T) < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.input_coding != "real":
            raise ValueError("only real (analog) input coding is supported")
        if any(int(t) < 1 for t in self.checkpoints):
            raise ValueError("checkpoints must be >= 1")

    @property
    def steps(self):
        """All read-out times in increasing order, ``T`` included."""
        return sorted({int(self.T), *(int(t) for t in self.checkpoints)})


def if_step(v, z, v_thr=1.0):
    """Integrate ``z`` into potential ``v``; fire where it reaches ``v_thr`` and subtract.

    Works on numpy arrays and on plain scalars (including ``fractions.Fraction``).
    Returns ``(spike, v_new)``.
    """
    v = v + z
    fired = v >= v_thr
    if isinstance(fired, np.ndarray):
        spike = fired.astype(np.result_type(v))
        return spike, v - v_thr * spike
    return (1, v - v_thr) if fired else (0, v)


@dataclass
class NeuronState:
    """Membrane potentials and cumulative spike counts, one entry per spiking layer."""

    v: list
    counts: list

    @classmethod
    def zeros(cls, net: SpikingNetwork, batch, dtype=np.float32):
        shapes = _spiking_shapes(net)
        return cls([np.zeros((batch,) + s, dtype=dtype) for s in shapes],
                   [np.zeros((batch,) + s, dtype=np.int32) for s in shapes])


@dataclass
class RateRecord:
    """Per-layer spike counts over ``T`` steps (arrays of shape (N, *neurons))."""

    T: int
    counts: list

    @property
    def rates(self):
        return [c / self.T for c in self.counts]

    def mean_rates(self):
        return [float(c.mean()) / self.T for c in self.counts]


@dataclass
class SnnEval:
    accuracy: float
    accuracies: dict  # T -> accuracy at every read-out time
    layer_rates: dict  # T -> list of mean per-layer rates
    n: int = 0
    elapsed: dict = field(default_factory=dict)  # T -> seconds spent simulating up to T

    def mean_rate(self, T=None):
        rates = self.layer_rates[max(self.layer_rates) if T is None else T]
        return float(np.mean(rates)) if rates else 0.0


def _spiking_shapes(net):
    probe = np.zeros((1,) + tuple(net.input_shape))
    shapes = []
    for layer in net.cast(np.float64).layers:
        probe = layer.current(probe)
        if layer.spiking:
            shapes.append(probe.shape[1:])
    return shapes


def _fire(v, z, v_thr):
    v += z
    fired = v >= v_thr
    spikes = fired.astype(v.dtype)
    v -= v_thr * spikes
    return fired, spikes


def layer_step(layer, inp, v):
    """Advance one layer by one step.

    Spiking layers integrate ``W*inp + b`` into ``v`` (updated in place) and
    return their binary spikes; pooling returns the window mean of its input
    and flatten reshapes, neither holding state.
    """
    z = layer.current(inp)
    if not layer.spiking:
        return z
    return _fire(v, z, layer.v_thr)[1]


def _static_prefix(net):
    """Index of the first spiking layer; its input current is constant under real coding."""
    for i, layer in enumerate(net.layers):
        if layer.spiking:
            return i
    raise ValueError("network has no spiking layers")


def run(net: SpikingNetwork, x, cfg: SimConfig, elapsed=None):
    """Simulate a batch ``x`` (N, *input_shape).

    Returns ``(predictions, spike_totals, state)`` where ``predictions`` maps
    every read-out time to an (N,) class array and ``spike_totals`` maps it to
    the per-layer total spike counts at that time. If ``elapsed`` is a dict it
    receives the seconds taken to reach each read-out time.
    """
    start = time.perf_counter()
    x = np.asarray(x, dtype=cfg.dtype)
    net = net.cast(np.dtype(cfg.dtype))
    if x.shape[1:] != tuple(net.input_shape):
        raise ValueError(f"sample shape {x.shape[1:]} != network input {tuple(net.input_shape)}")
    steps = cfg.steps
    state = NeuronState.zeros(net, len(x), cfg.dtype)
    first = _static_prefix(net)
    inp = x
    for layer in net.layers[:first]:
        inp = layer.current(inp)
    z0 = net.layers[first].current(inp)
    preds, totals = {}, {}
    for t in range(1, steps[-1] + 1):
        k = 0
        for i in range(first, len(net.layers)):
            layer = net.layers[i]
            if not layer.spiking:
                out = layer.current(out)
                continue
            z = z0 if i == first else layer.current(out)
            fired, out = _fire(state.v[k], z, layer.v_thr)
            state.counts[k] += fired
            k += 1
        if t in steps:
            preds[t] = np.argmax(state.counts[-1].reshape(len(x), -1), axis=1)
            totals[t] = [int(c.sum(dtype=np.int64)) for c in state.counts]
            if elapsed is not None:
                elapsed[t] = time.perf_counter() - start
    return preds, totals, state


def simulate(net: SpikingNetwork, sample, cfg: SimConfig):
    """Classify one sample (or a batch) by output spike count after ``cfg.T`` steps.

    Returns ``(predicted_class, RateRecord)``; for a batch the prediction is an array.
    """
    sample = np.asarray(sample)
    single = sample.ndim == len(net.input_shape)
    x = sample[None] if single else sample
    preds, _, state = run(net, x, cfg)
    pred = preds[int(cfg.T)]
    record = RateRecord(int(cfg.T), [c.copy() for c in state.counts] if cfg.record_rates else [])
    return (int(pred[0]) if single else pred), record


def evaluate_snn(net: SpikingNetwork, dataset, cfg: SimConfig) -> SnnEval:
    """Accuracy at ``cfg.T`` (and each checkpoint) plus mean per-layer spike rates."""
    steps = cfg.steps
    correct = {t: 0 for t in steps}
    spikes = {t: None for t in steps}
    neurons = [int(np.prod(s)) for s in _spiking_shapes(net)]
    n = len(dataset)
    net = net.cast(np.dtype(cfg.dtype))
    wall = {t: 0.0 for t in steps}
    for s in range(0, n, cfg.batch_size):
        x = dataset.images[s:s + cfg.batch_size]
        y = dataset.labels[s:s + cfg.batch_size]
        batch_wall = {}
        preds, totals, _ = run(net, x, cfg, batch_wall)
        for t in steps:
            wall[t] += batch_wall[t]
            correct[t] += int((preds[t] == y).sum())
            tot = np.asarray(totals[t], dtype=np.int64)
            spikes[t] = tot if spikes[t] is None else spikes[t] + tot
    acc = {t: correct[t] / max(n, 1) for t in steps}
    rates = {t: [float(c) / (t * max(n, 1) * m) for c, m in zip(spikes[t], neurons)]
             if spikes[t] is not None else [] for t in steps}
    return SnnEval(acc[int(cfg.T)], acc, rates, n, wall)
