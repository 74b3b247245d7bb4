import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tclsnn.architectures import layers_from_spec
from tclsnn.converter import (ActivationStats, ConversionError, NormFactorStrategy,
                              collect_activation_stats, collect_norm_factors, convert,
                              denormalize_weights, estimate_rate, normalize,
                              predict_conversion_error)
from tclsnn.fusion import fuse_model
from tclsnn.tcl import Clip
from tclsnn.tensor import BatchNorm, Dense, GraphError

TCL = NormFactorStrategy("tcl")
MAX = NormFactorStrategy("max")
P999 = NormFactorStrategy("percentile", 0.999)

MLP3 = [{"type": "flatten"},
        {"type": "dense", "out_features": 8}, {"type": "relu"}, {"type": "clip"},
        {"type": "dense", "out_features": 6}, {"type": "relu"}, {"type": "clip"},
        {"type": "dense", "out_features": 5}, {"type": "relu"}, {"type": "clip"},
        {"type": "dense", "out_features": 3}]

CONV = [{"type": "conv", "out_channels": 4, "kernel": 3, "padding": 1}, {"type": "batchnorm"},
        {"type": "relu"}, {"type": "clip"}, {"type": "avgpool", "kernel": 2},
        {"type": "conv", "out_channels": 5, "kernel": 3, "padding": 1}, {"type": "batchnorm"},
        {"type": "relu"}, {"type": "clip"}, {"type": "flatten"},
        {"type": "dense", "out_features": 7}, {"type": "relu"}, {"type": "clip"},
        {"type": "dense", "out_features": 4}]


def identity_probe():
    """Single hidden unit whose activation equals the (non-negative) input."""
    g = layers_from_spec([{"type": "flatten"}, {"type": "dense", "out_features": 1}, {"type": "relu"},
                          {"type": "clip"}, {"type": "dense", "out_features": 2}], (1,),
                         dtype=np.float64)
    g.layers[1].params["weight"][...] = 1.0
    g.layers[1].params["bias"][...] = 0.0
    return g


def randomized_bn(graph, rng):
    for layer in graph.layers:
        if isinstance(layer, BatchNorm):
            c = layer.channels
            layer.params["gamma"] = rng.uniform(0.5, 2, c)
            layer.params["beta"] = rng.uniform(0, 1, c)
            layer.running_mean = rng.standard_normal(c) * 0.3
            layer.running_var = rng.uniform(0.3, 2, c)
    return graph


@pytest.mark.parametrize("text,kind,p,name", [("tcl", "tcl", 1.0, "tcl"), ("max", "max", 1.0, "max"),
                                              ("p99.9", "percentile", 0.999, "p99.9"),
                                              ("percentile:0.99", "percentile", 0.99, "p99")])
def test_strategy_parsing(text, kind, p, name):
    s = NormFactorStrategy.parse(text)
    assert (s.kind, s.name) == (kind, name) and math.isclose(s.p, p)


@pytest.mark.parametrize("text", ["median", "p0", "percentile:1.5"])
def test_bad_strategy_rejected(text):
    with pytest.raises(ValueError):
        NormFactorStrategy.parse(text)


def test_tcl_factors_pass_through():
    g = layers_from_spec(MLP3, (4,))
    for clip, lam in zip([l for l in g.layers if isinstance(l, Clip)], [4.0, 2.5, 1.7]):
        clip.lam.value = lam
    assert collect_norm_factors(g, TCL) == [4.0, 2.5, 1.7]


def test_percentile_sort_and_index():
    calib = (0.001 * np.arange(1, 1001)).reshape(-1, 1)
    g = identity_probe()
    assert collect_norm_factors(g, P999, calib) == [pytest.approx(0.999, abs=1e-15)]
    assert collect_norm_factors(g, MAX, calib) == [pytest.approx(1.0, abs=1e-15)]


def test_percentile_one_equals_max(rng):
    g = fuse_model(randomized_bn(layers_from_spec(CONV, (2, 6, 6), seed=1), rng))
    calib = rng.random((40, 2, 6, 6))
    stats = collect_activation_stats(g, calib, cap=50)  # tiny reservoir drops most values
    assert (collect_norm_factors(g, NormFactorStrategy("percentile", 1.0), stats=stats)
            == collect_norm_factors(g, MAX, stats=stats))


def test_reservoir_keeps_bounded_uniform_sample(rng):
    g = identity_probe()
    calib = rng.random((20000, 1))
    stats = collect_activation_stats(g, calib, cap=2000, max_samples=20000)
    s = stats.samples[0]
    assert len(s) == 2000 and stats.seen[0] == 20000
    assert np.all(np.diff(s) >= 0) and stats.a_max[0] >= s[-1]
    assert abs(np.median(s) - 0.5) < 0.05  # uniform input keeps a uniform reservoir


def test_strategy_preconditions():
    no_clip = layers_from_spec([{"type": "flatten"}, {"type": "dense", "out_features": 3},
                                {"type": "relu"}, {"type": "dense", "out_features": 2}], (4,))
    with pytest.raises(ConversionError):
        collect_norm_factors(no_clip, TCL)
    with pytest.raises(ConversionError):
        collect_norm_factors(no_clip, P999)
    with pytest.raises(ConversionError):
        collect_norm_factors(no_clip, MAX)


def test_normalize_scalar_example():
    g = layers_from_spec([{"type": "dense", "out_features": 1}, {"type": "relu"}, {"type": "clip"},
                          {"type": "dense", "out_features": 1}, {"type": "relu"}, {"type": "clip"},
                          {"type": "dense", "out_features": 1}], (1,), dtype=np.float64)
    second = g.layers[3]
    second.params["weight"][...] = 2.0
    second.params["bias"][...] = 1.0
    net = normalize(g, [2.0, 4.0], output_lambda=4.0)
    assert net.layers[1].weight[0, 0] == 1.0 and net.layers[1].bias[0] == 0.25
    assert all(l.v_thr == 1.0 for l in net.spiking_layers)


def test_unit_factors_leave_weights_unchanged():
    g = layers_from_spec(MLP3, (4,), dtype=np.float64)
    net = normalize(g, [1.0, 1.0, 1.0], output_lambda=1.0)
    dense = [l for l in g.layers if isinstance(l, Dense)]
    for src, dst in zip(dense, net.spiking_layers):
        np.testing.assert_array_equal(src.params["weight"], dst.weight)
        np.testing.assert_array_equal(src.params["bias"], dst.bias)


def test_normalize_rejects_bad_factors():
    g = layers_from_spec(MLP3, (4,), dtype=np.float64)
    with pytest.raises(ConversionError):
        normalize(g, [1.0, 0.0, 1.0])
    with pytest.raises(ConversionError):
        normalize(g, [1.0, 1.0])
    with pytest.raises(GraphError):
        normalize(layers_from_spec(CONV, (2, 6, 6)), [1.0, 1.0, 1.0])


def test_layerwise_rescaling(rng):
    src = randomized_bn(layers_from_spec(CONV, (2, 6, 6), seed=2, dtype=np.float64), rng)
    for clip, lam in zip([l for l in src.layers if isinstance(l, Clip)], [0.9, 1.3, 0.7]):
        clip.lam.value = lam
    fused = fuse_model(src)
    x = rng.random((10, 2, 6, 6))
    # reference: clipped activations of the original ANN
    ref, a = [], x
    for layer in fused.layers:
        a = layer.forward(a, False)
        if isinstance(layer, Clip):
            ref.append(a)
    logits = a
    out_lam = 3.0
    net = normalize(fused, [0.9, 1.3, 0.7], output_lambda=out_lam)
    final, acts = net.analog_forward(x, record=True)
    for got, want, lam in zip(acts, ref, [0.9, 1.3, 0.7]):
        np.testing.assert_allclose(got, want / lam, rtol=0, atol=1e-12)
    np.testing.assert_allclose(final, np.clip(logits, 0, out_lam) / out_lam, atol=1e-12)
    # layer count matches the source minus BN, ReLU and clip layers
    kinds = [l.kind for l in net.layers]
    assert kinds == ["conv", "avgpool", "conv", "flatten", "dense", "dense"]


def test_denormalize_round_trip(rng):
    g = layers_from_spec(MLP3, (4,), seed=5, dtype=np.float64)
    lams = list(rng.uniform(0.1, 10, 3))
    net = normalize(g, lams, output_lambda=float(rng.uniform(0.1, 10)))
    dense = [l for l in g.layers if isinstance(l, Dense)]
    for src, (w, b) in zip(dense, denormalize_weights(net)):
        np.testing.assert_allclose(w, src.params["weight"], rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(b, src.params["bias"], rtol=1e-12, atol=1e-12)


def test_convert_preserves_source_and_uses_clip_values(rng):
    src = randomized_bn(layers_from_spec(CONV, (2, 6, 6), seed=3), rng)
    net = convert(src, TCL, rng.random((30, 2, 6, 6)))
    assert net.lambdas == [4.0, 4.0, 4.0]
    assert net.output_lambda > 0 and net.strategy == "tcl"
    assert any(isinstance(l, BatchNorm) for l in src.layers)


@pytest.mark.parametrize("a,limit,T,expected", [(0.35, 1.0, 10, 0.3), (1.5, 1.0, 7, 1.0),
                                                (1.5, 1.0, 1000, 1.0), (0.0, 1.0, 10, 0.0)])
def test_estimate_rate_examples(a, limit, T, expected):
    assert estimate_rate(a, limit, T) == expected


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0.01, 5), st.integers(1, 2000))
def test_estimate_rate_monotone_and_bounded(a, b, limit, T):
    lo, hi = sorted((a, b))
    assert estimate_rate(lo, limit, T) <= estimate_rate(hi, limit, T)
    r = estimate_rate(lo, limit, T)
    assert 0.0 <= r <= 1.0
    if lo <= limit:
        assert abs(lo / limit - r) <= 1.0 / T + 1e-12


def _uniform_stats(a_max=2.0, n=100000, seed=0):
    a = np.sort(np.random.default_rng(seed).uniform(0, a_max, n))
    return ActivationStats([a], [float(a[-1])], [n])


def test_quantization_bound_without_clipping():
    stats = _uniform_stats()
    a_max = stats.a_max[0]
    err = predict_conversion_error(None, [a_max], T=10000, stats=stats)[0]
    assert err.max_error <= a_max / 10000
    assert err.clipped_fraction == 0.0


def test_half_ceiling_clips():
    stats = _uniform_stats()
    lam = stats.a_max[0] / 2
    err = predict_conversion_error(None, [lam], T=100, stats=stats)[0]
    assert err.mean_clip_error > 0
    a = stats.samples[0]
    np.testing.assert_array_less(0, (a - lam)[a > lam])


def test_doubling_T_halves_quantization_error(rng):
    src = layers_from_spec(MLP3, (4,), seed=6, dtype=np.float64)
    stats = collect_activation_stats(src, rng.random((3000, 4)))
    lams = [float(s[-1]) for s in stats.samples]
    for T in (50, 100, 200):
        e1 = predict_conversion_error(src, lams, T=T, stats=stats)
        e2 = predict_conversion_error(src, lams, T=2 * T, stats=stats)
        for a, b in zip(e1, e2):
            assert abs(a.mean_quant_error / b.mean_quant_error - 2.0) <= 0.2
