"""Named network layouts and the layer-descriptor parser shared with model files."""

from __future__ import annotations

import numpy as np

from .tcl import LAMBDA_INIT, Clip
from .tensor import (AvgPool2d, BatchNorm, Conv2d, Dense, Flatten, GraphError,
                     ModelGraph, ReLU, ShapeError)


class SpecError(ValueError):
    """Malformed architecture descriptor; the message starts with the field path."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


_FIELDS = {
    "conv": {"out_channels": True, "kernel": False, "stride": False, "padding": False,
             "in_channels": False},
    "dense": {"out_features": True, "in_features": False},
    "avgpool": {"kernel": False, "stride": False},
    "batchnorm": {"eps": False, "momentum": False, "channels": False},
    "relu": {},
    "clip": {"lambda": False},
    "flatten": {},
}


def _int_field(spec, key, path, default=None, minimum=1):
    value = spec.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise SpecError(f"{path}.{key}", f"expected integer, got {value!r}")
    if value < minimum:
        raise SpecError(f"{path}.{key}", f"must be >= {minimum}, got {value}")
    return value


def layers_from_spec(specs, input_shape, seed=0, dtype=np.float32, lambda_init=LAMBDA_INIT):
    """Build a ``ModelGraph`` from a list of layer descriptor dicts.

    Input extents (``in_channels``, ``in_features``, BN ``channels``) may be
    omitted; they are inferred from the running shape and checked if given.
    """
    if not isinstance(specs, (list, tuple)) or not specs:
        raise SpecError("layers", "expected a non-empty list of layer descriptors")
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers = []
    for i, spec in enumerate(specs):
        path = f"layers[{i}]"
        if not isinstance(spec, dict):
            raise SpecError(path, f"expected a mapping, got {type(spec).__name__}")
        kind = spec.get("type")
        if kind not in _FIELDS:
            raise SpecError(f"{path}.type", f"unknown layer type {kind!r}")
        for key in spec:
            if key != "type" and key not in _FIELDS[kind]:
                raise SpecError(f"{path}.{key}", "unexpected field")
        for key, required in _FIELDS[kind].items():
            if required and key not in spec:
                raise SpecError(f"{path}.{key}", "missing required field")

        if kind == "conv":
            if len(shape) != 3:
                raise SpecError(path, f"conv needs a (C, H, W) input, running shape is {shape}")
            cin = _int_field(spec, "in_channels", path, shape[0])
            if cin != shape[0]:
                raise SpecError(f"{path}.in_channels", f"declared {cin}, running shape has {shape[0]}")
            layer = Conv2d(cin, _int_field(spec, "out_channels", path),
                           _int_field(spec, "kernel", path, 3),
                           _int_field(spec, "stride", path, 1),
                           _int_field(spec, "padding", path, 0, minimum=0), rng=rng, dtype=dtype)
        elif kind == "dense":
            if len(shape) != 1:
                raise SpecError(path, f"dense needs a flat input, running shape is {shape}")
            fin = _int_field(spec, "in_features", path, shape[0])
            if fin != shape[0]:
                raise SpecError(f"{path}.in_features", f"declared {fin}, running shape has {shape[0]}")
            layer = Dense(fin, _int_field(spec, "out_features", path), rng=rng, dtype=dtype)
        elif kind == "avgpool":
            kernel = _int_field(spec, "kernel", path, 2)
            layer = AvgPool2d(kernel, _int_field(spec, "stride", path, kernel))
        elif kind == "batchnorm":
            channels = _int_field(spec, "channels", path, shape[0])
            eps = float(spec.get("eps", 1e-5))
            if not eps > 0:
                raise SpecError(f"{path}.eps", f"must be positive, got {eps}")
            layer = BatchNorm(channels, eps=eps, momentum=float(spec.get("momentum", 0.1)),
                              dtype=dtype)
        elif kind == "relu":
            layer = ReLU()
        elif kind == "clip":
            lam = spec.get("lambda", lambda_init)
            if isinstance(lam, bool) or not isinstance(lam, (int, float)) or not lam > 0:
                raise SpecError(f"{path}.lambda", f"must be a positive number, got {lam!r}")
            layer = Clip(float(lam))
        else:
            layer = Flatten()
        try:
            shape = tuple(layer.output_shape(shape))
        except ShapeError as exc:
            raise SpecError(path, str(exc)) from None
        layers.append(layer)
    try:
        return ModelGraph(layers, input_shape)
    except GraphError as exc:
        raise SpecError("layers", str(exc)) from None


def cnet_spec(num_classes=10, widths=(8, 16, 16, 32), hidden=64, tcl=True, pools=(0, 2)):
    """Four 3x3 convolutions with BN, then two dense layers.

    Average pooling follows the convolutions whose index is in ``pools``.
    Every hidden layer ends in ReLU and, when ``tcl`` is set, a clip layer.
    """
    if len(widths) != 4:
        raise SpecError("widths", f"cnet needs 4 conv widths, got {len(widths)}")
    act = [{"type": "relu"}] + ([{"type": "clip"}] if tcl else [])
    specs = []
    for i, width in enumerate(widths):
        specs += [{"type": "conv", "out_channels": width, "kernel": 3, "padding": 1},
                  {"type": "batchnorm"}, *act]
        if i in pools:
            specs.append({"type": "avgpool", "kernel": 2})
    specs += [{"type": "flatten"}, {"type": "dense", "out_features": hidden}, *act,
              {"type": "dense", "out_features": num_classes}]
    return specs


def mlp_spec(sizes, tcl=True):
    if len(sizes) < 2:
        raise SpecError("sizes", "mlp needs at least input and output sizes")
    act = [{"type": "relu"}] + ([{"type": "clip"}] if tcl else [])
    specs = [{"type": "flatten"}]
    for i, size in enumerate(sizes[1:]):
        specs.append({"type": "dense", "out_features": int(size)})
        if i < len(sizes) - 2:
            specs += act
    return specs


def build_architecture(name, input_shape=(1, 28, 28), num_classes=10, seed=42,
                       lambda_init=LAMBDA_INIT, tcl=True, dtype=np.float32, **options):
    """Build ``cnet``, ``mlp`` / ``mlp-784-100-10``, or a custom descriptor list.

    ``name`` may also be a list of layer descriptor dicts.
    """
    if isinstance(name, (list, tuple)):
        specs = list(name)
    elif name == "cnet":
        specs = cnet_spec(num_classes, tcl=tcl, **options)
    elif name == "mlp" or (isinstance(name, str) and name.startswith("mlp-")):
        if name == "mlp":
            sizes = options.get("sizes", (int(np.prod(input_shape)), 100, num_classes))
        else:
            try:
                sizes = [int(s) for s in name[4:].split("-")]
            except ValueError:
                raise SpecError("name", f"bad mlp size list in {name!r}") from None
        if sizes[0] != int(np.prod(input_shape)):
            raise SpecError("name", f"mlp input size {sizes[0]} != flattened input {int(np.prod(input_shape))}")
        specs = mlp_spec(sizes, tcl=tcl)
    else:
        raise SpecError("name", f"unknown architecture {name!r}")
    return layers_from_spec(specs, input_shape, seed=seed, dtype=dtype, lambda_init=lambda_init)
