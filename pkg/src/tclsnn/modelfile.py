"""Binary model files for trained ANNs and converted spiking networks.

Layout::

    b"TCLMODEL"            8-byte magic
    <u4 format version
    <u8 header length
    header                 UTF-8 JSON, sorted keys, no whitespace
    blobs                  row-major little-endian float64, back to back

The header carries the layer descriptors, a blob table (layer index, name,
shape, offset, length in values), the clip ceilings, the ``snn`` flag and a
provenance mapping. Serialization is canonical, so save -> load -> save
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .architectures import layers_from_spec
from .converter import SpikingLayer, SpikingNetwork
from .tcl import Clip, lambdas as clip_lambdas
from .tensor import BatchNorm

MAGIC = b"TCLMODEL"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<IQ")


class ModelFileError(ValueError):
    pass


def _dumps(header):
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack(header, blobs):
    table, chunks, offset = [], [], 0
    for layer, name, arr in blobs:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"layer": layer, "name": name, "shape": list(arr.shape),
                      "offset": offset, "length": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = dict(header, blobs=table, format_version=FORMAT_VERSION)
    body = _dumps(header)
    return MAGIC + _PREFIX.pack(FORMAT_VERSION, len(body)) + body + b"".join(chunks)


def _unpack(raw, path="<bytes>"):
    if raw[:len(MAGIC)] != MAGIC:
        raise ModelFileError(f"{path}: not a model file (bad magic)")
    start = len(MAGIC) + _PREFIX.size
    if len(raw) < start:
        raise ModelFileError(f"{path}: truncated prefix")
    version, hlen = _PREFIX.unpack(raw[len(MAGIC):start])
    if version != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported format version {version}")
    if len(raw) < start + hlen:
        raise ModelFileError(f"{path}: truncated header")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f8", offset=start + hlen)
    blobs = {}
    for entry in header["blobs"]:
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) != entry["length"]:
            raise ModelFileError(f"{path}: blob {entry['layer']}.{entry['name']} length "
                                 f"{entry['length']} does not match shape {shape}")
        end = entry["offset"] + entry["length"]
        if end > payload.size:
            raise ModelFileError(f"{path}: blob {entry['layer']}.{entry['name']} runs past end of file")
        blobs[(entry["layer"], entry["name"])] = payload[entry["offset"]:end].reshape(shape).copy()
    total = sum(e["length"] for e in header["blobs"])
    if total != payload.size:
        raise ModelFileError(f"{path}: {payload.size} payload values, blob table declares {total}")
    return header, blobs


def model_to_bytes(model, provenance=None):
    if isinstance(model, SpikingNetwork):
        blobs = []
        for i, layer in enumerate(model.layers):
            if layer.weight is not None:
                blobs += [(i, "weight", layer.weight), (i, "bias", layer.bias)]
        header = {"snn": True, "input_shape": list(model.input_shape),
                  "layers": [l.spec() for l in model.layers],
                  "lambdas": [float(v) for v in model.lambdas],
                  "output_lambda": float(model.output_lambda),
                  "strategy": model.strategy, "input_coding": model.input_coding,
                  "dtype": "float64"}
    else:
        blobs = []
        for i, layer in enumerate(model.layers):
            for name, value in layer.params.items():
                blobs.append((i, name, value))
            if isinstance(layer, BatchNorm):
                blobs += [(i, "running_mean", layer.running_mean), (i, "running_var", layer.running_var)]
        header = {"snn": False, "input_shape": list(model.input_shape),
                  "layers": [l.spec() for l in model.layers],
                  "lambdas": clip_lambdas(model), "dtype": np.dtype(model.dtype).name}
    prov = dict(getattr(model, "provenance", {}) or {})
    prov.update(provenance or {})
    header["provenance"] = prov
    return _pack(header, blobs)


def model_from_bytes(raw, path="<bytes>"):
    header, blobs = _unpack(raw, path)
    if header["snn"]:
        layers = []
        for i, spec in enumerate(header["layers"]):
            kind = spec["type"]
            if kind in ("conv", "dense"):
                layers.append(SpikingLayer(kind, blobs[(i, "weight")], blobs[(i, "bias")],
                                           spec.get("kernel", 0), spec.get("stride", 1),
                                           spec.get("padding", 0), spec["v_thr"]))
            elif kind == "avgpool":
                layers.append(SpikingLayer(kind, kernel=spec["kernel"], stride=spec["stride"]))
            else:
                layers.append(SpikingLayer(kind))
        return SpikingNetwork(layers, tuple(header["input_shape"]), header["lambdas"],
                              header["output_lambda"], header["strategy"], header["input_coding"],
                              header["provenance"])
    dtype = np.dtype(header["dtype"])
    graph = layers_from_spec(header["layers"], header["input_shape"], dtype=dtype)
    for i, layer in enumerate(graph.layers):
        for name in list(layer.params):
            layer.params[name] = blobs[(i, name)].astype(dtype)
        if isinstance(layer, BatchNorm):
            layer.running_mean = blobs[(i, "running_mean")].astype(dtype)
            layer.running_var = blobs[(i, "running_var")].astype(dtype)
        layer.zero_grad()
    if [c.lam.value for c in graph.layers if isinstance(c, Clip)] != header["lambdas"]:
        raise ModelFileError(f"{path}: clip ceilings disagree with the layer descriptors")
    graph.provenance = header["provenance"]
    return graph


def save_model(path, model, provenance=None):
    raw = model_to_bytes(model, provenance)
    with open(path, "wb") as f:
        f.write(raw)
    return raw


def load_model(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read(), path)


def read_header(path):
    with open(path, "rb") as f:
        return _unpack(f.read(), path)[0]
