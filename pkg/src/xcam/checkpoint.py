"""Model persistence: a magic string, a JSON header describing the layers,
then raw little-endian float64 parameter blocks in declaration order
(weight before bias, layers in graph order)."""

from __future__ import annotations

import json
import struct

import numpy as np

from .graph import LayerSpec, ModelGraph

MAGIC = b"XCAMCKPT1\n"


class CheckpointError(ValueError):
    pass


def save_model(graph, path):
    header = {
        "input_shape": list(graph.input_shape),
        "num_classes": graph.num_classes,
        "designated_activation_layer": graph.designated_activation_layer,
        "layers": [
            {
                "kind": s.kind,
                "stride": s.stride,
                "pad": s.pad,
                "k": s.k,
                "weight_shape": None if s.weight is None else list(s.weight.shape),
                "bias_shape": None if s.bias is None else list(s.bias.shape),
            }
            for s in graph.layers
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for s in graph.layers:
            if s.weight is not None:
                f.write(np.ascontiguousarray(s.weight, dtype="<f8").tobytes())
            if s.bias is not None:
                f.write(np.ascontiguousarray(s.bias, dtype="<f8").tobytes())


def load_model(path):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: unsupported magic (not a model checkpoint)")
    off = len(MAGIC)
    if len(data) < off + 8:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) < off + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: malformed header: {err}") from err
    off += hlen
    layers = []
    for entry in header["layers"]:
        weight = bias = None
        if entry["weight_shape"] is not None:
            shape = tuple(entry["weight_shape"])
            n = int(np.prod(shape)) * 8
            if len(data) < off + n:
                raise CheckpointError(f"{path}: truncated weight block")
            weight = np.frombuffer(data, dtype="<f8", count=int(np.prod(shape)), offset=off)
            weight = weight.reshape(shape).astype(np.float64)
            off += n
        if entry["bias_shape"] is not None:
            shape = tuple(entry["bias_shape"])
            n = int(np.prod(shape)) * 8
            if len(data) < off + n:
                raise CheckpointError(f"{path}: truncated bias block")
            bias = np.frombuffer(data, dtype="<f8", count=int(np.prod(shape)), offset=off)
            bias = bias.reshape(shape).astype(np.float64)
            off += n
        layers.append(
            LayerSpec(
                kind=entry["kind"],
                stride=entry["stride"],
                pad=entry["pad"],
                k=entry["k"],
                weight=weight,
                bias=bias,
            )
        )
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes after parameter blocks")
    return ModelGraph(
        layers=layers,
        input_shape=tuple(header["input_shape"]),
        num_classes=header["num_classes"],
        designated_activation_layer=header["designated_activation_layer"],
    )
