"""Binary model files.

Layout: one format-version byte, a 4-byte little-endian header length, a
compact JSON header (sorted keys), then the array payload.  The header lists
every array with its dtype, shape and byte offset into the payload; reals are
little-endian float32, converted index arrays unsigned 8-bit.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .models import NetworkSpec, build_network
from .reparam import ReparamBlock, ReparamLayer, ReparamNetwork

FORMAT_VERSION = 1
MAGIC = "lookupnet"
_DTYPES = {"f4": np.dtype("<f4"), "u1": np.dtype("u1"), "u2": np.dtype("<u2")}


class CheckpointError(ValueError):
    pass


def _storage_code(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f4"
    if arr.dtype.kind in "ui" and arr.size and (arr.min() < 0 or arr.max() > 65535):
        raise CheckpointError(f"integer array out of storable range: {arr.dtype}")
    if arr.dtype.kind in "uib":
        return "u1" if (arr.size == 0 or arr.max() <= 255) and arr.dtype.itemsize == 1 else "u2"
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def encode(header: dict, arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _storage_code(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {**header, "arrays": entries, "format": MAGIC}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return bytes([FORMAT_VERSION]) + struct.pack("<I", len(blob)) + blob + b"".join(chunks)


def decode(raw: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if len(raw) < 5:
        raise CheckpointError("file too short for a header")
    if raw[0] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {raw[0]}")
    (hlen,) = struct.unpack("<I", raw[1:5])
    if 5 + hlen > len(raw):
        raise CheckpointError("header length exceeds file size")
    header = json.loads(raw[5:5 + hlen])
    if header.get("format") != MAGIC:
        raise CheckpointError("not a lookupnet model file")
    payload = memoryview(raw)[5 + hlen:]
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in header["arrays"]:
        dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"array {entry['name']} runs past the end of the payload")
        arrays[entry["name"]] = np.frombuffer(payload[start:end], dtype=dtype).reshape(entry["shape"]).copy()
    return header, arrays


def atomic_write(path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_file(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training checkpoints

def _layer_table(net) -> list[dict]:
    from .layer import LookupConv2d
    from .nn import BatchNorm2d, Conv2d, Linear
    rows = []
    for name, m in net.named_modules():
        if isinstance(m, LookupConv2d):
            rows.append({"name": name, "kind": "lookup", "shape": list(m.weight.shape), "n_f": m.n_f,
                         "n_w": m.n_w, "stride": m.stride, "padding": m.padding, "dilation": m.dilation})
        elif isinstance(m, Conv2d):
            rows.append({"name": name, "kind": "conv", "shape": list(m.weight.shape), "stride": m.stride,
                         "padding": m.padding, "dilation": m.dilation})
        elif isinstance(m, BatchNorm2d):
            rows.append({"name": name, "kind": "batchnorm", "shape": [m.channels]})
        elif isinstance(m, Linear):
            rows.append({"name": name, "kind": "linear", "shape": list(m.weight.shape)})
    return rows


def training_bytes(net, step: int = 0, input_shape=None, extra: dict | None = None) -> bytes:
    header = {"kind": "training", "network": net.spec.to_dict(), "step": int(step),
              "input_shape": list(input_shape) if input_shape is not None else None,
              "layers": _layer_table(net), "extra": extra or {}}
    return encode(header, net.state_dict())


def save_checkpoint(path, net, step: int = 0, input_shape=None, extra: dict | None = None) -> None:
    atomic_write(path, training_bytes(net, step, input_shape, extra))


def network_from_header(header: dict):
    shape = header.get("input_shape")
    return build_network(NetworkSpec(**header["network"]), input_shape=tuple(shape) if shape else None)


def load_checkpoint(path):
    """(network, header) from a training checkpoint."""
    header, arrays = read_file(path)
    if header.get("kind") != "training":
        raise CheckpointError(f"{path}: expected a training checkpoint, found {header.get('kind')!r}")
    net = network_from_header(header)
    net.load_state_dict(arrays)
    return net, header


# ---------------------------------------------------------------------------
# converted networks

def _layer_meta(layer: ReparamLayer) -> dict:
    return {"name": layer.name, "stride": layer.stride, "padding": layer.padding, "dilation": layer.dilation,
            "activation": layer.activation, "clip_max": layer.clip_max, "fused": list(layer.fused)}


def _layer_arrays(layer: ReparamLayer, arrays) -> None:
    arrays[f"{layer.name}.idx_w"] = layer.idx_w
    arrays[f"{layer.name}.tables"] = layer.tables
    arrays[f"{layer.name}.bias"] = layer.bias


def converted_bytes(rnet: ReparamNetwork) -> bytes:
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for key in ("weight", "bias", "gamma", "beta", "running_mean", "running_var"):
        arrays[f"stem.{key}"] = rnet.stem[key]
    body = []
    for item in rnet.body:
        if isinstance(item, ReparamBlock):
            body.append({"type": "block", "name": item.name, "stride": item.stride,
                         "out_channels": item.out_channels, "conv1": _layer_meta(item.conv1),
                         "conv2": _layer_meta(item.conv2)})
            _layer_arrays(item.conv1, arrays)
            _layer_arrays(item.conv2, arrays)
        else:
            body.append({"type": "layer", "pool": bool(item["pool"]), **_layer_meta(item["layer"])})
            _layer_arrays(item["layer"], arrays)
    arrays["head.weight"] = rnet.head["weight"]
    arrays["head.bias"] = rnet.head["bias"]
    header = {"kind": "converted", "network": rnet.spec, "family": rnet.family, "boundary": rnet.boundary,
              "stem": {"padding": rnet.stem["padding"], "eps": rnet.stem["eps"]},
              "head": {"pool": rnet.head["pool"]}, "body": body}
    return encode(header, arrays)


def save_converted(path, rnet: ReparamNetwork) -> None:
    atomic_write(path, converted_bytes(rnet))


def _layer_from(meta: dict, arrays) -> ReparamLayer:
    name = meta["name"]
    return ReparamLayer(name=name, idx_w=arrays[f"{name}.idx_w"], tables=arrays[f"{name}.tables"],
                        bias=arrays[f"{name}.bias"], stride=meta["stride"], padding=meta["padding"],
                        dilation=meta["dilation"], post_scale=None, activation=meta["activation"],
                        clip_max=meta["clip_max"], fused=list(meta["fused"]))


def load_converted(path) -> ReparamNetwork:
    header, arrays = read_file(path)
    if header.get("kind") != "converted":
        raise CheckpointError(f"{path}: expected a converted model, found {header.get('kind')!r}")
    stem = {k: arrays[f"stem.{k}"] for k in ("weight", "bias", "gamma", "beta", "running_mean", "running_var")}
    stem.update(header["stem"])
    body = []
    for item in header["body"]:
        if item["type"] == "block":
            body.append(ReparamBlock(item["name"], _layer_from(item["conv1"], arrays),
                                     _layer_from(item["conv2"], arrays), item["stride"], item["out_channels"]))
        else:
            body.append({"layer": _layer_from(item, arrays), "pool": item["pool"]})
    head = {"weight": arrays["head.weight"], "bias": arrays["head.bias"], "pool": header["head"]["pool"]}
    return ReparamNetwork(stem, header["boundary"], body, head, header["family"], header["network"])


def load_any(path):
    """Training checkpoint -> (network, header); converted file -> (ReparamNetwork, header)."""
    header, _ = read_file(path)
    if header.get("kind") == "converted":
        return load_converted(path), header
    return load_checkpoint(path)


__all__ = [
    "FORMAT_VERSION",
    "CheckpointError",
    "atomic_write",
    "converted_bytes",
    "decode",
    "encode",
    "load_any",
    "load_checkpoint",
    "load_converted",
    "read_file",
    "save_checkpoint",
    "save_converted",
    "training_bytes",
]
