"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"HAPKCKPT"
    version      u16
    n_desc       u32       number of descriptors that follow
    descriptors  n_desc x (u32 length, UTF-8 JSON)   header first, then one per layer
    n_tensors    u32
    tensors      n_tensors x (u8 ndim, ndim x u32 dim, raw <f8 values)
    crc32        u32       over every preceding byte

The header descriptor carries the loss kind and, when set, the input shape.  Hybrid
(implanted) conv layers use their own ``hybrid_conv`` tag.
"""

import json
import struct
import zlib

import numpy as np

from .errors import CheckpointError, CheckpointVersionError, SpecError
from .models import ModelInstance, ModelSpec, layer_from_dict, layer_to_dict

MAGIC = b"HAPKCKPT"
VERSION = 1


def _pack_json(obj):
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save(model):
    spec = model.spec
    header = {"loss": spec.loss}
    if spec.input_shape is not None:
        header["input_shape"] = list(spec.input_shape)
    chunks = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", 1 + len(spec.layers))]
    chunks.append(_pack_json(header))
    chunks.extend(_pack_json(layer_to_dict(layer)) for layer in spec.layers)
    chunks.append(struct.pack("<I", len(model.params)))
    for p in model.params:
        chunks.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load(payload):
    buf = bytes(payload)
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a hapkit checkpoint (bad magic)")
    (version,) = r.unpack("<H", "format version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}; this build reads {VERSION}")
    if len(buf) < r.pos + 4:
        raise CheckpointError("truncated checkpoint: missing body")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated payload)")
    r.buf = body
    try:
        (n_desc,) = r.unpack("<I", "descriptor count")
        descs = []
        for i in range(n_desc):
            (n,) = r.unpack("<I", f"descriptor {i} length")
            descs.append(json.loads(r.take(n, f"descriptor {i}").decode("utf-8")))
        header, layers = descs[0], [layer_from_dict(d) for d in descs[1:]]
        spec = ModelSpec(tuple(layers), header["loss"], header.get("input_shape"))
        (n_tensors,) = r.unpack("<I", "tensor count")
        params = []
        for i in range(n_tensors):
            (ndim,) = r.unpack("<B", f"tensor {i} rank")
            shape = r.unpack(f"<{ndim}I", f"tensor {i} shape")
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(r.take(8 * count, f"tensor {i} data"), dtype="<f8")
            params.append(data.astype(np.float64).reshape(shape))
    except (ValueError, KeyError, IndexError, SpecError) as exc:
        raise CheckpointError(f"corrupt checkpoint payload: {exc}") from exc
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after last tensor")
    try:
        return ModelInstance(spec, tuple(params))
    except ValueError as exc:
        raise CheckpointError(f"checkpoint tensors do not match its spec: {exc}") from exc


def save_file(model, path):
    with open(path, "wb") as fh:
        fh.write(save(model))


def load_file(path):
    with open(path, "rb") as fh:
        return load(fh.read())
