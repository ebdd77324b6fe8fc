"""Binary checkpoint format.

Layout (little endian)::

    b"SGSP"  uint32 version  uint32 precision(4|8)  uint32 feature_dim
    uint32 count  uint32 round
    count records: position[3] log_scale[3] rotation[4] opacity_logit color[3]
                   feature[n] generation(int32) has_anchor(uint8)
                   then, if the cloud carries anchors, the same float fields again
    tagged blocks: 4-byte tag, uint64 length, payload
        b"DEFM"  deformation field (array bundle)
        b"CODC"  feature codec (array bundle)
        b"META"  JSON metadata

An array bundle is a uint32 header length, a JSON header listing
``(name, dtype, shape)`` and the raw array bytes in header order. Nothing
time-dependent is written, so equal inputs produce equal files.
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .codec import FeatureCodec
from .core import PARAM_NAMES, GaussianCloud
from .deformation import DeformationField

MAGIC = b"SGSP"
VERSION = 1
_WIDTHS = {"position": 3, "log_scale": 3, "rotation": 4, "opacity_logit": 1, "color": 3}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    cloud: GaussianCloud
    field: Optional[DeformationField] = None
    codec: Optional[FeatureCodec] = None
    meta: dict = dataclasses.field(default_factory=dict)


def _record_dtype(nf: int, fdt: str, anchors: bool):
    fields = [(name, fdt, (w,)) for name, w in _WIDTHS.items()]
    fields.append(("feature", fdt, (nf,)))
    fields += [("generation", "<i4"), ("has_anchor", "u1")]
    if anchors:
        fields += [("anchor_" + name, fdt, (w,)) for name, w in _WIDTHS.items()]
        fields.append(("anchor_feature", fdt, (nf,)))
    return np.dtype(fields)


def _bundle(arrays: dict) -> bytes:
    header = [[k, np.asarray(v).dtype.str, list(np.shape(v))] for k, v in arrays.items()]
    hb = json.dumps(header).encode()
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for k, v in arrays.items():
        buf.write(np.ascontiguousarray(v).tobytes())
    return buf.getvalue()


def _unbundle(payload: bytes) -> dict:
    (hl,) = struct.unpack_from("<I", payload, 0)
    header = json.loads(payload[4:4 + hl])
    off = 4 + hl
    out = {}
    for name, dt, shape in header:
        dt = np.dtype(dt)
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(payload, dtype=dt, count=n, offset=off).reshape(shape).copy()
        off += n * dt.itemsize
    return out


def _block(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def to_bytes(ckpt: Checkpoint) -> bytes:
    cloud = ckpt.cloud
    precision = 8 if cloud.dtype == np.float64 else 4
    fdt = "<f8" if precision == 8 else "<f4"
    n, nf = len(cloud), cloud.feature_dim
    has_anchor = cloud.anchors is not None
    rec = np.zeros(n, dtype=_record_dtype(nf, fdt, has_anchor))
    for name in PARAM_NAMES:
        rec[name] = getattr(cloud, name).reshape(rec[name].shape)
        if has_anchor:
            rec["anchor_" + name] = cloud.anchors[name].reshape(rec[name].shape)
    rec["generation"] = cloud.generation
    rec["has_anchor"] = 1 if has_anchor else 0
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<5I", VERSION, precision, nf, n, cloud.round))
    out.write(rec.tobytes())
    if ckpt.field is not None:
        f = ckpt.field
        arrays = dict(f.params)
        arrays["_bbox_min"] = f.bbox_min
        arrays["_bbox_max"] = f.bbox_max
        arrays["_shape"] = np.array(list(f.resolution) + [f.channels, f.hidden], dtype="<i8")
        out.write(_block(b"DEFM", _bundle(arrays)))
    if ckpt.codec is not None:
        c = ckpt.codec
        arrays = dict(c.params())
        arrays["_shape"] = np.array([c.input_dim, c.latent_dim] + list(c.hidden), dtype="<i8")
        out.write(_block(b"CODC", _bundle(arrays)))
    out.write(_block(b"META", json.dumps(ckpt.meta, sort_keys=True).encode()))
    return out.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, precision, nf, n, rnd = struct.unpack_from("<5I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fdt = "<f8" if precision == 8 else "<f4"
    off = 24
    # anchors are all-or-nothing; peek at the first record's flag
    plain = _record_dtype(nf, fdt, False)
    has_anchor = n > 0 and data[off + plain.itemsize - 1] == 1
    rdt = _record_dtype(nf, fdt, has_anchor)
    rec = np.frombuffer(data, dtype=rdt, count=n, offset=off)
    off += rdt.itemsize * n
    dtype = np.float64 if precision == 8 else np.float32
    params = {name: rec[name].astype(dtype) for name in PARAM_NAMES}
    params["opacity_logit"] = params["opacity_logit"].reshape(n)
    anchors = None
    if has_anchor:
        anchors = {name: rec["anchor_" + name].reshape(params[name].shape).astype(dtype) for name in PARAM_NAMES}
    cloud = GaussianCloud(**params, generation=rec["generation"].astype(np.int64), round=rnd, dtype=dtype)
    # the constructor renormalizes rotations; keep the stored values exactly
    cloud.rotation = params["rotation"]
    cloud.anchors = anchors
    ckpt = Checkpoint(cloud)
    while off < len(data):
        tag = data[off:off + 4]
        (length,) = struct.unpack_from("<Q", data, off + 4)
        payload = data[off + 12:off + 12 + length]
        off += 12 + length
        if tag == b"DEFM":
            arrays = _unbundle(payload)
            shape = arrays.pop("_shape").tolist()
            f = DeformationField(arrays.pop("_bbox_min"), arrays.pop("_bbox_max"), shape[:4], shape[4], shape[5],
                                 dtype=arrays["grid"].dtype)
            f.params = arrays
            ckpt.field = f
        elif tag == b"CODC":
            arrays = _unbundle(payload)
            shape = arrays.pop("_shape").tolist()
            c = FeatureCodec(shape[0], shape[1], tuple(shape[2:]))
            c.set_params(arrays)
            ckpt.codec = c
        elif tag == b"META":
            ckpt.meta = json.loads(payload)
        else:
            raise CheckpointError(f"unknown block {tag!r}")
    return ckpt


def save(ckpt: Checkpoint, path) -> Path:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(to_bytes(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return from_bytes(path.read_bytes())
