"""Binary tensor files.

Layout, all little-endian::

    b"TOFT" | u16 version | u16 kind | u32 ndim | u32 dims[ndim]
    | u32 ext_len | ext_len bytes of UTF-8 JSON | float32 data, row-major

The JSON extension carries the metadata needed to rebuild the typed object
(bin width, channel list, LUT edges, ...). It may be empty (ext_len = 0).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .core import CameraFunction, ConfigError, DepthMap, ToFError
from .motion import FlowField, KernelMap
from .simulate import NoiseLUT, RawFrames
from .transient import SceneResponse

MAGIC = b"TOFT"
VERSION = 1

SCENE_RESPONSE, RAW_FRAMES, NOISE_LUT, FLOW_FIELD, KERNEL_MAP, DEPTH_MAP, MASK = range(1, 8)
KIND_NAMES = {
    SCENE_RESPONSE: "SceneResponse", RAW_FRAMES: "RawFrames", NOISE_LUT: "NoiseLUT",
    FLOW_FIELD: "FlowField", KERNEL_MAP: "KernelMap", DEPTH_MAP: "DepthMap", MASK: "Mask",
}


class FormatError(ToFError, IOError):
    pass


def encode(kind: int, array, ext: dict | None = None) -> bytes:
    if kind not in KIND_NAMES:
        raise ConfigError(f"unknown tensor kind {kind}")
    a = np.ascontiguousarray(array, dtype="<f4")
    blob = json.dumps(ext, sort_keys=True).encode() if ext else b""
    head = MAGIC + struct.pack("<HHI", VERSION, kind, a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    head += struct.pack("<I", len(blob)) + blob
    return head + a.tobytes()


def decode(buf: bytes):
    """Returns (kind, float32 array, ext dict)."""
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError("not a TOFT tensor file")
    version, kind, ndim = struct.unpack_from("<HHI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported TOFT version {version}")
    if kind not in KIND_NAMES:
        raise FormatError(f"unknown tensor kind {kind}")
    pos = 12
    try:
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        (ext_len,) = struct.unpack_from("<I", buf, pos)
    except struct.error:
        raise FormatError("truncated TOFT header") from None
    pos += 4
    ext = json.loads(buf[pos:pos + ext_len]) if ext_len else {}
    pos += ext_len
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - pos != 4 * count:
        raise FormatError("TOFT payload size does not match its dims")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return kind, data.astype(np.float32), ext


def write_bytes_atomic(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_tensor(obj):
    """(kind, array, ext) for a typed object."""
    if isinstance(obj, SceneResponse):
        return SCENE_RESPONSE, obj.data, {"bin_width": obj.bin_width, "t0": obj.t0}
    if isinstance(obj, RawFrames):
        return RAW_FRAMES, obj.data, {"channels": [cf.to_dict() for cf in obj.channels]}
    if isinstance(obj, NoiseLUT):
        return NOISE_LUT, np.concatenate(obj.tables), {
            "edges": obj.edges.tolist(),
            "counts": [int(t.size) for t in obj.tables],
            "source_counts": np.asarray(obj.source_counts).astype(int).tolist()}
    if isinstance(obj, FlowField):
        return FLOW_FIELD, obj.data, {"reference": int(obj.reference)}
    if isinstance(obj, KernelMap):
        return KERNEL_MAP, obj.data, {"kind": obj.kind}
    if isinstance(obj, DepthMap):
        if obj.amplitude is None:
            return DEPTH_MAP, obj.depth, {}
        return DEPTH_MAP, np.stack([obj.depth, obj.amplitude]), {"amplitude": True}
    a = np.asarray(obj)
    if a.dtype == bool:
        return MASK, a.astype(np.float32), {}
    raise ConfigError(f"cannot serialise {type(obj).__name__}")


def from_tensor(kind, data, ext):
    data = np.asarray(data, dtype=float)
    if kind == SCENE_RESPONSE:
        return SceneResponse(data, ext.get("bin_width", 5e-11), ext.get("t0", 0.0))
    if kind == RAW_FRAMES:
        chans = tuple(CameraFunction.from_dict(c) for c in ext["channels"])
        return RawFrames(data, chans)
    if kind == NOISE_LUT:
        tables = np.split(data, np.cumsum(ext["counts"])[:-1])
        return NoiseLUT(ext["edges"], tables, np.array(ext.get("source_counts", ext["counts"])))
    if kind == FLOW_FIELD:
        return FlowField(data, ext["reference"])
    if kind == KERNEL_MAP:
        return KernelMap(ext["kind"], data)
    if kind == DEPTH_MAP:
        if ext.get("amplitude"):
            return DepthMap(data[0], data[1])
        return DepthMap(data)
    return data != 0


def save(obj, path):
    write_bytes_atomic(path, encode(*to_tensor(obj)))


def load(path, expect=None):
    """Read a tensor file back into its typed object.

    ``expect`` optionally names the required kind (e.g. ``RAW_FRAMES``).
    """
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None
    kind, data, ext = decode(buf)
    if expect is not None and kind != expect:
        raise FormatError(f"{path} holds {KIND_NAMES[kind]}, expected {KIND_NAMES[expect]}")
    return from_tensor(kind, data, ext)
