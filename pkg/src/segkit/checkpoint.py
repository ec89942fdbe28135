"""Deterministic ``.mck`` checkpoints.

Layout (all integers little-endian)::

    b"MCK1"  u16 version
    repeated until end of stream, one record per parameter tensor:
        u16 name_len | name (UTF-8) | u8 dtype | u8 ndim | u32 dims[ndim] | data

dtype 0 is float32, the only code written; scalars are stored float32
regardless of compute precision. Records follow graph order and, within a
layer, parameter name, so equal networks give equal bytes.
"""
import struct

import numpy as np

from segkit.arch import build
from segkit.errors import (
    BadMagicError,
    ShapeMismatchError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from segkit.nn import Module

MAGIC = b"MCK1"
VERSION = 1
HEADER_SIZE = 6
_DTYPES = {0: np.dtype("<f4")}


def record_header_size(name, ndim):
    return 2 + len(name.encode("utf-8")) + 1 + 1 + 4 * ndim


def _entries(net):
    return [(name, p.data) for name, p in net.named_parameters()]


def save(net):
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    for name, data in _entries(net):
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", 0, data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += np.ascontiguousarray(data, dtype="<f4").tobytes()
    return bytes(out)


def parse(buf):
    """Decode a stream into an ordered list of (name, float32 array)."""
    buf = memoryview(bytes(buf))
    if len(buf) < HEADER_SIZE:
        if bytes(buf[:len(MAGIC)]) != MAGIC[:len(buf)]:
            raise BadMagicError("not an .mck stream")
        raise TruncatedCheckpointError("stream shorter than the header")
    if bytes(buf[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported .mck version {version}")
    pos = HEADER_SIZE
    entries = []

    def need(nbytes):
        if pos + nbytes > len(buf):
            raise TruncatedCheckpointError(
                f"record {len(entries)} truncated at byte {pos} (needs {nbytes} more)")

    while pos < len(buf):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 2)
        name = bytes(buf[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in _DTYPES:
            raise UnsupportedVersionError(f"unknown dtype code {code} for {name!r}")
        need(4 * ndim)
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes)
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
        entries.append((name, arr.reshape(dims).astype(np.float32)))
        pos += nbytes
    return entries


def load_into(net, buf):
    """Copy checkpoint values into an existing network after validating
    names and shapes record by record."""
    entries = parse(buf)
    targets = list(net.named_parameters())
    if len(entries) != len(targets):
        raise ShapeMismatchError(
            f"checkpoint has {len(entries)} tensors, network has {len(targets)}")
    for (name, arr), (tname, p) in zip(entries, targets):
        if name != tname or arr.shape != p.data.shape:
            raise ShapeMismatchError(
                f"checkpoint tensor {name!r}{arr.shape} vs network {tname!r}{p.data.shape}")
    for (_, arr), (_, p) in zip(entries, targets):
        p.data[...] = arr
    return net


def load(buf, spec, dtype=np.float32):
    return load_into(build(spec, dtype=dtype), buf)


def payload_size(spec_or_net):
    """Exact byte length of ``save`` for this network, computed from shapes."""
    net = spec_or_net if isinstance(spec_or_net, Module) else build(spec_or_net)
    total = HEADER_SIZE
    for name, data in _entries(net):
        total += record_header_size(name, data.ndim) + 4 * data.size
    return total


def save_file(path, net):
    data = save(net)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_file(path, spec, dtype=np.float32):
    with open(path, "rb") as fh:
        return load(fh.read(), spec, dtype)
