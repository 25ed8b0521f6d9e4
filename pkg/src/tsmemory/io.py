"""Binary containers for the forecast cache, teacher dataset and checkpoints.

All three share the layout ``magic (4 bytes) | version u16 | body`` with every
integer and float little-endian. Bodies:

TSMC  fingerprint[32] | count u64 | Q,H,C u32 | levels f64[Q] |
      count x (anchor i64 | f64[Q*H*C])
TSMT  L,H,C,Q u32 | levels f64[Q] | config_len u32 | config JSON |
      count u64 | count x (anchor i64 | context f64[L*C] | future f64[H*C] |
      quantiles f64[Q*H*C] | conf f64)
TSMP  config_len u32 | config JSON | n u64 | params f64[n]
"""

from __future__ import annotations

import json
import struct

import numpy as np

VERSION = 1
F8 = np.dtype("<f8")


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def f8(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype=F8).astype(np.float64)


def _header(magic: bytes) -> bytes:
    return magic + struct.pack("<H", VERSION)


def _open(buf: bytes, magic: bytes) -> _Reader:
    r = _Reader(buf)
    got = r.take(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (ver,) = r.unpack("H")
    if ver != VERSION:
        raise FormatError(f"unsupported version {ver}")
    return r


def _json_block(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode()
    return struct.pack("<I", len(raw)) + raw


def _read_json(r: _Reader):
    (n,) = r.unpack("I")
    return json.loads(r.take(n).decode())


# forecast cache

def write_cache(cache, path) -> None:
    anchors = sorted(cache.entries)
    if anchors:
        Q, H, C = cache.entries[anchors[0]].shape
    else:
        Q, H, C = (cache.levels.Q if cache.levels else 0), 0, 0
    levels = np.asarray(cache.levels.levels if cache.levels else [], dtype=F8)
    parts = [_header(b"TSMC"), bytes(cache.fingerprint).ljust(32, b"\0")[:32],
             struct.pack("<Q", len(anchors)), struct.pack("<III", Q, H, C), levels.tobytes()]
    for a in anchors:
        parts.append(struct.pack("<q", a))
        parts.append(np.ascontiguousarray(cache.entries[a], dtype=F8).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_cache(path):
    from .backbone import ForecastCache
    from .series import QuantileLevels

    with open(path, "rb") as fh:
        r = _open(fh.read(), b"TSMC")
    fp = r.take(32)
    (count,) = r.unpack("Q")
    Q, H, C = r.unpack("III")
    levels = QuantileLevels(tuple(r.f8(Q))) if Q else None
    entries = {}
    for _ in range(count):
        (a,) = r.unpack("q")
        entries[a] = r.f8(Q * H * C).reshape(Q, H, C)
    return ForecastCache(fp, entries, levels)


# teacher dataset

def write_teacher(records, levels, path, config: dict | None = None) -> None:
    if records:
        L, C = records[0].context.shape
        H = records[0].future.shape[0]
    else:
        L = H = C = 0
    Q = levels.Q
    parts = [_header(b"TSMT"), struct.pack("<IIII", L, H, C, Q),
             np.asarray(levels.levels, dtype=F8).tobytes(), _json_block(config or {}),
             struct.pack("<Q", len(records))]
    for rec in records:
        parts.append(struct.pack("<q", rec.anchor))
        for arr in (rec.context, rec.future, rec.quantiles):
            parts.append(np.ascontiguousarray(arr, dtype=F8).tobytes())
        parts.append(struct.pack("<d", rec.conf))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_teacher(path):
    from .series import QuantileLevels
    from .teacher import TeacherRecord

    with open(path, "rb") as fh:
        r = _open(fh.read(), b"TSMT")
    L, H, C, Q = r.unpack("IIII")
    levels = QuantileLevels(tuple(r.f8(Q)))
    config = _read_json(r)
    (count,) = r.unpack("Q")
    records = []
    for _ in range(count):
        (a,) = r.unpack("q")
        ctx = r.f8(L * C).reshape(L, C)
        fut = r.f8(H * C).reshape(H, C)
        qt = r.f8(Q * H * C).reshape(Q, H, C)
        (conf,) = r.unpack("d")
        records.append(TeacherRecord(a, ctx, fut, qt, conf))
    return records, levels, config


# parameter checkpoint

def write_params(flat: np.ndarray, config: dict, path) -> None:
    flat = np.ascontiguousarray(flat, dtype=F8)
    with open(path, "wb") as fh:
        fh.write(_header(b"TSMP") + _json_block(config) + struct.pack("<Q", flat.size) + flat.tobytes())


def read_params(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        r = _open(fh.read(), b"TSMP")
    config = _read_json(r)
    (n,) = r.unpack("Q")
    return r.f8(n), config
