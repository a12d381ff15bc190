"""Binary weights container (``.adnw``).

Layout, all integers little-endian::

    magic        4 bytes   b"ADNW"
    version      u32       1
    flags        u8        bit 0 set: training checkpoint (Adam state present)
    fp_len       u32       byte length of the fingerprint
    fingerprint  fp_len    UTF-8 model-config fingerprint
    step         u64       Adam step counter (0 unless checkpoint)
    count        u32       number of tensor records
    records      count x:
        name_len u32, name (UTF-8),
        dtype    u8        0 = binary32, 1 = binary64
        rank     u32
        extents  rank x u64
        payload  product(extents) x dtype width bytes, row-major
    crc32        u32       zlib CRC-32 of every preceding byte

Record names are namespaced: ``param/`` for trainable tensors, ``stat/`` for
running statistics, ``adam.m/`` and ``adam.v/`` for optimizer moments.
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, FormatError, StorageError
from .graph import ParamStore

MAGIC = b"ADNW"
VERSION = 1
FLAG_CHECKPOINT = 0x01
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    code = _CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"tensor {name}: unsupported dtype {arr.dtype}")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BI", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def dumps(store: ParamStore, fingerprint: str, checkpoint: bool = False, step: int = 0) -> bytes:
    records = []
    for name, p in store.items():
        records.append((("param/" if p.trainable else "stat/") + name, p.value))
    if checkpoint:
        for name, p in store.items():
            if p.trainable:
                records.append(("adam.m/" + name, p.m))
                records.append(("adam.v/" + name, p.v))
    buf = io.BytesIO()
    fp = fingerprint.encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<IBI", VERSION, FLAG_CHECKPOINT if checkpoint else 0, len(fp)))
    buf.write(fp)
    buf.write(struct.pack("<QI", step if checkpoint else 0, len(records)))
    for name, arr in records:
        _record(buf, name, arr)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save(
    store: ParamStore,
    fingerprint: str,
    path: str | os.PathLike,
    checkpoint: bool = False,
    step: int = 0,
) -> None:
    """Write ``store`` to ``path`` via a temporary file and an atomic rename."""
    path = Path(path)
    data = dumps(store, fingerprint, checkpoint, step)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"{path}: cannot write weights ({exc.strerror})") from None


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("weights file ends inside a record")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def loads(data: bytes) -> tuple[ParamStore, str, int, bool]:
    """Parse a container; returns ``(store, fingerprint, step, is_checkpoint)``."""
    if len(data) < 4 + 4 + 1 + 4 + 8 + 4 + 4:
        raise FormatError("weights file too short (truncated?)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("weights checksum mismatch (file corrupt or truncated)")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic, not an ADNW weights file")
    version, flags, fp_len = r.unpack("IBI")
    if version != VERSION:
        raise FormatError(f"unsupported weights version {version}")
    fingerprint = r.take(fp_len).decode("utf-8")
    step, count = r.unpack("QI")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("I")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("BI")
        if code not in _DTYPES:
            raise FormatError(f"tensor {name}: unknown dtype code {code}")
        shape = r.unpack(f"{rank}Q")
        dt = _DTYPES[code]
        payload = r.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise FormatError("trailing bytes after the last record")

    store = ParamStore()
    for key, arr in tensors.items():
        space, _, name = key.partition("/")
        if space in ("param", "stat"):
            store.add(name, arr, trainable=space == "param")
        elif space not in ("adam.m", "adam.v"):
            raise FormatError(f"unknown record namespace in {key!r}")
    for key, arr in tensors.items():
        space, _, name = key.partition("/")
        if space in ("adam.m", "adam.v"):
            entry = store.entry(name)
            if arr.shape != entry.value.shape:
                raise FormatError(f"optimizer slot {key} has shape {arr.shape}")
            setattr(entry, space[-1], arr)
    return store, fingerprint, int(step), bool(flags & FLAG_CHECKPOINT)


def load(
    path: str | os.PathLike, expected_fingerprint: str | None = None
) -> tuple[ParamStore, str, int]:
    """Read ``path``; returns ``(store, fingerprint, adam_step)``.

    Raises ``CompatibilityError`` when ``expected_fingerprint`` is given and
    differs from the stored one.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"{path}: cannot read weights ({exc.strerror})") from None
    try:
        store, fingerprint, step, _ = loads(data)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise CompatibilityError(
            f"{path}: weights were saved for model {fingerprint}, not {expected_fingerprint}"
        )
    return store, fingerprint, step
