"""Binary MPS files and a double-buffered site loader.

The byte layout is documented in ``docs/file_format.md``. All scalars are
little-endian; site payloads are contiguous and appear in site order, each
site tensor followed by its float64 coefficient vector.
"""

from __future__ import annotations

import os
import queue
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .mps import MpsState
from .tensor_core import STORAGE_PRECISIONS, Precision

__all__ = [
    "MAGIC",
    "VERSION",
    "MpsFileError",
    "CorruptFileError",
    "MpsFileHeader",
    "SiteEntry",
    "save_mps",
    "load_mps",
    "read_header",
    "stream_sites",
    "SiteStream",
    "encode_gamma",
    "decode_gamma",
    "convert_mps",
]

MAGIC = b"MPSBATCH"
VERSION = 1

_PREFIX = struct.Struct("<8sIIII")  # magic, version, M, d, header size
_ENTRY = struct.Struct("<B3xIQQQ")  # tag, crc32, gamma offset, gamma bytes, lambda offset
_CRC = struct.Struct("<I")

_TAGS = {Precision.F64: 0, Precision.F32: 1, Precision.F16: 2}
_TAG_NAMES = {v: k for k, v in _TAGS.items()}
_BYTES_PER_COMPLEX = {Precision.F64: 16, Precision.F32: 8, Precision.F16: 4}


class MpsFileError(IOError):
    """Malformed or unreadable MPS file."""


class CorruptFileError(MpsFileError):
    """Payload checksum mismatch."""

    def __init__(self, site: int, path: str | os.PathLike):
        super().__init__(f"checksum mismatch in site {site} of {path}")
        self.site = site


@dataclass(frozen=True)
class SiteEntry:
    storage: Precision
    crc32: int
    gamma_offset: int
    gamma_nbytes: int
    lambda_offset: int
    lambda_nbytes: int


@dataclass(frozen=True)
class MpsFileHeader:
    version: int
    M: int
    d: int
    bond_dims: tuple[int, ...]
    sites: tuple[SiteEntry, ...]
    header_size: int

    @property
    def gamma_payload_bytes(self) -> int:
        return sum(s.gamma_nbytes for s in self.sites)

    def gamma_shape(self, i: int) -> tuple[int, int, int]:
        return (self.bond_dims[i], self.bond_dims[i + 1], self.d)


def encode_gamma(gamma: np.ndarray, storage: Precision | str) -> np.ndarray:
    """Storage representation of a site tensor (what travels over disk and links)."""
    storage = Precision.parse(storage)
    if storage is Precision.F64:
        return np.ascontiguousarray(gamma, dtype="<c16")
    if storage is Precision.F32:
        return np.ascontiguousarray(gamma, dtype="<c8")
    if storage is Precision.F16:
        with np.errstate(over="ignore"):
            return np.ascontiguousarray(np.stack([gamma.real, gamma.imag], axis=-1).astype("<f2"))
    raise ValueError(f"unsupported storage precision {storage.value}")


def decode_gamma(raw: np.ndarray, storage: Precision | str) -> np.ndarray:
    storage = Precision.parse(storage)
    if storage is Precision.F16:
        wide = raw.astype(np.float64)
        return wide[..., 0] + 1j * wide[..., 1]
    return raw.astype(np.complex128)


def _header_size(M: int) -> int:
    return _PREFIX.size + 4 * (M + 1) + _ENTRY.size * M + _CRC.size


def save_mps(state: MpsState, path: str | os.PathLike, storage: Precision | str = Precision.F64) -> MpsFileHeader:
    """Write ``state`` with site tensors at ``storage`` precision; coefficients stay float64."""
    storage = Precision.parse(storage)
    if storage not in STORAGE_PRECISIONS:
        raise ValueError(f"unsupported storage precision {storage.value}")
    state.validate()
    M, d = state.M, state.d
    dims = state.bond_dims
    size = _header_size(M)
    offset = size
    entries = []
    payloads = []
    for i, gamma, lam in state.iter_sites():
        graw = encode_gamma(gamma, storage).tobytes()
        lraw = np.ascontiguousarray(lam, dtype="<f8").tobytes()
        crc = zlib.crc32(lraw, zlib.crc32(graw))
        entries.append(SiteEntry(storage, crc, offset, len(graw), offset + len(graw), len(lraw)))
        payloads.append(graw + lraw)
        offset += len(graw) + len(lraw)
    head = bytearray(_PREFIX.pack(MAGIC, VERSION, M, d, size))
    head += struct.pack(f"<{M + 1}I", *dims)
    for e in entries:
        head += _ENTRY.pack(_TAGS[e.storage], e.crc32, e.gamma_offset, e.gamma_nbytes, e.lambda_offset)
    head += _CRC.pack(zlib.crc32(bytes(head)))
    with open(path, "wb") as fh:
        fh.write(head)
        for p in payloads:
            fh.write(p)
    return MpsFileHeader(VERSION, M, d, tuple(dims), tuple(entries), size)


def _parse_header(fh, path) -> MpsFileHeader:
    prefix = fh.read(_PREFIX.size)
    if len(prefix) != _PREFIX.size:
        raise MpsFileError(f"{path}: file too short for a header")
    magic, version, M, d, size = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise MpsFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MpsFileError(f"{path}: unsupported version {version}")
    if size != _header_size(M):
        raise MpsFileError(f"{path}: header size {size} inconsistent with M={M}")
    rest = fh.read(size - _PREFIX.size)
    if len(rest) != size - _PREFIX.size:
        raise MpsFileError(f"{path}: truncated header")
    body = prefix + rest[: -_CRC.size]
    (crc,) = _CRC.unpack(rest[-_CRC.size :])
    if zlib.crc32(body) != crc:
        raise MpsFileError(f"{path}: header checksum mismatch")
    dims = struct.unpack_from(f"<{M + 1}I", rest, 0)
    pos = 4 * (M + 1)
    entries = []
    last = size - 1
    for i in range(M):
        tag, ecrc, goff, gbytes, loff = _ENTRY.unpack_from(rest, pos)
        pos += _ENTRY.size
        if tag not in _TAG_NAMES:
            raise MpsFileError(f"{path}: site {i} has unknown precision tag {tag}")
        storage = _TAG_NAMES[tag]
        expected = dims[i] * dims[i + 1] * d * _BYTES_PER_COMPLEX[storage]
        if gbytes != expected:
            raise MpsFileError(f"{path}: site {i} payload is {gbytes} bytes, expected {expected}")
        if not (last < goff < loff):
            raise MpsFileError(f"{path}: site {i} offsets are not strictly increasing")
        lbytes = 8 * dims[i + 1]
        last = loff + lbytes - 1
        entries.append(SiteEntry(storage, ecrc, goff, gbytes, loff, lbytes))
    return MpsFileHeader(version, M, d, tuple(dims), tuple(entries), size)


def read_header(path: str | os.PathLike) -> MpsFileHeader:
    with open(path, "rb") as fh:
        return _parse_header(fh, path)


def _read_site(fh, header: MpsFileHeader, i: int, path) -> tuple[np.ndarray, np.ndarray]:
    e = header.sites[i]
    fh.seek(e.gamma_offset)
    graw = fh.read(e.gamma_nbytes)
    fh.seek(e.lambda_offset)
    lraw = fh.read(e.lambda_nbytes)
    if len(graw) != e.gamma_nbytes or len(lraw) != e.lambda_nbytes:
        raise MpsFileError(f"{path}: site {i} payload truncated")
    if zlib.crc32(lraw, zlib.crc32(graw)) != e.crc32:
        raise CorruptFileError(i, path)
    shape = header.gamma_shape(i)
    if e.storage is Precision.F64:
        raw = np.frombuffer(graw, dtype="<c16").reshape(shape)
    elif e.storage is Precision.F32:
        raw = np.frombuffer(graw, dtype="<c8").reshape(shape)
    else:
        raw = np.frombuffer(graw, dtype="<f2").reshape(shape + (2,))
    lam = np.frombuffer(lraw, dtype="<f8").astype(np.float64)
    return raw, lam


class SiteStream:
    """Iterate over the sites of a file with one site prefetched in the background.

    At most ``buffers`` (default 2) site tensors from this loader are resident
    at any time: the one handed to the consumer and the one being prefetched.
    A tensor counts as released once the consumer asks for the next site.
    ``read_delay`` adds a sleep per site read, for timing experiments.
    With ``raw=True`` the stream yields ``(i, encoded_gamma, lam, storage)``
    instead of decoded complex128 tensors.
    """

    def __init__(self, path: str | os.PathLike, *, raw: bool = False, read_delay: float = 0.0, buffers: int = 2):
        if buffers < 1:
            raise ValueError("buffers must be at least 1")
        self.path = Path(path)
        self.header = read_header(self.path)
        self.raw = raw
        self.read_delay = read_delay
        self.buffers = buffers
        self.max_resident = 0
        self.max_resident_bytes = 0
        self.read_seconds = 0.0
        self._lock = threading.Lock()
        self._resident = 0
        self._resident_bytes = 0

    def __len__(self) -> int:
        return self.header.M

    def _acquire(self, nbytes: int) -> None:
        with self._lock:
            self._resident += 1
            self._resident_bytes += nbytes
            self.max_resident = max(self.max_resident, self._resident)
            self.max_resident_bytes = max(self.max_resident_bytes, self._resident_bytes)

    def _release(self, nbytes: int) -> None:
        with self._lock:
            self._resident -= 1
            self._resident_bytes -= nbytes

    def __iter__(self) -> Iterator[tuple]:
        slots = threading.Semaphore(self.buffers)
        items: queue.Queue = queue.Queue()
        stop = threading.Event()

        def loader():
            try:
                with open(self.path, "rb") as fh:
                    for i in range(self.header.M):
                        while not slots.acquire(timeout=0.05):
                            if stop.is_set():
                                return
                        if stop.is_set():
                            return
                        t0 = time.perf_counter()
                        if self.read_delay:
                            time.sleep(self.read_delay)
                        raw, lam = _read_site(fh, self.header, i, self.path)
                        self.read_seconds += time.perf_counter() - t0
                        self._acquire(raw.nbytes)
                        items.put((i, raw, lam))
            except BaseException as exc:  # handed to the consumer
                items.put(exc)

        thread = threading.Thread(target=loader, name=f"prefetch-{self.path.name}", daemon=True)
        thread.start()
        held = None
        try:
            for _ in range(self.header.M):
                if held is not None:
                    self._release(held)
                    slots.release()
                    held = None
                item = items.get()
                if isinstance(item, BaseException):
                    raise item
                i, raw, lam = item
                held = raw.nbytes
                storage = self.header.sites[i].storage
                if self.raw:
                    yield i, raw, lam, storage
                else:
                    yield i, decode_gamma(raw, storage), lam
        finally:
            stop.set()
            if held is not None:
                self._release(held)
                slots.release()
            thread.join(timeout=5)


def stream_sites(path: str | os.PathLike, **kwargs) -> SiteStream:
    """Iterator of ``(site_index, gamma, lambda)`` with double-buffered prefetch."""
    return SiteStream(path, **kwargs)


def load_mps(path: str | os.PathLike) -> MpsState:
    gammas, lambdas = [], []
    for _, gamma, lam in SiteStream(path):
        gammas.append(gamma)
        lambdas.append(lam)
    return MpsState(gammas, lambdas)


def convert_mps(src: str | os.PathLike, dst: str | os.PathLike, storage: Precision | str) -> MpsFileHeader:
    """Re-encode every site tensor of ``src`` at a new storage precision."""
    return save_mps(load_mps(src), dst, storage)
