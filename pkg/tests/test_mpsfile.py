import os
import struct
import time

import numpy as np
import pytest

from mpsbatch import random_mps
from mpsbatch.mpsfile import (
    CorruptFileError,
    MpsFileError,
    convert_mps,
    load_mps,
    read_header,
    save_mps,
    stream_sites,
)
from mpsbatch.tensor_core import round_to


@pytest.mark.parametrize("storage", ["F64", "F32", "F16"])
def test_round_trip(tmp_path, small_mps, storage):
    path = tmp_path / "m.mps"
    header = save_mps(small_mps, path, storage)
    back = load_mps(path)
    assert header.bond_dims == tuple(small_mps.bond_dims)
    for a, b in zip(small_mps.gammas, back.gammas):
        np.testing.assert_array_equal(b, round_to(a, storage))
    for a, b in zip(small_mps.lambdas, back.lambdas):
        np.testing.assert_array_equal(a, b)


def test_bytes_are_deterministic(tmp_path, small_mps):
    save_mps(small_mps, tmp_path / "a.mps")
    save_mps(small_mps, tmp_path / "b.mps")
    assert (tmp_path / "a.mps").read_bytes() == (tmp_path / "b.mps").read_bytes()


def test_documented_prefix(tmp_path, small_mps):
    path = tmp_path / "m.mps"
    header = save_mps(small_mps, path, "F16")
    raw = path.read_bytes()
    magic, version, M, d, size = struct.unpack_from("<8sIIII", raw)
    assert (magic, version, M, d) == (b"MPSBATCH", 1, 6, 3)
    assert size == 24 + 4 * 7 + 32 * 6 + 4 == header.header_size
    assert struct.unpack_from("<7I", raw, 24) == (1, 3, 8, 8, 8, 3, 1)
    assert raw[28 + 4 * 6] == 2  # F16 tag of site 0
    assert len(raw) == size + header.gamma_payload_bytes + 8 * sum(small_mps.bond_dims[1:])


def test_f16_halves_payload(tmp_path, small_mps):
    h64 = save_mps(small_mps, tmp_path / "a.mps", "F64")
    h16 = convert_mps(tmp_path / "a.mps", tmp_path / "b.mps", "F16")
    assert h16.gamma_payload_bytes * 4 == h64.gamma_payload_bytes


def test_corrupted_payload_names_site(tmp_path, small_mps):
    path = tmp_path / "m.mps"
    header = save_mps(small_mps, path)
    raw = bytearray(path.read_bytes())
    raw[header.sites[3].gamma_offset + 5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptFileError) as info:
        load_mps(path)
    assert info.value.site == 3


@pytest.mark.parametrize("mutation", ["magic", "truncate", "header_crc"])
def test_bad_headers(tmp_path, small_mps, mutation):
    path = tmp_path / "m.mps"
    save_mps(small_mps, path)
    raw = bytearray(path.read_bytes())
    if mutation == "magic":
        raw[0:8] = b"NOTMPS!!"
    elif mutation == "truncate":
        raw = raw[:30]
    else:
        raw[30] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(MpsFileError):
        read_header(path)


def test_truncated_payload(tmp_path, small_mps):
    path = tmp_path / "m.mps"
    save_mps(small_mps, path)
    path.write_bytes(path.read_bytes()[:-20])
    with pytest.raises(MpsFileError):
        load_mps(path)


def test_stream_memory_ceiling(tmp_path):
    m = random_mps(8, 16, 2, seed=0)
    path = tmp_path / "m.mps"
    header = save_mps(m, path)
    stream = stream_sites(path)
    for _ in stream:
        time.sleep(0.002)
    biggest = max(s.gamma_nbytes for s in header.sites)
    assert stream.max_resident <= 2
    assert stream.max_resident_bytes <= 2 * biggest


def test_prefetch_overlaps_reads_with_compute(tmp_path):
    m = random_mps(10, 4, 2, seed=0)
    path = tmp_path / "m.mps"
    save_mps(m, path)
    delay = 0.03
    t0 = time.perf_counter()
    for _ in stream_sites(path, read_delay=delay):
        time.sleep(delay)
    elapsed = time.perf_counter() - t0
    serial = 2 * delay * 10
    # overlapped total is about (M + 1) * delay; serial would be 2 M delay
    assert elapsed < 0.8 * serial


def test_stream_yields_sites_in_order(small_mps_file, small_mps):
    seen = [(i, g.shape) for i, g, _ in stream_sites(small_mps_file)]
    assert seen == [(i, g.shape) for i, g in enumerate(small_mps.gammas)]


def test_early_exit_releases_loader(small_mps_file):
    stream = stream_sites(small_mps_file)
    for i, _, _ in stream:
        if i == 1:
            break
    assert stream._resident == 0


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        read_header(tmp_path / "absent.mps")
    assert not os.path.exists(tmp_path / "absent.mps")
