import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hashforest.arena import (
    FRAME,
    MAX_PAYLOAD,
    RECLAIMED_LIST,
    TAG_CONTINUATION,
    TAG_DIRECTORY,
    Arena,
    ArenaError,
    ArenaFull,
    BlockImage,
    CorruptionError,
    block_size,
    decode_vector,
    encode_vector,
    free_list_offset,
)
from hashforest.vectors import SparseVector

from conftest import random_vectors
from oracles import arena_fuzz


@pytest.fixture
def arena():
    return Arena(1 << 20, n_roots=4)


def test_block_size_matches_ceiling_oracle():
    for p in range(0, MAX_PAYLOAD + 1):
        assert block_size(p) == math.ceil((p + FRAME) / 16) * 16
    assert block_size(10) == 32


def test_free_list_offsets():
    assert free_list_offset(16) == RECLAIMED_LIST
    assert free_list_offset(32) == RECLAIMED_LIST + 8
    assert free_list_offset(4096) == RECLAIMED_LIST + 255 * 8


def test_allocation_alignment_and_header(arena):
    a = arena.store(b"x" * 10)
    assert a % 16 == 0 and a >= arena.header_size
    assert arena.buf[:4] == b"PFOA"
    assert arena.read_block(a).size == 32


def test_reuse_after_reclaim(arena):
    a = arena.store(b"a" * 10)
    arena.store(b"b" * 10)
    arena.reclaim(a)
    assert arena.free_head(32) == a
    assert arena.u64(RECLAIMED_LIST + 8) == a
    assert arena.store(b"c" * 12) == a


def test_continuation_round_trip(arena):
    payload = bytes(np.random.default_rng(0).integers(0, 256, 5000, dtype=np.uint8))
    a = arena.store(payload)
    chain = arena.chain(a)
    assert len(chain) == 2
    assert arena.frame(chain[1][0])[0] == TAG_CONTINUATION
    assert arena.read_block(a).payload == payload


def test_read_rejects_bad_addresses(arena):
    a = arena.store(b"abc")
    with pytest.raises(CorruptionError):
        arena.read_block(0)
    with pytest.raises(CorruptionError):
        arena.read_block(a + 8)
    with pytest.raises(CorruptionError):
        arena.read_block(arena.frontier + 16)


def test_double_reclaim_detected(arena):
    a = arena.store(b"abc")
    arena.reclaim(a)
    with pytest.raises(CorruptionError):
        arena.reclaim(a)


def test_reclaim_of_continuation_rejected(arena):
    a = arena.store(bytes(6000))
    with pytest.raises(CorruptionError):
        arena.reclaim(arena.chain(a)[1][0])


def test_update_protocol(arena):
    old = arena.store(b"v1" * 20)
    old_size = arena.read_block(old).size
    new = arena.store(b"v2" * 30)
    arena.reclaim(old)
    assert arena.read_block(new).payload == b"v2" * 30
    assert old in arena.free_list(old_size)
    assert arena.used_bytes == arena.frontier - arena.free_bytes


def test_arena_full_rolls_back():
    arena = Arena(64 << 10)
    with pytest.raises(ArenaFull):
        while True:
            arena.store(bytes(3000))
    used, frontier = arena.used_bytes, arena.frontier
    with pytest.raises(ArenaFull):
        arena.store(bytes(20000))
    assert arena.used_bytes == frontier - arena.free_bytes
    assert arena.frontier == frontier and arena.used_bytes <= used


def test_sealed_arena_rejects_writes(arena):
    arena.sealed = True
    with pytest.raises(ArenaError):
        arena.allocate(10)


def test_write_length_checked(arena):
    a = arena.allocate(10)
    with pytest.raises(ArenaError):
        arena.write(a, b"x" * 11)


def test_roots(arena):
    d = arena.store(bytes(64), TAG_DIRECTORY)
    arena.set_root(3, d)
    assert arena.root(3) == d
    with pytest.raises(IndexError):
        arena.set_root(4, d)


def test_image_is_readable(arena):
    a = arena.store(b"hello")
    img = BlockImage(arena.image())
    assert img.read_block(a).payload == b"hello"


class TestVectorCodec:
    def test_sizes(self):
        assert len(encode_vector(SparseVector(1, 3, [2], [1.0]))) == 20
        assert len(encode_vector(SparseVector(1, 3, [], []))) == 8

    def test_layout_big_endian(self):
        raw = encode_vector(SparseVector(1, 3, [2], [1.0]))
        assert raw == bytes.fromhex("00000003" "00000001" "00000002" "3ff0000000000000")

    def test_truncated(self):
        raw = encode_vector(SparseVector(1, 3, [2], [1.0]))
        for cut in (0, 4, 12, 19):
            with pytest.raises(CorruptionError):
                decode_vector(raw[:cut])

    def test_bulk_round_trip(self):
        rng = np.random.default_rng(0)
        for v in random_vectors(10_000, 8, seed=5):
            mask = rng.random(8) < 0.5
            sparse = SparseVector(v.id, 8, v.indices[mask], v.values[mask])
            assert decode_vector(encode_vector(sparse), sparse.id) == sparse

    @given(st.dictionaries(st.integers(0, 999), st.floats(allow_nan=False, allow_infinity=False).filter(bool)))
    def test_property_round_trip(self, entries):
        idx = sorted(entries)
        v = SparseVector(9, 1000, idx, [entries[i] for i in idx])
        assert decode_vector(encode_vector(v), 9) == v


def test_fuzz_short():
    counts = arena_fuzz(20_000, seed=3, capacity=1 << 20)
    assert counts["reclaim"] > 0 and counts["full"] > 0
