"""Partition-local byte arena with 16-byte blocks and size-class free lists.

Layout of the header (all integers big-endian)::

    0    magic  b"PFOA"
    4    version           u16
    6    root count        u16
    8    capacity          u64
    16   frontier          u64
    24   used bytes        u64
    32   free-listed bytes u64
    64   RECLAIMED_LIST    256 x u64 free-list heads
    2112 root table        n_roots x u64

Every block starts with 18 bytes of framing: tag (u8), size class (u8),
payload length (u64) and the address of the next chunk (u64). A block of
size class ``c`` occupies ``16 * (c + 1)`` bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .vectors import SparseVector

MAGIC = b"PFOA"
VERSION = 1

GRANULE = 16
FRAME = 18
N_SIZE_CLASSES = 256
MAX_BLOCK = GRANULE * N_SIZE_CLASSES
MAX_PAYLOAD = MAX_BLOCK - FRAME

RECLAIMED_LIST = 64
ROOT_TABLE = RECLAIMED_LIST + 8 * N_SIZE_CLASSES

TAG_LEAF = 0
TAG_DIRECTORY = 1
TAG_CONTINUATION = 2
TAG_FREE = 0xFF

_OFF_FRONTIER = 16
_OFF_USED = 24
_OFF_FREE = 32

_U64 = struct.Struct(">Q")
_FRAME = struct.Struct(">BBQQ")
_INITIAL_BYTES = 1 << 16


class ArenaError(Exception):
    """Base class for arena failures."""


class ArenaFull(ArenaError):
    """No reusable block and the frontier would pass the capacity."""


class CorruptionError(ArenaError):
    """An address or block does not decode to a valid live structure."""


def header_size(n_roots: int) -> int:
    end = ROOT_TABLE + 8 * n_roots
    return -(-end // GRANULE) * GRANULE


def block_size(payload_size: int) -> int:
    """Physical size of a single block carrying ``payload_size`` bytes."""
    return -(-(payload_size + FRAME) // GRANULE) * GRANULE


def free_list_offset(size: int) -> int:
    """Header offset of the free-list head for blocks of ``size`` bytes."""
    return RECLAIMED_LIST + (size - GRANULE) // 2


@dataclass(frozen=True)
class ArenaBlock:
    addr: int
    tag: int
    size_class: int
    payload: bytes
    next_chunk: int

    @property
    def size(self) -> int:
        return GRANULE * (self.size_class + 1)


class BlockImage:
    """Read-only view of an arena image (a live buffer or a sealed file)."""

    def __init__(self, buf) -> None:
        if bytes(buf[:4]) != MAGIC:
            raise CorruptionError("bad arena magic")
        self.buf = buf
        self.n_roots = struct.unpack_from(">H", buf, 6)[0]
        self.header_size = header_size(self.n_roots)

    def u64(self, off: int) -> int:
        return _U64.unpack_from(self.buf, off)[0]

    @property
    def capacity(self) -> int:
        return self.u64(8)

    @property
    def frontier(self) -> int:
        return self.u64(_OFF_FRONTIER)

    @property
    def used_bytes(self) -> int:
        return self.u64(_OFF_USED)

    @property
    def free_bytes(self) -> int:
        return self.u64(_OFF_FREE)

    def root(self, i: int) -> int:
        return self.u64(ROOT_TABLE + 8 * i)

    def free_head(self, size: int) -> int:
        return self.u64(free_list_offset(size))

    def check_addr(self, addr: int) -> None:
        if addr % GRANULE or not self.header_size <= addr < self.frontier:
            raise CorruptionError(f"invalid block address {addr}")

    def frame(self, addr: int) -> tuple[int, int, int, int]:
        """``(tag, size_class, payload_len, next_chunk)`` of the block at ``addr``."""
        self.check_addr(addr)
        tag, sc, plen, nxt = _FRAME.unpack_from(self.buf, addr)
        if tag == TAG_FREE:
            raise CorruptionError(f"block {addr} is on a free list")
        if tag > TAG_CONTINUATION or plen > GRANULE * (sc + 1) - FRAME:
            raise CorruptionError(f"undecodable block frame at {addr}")
        return tag, sc, plen, nxt

    def read_block(self, addr: int) -> ArenaBlock:
        tag, sc, plen, nxt = self.frame(addr)
        if tag == TAG_CONTINUATION:
            raise CorruptionError(f"{addr} is a continuation block, not a block head")
        parts = [bytes(self.buf[addr + FRAME : addr + FRAME + plen])]
        seen = {addr}
        cur = nxt
        while cur:
            if cur in seen:
                raise CorruptionError(f"cycle in block chain at {cur}")
            seen.add(cur)
            ctag, _, cplen, cnext = self.frame(cur)
            if ctag != TAG_CONTINUATION:
                raise CorruptionError(f"chain of {addr} reaches non-continuation {cur}")
            parts.append(bytes(self.buf[cur + FRAME : cur + FRAME + cplen]))
            cur = cnext
        return ArenaBlock(addr, tag, sc, b"".join(parts), nxt)

    def chain(self, addr: int) -> list[tuple[int, int]]:
        """``(address, physical size)`` of every block in the chain at ``addr``."""
        out = []
        seen = set()
        cur = addr
        while cur:
            if cur in seen:
                raise CorruptionError(f"cycle in block chain at {cur}")
            seen.add(cur)
            _, sc, _, nxt = self.frame(cur)
            out.append((cur, GRANULE * (sc + 1)))
            cur = nxt
        return out

    def image(self) -> bytes:
        return bytes(self.buf[: self.frontier])


class Arena(BlockImage):
    """Mutable arena. Single writer: only the owning executor may touch it."""

    def __init__(self, capacity: int, n_roots: int = 1) -> None:
        hs = header_size(n_roots)
        if capacity < hs + MAX_BLOCK:
            raise ValueError(f"capacity {capacity} too small (need >= {hs + MAX_BLOCK})")
        buf = bytearray(min(capacity, max(_INITIAL_BYTES, hs)))
        buf[0:4] = MAGIC
        struct.pack_into(">HH", buf, 4, VERSION, n_roots)
        _U64.pack_into(buf, 8, capacity)
        _U64.pack_into(buf, _OFF_FRONTIER, hs)
        _U64.pack_into(buf, _OFF_USED, hs)
        super().__init__(buf)
        self.sealed = False

    def _set(self, off: int, value: int) -> None:
        _U64.pack_into(self.buf, off, value)

    def set_u64(self, off: int, value: int) -> None:
        _U64.pack_into(self.buf, off, value)

    def set_root(self, i: int, addr: int) -> None:
        if not 0 <= i < self.n_roots:
            raise IndexError(i)
        self._set(ROOT_TABLE + 8 * i, addr)

    def _grow(self, end: int) -> None:
        cur = len(self.buf)
        if end > cur:
            new = min(self.capacity, max(end, 2 * cur))
            self.buf.extend(bytes(new - cur))

    def _take(self, size: int) -> int | None:
        head_off = free_list_offset(size)
        addr = self.u64(head_off)
        if addr:
            if self.buf[addr] != TAG_FREE:
                raise CorruptionError(f"free list for size {size} holds live block {addr}")
            self._set(head_off, self.u64(addr + FRAME))
            self._set(_OFF_FREE, self.free_bytes - size)
            return addr
        frontier = self.frontier
        if frontier + size > self.capacity:
            return None
        self._grow(frontier + size)
        self._set(_OFF_FRONTIER, frontier + size)
        return frontier

    def _plan(self, payload_size: int) -> list[int]:
        sizes = []
        left = payload_size
        while left > MAX_PAYLOAD:
            sizes.append(MAX_PAYLOAD)
            left -= MAX_PAYLOAD
        sizes.append(left)
        return sizes

    def allocate(self, payload_size: int, tag: int = TAG_LEAF) -> int:
        """Reserve a block (chain) for ``payload_size`` bytes; return its address."""
        if self.sealed:
            raise ArenaError("arena is sealed")
        if payload_size < 0:
            raise ValueError("negative payload size")
        if tag not in (TAG_LEAF, TAG_DIRECTORY):
            raise ValueError(f"bad block tag {tag}")
        pieces = self._plan(payload_size)
        addrs: list[int] = []
        for plen in pieces:
            size = block_size(plen)
            addr = self._take(size)
            if addr is None:
                self._rollback(addrs, pieces)
                raise ArenaFull(f"arena full: cannot place {size} bytes")
            addrs.append(addr)
            self._set(_OFF_USED, self.used_bytes + size)
        for i, (addr, plen) in enumerate(zip(addrs, pieces)):
            nxt = addrs[i + 1] if i + 1 < len(addrs) else 0
            btag = tag if i == 0 else TAG_CONTINUATION
            _FRAME.pack_into(self.buf, addr, btag, block_size(plen) // GRANULE - 1, plen, nxt)
        return addrs[0]

    def _rollback(self, addrs: list[int], pieces: list[int]) -> None:
        # newest first: pieces cut from the frontier are handed back to it
        for a, p in reversed(list(zip(addrs, pieces))):
            size = block_size(p)
            if a + size == self.frontier:
                self._set(_OFF_FRONTIER, a)
                self._set(_OFF_USED, self.used_bytes - size)
            else:
                self._push_free(a, size)

    def _push_free(self, addr: int, size: int) -> None:
        head_off = free_list_offset(size)
        self.buf[addr] = TAG_FREE
        self.buf[addr + 1] = size // GRANULE - 1
        self._set(addr + FRAME, self.u64(head_off))
        self._set(head_off, addr)
        self._set(_OFF_FREE, self.free_bytes + size)
        self._set(_OFF_USED, self.used_bytes - size)

    def write(self, addr: int, payload: bytes) -> None:
        """Fill the payload of the chain at ``addr``; length must match the allocation."""
        pos = 0
        for cur, _ in self.chain(addr):
            plen = _U64.unpack_from(self.buf, cur + 2)[0]
            self.buf[cur + FRAME : cur + FRAME + plen] = payload[pos : pos + plen]
            pos += plen
        if pos != len(payload):
            raise ArenaError(f"payload of {len(payload)} bytes does not match allocation of {pos}")

    def store(self, payload: bytes, tag: int = TAG_LEAF) -> int:
        addr = self.allocate(len(payload), tag)
        self.write(addr, payload)
        return addr

    def reclaim(self, addr: int) -> None:
        """Push the block at ``addr`` and its continuations onto their free lists."""
        if self.sealed:
            raise ArenaError("arena is sealed")
        if addr % GRANULE or not self.header_size <= addr < self.frontier:
            raise CorruptionError(f"invalid block address {addr}")
        if self.buf[addr] == TAG_FREE:
            raise CorruptionError(f"double reclaim of {addr}")
        if self.buf[addr] == TAG_CONTINUATION:
            raise CorruptionError(f"{addr} is a continuation block")
        for cur, size in self.chain(addr):
            self._push_free(cur, size)

    def free_list(self, size: int) -> list[int]:
        out = []
        seen = set()
        cur = self.free_head(size)
        while cur:
            if cur in seen:
                raise CorruptionError(f"cycle in free list {size}")
            seen.add(cur)
            out.append(cur)
            cur = self.u64(cur + FRAME)
        return out


_DIM_NNZ = struct.Struct(">II")


def encode_vector(v: SparseVector) -> bytes:
    """``dim ‖ nnz ‖ indices (u32) ‖ values (f64)``, big-endian."""
    return (
        _DIM_NNZ.pack(v.dim, v.nnz)
        + v.indices.astype(">u4").tobytes()
        + v.values.astype(">f8").tobytes()
    )


def decode_vector(payload: bytes, id: int = 0) -> SparseVector:
    if len(payload) < 8:
        raise CorruptionError("truncated vector header")
    dim, nnz = _DIM_NNZ.unpack_from(payload, 0)
    if len(payload) != 8 + 12 * nnz:
        raise CorruptionError(f"vector payload of {len(payload)} bytes, expected {8 + 12 * nnz}")
    idx = np.frombuffer(payload, dtype=">u4", count=nnz, offset=8)
    val = np.frombuffer(payload, dtype=">f8", count=nnz, offset=8 + 4 * nnz)
    return SparseVector(id, dim, idx.astype(np.int64), val.astype(np.float64))
