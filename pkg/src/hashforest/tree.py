"""Reconstruction-free adaptive hash tree stored in arena blocks.

Directory blocks hold ``fanout`` 8-byte slots. A slot is empty (0), points
at a directory one level down, or heads a chain of leaves linked through
their NEXT field. Level ``j`` selects its slot with the ``log2(fanout)``
hash bits that follow ``start_bit + j * log2(fanout)``. When a chain above
the last level grows past ``bucket_cap`` leaves, that one slot is spread
into a fresh directory; nothing else in the tree moves.

Leaf payload: ``id (u64) ‖ hash (u64) ‖ next (u64) ‖ value``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator

from .arena import FRAME, TAG_DIRECTORY, TAG_LEAF, Arena, ArenaFull, BlockImage, CorruptionError

LEAF_HEADER = 24
_LEAF = struct.Struct(">QQQ")
_U64 = struct.Struct(">Q")
_NEXT = FRAME + 16


@dataclass(frozen=True)
class LeafNode:
    addr: int
    id: int
    hash: int
    next: int


@dataclass(frozen=True)
class TreeShape:
    fanout: int
    bucket_cap: int
    start_bit: int
    width: int

    def __post_init__(self) -> None:
        if self.fanout < 2 or self.fanout & (self.fanout - 1):
            raise ValueError(f"fanout must be a power of two >= 2, got {self.fanout}")
        if self.fanout * 8 > 4096 - FRAME:
            raise ValueError(f"fanout {self.fanout} does not fit a single block")
        if self.bucket_cap < 1:
            raise ValueError("bucket capacity must be >= 1")
        if self.start_bit + self.bits_per_level > self.width:
            raise ValueError("no hash bits left for the root level")

    @property
    def bits_per_level(self) -> int:
        return self.fanout.bit_length() - 1

    def chunk(self, h: int, level: int) -> int:
        shift = self.width - self.start_bit - (level + 1) * self.bits_per_level
        return (h >> shift) & (self.fanout - 1)

    def is_last_level(self, level: int) -> bool:
        """True when slots at ``level`` cannot be spread any further."""
        return self.start_bit + (level + 2) * self.bits_per_level > self.width

    @property
    def max_levels(self) -> int:
        return (self.width - self.start_bit) // self.bits_per_level

    def prefix(self, h: int, level: int) -> int:
        """Hash bits ``[start_bit, start_bit + (level+1)*b)`` as an integer."""
        return (h >> (self.width - self.start_bit - (level + 1) * self.bits_per_level)) & (
            (1 << ((level + 1) * self.bits_per_level)) - 1
        )


def encode_leaf(id: int, h: int, value: bytes = b"") -> bytes:
    return _LEAF.pack(id, h, 0) + value


class HashTree:
    """One tree of a partition, rooted in slot ``index`` of the image's root table."""

    def __init__(self, image: BlockImage, index: int, shape: TreeShape) -> None:
        self.image = image
        self.index = index
        self.shape = shape

    @property
    def root(self) -> int:
        return self.image.root(self.index)

    def _slot_value(self, dir_addr: int, slot: int) -> int:
        return _U64.unpack_from(self.image.buf, dir_addr + FRAME + 8 * slot)[0]

    def _is_directory(self, addr: int) -> bool:
        tag = self.image.frame(addr)[0]
        if tag == TAG_DIRECTORY:
            return True
        if tag == TAG_LEAF:
            return False
        raise CorruptionError(f"slot points at block {addr} with tag {tag}")

    def leaf(self, addr: int) -> LeafNode:
        self.image.frame(addr)
        id, h, nxt = _LEAF.unpack_from(self.image.buf, addr + FRAME)
        return LeafNode(addr, id, h, nxt)

    def leaf_value(self, addr: int) -> bytes:
        return self.image.read_block(addr).payload[LEAF_HEADER:]

    def chain(self, head: int) -> list[LeafNode]:
        out = []
        seen = set()
        cur = head
        while cur:
            if cur in seen:
                raise CorruptionError(f"cycle in leaf chain at {cur}")
            seen.add(cur)
            node = self.leaf(cur)
            out.append(node)
            cur = node.next
        return out

    def descend(self, h: int) -> tuple[int, int, int]:
        """Follow ``h`` down to its terminal slot.

        Returns ``(level, directory address, slot value)``; the slot value is
        0 for an empty bucket or the head of a leaf chain. An empty tree
        reports level 0 with directory address 0.
        """
        shape = self.shape
        dir_addr = self.root
        if not dir_addr:
            return 0, 0, 0
        level = 0
        seen = set()
        while True:
            if dir_addr in seen:
                raise CorruptionError(f"directory cycle at {dir_addr}")
            seen.add(dir_addr)
            val = self._slot_value(dir_addr, shape.chunk(h, level))
            if val and self._is_directory(val):
                dir_addr = val
                level += 1
                if level >= shape.max_levels:
                    raise CorruptionError("directory below the last level")
                continue
            return level, dir_addr, val

    def lookup(self, h: int) -> list[LeafNode]:
        """Leaf chain of the terminal bucket for ``h`` (empty if none)."""
        _, _, head = self.descend(h)
        return self.chain(head)

    def walk(self) -> Iterator[tuple[str, tuple[int, ...], int]]:
        """Yield ``("dir", path, addr)`` and ``("chain", path, head)`` entries."""
        root = self.root
        if not root:
            return
        stack = [((), root)]
        seen = set()
        while stack:
            path, dir_addr = stack.pop()
            if dir_addr in seen:
                raise CorruptionError(f"directory cycle at {dir_addr}")
            seen.add(dir_addr)
            yield "dir", path, dir_addr
            for slot in range(self.shape.fanout):
                val = self._slot_value(dir_addr, slot)
                if not val:
                    continue
                if self._is_directory(val):
                    stack.append((path + (slot,), val))
                else:
                    yield "chain", path + (slot,), val

    def leaves(self) -> Iterator[LeafNode]:
        for kind, _, addr in self.walk():
            if kind == "chain":
                yield from self.chain(addr)

    def __len__(self) -> int:
        return sum(1 for _ in self.leaves())


class MutableHashTree(HashTree):
    image: Arena

    def _set_slot(self, dir_addr: int, slot: int, value: int) -> None:
        self.image.set_u64(dir_addr + FRAME + 8 * slot, value)

    def _set_next(self, leaf_addr: int, value: int) -> None:
        self.image.set_u64(leaf_addr + _NEXT, value)

    def _new_directory(self) -> int:
        return self.image.store(bytes(8 * self.shape.fanout), TAG_DIRECTORY)

    def insert(self, leaf_addr: int, h: int) -> None:
        """Link the already-written leaf at ``leaf_addr`` under hash ``h``."""
        shape = self.shape
        if not self.root:
            self.image.set_root(self.index, self._new_directory())
        level, dir_addr, head = self.descend(h)
        slot = shape.chunk(h, level)
        if not head:
            self._set_next(leaf_addr, 0)
            self._set_slot(dir_addr, slot, leaf_addr)
            return
        chain = self.chain(head)
        if len(chain) + 1 <= shape.bucket_cap or shape.is_last_level(level):
            self._set_next(leaf_addr, head)
            self._set_slot(dir_addr, slot, leaf_addr)
            return
        entries = [(leaf_addr, h)] + [(n.addr, n.hash) for n in chain]
        plan = self._plan_spread(entries, level + 1)
        dirs = []
        try:
            for _ in range(_count_dirs(plan)):
                dirs.append(self._new_directory())
        except ArenaFull:
            for d in dirs:
                self.image.reclaim(d)
            raise
        new_dir = self._write_plan(plan, iter(dirs))
        self._set_slot(dir_addr, slot, new_dir)

    def _plan_spread(self, entries, level: int):
        groups: dict[int, list] = {}
        for addr, h in entries:
            groups.setdefault(self.shape.chunk(h, level), []).append((addr, h))
        plan = {}
        for slot, members in groups.items():
            if len(members) > self.shape.bucket_cap and not self.shape.is_last_level(level):
                plan[slot] = ("dir", self._plan_spread(members, level + 1))
            else:
                plan[slot] = ("chain", [a for a, _ in members])
        return plan

    def _write_plan(self, plan, dirs) -> int:
        addr = next(dirs)
        for slot, (kind, content) in plan.items():
            if kind == "dir":
                self._set_slot(addr, slot, self._write_plan(content, dirs))
                continue
            for a, b in zip(content, content[1:]):
                self._set_next(a, b)
            self._set_next(content[-1], 0)
            self._set_slot(addr, slot, content[0])
        return addr

    def remove(self, id: int, h: int) -> bool:
        """Unlink and reclaim the leaf with ``id`` under ``h``. Directories stay."""
        level, dir_addr, head = self.descend(h)
        if not head:
            return False
        prev = None
        for node in self.chain(head):
            if node.id == id:
                if prev is None:
                    self._set_slot(dir_addr, self.shape.chunk(h, level), node.next)
                else:
                    self._set_next(prev, node.next)
                self.image.reclaim(node.addr)
                return True
            prev = node.addr
        return False


def _count_dirs(plan) -> int:
    return 1 + sum(_count_dirs(c) for kind, c in plan.values() if kind == "dir")
