"""One partition of one table: a live arena, its trees and its snapshots.

A partition is mutated only by its owning executor. Reads walk the live
arena first and then the sealed snapshots newest first.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .arena import Arena, ArenaFull, decode_vector, encode_vector
from .forest import MAIN_TABLE, TableConfig
from .snapshot import (
    BloomFilter,
    Snapshot,
    SnapshotError,
    bucket_key,
    directory_key,
    id_key,
    manifest_name,
    read_manifest,
    snapshot_stem,
    write_manifest,
    write_snapshot,
)
from .tree import LEAF_HEADER, HashTree, LeafNode, MutableHashTree, TreeShape, encode_leaf
from .vectors import SparseVector

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Entry:
    """An LSH table entry returned by :meth:`Partition.collect`."""

    id: int
    hash: int
    sealed: bool


def _path_prefix(path: tuple[int, ...], bits: int) -> int:
    prefix = 0
    for chunk in path:
        prefix = (prefix << bits) | chunk
    return prefix


class Partition:
    def __init__(self, table: int, partition: int, cfg: TableConfig, directory: Path,
                 load: bool = True) -> None:
        self.table = table
        self.partition = partition
        self.cfg = cfg
        self.shape: TreeShape = cfg.shape_for(table)
        self.n_trees = cfg.n_trees
        self.directory = Path(directory)
        self.manifest_path = self.directory / manifest_name(table, partition)
        self.arena = self._fresh_arena()
        self.snapshots: list[Snapshot] = []  # newest first
        self.next_ts = 1
        self.seals = 0
        if load:
            self._load()

    @property
    def is_main(self) -> bool:
        return self.table == MAIN_TABLE

    def _fresh_arena(self) -> Arena:
        return Arena(self.cfg.arena_bytes, self.n_trees)

    def _load(self) -> None:
        entries = read_manifest(self.manifest_path)
        for e in reversed(entries):
            self.snapshots.append(Snapshot(self.directory, e))
        if entries:
            self.next_ts = entries[-1].timestamp + 1

    def live_tree(self, tree: int) -> MutableHashTree:
        return MutableHashTree(self.arena, tree, self.shape)

    def _trees(self, tree: int) -> list[tuple[HashTree, Snapshot | None]]:
        out: list[tuple[HashTree, Snapshot | None]] = [(self.live_tree(tree), None)]
        out += [(HashTree(s.image, tree, self.shape), s) for s in self.snapshots]
        return out

    # -- writes -----------------------------------------------------------

    def _link(self, tree: int, id: int, h: int, value: bytes) -> None:
        """Write a leaf and insert it; on a full arena seal once and retry."""
        for attempt in (0, 1):
            addr = None
            try:
                addr = self.arena.store(encode_leaf(id, h, value))
                self.live_tree(tree).insert(addr, h)
                return
            except ArenaFull:
                if addr is not None:
                    self.arena.reclaim(addr)
                if attempt or not self.seal():
                    raise

    def lsh_insert(self, tree: int, id: int, h: int) -> bool:
        live = self.live_tree(tree)
        if any(n.id == id for n in live.lookup(h)):
            return False
        self._link(tree, id, h, b"")
        self.maybe_seal()
        return True

    def lsh_remove(self, tree: int, id: int, h: int) -> bool:
        return self.live_tree(tree).remove(id, h)

    def main_get(self, tree: int, id: int, h: int) -> SparseVector | None:
        """Newest version of ``id``; ``None`` if absent or deleted."""
        found = self._main_find(tree, id, h)
        if found is None:
            return None
        t, node = found
        value = t.leaf_value(node.addr)
        if not value:
            return None
        return decode_vector(value, id)

    def _main_find(self, tree: int, id: int, h: int) -> tuple[HashTree, LeafNode] | None:
        digest = None
        for t, snap in self._trees(tree):
            if snap is not None:
                if digest is None:
                    digest = BloomFilter.digest(id_key(id))
                if not snap.bloom.contains_digest(digest):
                    continue
            for node in t.lookup(h):
                if node.id == id:
                    return t, node
        return None

    def _in_snapshots(self, tree: int, id: int, h: int) -> bool:
        key = BloomFilter.digest(id_key(id))
        for snap in self.snapshots:
            if snap.bloom.contains_digest(key):
                if any(n.id == id for n in HashTree(snap.image, tree, self.shape).lookup(h)):
                    return True
        return False

    def main_replace(self, tree: int, v: SparseVector, h: int) -> SparseVector | None:
        """Store ``v`` as the newest version of its id; return the previous one."""
        old = self.main_get(tree, v.id, h)
        self.live_tree(tree).remove(v.id, h)
        self._link(tree, v.id, h, encode_vector(v))
        self.maybe_seal()
        return old

    def main_remove(self, tree: int, id: int, h: int) -> SparseVector | None:
        old = self.main_get(tree, id, h)
        self.live_tree(tree).remove(id, h)
        if self._in_snapshots(tree, id, h):
            # tombstone shadows sealed versions
            self._link(tree, id, h, b"")
            self.maybe_seal()
        return old

    # -- reads --------------------------------------------------------------

    def _gate(self, snap: Snapshot, tree: int, h: int) -> bool:
        p0 = self.shape.prefix(h, 0)
        return bucket_key(tree, 0, p0) in snap.bloom or directory_key(tree, 0, p0) in snap.bloom

    def collect(self, tree: int, h: int) -> list[Entry]:
        """Entries of the bucket ``h`` falls into across live and sealed trees.

        The bucket is chosen as if all sources formed one tree: descend while
        any source holds a directory on the path, or while the entries that
        share the current prefix number more than the bucket capacity.
        """
        shape = self.shape
        views = []
        for t, snap in self._trees(tree):
            if snap is not None and not self._gate(snap, tree, h):
                continue
            level, _, head = t.descend(h)
            views.append((level, t.chain(head), snap is not None))
        j = 0
        while True:
            if any(level > j for level, _, _ in views):
                j += 1
                continue
            if shape.is_last_level(j):
                break
            want = shape.prefix(h, j)
            count = sum(1 for _, chain, _ in views for n in chain if shape.prefix(n.hash, j) == want)
            if count > shape.bucket_cap:
                j += 1
            else:
                break
        want = shape.prefix(h, j)
        return [
            Entry(n.id, n.hash, sealed)
            for _, chain, sealed in views
            for n in chain
            if shape.prefix(n.hash, j) == want
        ]

    # -- snapshots ---------------------------------------------------------

    def record_count(self) -> int:
        return sum(len(self.live_tree(t)) for t in range(self.n_trees))

    def maybe_seal(self) -> None:
        if self.arena.used_bytes >= self.cfg.snapshot_bytes:
            self.seal()

    def _summary(self, image) -> tuple[list[int], int, BloomFilter]:
        keys: list[bytes] = []
        dirs: list[int] = []
        records = 0
        bits = self.shape.bits_per_level
        for tree in range(self.n_trees):
            t = HashTree(image, tree, self.shape)
            for kind, path, addr in t.walk():
                if kind == "dir":
                    dirs.append(addr)
                    if path and not self.is_main:
                        keys.append(directory_key(tree, len(path) - 1, _path_prefix(path, bits)))
                    continue
                chain = t.chain(addr)
                records += len(chain)
                if self.is_main:
                    keys.extend(id_key(n.id) for n in chain)
                else:
                    keys.append(bucket_key(tree, len(path) - 1, _path_prefix(path, bits)))
        return dirs, records, BloomFilter.for_keys(keys)

    def seal(self, fault: Callable[[str], None] | None = None) -> Snapshot | None:
        """Freeze the live arena into a snapshot and start a fresh arena.

        Returns ``None`` (and changes nothing) when the arena holds no records.
        """
        dirs, records, bloom = self._summary(self.arena)
        if not records:
            return None
        ts = self.next_ts
        self.arena.sealed = True
        try:
            files = write_snapshot(self.directory, self.table, self.partition, ts, self.arena,
                                   dirs, records, bloom, fault)
            entries = [s.entry for s in self.snapshots] + [files.entry]
            write_manifest(self.manifest_path, entries, fault)
        except BaseException:
            self.arena.sealed = False
            self._discard(ts)
            raise
        self.next_ts = ts + 1
        self.snapshots.insert(0, Snapshot(self.directory, files.entry))
        self.arena = self._fresh_arena()
        self.seals += 1
        log.debug("sealed t%d p%d ts=%d records=%d", self.table, self.partition, ts, records)
        return self.snapshots[0]

    def merge(self, fault: Callable[[str], None] | None = None) -> Snapshot | None:
        """Fold every snapshot into one, keeping the newest occurrence of each id.

        Sealed tombstones are dropped since no older version survives the merge.
        """
        if len(self.snapshots) < 2:
            return None
        total = sum(s.image.frontier for s in self.snapshots)
        arena = Arena(max(self.cfg.arena_bytes, total + (1 << 20)), self.n_trees)
        seen: set[int] = set()
        for snap in self.snapshots:
            for tree in range(self.n_trees):
                src = HashTree(snap.image, tree, self.shape)
                dst = MutableHashTree(arena, tree, self.shape)
                for node in src.leaves():
                    if node.id in seen:
                        continue
                    seen.add(node.id)
                    value = src.leaf_value(node.addr) if self.is_main else b""
                    if self.is_main and not value:
                        continue
                    addr = arena.store(encode_leaf(node.id, node.hash, value))
                    dst.insert(addr, node.hash)
        ts = self.next_ts
        dirs, records, bloom = self._summary(arena)
        old = list(self.snapshots)
        files = None
        try:
            files = write_snapshot(self.directory, self.table, self.partition, ts, arena,
                                   dirs, records, bloom, fault)
            if fault:
                fault("manifest-write")
            write_manifest(self.manifest_path, [files.entry], fault)
        except BaseException:
            if files is None or read_manifest(self.manifest_path) != [files.entry]:
                self._discard(ts)
                raise
        self.next_ts = ts + 1
        self.snapshots = [Snapshot(self.directory, files.entry)]
        if fault:
            fault("delete-old")
        for snap in old:
            paths = snap.files
            snap.close()
            for p in paths:
                try:
                    p.unlink()
                except OSError as exc:
                    log.warning("could not delete %s: %s", p, exc)
        return self.snapshots[0]

    def _discard(self, ts: int) -> None:
        stem = snapshot_stem(self.table, self.partition, ts)
        for ext in (".idx", ".dat", ".blm"):
            (self.directory / f"{stem}{ext}").unlink(missing_ok=True)

    def close(self) -> None:
        for s in self.snapshots:
            s.close()

    # -- inspection ----------------------------------------------------------

    def live_buckets(self) -> dict[int, dict[tuple[int, ...], list[int]]]:
        """``tree -> bucket path -> ids`` for the live arena."""
        out: dict[int, dict[tuple[int, ...], list[int]]] = {}
        for tree in range(self.n_trees):
            t = self.live_tree(tree)
            buckets = {path: [n.id for n in t.chain(addr)] for kind, path, addr in t.walk() if kind == "chain"}
            if buckets:
                out[tree] = buckets
        return out

    def stats(self) -> dict:
        return {
            "table": self.table,
            "partition": self.partition,
            "used_bytes": self.arena.used_bytes,
            "live_records": self.record_count(),
            "snapshots": len(self.snapshots),
            "sealed_records": sum(s.record_count for s in self.snapshots),
            "seals": self.seals,
        }


__all__ = ["Entry", "Partition", "SnapshotError", "LEAF_HEADER"]
