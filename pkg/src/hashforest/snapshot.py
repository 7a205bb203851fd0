"""Immutable on-disk partition snapshots, bloom summaries and manifests.

A sealed partition becomes three files named ``t<table>_p<partition>_<ts>``:

``.dat``
    the arena image verbatim, so block offsets are file-region offsets;
``.idx``
    record count, the tree root table and the directory block addresses;
``.blm``
    bloom filter over the snapshot's keys.

Each file is ``magic ‖ version ‖ kind ‖ table ‖ partition ‖ timestamp ‖ body ‖
checksum`` with a trailing 8-byte BLAKE2b checksum over everything before
it. One manifest per partition lists the live snapshots; it is replaced by
atomic rename.
"""

from __future__ import annotations

import hashlib
import math
import mmap
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from .arena import BlockImage, CorruptionError

SNAPSHOT_MAGIC = b"PFOS"
MANIFEST_MAGIC = b"PFOM"
FORMAT_VERSION = 1

KIND_INDEX = 0
KIND_DATA = 1
KIND_BLOOM = 2

BITS_PER_KEY = 15
BLOOM_HASHES = 10

_HEAD = struct.Struct(">4sHBHIQ")
_U64 = struct.Struct(">Q")


class SnapshotError(Exception):
    """Storage failure while writing or reading snapshot files."""


class SnapshotCorrupt(SnapshotError):
    """Checksum or format mismatch; the files were quarantined."""


def checksum(data) -> int:
    return _U64.unpack(hashlib.blake2b(data, digest_size=8).digest())[0]


class BloomFilter:
    """Bloom filter with double hashing over a 128-bit BLAKE2b digest."""

    def __init__(self, n_bits: int, n_hashes: int = BLOOM_HASHES, bits: bytes | bytearray | None = None):
        if n_bits < 8:
            n_bits = 8
        self.n_bits = n_bits
        self.n_hashes = n_hashes
        nbytes = (n_bits + 7) // 8
        if bits is None:
            self.bits = bytearray(nbytes)
        else:
            if len(bits) != nbytes:
                raise SnapshotCorrupt("bloom bit array length mismatch")
            self.bits = bytearray(bits)

    @classmethod
    def for_keys(cls, keys: Iterable[bytes], bits_per_key: int = BITS_PER_KEY,
                 n_hashes: int = BLOOM_HASHES) -> "BloomFilter":
        keys = list(keys)
        bf = cls(max(8, bits_per_key * len(keys)), n_hashes)
        for k in keys:
            bf.add(k)
        return bf

    @staticmethod
    def digest(key: bytes) -> tuple[int, int]:
        d = hashlib.blake2b(key, digest_size=16).digest()
        h1, h2 = struct.unpack(">QQ", d)
        return h1, h2 | 1

    def _positions(self, dig: tuple[int, int]):
        h1, h2 = dig
        n = self.n_bits
        return ((h1 + i * h2) % n for i in range(self.n_hashes))

    def add(self, key: bytes) -> None:
        for p in self._positions(self.digest(key)):
            self.bits[p >> 3] |= 1 << (p & 7)

    def contains_digest(self, dig: tuple[int, int]) -> bool:
        bits = self.bits
        return all(bits[p >> 3] & (1 << (p & 7)) for p in self._positions(dig))

    def __contains__(self, key: bytes) -> bool:
        return self.contains_digest(self.digest(key))

    def expected_fpr(self, n_keys: int) -> float:
        return (1.0 - math.exp(-self.n_hashes * n_keys / self.n_bits)) ** self.n_hashes


def id_key(id: int) -> bytes:
    return b"I" + _U64.pack(id)


def bucket_key(tree: int, level: int, prefix: int) -> bytes:
    return b"B" + struct.pack(">HBQ", tree, level, prefix)


def directory_key(tree: int, level: int, prefix: int) -> bytes:
    return b"D" + struct.pack(">HBQ", tree, level, prefix)


def snapshot_stem(table: int, partition: int, ts: int) -> str:
    return f"t{table}_p{partition}_{ts}"


def manifest_name(table: int, partition: int) -> str:
    return f"t{table}_p{partition}.manifest"


@dataclass(frozen=True)
class ManifestEntry:
    timestamp: int
    index_file: str
    data_file: str
    checksum: int


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def _write_file(path: Path, head: bytes, body: bytes) -> int:
    data = head + body
    csum = checksum(data)
    with open(path, "wb") as fh:
        fh.write(data)
        fh.write(_U64.pack(csum))
        fh.flush()
        os.fsync(fh.fileno())
    return csum


def read_manifest(path: Path) -> list[ManifestEntry]:
    """Entries ordered oldest first; a missing manifest means no snapshots."""
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        return []
    if len(data) < 18 or data[:4] != MANIFEST_MAGIC:
        raise SnapshotCorrupt(f"{path}: bad manifest header")
    if checksum(data[:-8]) != _U64.unpack_from(data, len(data) - 8)[0]:
        raise SnapshotCorrupt(f"{path}: manifest checksum mismatch")
    version, count = struct.unpack_from(">HI", data, 4)
    if version != FORMAT_VERSION:
        raise SnapshotCorrupt(f"{path}: unsupported manifest version {version}")
    pos = 10
    entries = []
    try:
        for _ in range(count):
            ts = _U64.unpack_from(data, pos)[0]
            pos += 8
            names = []
            for _ in range(2):
                (n,) = struct.unpack_from(">H", data, pos)
                names.append(data[pos + 2 : pos + 2 + n].decode("utf-8"))
                pos += 2 + n
            csum = _U64.unpack_from(data, pos)[0]
            pos += 8
            entries.append(ManifestEntry(ts, names[0], names[1], csum))
    except (struct.error, UnicodeDecodeError) as exc:
        raise SnapshotCorrupt(f"{path}: truncated manifest") from exc
    return sorted(entries, key=lambda e: e.timestamp)


def write_manifest(path: Path, entries: list[ManifestEntry],
                   fault: Callable[[str], None] | None = None) -> None:
    parts = [MANIFEST_MAGIC, struct.pack(">HI", FORMAT_VERSION, len(entries))]
    for e in sorted(entries, key=lambda e: e.timestamp):
        parts.append(_U64.pack(e.timestamp))
        for name in (e.index_file, e.data_file):
            raw = name.encode("utf-8")
            parts.append(struct.pack(">H", len(raw)) + raw)
        parts.append(_U64.pack(e.checksum))
    body = b"".join(parts)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body + _U64.pack(checksum(body)))
        fh.flush()
        os.fsync(fh.fileno())
    if fault:
        fault("manifest-rename")
    os.replace(tmp, path)
    _fsync_dir(path.parent)


@dataclass
class SnapshotFiles:
    entry: ManifestEntry
    paths: tuple[Path, Path, Path]


def write_snapshot(directory: Path, table: int, partition: int, ts: int, image: BlockImage,
                   directories: list[int], record_count: int, bloom: BloomFilter,
                   fault: Callable[[str], None] | None = None) -> SnapshotFiles:
    """Write the three snapshot files sequentially and return their manifest entry."""
    stem = snapshot_stem(table, partition, ts)
    idx_path = directory / f"{stem}.idx"
    dat_path = directory / f"{stem}.dat"
    blm_path = directory / f"{stem}.blm"
    roots = [image.root(i) for i in range(image.n_roots)]
    try:
        region = image.image()
        dat_sum = _write_file(
            dat_path,
            _HEAD.pack(SNAPSHOT_MAGIC, FORMAT_VERSION, KIND_DATA, table, partition, ts),
            _U64.pack(len(region)) + region,
        )
        if fault:
            fault("write-dat")
        idx_body = (
            struct.pack(">QH", record_count, len(roots))
            + b"".join(_U64.pack(r) for r in roots)
            + struct.pack(">I", len(directories))
            + b"".join(_U64.pack(d) for d in directories)
        )
        idx_sum = _write_file(
            idx_path, _HEAD.pack(SNAPSHOT_MAGIC, FORMAT_VERSION, KIND_INDEX, table, partition, ts), idx_body
        )
        if fault:
            fault("write-idx")
        blm_body = struct.pack(">QB", bloom.n_bits, bloom.n_hashes) + bytes(bloom.bits)
        blm_sum = _write_file(
            blm_path, _HEAD.pack(SNAPSHOT_MAGIC, FORMAT_VERSION, KIND_BLOOM, table, partition, ts), blm_body
        )
        if fault:
            fault("write-blm")
        _fsync_dir(directory)
    except OSError as exc:
        for p in (idx_path, dat_path, blm_path):
            p.unlink(missing_ok=True)
        raise SnapshotError(f"writing snapshot {stem}: {exc}") from exc
    combined = checksum(_U64.pack(idx_sum) + _U64.pack(dat_sum) + _U64.pack(blm_sum))
    entry = ManifestEntry(ts, idx_path.name, dat_path.name, combined)
    return SnapshotFiles(entry, (idx_path, dat_path, blm_path))


class Snapshot:
    """A sealed partition image opened read-only from disk."""

    def __init__(self, directory: Path, entry: ManifestEntry) -> None:
        self.directory = directory
        self.entry = entry
        self.timestamp = entry.timestamp
        self.index_path = directory / entry.index_file
        self.data_path = directory / entry.data_file
        self.bloom_path = self.data_path.with_suffix(".blm")
        self._mm: mmap.mmap | None = None
        self._base: memoryview | None = None
        self._view: memoryview | None = None
        self.image: BlockImage | None = None
        try:
            self._open()
        except SnapshotCorrupt:
            self.close()
            self.quarantine()
            raise

    def _verify(self, path: Path, data: memoryview, kind: int) -> tuple[int, int, memoryview]:
        if len(data) < _HEAD.size + 8:
            raise SnapshotCorrupt(f"{path}: truncated")
        body_end = len(data) - 8
        if checksum(data[:body_end]) != _U64.unpack_from(data, body_end)[0]:
            raise SnapshotCorrupt(f"{path}: checksum mismatch")
        magic, version, fkind, table, partition, ts = _HEAD.unpack_from(data, 0)
        if magic != SNAPSHOT_MAGIC or version != FORMAT_VERSION or fkind != kind:
            raise SnapshotCorrupt(f"{path}: bad header")
        if ts != self.timestamp:
            raise SnapshotCorrupt(f"{path}: timestamp {ts} != manifest {self.timestamp}")
        return table, partition, data[_HEAD.size : body_end]

    def _open(self) -> None:
        try:
            idx = self.index_path.read_bytes()
            blm = self.bloom_path.read_bytes()
            fh = open(self.data_path, "rb")
        except OSError as exc:
            raise SnapshotCorrupt(f"cannot read snapshot files: {exc}") from exc
        with fh:
            try:
                self._mm = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
            except ValueError as exc:
                raise SnapshotCorrupt(f"{self.data_path}: empty data file") from exc
        self._base = memoryview(self._mm)
        sums = []
        for data in (idx, self._base, blm):
            sums.append(_U64.unpack_from(data, len(data) - 8)[0] if len(data) >= 8 else 0)
        combined = checksum(b"".join(_U64.pack(s) for s in sums))
        if combined != self.entry.checksum:
            raise SnapshotCorrupt(f"{self.data_path}: checksum differs from manifest")

        self.table, self.partition, body = self._verify(self.index_path, memoryview(idx), KIND_INDEX)
        self.record_count, n_roots = struct.unpack_from(">QH", body, 0)
        pos = 10
        self.roots = [_U64.unpack_from(body, pos + 8 * i)[0] for i in range(n_roots)]
        pos += 8 * n_roots
        (n_dirs,) = struct.unpack_from(">I", body, pos)
        self.directories = [_U64.unpack_from(body, pos + 4 + 8 * i)[0] for i in range(n_dirs)]

        _, _, body = self._verify(self.bloom_path, memoryview(blm), KIND_BLOOM)
        n_bits, n_hashes = struct.unpack_from(">QB", body, 0)
        self.bloom = BloomFilter(n_bits, n_hashes, bytes(body[9:]))

        _, _, body = self._verify(self.data_path, self._base, KIND_DATA)
        (region_len,) = _U64.unpack_from(body, 0)
        if region_len != len(body) - 8:
            raise SnapshotCorrupt(f"{self.data_path}: region length mismatch")
        self._view = body[8:]
        try:
            self.image = BlockImage(self._view)
        except CorruptionError as exc:
            raise SnapshotCorrupt(f"{self.data_path}: {exc}") from exc
        if [self.image.root(i) for i in range(self.image.n_roots)] != self.roots:
            raise SnapshotCorrupt(f"{self.index_path}: root table differs from data image")

    @property
    def files(self) -> tuple[Path, Path, Path]:
        return self.index_path, self.data_path, self.bloom_path

    def close(self) -> None:
        self.image = None
        for attr in ("_view", "_base"):
            view = getattr(self, attr)
            if view is not None:
                try:
                    view.release()
                except BufferError:
                    pass
                setattr(self, attr, None)
        if self._mm is not None:
            try:
                self._mm.close()
            except BufferError:
                pass
            self._mm = None

    def quarantine(self) -> None:
        for p in self.files:
            if p.exists():
                os.replace(p, p.with_name(p.name + ".quarantine"))

    def __repr__(self) -> str:
        return f"Snapshot({self.data_path.name}, records={getattr(self, 'record_count', '?')})"
