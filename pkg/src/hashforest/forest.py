"""Partitioned hash forest: table configuration and record routing.

Every table is split into ``2**C`` partitions of ``2**m`` trees. LSH tables
pick the tree from the first ``m`` key bits and the partition from ``C``
sign projections applied to the key read as a +/-1 vector, so identical
keys always land together. The main table routes on a 64-bit id hash.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .vectors import KEY_WORD_BITS, KeyHasher, SignProjectionFamily, SparseVector, id_hash
from .tree import TreeShape

MAIN_TABLE = 0
MAIN_HASH_BITS = 64

_PURPOSE_FAMILY = 0
_PURPOSE_PARTITION = 1
_PURPOSE_MAIN = 2


class TreeLocator(NamedTuple):
    table: int
    partition: int
    tree: int


@dataclass(frozen=True)
class TableConfig:
    """Shape of the forest. Field names follow the CLI flags."""

    tables: int = 10
    part_bits: int = 4
    tree_bits: int = 4
    bucket_cap: int = 4
    fanout: int = 128
    key_bits: int = 32
    seed: int = 0
    arena_bytes: int = 128 << 20
    snapshot_bytes: int = 64 << 20

    def __post_init__(self) -> None:
        if self.tables < 1:
            raise ValueError("need at least one LSH table")
        if not 1 <= self.key_bits <= KEY_WORD_BITS:
            raise ValueError(f"key_bits must be in [1, {KEY_WORD_BITS}]")
        if self.part_bits < 0 or self.tree_bits < 0:
            raise ValueError("partition and tree bit counts must be >= 0")
        if self.part_bits > 16 or self.tree_bits > 16:
            raise ValueError("at most 16 partition bits and 16 tree bits")
        if self.fanout < 2 or self.fanout & (self.fanout - 1):
            raise ValueError("fanout must be a power of two >= 2")
        if self.tree_bits + self.level_bits > self.key_bits:
            raise ValueError("tree_bits + log2(fanout) must not exceed key_bits")
        if self.part_bits + self.tree_bits + self.level_bits > MAIN_HASH_BITS:
            raise ValueError("main table needs part_bits + tree_bits + log2(fanout) <= 64")
        if self.snapshot_bytes > self.arena_bytes:
            raise ValueError("snapshot threshold larger than the arena")

    @property
    def level_bits(self) -> int:
        return self.fanout.bit_length() - 1

    @property
    def n_partitions(self) -> int:
        return 1 << self.part_bits

    @property
    def n_trees(self) -> int:
        return 1 << self.tree_bits

    def lsh_shape(self) -> TreeShape:
        return TreeShape(self.fanout, self.bucket_cap, self.tree_bits, self.key_bits)

    def main_shape(self) -> TreeShape:
        return TreeShape(self.fanout, self.bucket_cap, self.part_bits + self.tree_bits, MAIN_HASH_BITS)

    def shape_for(self, table: int) -> TreeShape:
        return self.main_shape() if table == MAIN_TABLE else self.lsh_shape()

    def replace(self, **changes) -> "TableConfig":
        return TableConfig(**{**asdict(self), **changes})


_CONFIG_KEYS = {
    "L": "tables",
    "C": "part_bits",
    "m": "tree_bits",
    "t": "bucket_cap",
    "l": "fanout",
    "M": "key_bits",
    "seed": "seed",
    "arena_bytes": "arena_bytes",
    "snapshot_bytes": "snapshot_bytes",
}


def read_config(path: str | os.PathLike) -> tuple[TableConfig, dict[str, str]]:
    """Parse a ``key=value`` config file.

    Returns the table configuration plus the remaining keys (``data_dir``,
    ``dim``) as strings.
    """
    values: dict[str, int] = {}
    extra: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in _CONFIG_KEYS:
                try:
                    values[_CONFIG_KEYS[key]] = int(value)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: {key} must be an integer") from None
            elif key in ("data_dir", "dim"):
                extra[key] = value
            else:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    return TableConfig(**values), extra


def write_config(path: str | os.PathLike, cfg: TableConfig, **extra) -> None:
    inverse = {v: k for k, v in _CONFIG_KEYS.items()}
    lines = [f"{inverse[f.name]}={getattr(cfg, f.name)}" for f in fields(cfg)]
    lines += [f"{k}={v}" for k, v in extra.items() if v is not None]
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def derive_seed(seed: int, table: int, purpose: int) -> int:
    state = np.random.SeedSequence([seed & ((1 << 64) - 1), table, purpose]).generate_state(1, np.uint64)
    return int(state[0])


class Router:
    """Computes compound keys and maps records to their tree locators."""

    def __init__(self, cfg: TableConfig, dim: int) -> None:
        self.cfg = cfg
        self.dim = dim
        self.families = [
            SignProjectionFamily(derive_seed(cfg.seed, t, _PURPOSE_FAMILY), dim, cfg.key_bits)
            for t in range(1, cfg.tables + 1)
        ]
        self.hasher = KeyHasher(self.families)
        secondary = np.zeros((cfg.tables, cfg.part_bits, cfg.key_bits))
        for i in range(cfg.tables):
            rng = np.random.default_rng(derive_seed(cfg.seed, i + 1, _PURPOSE_PARTITION))
            proj = rng.standard_normal((cfg.part_bits, cfg.key_bits))
            if 0 < cfg.part_bits <= cfg.key_bits:
                # orthonormal hyperplanes split the key cube into near-equal regions
                q, r = np.linalg.qr(proj.T)
                proj = (q * np.sign(np.diag(r))).T
            elif cfg.part_bits:
                proj /= np.linalg.norm(proj, axis=1, keepdims=True)
            secondary[i] = proj
        self.secondary = secondary
        self.main_seed = derive_seed(cfg.seed, MAIN_TABLE, _PURPOSE_MAIN)
        self._shifts = (KEY_WORD_BITS - 1 - np.arange(cfg.key_bits)).astype(np.uint64)
        self._part_weights = (1 << np.arange(cfg.part_bits)[::-1]).astype(np.int64)

    def keys(self, v: SparseVector) -> list[int]:
        """One compound key per LSH table (index 0 is table 1)."""
        return [int(k) for k in self.hasher.keys(v)]

    def _partitions(self, keys: np.ndarray, tables: np.ndarray) -> np.ndarray:
        if not self.cfg.part_bits:
            return np.zeros(len(keys), dtype=np.int64)
        bits = (keys[:, None] >> self._shifts[None, :]) & np.uint64(1)
        signs = bits.astype(np.float64) * 2.0 - 1.0
        proj = np.einsum("ncm,nm->nc", self.secondary[tables - 1], signs)
        return (proj >= 0.0).astype(np.int64) @ self._part_weights

    def route_lsh(self, key: int, table: int) -> TreeLocator:
        if not 1 <= table <= self.cfg.tables:
            raise ValueError(f"LSH table id {table} outside 1..{self.cfg.tables}")
        part = int(self._partitions(np.array([key], dtype=np.uint64), np.array([table]))[0])
        return TreeLocator(table, part, self.tree_of(key))

    def route_keys(self, keys: list[int]) -> list[TreeLocator]:
        """Locators for a full key list as returned by :meth:`keys`."""
        tables = np.arange(1, len(keys) + 1)
        parts = self._partitions(np.array(keys, dtype=np.uint64), tables)
        return [TreeLocator(int(t), int(p), self.tree_of(k)) for t, p, k in zip(tables, parts, keys)]

    def tree_of(self, key: int) -> int:
        m = self.cfg.tree_bits
        return key >> (KEY_WORD_BITS - m) if m else 0

    def tree_hash(self, key: int) -> int:
        """The key right-aligned to ``key_bits`` as consumed by the tree."""
        return key >> (KEY_WORD_BITS - self.cfg.key_bits)

    def main_hash(self, id: int) -> int:
        return id_hash(id, self.main_seed)

    def route_main(self, id: int) -> tuple[TreeLocator, int]:
        h = self.main_hash(id)
        c, m = self.cfg.part_bits, self.cfg.tree_bits
        part = h >> (MAIN_HASH_BITS - c) if c else 0
        tree = (h >> (MAIN_HASH_BITS - c - m)) & ((1 << m) - 1) if m else 0
        return TreeLocator(MAIN_TABLE, part, tree), h
