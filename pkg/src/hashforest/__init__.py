"""Concurrent locality-sensitive-hashing store.

Vectors live in a partitioned main table; ``tables`` LSH tables index their
ids by sign-projection keys in adaptive hash trees. Each partition keeps a
RAM arena that is sealed into immutable, memory-mapped snapshots.
"""

from .arena import Arena, ArenaError, ArenaFull, CorruptionError
from .dispatch import Engine, EngineClosed, EngineError, OwnerError, QuiesceTimeout, Request
from .forest import Router, TableConfig, TreeLocator, read_config, write_config
from .snapshot import BloomFilter, SnapshotCorrupt, SnapshotError
from .store import CandidateSet, Neighbor, QuerySpec, Store
from .vectors import InvalidVector, SparseVector, angular_distance, id_hash, key_distance, llcp

__version__ = "0.1.0"

__all__ = [
    "Arena", "ArenaError", "ArenaFull", "BloomFilter", "CandidateSet", "CorruptionError", "Engine",
    "EngineClosed", "EngineError", "InvalidVector", "Neighbor", "OwnerError", "QuerySpec",
    "QuiesceTimeout", "Request", "Router", "SnapshotCorrupt", "SnapshotError", "SparseVector", "Store",
    "TableConfig", "TreeLocator", "angular_distance", "id_hash", "key_distance", "llcp",
    "read_config", "write_config",
]
