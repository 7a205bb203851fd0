"""Client-facing store: puts, removes and nearest-neighbour queries."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .dispatch import Engine, Handle, Request
from .forest import TableConfig, read_config, write_config
from .vectors import SparseVector, angular_distance

CONFIG_FILE = "store.conf"


@dataclass(frozen=True)
class QuerySpec:
    """Either ``k`` (top-k) or ``radius`` (angular distance threshold)."""

    vector: SparseVector
    k: int | None = None
    radius: float | None = None

    def __post_init__(self) -> None:
        if (self.k is None) == (self.radius is None):
            raise ValueError("give exactly one of k or radius")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be positive")
        if self.radius is not None and not 0.0 <= self.radius <= 1.0:
            raise ValueError("radius must lie in [0, 1]")


@dataclass
class CandidateSet:
    ids: list[int]
    vectors: dict[int, SparseVector]
    distances: dict[int, float]
    stale: int = 0
    raw: int = 0  # distinct ids before validation

    def __len__(self) -> int:
        return len(self.ids)

    def ranked(self) -> list[tuple[int, float]]:
        return sorted(((i, self.distances[i]) for i in self.ids), key=lambda p: (p[1], p[0]))


@dataclass
class Neighbor:
    id: int
    distance: float
    vector: SparseVector = field(repr=False)


class Store:
    """A persistent forest of LSH tables backed by a partitioned main table."""

    def __init__(self, dim: int, cfg: TableConfig | None = None, data_dir: str | Path | None = None,
                 workers: int = 1, instrument: bool = False, engine_cls=Engine, **engine_kw) -> None:
        if dim < 1:
            raise ValueError("dim must be positive")
        self.cfg = cfg or TableConfig()
        self.dim = dim
        self.persistent = data_dir is not None
        if data_dir is not None:
            Path(data_dir).mkdir(parents=True, exist_ok=True)
            write_config(Path(data_dir) / CONFIG_FILE, self.cfg, dim=dim)
        self.engine = engine_cls(self.cfg, dim, data_dir, workers=workers, instrument=instrument, **engine_kw)
        self.router = self.engine.router
        self._lock = threading.Lock()
        self.stale_drops = 0

    @classmethod
    def open(cls, data_dir: str | Path, workers: int = 1, **kw) -> "Store":
        cfg, extra = read_config(Path(data_dir) / CONFIG_FILE)
        if "dim" not in extra:
            raise ValueError(f"{data_dir}: config lacks dim")
        return cls(int(extra["dim"]), cfg, data_dir, workers=workers, **kw)

    @property
    def data_dir(self) -> Path:
        return self.engine.data_dir

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- writes ---------------------------------------------------------------

    def put_async(self, v: SparseVector) -> Handle:
        return self.engine.submit(Request("put", v))

    def put(self, v: SparseVector) -> None:
        self.put_async(v).result()

    def put_many(self, vectors: Iterable[SparseVector]) -> int:
        handles = [self.put_async(v) for v in vectors]
        for h in handles:
            h.result()
        return len(handles)

    def remove(self, id: int) -> bool:
        replies = self.engine.submit(Request("remove", id)).result()
        return any(r.op == "main.remove" and r.value is not None for r in replies)

    def flush(self) -> int:
        """Seal every non-empty partition; returns the number of new snapshots."""
        return sum(r.value is not None for r in self.engine.submit(Request("flush")).result())

    def merge(self) -> int:
        return sum(r.value is not None for r in self.engine.submit(Request("merge")).result())

    # -- reads ---------------------------------------------------------------

    def get(self, id: int) -> SparseVector | None:
        (reply,) = self.engine.submit(Request("resolve", (id,))).result()
        return reply.value[id]

    def get_candidates(self, q: SparseVector) -> CandidateSet:
        """The candidate set: every id sharing a terminal bucket with ``q``.

        Entries read from sealed snapshots are checked against the current
        version of their vector and dropped when it no longer hashes there.
        """
        replies = self.engine.submit(Request("get-candidates", q)).result()
        live: set[int] = set()
        sealed: dict[int, set[tuple[int, int]]] = {}
        for rep in replies:
            table = rep.owner[0]
            for e in rep.value:
                if e.sealed:
                    sealed.setdefault(e.id, set()).add((table, e.hash))
                else:
                    live.add(e.id)
        wanted = live | sealed.keys()
        resolved: dict[int, SparseVector | None] = {}
        if wanted:
            for rep in self.engine.submit(Request("resolve", tuple(sorted(wanted)))).result():
                resolved.update(rep.value)
        ids: list[int] = []
        vectors: dict[int, SparseVector] = {}
        stale = 0
        for id in sorted(wanted):
            v = resolved.get(id)
            if v is None or (id not in live and not self._still_hashes(v, sealed[id])):
                stale += 1
                continue
            ids.append(id)
            vectors[id] = v
        distances = {id: angular_distance(q, vectors[id]) for id in ids}
        if stale:
            with self._lock:
                self.stale_drops += stale
        return CandidateSet(ids, vectors, distances, stale, len(wanted))

    def _still_hashes(self, v: SparseVector, places: set[tuple[int, int]]) -> bool:
        keys = self.router.keys(v)
        return any(self.router.tree_hash(keys[table - 1]) == h for table, h in places)

    def query(self, spec: QuerySpec | SparseVector, k: int | None = None,
              radius: float | None = None) -> list[Neighbor]:
        if isinstance(spec, SparseVector):
            spec = QuerySpec(spec, k, radius)
        cands = self.get_candidates(spec.vector)
        ranked = cands.ranked()
        if spec.radius is not None:
            ranked = [p for p in ranked if p[1] <= spec.radius]
        else:
            ranked = ranked[: spec.k]
        return [Neighbor(i, d, cands.vectors[i]) for i, d in ranked]

    # -- lifecycle / inspection -------------------------------------------------

    def stats(self) -> dict:
        replies = self.engine.submit(Request("stats")).result()
        parts = sorted((r.value for r in replies), key=lambda s: (s["table"], s["partition"]))
        main = [p for p in parts if p["table"] == 0]
        return {
            "partitions": parts,
            "main_leaves": sum(p["live_records"] + p["sealed_records"] for p in main),
            "snapshots": sum(p["snapshots"] for p in parts),
            "stale_drops": self.stale_drops,
            "violations": self.engine.violations,
        }

    def quiesce(self, timeout: float | None = 60.0) -> None:
        self.engine.quiesce(timeout)
        self.engine.restart()

    def close(self) -> None:
        """Shut down; a store with its own data directory seals live data first."""
        if self.persistent and self.engine.workers:
            try:
                self.flush()
            finally:
                self.engine.close()
        else:
            self.engine.close()


__all__ = ["CONFIG_FILE", "CandidateSet", "Neighbor", "QuerySpec", "Store"]
