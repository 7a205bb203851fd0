"""Actor-style request dispatch.

Requests are hashed on the caller's thread (stateless, fully parallel) and
turned into messages addressed to partition owners. Each owner has a FIFO
mailbox and is executed by at most one worker at a time, so partition state
needs no locks. Workers take a runnable owner, drain up to ``batch`` of its
messages and requeue it at the back if more are waiting.
"""

from __future__ import annotations

import collections
import logging
import queue
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, NamedTuple

from .forest import MAIN_TABLE, Router, TableConfig, TreeLocator
from .partition import Partition
from .vectors import SparseVector

log = logging.getLogger(__name__)

DEFAULT_BATCH = 64
DEFAULT_MAILBOX = 1 << 16

REQUEST_KINDS = ("put", "get-candidates", "remove", "resolve", "flush", "merge", "stats")


class EngineError(Exception):
    """Base class for dispatch failures."""


class EngineClosed(EngineError):
    """The engine is quiesced or shut down and rejects new requests."""


class OwnerError(EngineError):
    def __init__(self, owner: tuple[int, int], op: str, cause: BaseException) -> None:
        super().__init__(f"owner t{owner[0]}/p{owner[1]} failed on {op}: {cause!r}")
        self.owner = owner
        self.op = op
        self.cause = cause


class QuiesceTimeout(EngineError):
    def __init__(self, stuck: list[tuple[int, int]]) -> None:
        super().__init__(f"quiesce timed out; owners with pending messages: {stuck}")
        self.stuck = stuck


@dataclass(frozen=True)
class Request:
    kind: str
    payload: Any = None

    def __post_init__(self) -> None:
        if self.kind not in REQUEST_KINDS:
            raise ValueError(f"unknown request kind {self.kind!r}")


class Reply(NamedTuple):
    owner: tuple[int, int]
    op: str
    value: Any


class Handle:
    """Joinable completion for one request; aggregates every owner reply."""

    def __init__(self, request: Request) -> None:
        self.request = request
        self.submitted = time.perf_counter()
        self.completed: float | None = None
        self._lock = threading.Lock()
        self._done = threading.Event()
        self._pending = 0
        self._armed = False
        self.replies: list[Reply] = []
        self.errors: list[OwnerError] = []

    def _add(self, n: int) -> None:
        with self._lock:
            self._pending += n

    def _arm(self) -> None:
        with self._lock:
            self._armed = True
            self._check()

    def _finish(self, reply: Reply | None = None, error: OwnerError | None = None) -> None:
        with self._lock:
            if reply is not None:
                self.replies.append(reply)
            if error is not None:
                self.errors.append(error)
            self._pending -= 1
            self._check()

    def _check(self) -> None:
        if self._armed and self._pending == 0 and not self._done.is_set():
            self.completed = time.perf_counter()
            self._done.set()

    def done(self) -> bool:
        return self._done.is_set()

    def wait(self, timeout: float | None = None) -> bool:
        return self._done.wait(timeout)

    def result(self, timeout: float | None = None) -> list[Reply]:
        if not self._done.wait(timeout):
            raise TimeoutError(f"{self.request.kind} request not completed within {timeout}s")
        if self.errors:
            raise self.errors[0]
        return self.replies

    @property
    def latency(self) -> float | None:
        return None if self.completed is None else self.completed - self.submitted


@dataclass
class Message:
    op: str
    args: tuple
    handle: Handle


@dataclass
class Owner:
    key: tuple[int, int]
    partition: Partition
    lock: threading.Lock = field(default_factory=threading.Lock)
    mailbox: collections.deque = field(default_factory=collections.deque)
    scheduled: bool = False
    processed: int = 0
    log: list | None = None

    def __post_init__(self) -> None:
        self.space = threading.Condition(self.lock)
        self.exclusive = threading.Lock()


class Engine:
    """Owns every partition and runs messages on a pool of worker threads."""

    def __init__(self, cfg: TableConfig, dim: int, data_dir: str | Path | None = None,
                 workers: int = 1, batch: int = DEFAULT_BATCH, mailbox_cap: int = DEFAULT_MAILBOX,
                 instrument: bool = False) -> None:
        if workers < 1:
            raise ValueError("need at least one worker")
        self.cfg = cfg
        self.dim = dim
        self.router = Router(cfg, dim)
        self._tmp = None
        if data_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="hashforest-")
            data_dir = self._tmp.name
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.batch = batch
        self.mailbox_cap = mailbox_cap
        self.instrument = instrument
        self.violations = 0
        self.owners: dict[tuple[int, int], Owner] = {}
        for table in range(cfg.tables + 1):
            for part in range(cfg.n_partitions):
                p = Partition(table, part, cfg, self.data_dir)
                self.owners[(table, part)] = Owner((table, part), p, log=[] if instrument else None)
        self._state = threading.Condition()
        self._inflight = 0
        self._accepting = False
        self._runnable: queue.Queue = queue.Queue()
        self._threads: list[threading.Thread] = []
        self.run_workers(workers)

    # -- lifecycle -----------------------------------------------------------

    def run_workers(self, n: int) -> None:
        """Start a pool of ``n`` workers and accept requests."""
        if n < 1:
            raise ValueError("need at least one worker")
        if self._threads:
            raise EngineError("workers already running")
        self._threads = [
            threading.Thread(target=self._worker, name=f"hashforest-worker-{i}", daemon=True) for i in range(n)
        ]
        for t in self._threads:
            t.start()
        with self._state:
            self._accepting = True

    @property
    def workers(self) -> int:
        return len(self._threads)

    def quiesce(self, timeout: float | None = 60.0) -> None:
        """Stop accepting requests and wait until every mailbox is drained."""
        with self._state:
            self._accepting = False
            if not self._state.wait_for(lambda: self._inflight == 0, timeout):
                stuck = sorted(k for k, o in self.owners.items() if o.mailbox or o.scheduled)
                raise QuiesceTimeout(stuck)

    def restart(self) -> None:
        with self._state:
            self._accepting = True

    def close(self, timeout: float | None = 60.0) -> None:
        if not self._threads:
            return
        try:
            self.quiesce(timeout)
        finally:
            for _ in self._threads:
                self._runnable.put(None)
            for t in self._threads:
                t.join(timeout)
            self._threads = []
            for o in self.owners.values():
                o.partition.close()
            if self._tmp is not None:
                self._tmp.cleanup()
                self._tmp = None

    # -- hashing stage -----------------------------------------------------------

    def submit(self, request: Request) -> Handle:
        handle = Handle(request)
        with self._state:
            if not self._accepting:
                raise EngineClosed(f"engine not accepting {request.kind} requests")
        self._deliver(handle, self._plan(request), external=True)
        handle._arm()
        return handle

    def _plan(self, request: Request) -> list[tuple[tuple[int, int], str, tuple]]:
        kind, payload = request.kind, request.payload
        r = self.router
        if kind == "put":
            v: SparseVector = payload
            if v.dim != self.dim:
                raise ValueError(f"vector dim {v.dim} != store dim {self.dim}")
            keys = r.keys(v)
            routes = [(loc, r.tree_hash(k)) for loc, k in zip(r.route_keys(keys), keys)]
            loc, h = r.route_main(v.id)
            return [(loc[:2], "main.replace", (loc.tree, v, h, routes))]
        if kind == "remove":
            loc, h = r.route_main(int(payload))
            return [(loc[:2], "main.remove", (loc.tree, int(payload), h))]
        if kind == "get-candidates":
            q: SparseVector = payload
            if q.dim != self.dim:
                raise ValueError(f"query dim {q.dim} != store dim {self.dim}")
            keys = r.keys(q)
            return [(loc[:2], "lsh.collect", (loc.tree, r.tree_hash(k)))
                    for loc, k in zip(r.route_keys(keys), keys)]
        if kind == "resolve":
            groups: dict[tuple[int, int], list] = {}
            for id in payload:
                loc, h = r.route_main(id)
                groups.setdefault(loc[:2], []).append((loc.tree, id, h))
            return [(key, "main.get", (tuple(items),)) for key, items in groups.items()]
        if kind in ("flush", "merge", "stats"):
            op = {"flush": "seal", "merge": "merge", "stats": "stats"}[kind]
            return [(key, op, ()) for key in self.owners]
        raise ValueError(kind)

    # -- mailboxes ---------------------------------------------------------------

    def _deliver(self, handle: Handle, plan: Iterable[tuple[tuple[int, int], str, tuple]],
                 external: bool) -> None:
        plan = list(plan)
        handle._add(len(plan))
        with self._state:
            self._inflight += len(plan)
        for key, op, args in plan:
            self._enqueue(self.owners[key], Message(op, args, handle), external)

    def _enqueue(self, owner: Owner, msg: Message, external: bool) -> None:
        with owner.lock:
            # only client submissions wait for space; owner-to-owner sends
            # never block so a worker cannot deadlock on a full mailbox
            if external:
                while len(owner.mailbox) >= self.mailbox_cap:
                    owner.space.wait()
            owner.mailbox.append(msg)
            if not owner.scheduled:
                owner.scheduled = True
                self._runnable.put(owner)

    def _worker(self) -> None:
        while True:
            owner = self._runnable.get()
            if owner is None:
                return
            self._activate(owner)

    def _activate(self, owner: Owner) -> None:
        held = owner.exclusive.acquire(blocking=False)
        if not held:
            with self._state:
                self.violations += 1
            log.error("exclusivity violated on owner %s", owner.key)
        try:
            with owner.lock:
                n = min(self.batch, len(owner.mailbox))
                batch = [owner.mailbox.popleft() for _ in range(n)]
                owner.space.notify_all()
            for msg in batch:
                self._process(owner, msg)
        finally:
            if held:
                owner.exclusive.release()
            with owner.lock:
                if owner.mailbox:
                    self._runnable.put(owner)
                else:
                    owner.scheduled = False

    def _process(self, owner: Owner, msg: Message) -> None:
        try:
            if owner.log is not None:
                owner.log.append((msg.op, msg.args))
            value, spawned = apply_message(self.router, owner.partition, msg.op, msg.args)
            owner.processed += 1
            if spawned:
                self._deliver(msg.handle, spawned, external=False)
            msg.handle._finish(Reply(owner.key, msg.op, value))
        except Exception as exc:  # reported to the caller through the handle
            log.debug("owner %s failed on %s", owner.key, msg.op, exc_info=True)
            msg.handle._finish(error=OwnerError(owner.key, msg.op, exc))
        finally:
            with self._state:
                self._inflight -= 1
                if self._inflight == 0:
                    self._state.notify_all()

    # -- introspection -----------------------------------------------------------

    def partitions(self) -> Iterable[Partition]:
        return (o.partition for o in self.owners.values())

    def load_histogram(self) -> dict[tuple[int, int], int]:
        return {k: o.processed for k, o in self.owners.items()}


def apply_message(router: Router, part: Partition, op: str, args: tuple):
    """Execute one message against a partition.

    Returns ``(value, spawned)`` where ``spawned`` lists follow-up messages
    as ``(owner key, op, args)``. Replaying a partition's message log through
    this function with the spawned messages ignored reproduces its state.
    """
    if op == "lsh.insert":
        return part.lsh_insert(*args), ()
    if op == "lsh.remove":
        return part.lsh_remove(*args), ()
    if op == "lsh.collect":
        return part.collect(*args), ()
    if op == "main.replace":
        tree, v, h, routes = args
        old = part.main_replace(tree, v, h)
        old_routes = _lsh_routes(router, old) if old is not None else [None] * len(routes)
        spawned = []
        for prev, (loc, th) in zip(old_routes, routes):
            if prev is not None and prev == (loc, th):
                continue
            if prev is not None:
                ploc, pth = prev
                spawned.append((ploc[:2], "lsh.remove", (ploc.tree, v.id, pth)))
            spawned.append((loc[:2], "lsh.insert", (loc.tree, v.id, th)))
        return old, spawned
    if op == "main.remove":
        tree, id, h = args
        old = part.main_remove(tree, id, h)
        if old is None:
            return None, ()
        spawned = [(loc[:2], "lsh.remove", (loc.tree, id, th)) for loc, th in _lsh_routes(router, old)]
        return old, spawned
    if op == "main.get":
        (items,) = args
        return {id: part.main_get(tree, id, h) for tree, id, h in items}, ()
    if op == "seal":
        snap = part.seal()
        return (snap.timestamp if snap is not None else None), ()
    if op == "merge":
        snap = part.merge()
        return (snap.timestamp if snap is not None else None), ()
    if op == "stats":
        return part.stats(), ()
    raise EngineError(f"unknown message op {op!r}")


def _lsh_routes(router: Router, v: SparseVector) -> list[tuple[TreeLocator, int]]:
    keys = router.keys(v)
    return [(loc, router.tree_hash(k)) for loc, k in zip(router.route_keys(keys), keys)]


__all__ = [
    "Engine",
    "EngineClosed",
    "EngineError",
    "Handle",
    "MAIN_TABLE",
    "OwnerError",
    "QuiesceTimeout",
    "Reply",
    "Request",
    "apply_message",
]
