"""Mixed put/query workloads, comparison arms and report formatting."""

from __future__ import annotations

import csv
import os
import threading
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..dispatch import Engine, Message, Owner
from ..forest import TableConfig
from ..store import Store
from .data import Dataset
from .metrics import MISSING_PENALTY, brute_force_knn, candidate_overhead, error_ratio

CSV_SCHEMA = 1
ARMS = ("actor", "single-tree", "locked")


class LockedEngine(Engine):
    """Baseline arm: any worker runs any message, guarded by a per-partition lock.

    Messages go to one shared queue instead of per-owner mailboxes, so there
    is no batching and no ownership; workers contend on partition locks.
    """

    def _enqueue(self, owner: Owner, msg: Message, external: bool) -> None:
        self._runnable.put((owner, msg))

    def _worker(self) -> None:
        while True:
            item = self._runnable.get()
            if item is None:
                return
            owner, msg = item
            with owner.exclusive:
                self._process(owner, msg)


@dataclass(frozen=True)
class WorkloadSpec:
    requests: int = 1000
    put_fraction: float = 0.5
    query_fraction: float = 0.5
    clients: int = 4
    workers: int = 1
    seed: int = 0
    k: int = 10
    radius: float | None = None
    preload: int = 0
    window: int = 64
    eval_queries: int = 50
    penalty: float = MISSING_PENALTY

    def __post_init__(self) -> None:
        if abs(self.put_fraction + self.query_fraction - 1.0) > 1e-9:
            raise ValueError("put and query fractions must sum to 1")
        if min(self.put_fraction, self.query_fraction) < 0:
            raise ValueError("fractions must be non-negative")
        if self.requests < 0 or self.clients < 1 or self.workers < 1 or self.window < 1:
            raise ValueError("requests >= 0, clients/workers/window >= 1")
        if self.query_fraction > 0 and self.preload < 1:
            raise ValueError("queries need a preloaded store")


def request_stream(spec: WorkloadSpec, dataset: Dataset) -> list[tuple[str, int]]:
    """Deterministic ``(op, dataset index)`` sequence for a seed.

    Puts walk the vectors after the preloaded prefix (wrapping around);
    queries probe a random preloaded vector.
    """
    rng = np.random.default_rng(spec.seed)
    is_put = rng.random(spec.requests) < spec.put_fraction
    probes = rng.integers(max(spec.preload, 1), size=spec.requests)
    base = spec.preload if len(dataset) > spec.preload else 0
    fresh = len(dataset) - base
    out = []
    n_put = 0
    for put, probe in zip(is_put, probes):
        if put:
            out.append(("put", base + n_put % fresh))
            n_put += 1
        else:
            out.append(("query", int(probe)))
    return out


@dataclass
class MetricsReport:
    arm: str
    workers: int
    clients: int
    requests: int
    puts: int
    queries: int
    elapsed_s: float
    throughput_ops: float
    lat_min_us: float
    lat_avg_us: float
    lat_max_us: float
    lat_p99_us: float
    error_ratio: float | None
    overhead_sum: float
    stale_drops: int
    partitions: int
    max_partition_load: int
    mean_partition_load: float
    histogram: dict = field(default_factory=dict, repr=False)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("histogram")
        return {"schema": CSV_SCHEMA, **d}


CSV_COLUMNS = ["schema"] + [f.name for f in fields(MetricsReport) if f.name != "histogram"]


def _latency_stats(lat: list[float]) -> tuple[float, float, float, float]:
    if not lat:
        return 0.0, 0.0, 0.0, 0.0
    a = np.asarray(lat) * 1e6
    return float(a.min()), float(a.mean()), float(a.max()), float(np.percentile(a, 99))


def arm_config(cfg: TableConfig, arm: str) -> TableConfig:
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; choose from {ARMS}")
    return cfg.replace(part_bits=0, tree_bits=0) if arm == "single-tree" else cfg


def run_workload(spec: WorkloadSpec, dataset: Dataset, cfg: TableConfig, arm: str = "actor",
                 data_dir: str | os.PathLike | None = None) -> MetricsReport:
    engine_cls = LockedEngine if arm == "locked" else Engine
    store = Store(dataset.dim, arm_config(cfg, arm), data_dir, workers=spec.workers, engine_cls=engine_cls)
    try:
        return _drive(store, spec, dataset, arm)
    finally:
        store.close()


def _drive(store: Store, spec: WorkloadSpec, dataset: Dataset, arm: str) -> MetricsReport:
    if spec.preload:
        store.put_many(dataset.vectors[: spec.preload])
        store.quiesce()
    baseline_load = store.engine.load_histogram()
    stale_before = store.stale_drops
    stream = request_stream(spec, dataset)
    buffers: list[list[float]] = [[] for _ in range(spec.clients)]
    errors: list[BaseException] = []

    def client(c: int) -> None:
        lat = buffers[c]
        pending = []
        try:
            for op, idx in stream[c :: spec.clients]:
                v = dataset[idx]
                if op == "put":
                    pending.append(store.put_async(v))
                    if len(pending) >= spec.window:
                        h = pending.pop(0)
                        h.result()
                        lat.append(h.latency)
                else:
                    t0 = time.perf_counter()
                    if spec.radius is not None:
                        store.query(v, radius=spec.radius)
                    else:
                        store.query(v, k=spec.k)
                    lat.append(time.perf_counter() - t0)
            for h in pending:
                h.result()
                lat.append(h.latency)
        except BaseException as exc:  # surfaced after join
            errors.append(exc)

    threads = [threading.Thread(target=client, args=(c,)) for c in range(spec.clients)]
    start = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    store.quiesce()
    elapsed = time.perf_counter() - start
    if errors:
        raise errors[0]

    latencies = [x for buf in buffers for x in buf]
    puts = sum(op == "put" for op, _ in stream)
    r, e_sum = _evaluate(store, spec, dataset, stream)
    load = store.engine.load_histogram()
    hist = {k: load[k] - baseline_load.get(k, 0) for k in load}
    values = list(hist.values())
    lo, avg, hi, p99 = _latency_stats(latencies)
    return MetricsReport(
        arm=arm, workers=spec.workers, clients=spec.clients, requests=len(stream), puts=puts,
        queries=len(stream) - puts, elapsed_s=elapsed,
        throughput_ops=len(stream) / elapsed if elapsed > 0 else 0.0,
        lat_min_us=lo, lat_avg_us=avg, lat_max_us=hi, lat_p99_us=p99,
        error_ratio=r, overhead_sum=e_sum, stale_drops=store.stale_drops - stale_before,
        partitions=len(hist), max_partition_load=max(values, default=0),
        mean_partition_load=float(np.mean(values)) if values else 0.0, histogram=hist,
    )


def _evaluate(store: Store, spec: WorkloadSpec, dataset: Dataset,
              stream: list[tuple[str, int]]) -> tuple[float | None, float]:
    """Error ratio and summed overhead on the quiesced store, for the first query probes."""
    probes = [idx for op, idx in stream if op == "query"][: spec.eval_queries]
    if not probes:
        return None, 0.0
    stored = set(range(spec.preload))
    stored.update(idx for op, idx in stream if op == "put")
    contents = [dataset[i] for i in sorted(stored)]
    k = min(spec.k, len(contents))
    ratios, e_sum = [], 0.0
    for idx in probes:
        q = dataset[idx]
        cands = store.get_candidates(q)
        found = [d for _, d in cands.ranked()[:k]]
        truth = [d for _, d in brute_force_knn(contents, q, k)]
        ratios.append(error_ratio(found, truth, k, spec.penalty))
        e = candidate_overhead(len(cands), k)
        if e is not None:
            e_sum += e
    return float(np.mean(ratios)), e_sum


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def format_table(rows: list[dict]) -> str:
    cols = [c for c in CSV_COLUMNS if c != "schema"]
    cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def write_csv(reports: list[MetricsReport], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for rep in reports:
            w.writerow({k: ("" if v is None else v) for k, v in rep.row().items()})


def read_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for raw in reader:
            if int(raw["schema"]) != CSV_SCHEMA:
                raise ValueError(f"{path}: schema {raw['schema']} not supported")
            row = {}
            for k, v in raw.items():
                if v == "":
                    row[k] = None
                elif k == "arm":
                    row[k] = v
                else:
                    num = float(v)
                    row[k] = int(num) if num.is_integer() and "." not in v else num
            rows.append(row)
        return rows
