"""``hashforest`` command line: ingest, query, maintenance and benchmarks."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..arena import ArenaError
from ..dispatch import EngineError
from ..forest import TableConfig
from ..snapshot import SnapshotError
from ..store import CONFIG_FILE, Store
from . import data
from .workload import ARMS, format_table, read_csv, run_workload, write_csv, WorkloadSpec

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_STORAGE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(message)


def _config_flags(p: argparse.ArgumentParser) -> None:
    d = TableConfig()
    g = p.add_argument_group("table configuration")
    g.add_argument("--tables", type=int, default=d.tables, help="number of LSH tables")
    g.add_argument("--part-bits", type=int, default=d.part_bits, help="log2 partitions per table")
    g.add_argument("--tree-bits", type=int, default=d.tree_bits, help="log2 trees per partition")
    g.add_argument("--bucket-cap", type=int, default=d.bucket_cap, help="chain length before a spread")
    g.add_argument("--fanout", type=int, default=d.fanout, help="directory fanout (power of two)")
    g.add_argument("--key-bits", type=int, default=d.key_bits, help="bits per compound key")
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--arena-mb", type=int, default=d.arena_bytes >> 20)
    g.add_argument("--snapshot-mb", type=int, default=d.snapshot_bytes >> 20)
    p.add_argument("--workers", type=int, default=1)


def _cfg(args) -> TableConfig:
    return TableConfig(
        tables=args.tables, part_bits=args.part_bits, tree_bits=args.tree_bits,
        bucket_cap=args.bucket_cap, fanout=args.fanout, key_bits=args.key_bits, seed=args.seed,
        arena_bytes=args.arena_mb << 20, snapshot_bytes=args.snapshot_mb << 20,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hashforest", description="Concurrent LSH store with snapshot persistence.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="load vectors into a store")
    p.add_argument("path")
    p.add_argument("--format", choices=data.FORMATS, default="csv")
    p.add_argument("--data-dir", required=True)
    _config_flags(p)

    p = sub.add_parser("query", help="nearest neighbours for each probe in a file")
    p.add_argument("path")
    p.add_argument("--format", choices=data.FORMATS, default="csv")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--k", type=int)
    mode.add_argument("--radius", type=float)

    for verb, text in (("flush", "seal live data into snapshots"), ("merge", "merge snapshots per partition")):
        p = sub.add_parser(verb, help=text)
        p.add_argument("--data-dir", required=True)
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("serve-bench", help="run a mixed workload and report metrics")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset", help="vector file to load")
    src.add_argument("--synthetic", type=int, metavar="N", help="generate N clustered vectors")
    p.add_argument("--format", choices=data.FORMATS, default="csv")
    p.add_argument("--dim", type=int, default=50, help="dimension of synthetic data")
    p.add_argument("--clusters", type=int, default=20)
    p.add_argument("--requests", type=int, default=2000)
    p.add_argument("--put-fraction", type=float, default=0.5)
    p.add_argument("--clients", type=int, default=4)
    p.add_argument("--preload", type=int, help="vectors loaded before timing (default: half)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--radius", type=float)
    p.add_argument("--eval-queries", type=int, default=50)
    p.add_argument("--arms", default="actor", help=f"comma separated subset of {','.join(ARMS)}")
    p.add_argument("--data-dir", help="store directory (default: temporary)")
    p.add_argument("--out", help="CSV report path")
    _config_flags(p)

    p = sub.add_parser("report", help="print a CSV report as a table")
    p.add_argument("path")
    return parser


def _open(args) -> Store:
    if not (Path(args.data_dir) / CONFIG_FILE).exists():
        raise UsageError(f"{args.data_dir} is not a store (no {CONFIG_FILE})")
    return Store.open(args.data_dir, workers=args.workers)


def cmd_ingest(args) -> int:
    ds = data.ingest(args.path, args.format)
    conf = Path(args.data_dir) / CONFIG_FILE
    if conf.exists():
        store = Store.open(args.data_dir, workers=args.workers)
        if store.dim != ds.dim:
            store.close()
            raise data.DataError(f"{args.path}: dim {ds.dim} does not match store dim {store.dim}")
    else:
        store = Store(ds.dim, _cfg(args), args.data_dir, workers=args.workers)
    with store:
        n = store.put_many(ds)
    print(f"ingested {n} vectors into {args.data_dir}")
    return EXIT_OK


def cmd_query(args) -> int:
    probes = data.ingest(args.path, args.format)
    with _open(args) as store:
        if probes.dim != store.dim:
            raise data.DataError(f"{args.path}: dim {probes.dim} does not match store dim {store.dim}")
        for q in probes:
            if args.radius is not None:
                hits = store.query(q, radius=args.radius)
            else:
                hits = store.query(q, k=args.k or 10)
            for rank, n in enumerate(hits, 1):
                print(f"{q.id}\t{rank}\t{n.id}\t{n.distance:.6f}")
    return EXIT_OK


def cmd_flush(args) -> int:
    with _open(args) as store:
        print(f"sealed {store.flush()} partitions")
    return EXIT_OK


def cmd_merge(args) -> int:
    with _open(args) as store:
        print(f"merged {store.merge()} partitions")
    return EXIT_OK


def cmd_serve_bench(args) -> int:
    if args.dataset:
        ds = data.ingest(args.dataset, args.format)
    else:
        ds = data.clustered(args.synthetic, args.dim, args.clusters, seed=args.seed)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    bad = [a for a in arms if a not in ARMS]
    if bad or not arms:
        raise UsageError(f"unknown arms {bad}; choose from {ARMS}")
    preload = len(ds) // 2 if args.preload is None else args.preload
    try:
        spec = WorkloadSpec(
            requests=args.requests, put_fraction=args.put_fraction, query_fraction=1.0 - args.put_fraction,
            clients=args.clients, workers=args.workers, seed=args.seed, k=args.k, radius=args.radius,
            preload=preload, eval_queries=args.eval_queries,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = _cfg(args)
    reports = []
    for arm in arms:
        sub = None if args.data_dir is None else Path(args.data_dir) / arm
        reports.append(run_workload(spec, ds, cfg, arm, sub))
    print(format_table([r.row() for r in reports]))
    if args.out:
        write_csv(reports, args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        rows = read_csv(args.path)
    except ValueError as exc:
        raise data.DataError(str(exc)) from None
    print(format_table(rows))
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest, "query": cmd_query, "flush": cmd_flush, "merge": cmd_merge,
    "serve-bench": cmd_serve_bench, "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hashforest: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"hashforest: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataError, FileNotFoundError) as exc:
        print(f"hashforest: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SnapshotError, ArenaError, EngineError, OSError) as exc:
        print(f"hashforest: storage error: {exc}", file=sys.stderr)
        return EXIT_STORAGE
    except ValueError as exc:
        # configuration values rejected by the store
        print(f"hashforest: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
