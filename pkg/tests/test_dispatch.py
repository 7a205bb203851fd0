import threading

import numpy as np
import pytest

import hashforest.dispatch as dispatch
from hashforest.dispatch import (
    Engine,
    EngineClosed,
    OwnerError,
    QuiesceTimeout,
    Request,
    apply_message,
)
from hashforest.forest import TableConfig
from hashforest.partition import Partition

from conftest import random_vectors

CFG = TableConfig(tables=3, part_bits=2, tree_bits=2, fanout=16, bucket_cap=4,
                  arena_bytes=8 << 20, snapshot_bytes=8 << 20)
DIM = 12


@pytest.fixture
def engine(tmp_path):
    e = Engine(CFG, DIM, tmp_path, workers=2, instrument=True)
    yield e
    e.close()


def test_request_kind_validated():
    with pytest.raises(ValueError):
        Request("frobnicate")


def test_owner_grid(engine):
    assert len(engine.owners) == (CFG.tables + 1) * CFG.n_partitions


def test_put_fans_out_one_message_per_table(engine):
    v = random_vectors(1, DIM)[0]
    replies = engine.submit(Request("put", v)).result(5)
    ops = sorted(r.op for r in replies)
    assert ops == ["lsh.insert"] * CFG.tables + ["main.replace"]
    assert sorted({r.owner[0] for r in replies}) == list(range(CFG.tables + 1))


def test_repeat_put_sends_no_lsh_messages(engine):
    v = random_vectors(1, DIM)[0]
    engine.submit(Request("put", v)).result(5)
    replies = engine.submit(Request("put", v)).result(5)
    assert [r.op for r in replies] == ["main.replace"]


def test_update_removes_old_routes(engine):
    v = random_vectors(1, DIM)[0]
    w = type(v).from_dense(v.id, -v.to_dense())
    engine.submit(Request("put", v)).result(5)
    replies = engine.submit(Request("put", w)).result(5)
    ops = [r.op for r in replies]
    assert ops.count("lsh.remove") == ops.count("lsh.insert") == CFG.tables


def test_get_candidates_one_message_per_table(engine):
    q = random_vectors(1, DIM)[0]
    replies = engine.submit(Request("get-candidates", q)).result(5)
    assert len(replies) == CFG.tables and {r.op for r in replies} == {"lsh.collect"}


def test_dim_checked_at_submit(engine):
    with pytest.raises(ValueError):
        engine.submit(Request("put", random_vectors(1, DIM + 1)[0]))


def test_fifo_per_client(engine):
    rng = np.random.default_rng(0)
    versions = [type(random_vectors(1, DIM)[0]).from_dense(7, rng.standard_normal(DIM)) for _ in range(200)]
    handles = [engine.submit(Request("put", v)) for v in versions]
    for h in handles:
        h.result(5)
    (reply,) = engine.submit(Request("resolve", (7,))).result(5)
    assert reply.value[7] == versions[-1]
    main_key = engine.router.route_main(7)[0][:2]
    logged = [args[1] for op, args in engine.owners[main_key].log if op == "main.replace"]
    assert logged == versions


def test_quiesce_idle_and_closed(engine):
    engine.quiesce(1)
    with pytest.raises(EngineClosed):
        engine.submit(Request("stats"))
    engine.restart()
    engine.submit(Request("stats")).result(5)


def test_quiesce_timeout_names_stuck_owner(engine, monkeypatch):
    gate = threading.Event()
    real = dispatch.apply_message

    def slow(router, part, op, args):
        if op == "stats":
            gate.wait(5)
        return real(router, part, op, args)

    monkeypatch.setattr(dispatch, "apply_message", slow)
    h = engine.submit(Request("stats"))
    with pytest.raises(QuiesceTimeout) as err:
        engine.quiesce(0.2)
    assert err.value.stuck
    gate.set()
    h.result(5)
    engine.quiesce(5)


def test_owner_error_reported(engine, monkeypatch):
    def broken(router, part, op, args):
        raise RuntimeError("boom")

    monkeypatch.setattr(dispatch, "apply_message", broken)
    with pytest.raises(OwnerError) as err:
        engine.submit(Request("stats")).result(5)
    assert isinstance(err.value.cause, RuntimeError)
    engine.quiesce(5)


def test_backpressure_small_mailbox(tmp_path):
    e = Engine(CFG, DIM, tmp_path, workers=1, mailbox_cap=2, batch=1)
    handles = [e.submit(Request("put", v)) for v in random_vectors(300, DIM)]
    for h in handles:
        h.result(10)
    e.quiesce(5)
    e.restart()
    stats = e.submit(Request("stats")).result(5)
    main = sum(r.value["live_records"] for r in stats if r.owner[0] == 0)
    assert main == 300
    e.close()


def snapshot_state(engine, vectors):
    state = {k: o.partition.live_buckets() for k, o in engine.owners.items()}
    values = engine.submit(Request("resolve", tuple(vectors))).result(5)
    got = {}
    for r in values:
        got.update(r.value)
    return state, got


def run_mixed(tmp_path, workers, clients=4, per_client=150, seed=0):
    e = Engine(CFG, DIM, tmp_path, workers=workers, instrument=True)
    pool = random_vectors(60, DIM, seed=seed)

    def client(c):
        rng = np.random.default_rng(seed * 100 + c)
        for _ in range(per_client):
            i = int(rng.integers(len(pool)))
            if rng.random() < 0.15:
                e.submit(Request("remove", pool[i].id)).result(10)
            else:
                w = type(pool[i]).from_dense(pool[i].id, rng.standard_normal(DIM))
                e.submit(Request("put", w)).result(10)

    threads = [threading.Thread(target=client, args=(c,)) for c in range(clients)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    e.quiesce(10)
    return e, [v.id for v in pool]


@pytest.mark.parametrize("workers", [1, 4])
def test_serial_replay_reproduces_state(tmp_path, workers):
    e, ids = run_mixed(tmp_path / "run", workers)
    assert e.violations == 0
    e.restart()
    live, values = snapshot_state(e, ids)
    for key, owner in e.owners.items():
        replay = Partition(key[0], key[1], CFG, tmp_path / "replay", load=False)
        for op, args in owner.log:
            if op in ("stats", "main.get", "lsh.collect"):
                continue
            apply_message(e.router, replay, op, args)
        assert replay.live_buckets() == live[key], key
        if key[0] == 0:
            for id in ids:
                loc, h = e.router.route_main(id)
                if loc[:2] == key:
                    assert replay.main_get(loc.tree, id, h) == values[id]
    e.close()


def test_lsh_tables_agree_with_main(tmp_path):
    e, ids = run_mixed(tmp_path, workers=4, seed=3)
    e.restart()
    _, values = snapshot_state(e, ids)
    expected = {t: set() for t in range(1, CFG.tables + 1)}
    for id, v in values.items():
        if v is None:
            continue
        for t, (loc, _) in enumerate(dispatch._lsh_routes(e.router, v), 1):
            expected[t].add((loc.partition, loc.tree, id))
    for t in range(1, CFG.tables + 1):
        found = set()
        for p in range(CFG.n_partitions):
            for tree, buckets in e.owners[(t, p)].partition.live_buckets().items():
                found |= {(p, tree, id) for ids_ in buckets.values() for id in ids_}
        assert found == expected[t]
    e.close()


def test_worker_counts_give_same_results(tmp_path):
    vs = random_vectors(400, DIM, seed=9)
    probes = random_vectors(30, DIM, seed=10, first_id=5000)
    out = []
    for n in (1, 4):
        e = Engine(CFG, DIM, tmp_path / str(n), workers=n)
        for h in [e.submit(Request("put", v)) for v in vs]:
            h.result(10)
        res = []
        for q in probes:
            res.append(sorted(x.id for r in e.submit(Request("get-candidates", q)).result(5) for x in r.value))
        out.append(res)
        e.close()
    assert out[0] == out[1]
