import socket
import threading
import time

import pytest

from mpignite import LocalContext, Routing, codec, parallelize_func, register
from mpignite.cluster import LocalCluster, Master, Worker, run_worker
from mpignite.errors import JobFailed, RegistryError
from mpignite.runtime import lookup, name_of
from mpignite.transport import Connection
from mpignite.wire import FrameKind, Hello, JobSpec, RankEntry, RankMap, Result


def job_threads():
    return [t for t in threading.enumerate() if t.name.startswith("mpignite-job")]


def test_builder_defers_execution():
    before = len(job_threads())
    calls = []
    job = parallelize_func(lambda world: calls.append(world.rank))
    time.sleep(0.05)
    assert calls == [] and len(job_threads()) == before
    job.execute(3)
    assert sorted(calls) == [0, 1, 2]


def test_single_rank():
    assert parallelize_func(lambda w: w.rank).execute(1) == [0]
    assert parallelize_func(lambda w: w.size).execute(1) == [1]


@register("t_square")
def square(world):
    return world.rank ** 2


@register("t_unit")
def unit(world):
    pass


def test_results_indexed_by_rank(runner):
    assert runner.run("t_square", 4) == [0, 1, 4, 9]
    assert runner.run("t_unit", 5) == [None] * 5


@register("t_size")
def size_of(world):
    return world.size


def test_world_size(runner):
    assert runner.run("t_size", 16) == [16] * 16


def test_closure_scope_capture():
    mat = [[1, 2], [3, 4]]
    vec = [10, 1]
    res = parallelize_func(lambda w: sum(a * b for a, b in zip(mat[w.rank], vec))).execute(2)
    assert res == [12, 34]


@register("t_params")
def with_params(world):
    return world.params[world.rank]


def test_params(runner):
    assert runner.run("t_params", 3, ["a", "b", "c"]) == ["a", "b", "c"]


done_flags = {}


@register("t_one_raises")
def one_raises(world):
    try:
        if world.rank == 2:
            raise ValueError("rank two is unhappy")
        return world.receive((world.rank + 1) % world.size, 5)
    finally:
        done_flags.setdefault(world.params, set()).add(world.rank)


def test_failure_names_rank_and_waits_for_everyone(runner):
    key = repr(runner)
    with pytest.raises(JobFailed) as info:
        runner.run("t_one_raises", 5, key)
    assert info.value.rank == 2
    assert "rank two is unhappy" in info.value.errors[2]
    assert set(info.value.errors) == {0, 1, 2, 3, 4}
    # barrier: every rank had left its function before the driver resumed
    assert done_flags[key] == set(range(5))


@register("t_bad_result")
def bad_result(world):
    return {"not": "encodable"}


def test_unsupported_result_fails(runner):
    with pytest.raises(JobFailed) as info:
        runner.run("t_bad_result", 2)
    assert "EncodeUnsupported" in info.value.errors[info.value.rank]


def test_registry():
    assert lookup("t_square") is square
    assert name_of(square) == "t_square"
    with pytest.raises(RegistryError):
        lookup("nope")
    with pytest.raises(RegistryError):
        register("t_square")(lambda w: 0)
    with pytest.raises(RegistryError):
        name_of(lambda w: 0)


def test_cluster_rejects_unregistered(cluster):
    with pytest.raises(RegistryError):
        cluster.parallelize_func(lambda w: 0).execute(2)
    with pytest.raises(RegistryError):
        cluster.submit("never_registered", 2)


def test_local_context_by_name():
    assert LocalContext().parallelize_func("t_square").execute(3) == [0, 1, 4]
    with pytest.raises(RegistryError):
        LocalContext().parallelize_func("nope")


def test_bad_process_count(cluster):
    with pytest.raises(ValueError):
        parallelize_func(lambda w: 0).execute(0)
    with pytest.raises(ValueError):
        cluster.submit("t_square", 0)


@register("t_where")
def where(world):
    return world.transport.worker_id


def test_round_robin_assignment(cluster):
    hosts = cluster.submit("t_where", 9).result(10)
    ids = sorted(cluster.master.worker_ids)
    assert hosts == [ids[r % 3] for r in range(9)]
    assert all(hosts.count(w) == 3 for w in ids)


def test_sequential_jobs_reuse_cluster(cluster):
    for routing in (Routing.P2P, Routing.MASTER_RELAY, Routing.P2P):
        assert cluster.submit("t_square", 7, None, routing).result(10) == [r * r for r in range(7)]


def test_more_ranks_than_cores(runner):
    assert runner.run("t_square", 64)[-1] == 63 ** 2


# -- raw protocol surfaces ---------------------------------------------------

class FakeMaster:
    def __init__(self):
        self.listener = socket.create_server(("127.0.0.1", 0))
        self.address = self.listener.getsockname()[:2]

    def accept(self):
        sock, _ = self.listener.accept()
        conn = Connection(sock)
        kind, body = conn.recv()
        assert kind is FrameKind.HELLO
        hello = Hello.decode(body)
        conn.send(FrameKind.HELLO, Hello(42, 0, hello.host, hello.port).encode())
        return conn, hello


def start_worker(address):
    out = {}
    t = threading.Thread(target=lambda: out.setdefault("code", run_worker(address)))
    t.start()
    return t, out


def test_worker_reports_unknown_function_and_exits_on_shutdown():
    fm = FakeMaster()
    t, out = start_worker(fm.address)
    conn, hello = fm.accept()
    assert hello.worker_id == 0 and hello.port > 0
    rm = RankMap((RankEntry(0, 42, hello.host, hello.port), RankEntry(1, 42, hello.host, hello.port)))
    conn.send(FrameKind.TASK_ASSIGN,
              JobSpec(1, "no_such_function", 2, (0, 1), rm, Routing.P2P).encode())
    results = []
    for _ in range(2):
        kind, body = conn.recv()
        assert kind is FrameKind.RESULT
        results.append(Result.decode(body))
    assert sorted(r.rank for r in results) == [0, 1]
    assert all(not r.ok and b"no_such_function" in r.data for r in results)
    conn.send(FrameKind.SHUTDOWN)
    t.join(5)
    assert out["code"] == 0


def test_worker_runs_assigned_ranks():
    fm = FakeMaster()
    t, out = start_worker(fm.address)
    conn, hello = fm.accept()
    rm = RankMap(tuple(RankEntry(r, 42, hello.host, hello.port) for r in range(3)))
    conn.send(FrameKind.TASK_ASSIGN, JobSpec(1, "t_square", 3, (0, 1, 2), rm, Routing.P2P).encode())
    got = {}
    for _ in range(3):
        kind, body = conn.recv()
        res = Result.decode(body)
        got[res.rank] = codec.decode(res.data)
    assert got == {0: 0, 1: 1, 2: 4}
    conn.send(FrameKind.SHUTDOWN)
    t.join(5)
    assert out["code"] == 0


def test_worker_exits_nonzero_when_master_vanishes():
    fm = FakeMaster()
    t, out = start_worker(fm.address)
    conn, _ = fm.accept()
    conn.close()
    t.join(5)
    assert out["code"] == 1


def test_worker_cannot_reach_master():
    sock = socket.create_server(("127.0.0.1", 0))
    addr = sock.getsockname()[:2]
    sock.close()
    assert run_worker(addr) == 1


def test_master_protocol_with_raw_worker():
    with Master() as m:
        conn = Connection.connect(*m.address)
        listener = socket.create_server(("127.0.0.1", 0))
        conn.send(FrameKind.HELLO, Hello(0, 0, "", listener.getsockname()[1]).encode())
        kind, body = conn.recv()
        me = Hello.decode(body)
        assert kind is FrameKind.HELLO and me.worker_id == 1 and me.host == "127.0.0.1"
        handle = m.submit("t_square", 2)
        kind, body = conn.recv()
        spec = JobSpec.decode(body)
        assert kind is FrameKind.TASK_ASSIGN and spec.assigned_ranks == (0, 1)
        assert spec.function_name == "t_square" and spec.world_size == 2
        conn.send(FrameKind.ADDR_REQ, (1).to_bytes(4, "little"))
        kind, body = conn.recv()
        assert kind is FrameKind.ADDR_REPLY and RankEntry.decode(body).worker_id == 1
        conn.send(FrameKind.CTX_ALLOC_REQ, (3).to_bytes(4, "little"))
        kind, body = conn.recv()
        assert kind is FrameKind.CTX_ALLOC_REPLY
        for rank in (0, 1):
            conn.send(FrameKind.RESULT, Result(spec.job_id, rank, 0, codec.encode(rank * 10)).encode())
        kind, body = conn.recv()
        assert kind is FrameKind.JOB_DONE
        assert handle.result(5) == [0, 10]
        listener.close()
    kind, _ = conn.recv()
    assert kind is FrameKind.SHUTDOWN
    conn.close()


@register("t_block")
def block(world):
    return world.receive((world.rank + 1) % world.size, 0)


def test_one_job_at_a_time():
    with LocalCluster(1) as c:
        h = c.submit("t_block", 2)
        with pytest.raises(RuntimeError):
            c.submit("t_square", 2)
        c.workers[0].stop()
        with pytest.raises(JobFailed):
            h.result(10)
