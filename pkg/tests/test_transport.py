import threading

import pytest

from mpignite import codec, register
from mpignite.cluster import LocalCluster
from mpignite.codec import Kind
from mpignite.comm import Communicator
from mpignite.errors import JobFailed, RoutingError
from mpignite.transport import ContextAllocator, LocalTransport
from mpignite.wire import Envelope, FrameKind, Routing


def test_local_self_send():
    t = LocalTransport(1)
    t.deliver(Envelope(0, 0, 0, 0, codec.encode(5)))
    assert codec.decode(t.mailbox(0).receive(0, 0, 0)) == 5


@pytest.mark.parametrize("routing", list(Routing))
def test_local_routing_error(routing):
    t = LocalTransport(3, routing)
    with pytest.raises(RoutingError):
        t.deliver(Envelope(0, 0, 3, 0, b"\x00"))
    t.close()


def test_local_relay_preserves_order_and_counts():
    t = LocalTransport(2, Routing.MASTER_RELAY)
    for i in range(200):
        t.deliver(Envelope(0, 0, 1, 0, codec.encode(i)))
    got = [codec.decode(t.mailbox(1).receive(0, 0, 0)) for _ in range(200)]
    assert got == list(range(200))
    assert t.counter.sent[FrameKind.USER_MSG] == 200
    t.close()


def test_local_p2p_emits_no_frames():
    t = LocalTransport(2)
    t.deliver(Envelope(0, 0, 1, 0, b"\x00"))
    assert sum(t.counter.sent.values()) == 0


def test_context_allocator_is_monotonic():
    a = ContextAllocator()
    firsts = [a.allocate(k) for k in (1, 3, 2)]
    assert firsts == [1, 2, 5]
    with pytest.raises(ValueError):
        a.allocate(0)


@register("t_pair_send")
def pair_send(world):
    if world.rank == 0:
        world.send(1, 0, "hi")
        return None
    return world.receive(0, 0, Kind.STR)


@pytest.mark.parametrize("routing", list(Routing))
def test_same_worker_delivery_has_no_frames(routing):
    with LocalCluster(1, routing) as c:
        assert c.parallelize_func("t_pair_send").execute(2, timeout=10) == [None, "hi"]
        w = c.workers[0]
        assert w.counter.sent[FrameKind.USER_MSG] == 0
        assert w.counter.sent[FrameKind.ADDR_REQ] == 0
        assert c.master.counter.received[FrameKind.USER_MSG] == 0


@register("t_fanout")
def fanout(world):
    # rank 0 sends to every rank listed in params; the rest receive if listed
    targets = world.params
    if world.rank == 0:
        for dst in targets:
            world.send(dst, 0, dst)
        return None
    if world.rank in targets:
        return world.receive(0, 0, Kind.I32)
    return None


def addr_reqs(cluster):
    return cluster.master.counter.received[FrameKind.ADDR_REQ]


def test_lazy_endpoint_one_lookup_per_worker(cluster):
    # 9 ranks round-robin over 3 workers: worker 2 hosts 1, 4, 7
    before = addr_reqs(cluster)
    res = cluster.submit("t_fanout", 9, [1, 4, 7], Routing.P2P).result(10)
    assert res == [None, 1, None, None, 4, None, None, 7, None]
    assert addr_reqs(cluster) - before == 1


def test_lookups_scale_with_workers_not_ranks(cluster):
    before = addr_reqs(cluster)
    cluster.submit("t_fanout", 9, [1, 2, 4, 5, 7, 8], Routing.P2P).result(10)
    assert addr_reqs(cluster) - before == 2


def test_relay_never_looks_up_addresses(cluster):
    before = addr_reqs(cluster)
    relayed = cluster.master.counter.received[FrameKind.USER_MSG]
    cluster.submit("t_fanout", 9, [1, 2, 4, 5, 7, 8], Routing.MASTER_RELAY).result(10)
    assert addr_reqs(cluster) == before
    assert cluster.master.counter.received[FrameKind.USER_MSG] - relayed == 6


@register("t_cache_growth")
def cache_growth(world):
    if world.rank != 0:
        return []
    sizes = []
    for dst in list(range(1, world.size)) * 2:
        world.send(dst, 9, 0)
        sizes.append(len(world.transport.cached_workers()))
    return sizes


def test_endpoint_cache_only_grows(cluster):
    sizes = cluster.submit("t_cache_growth", 6, None, Routing.P2P).result(10)[0]
    assert sizes == sorted(sizes)
    assert sizes[-1] == 2  # the two other workers; own ranks need no endpoint


@register("t_bad_route")
def bad_route(world):
    try:
        world.transport.deliver(Envelope(0, world.rank, world.size, 0, b"\x00"))
    except RoutingError:
        pass
    else:
        return False
    if hasattr(world.transport, "resolve_endpoint"):
        try:
            world.transport.resolve_endpoint(world.size + 3)
        except RoutingError:
            return True
        return False
    return True


def test_routing_error_for_unknown_rank(runner):
    assert runner.run("t_bad_route", 4) == [True] * 4


@register("t_burst")
def burst(world):
    count = 300
    if world.rank % 2 == 0:
        dst = (world.rank + 1) % world.size
        for i in range(count):
            world.send(dst, 2, i)
        return []
    src = world.rank - 1
    return [world.receive(src, 2, Kind.I32) for _ in range(count)]


def test_fifo_across_transports(runner):
    res = runner.run("t_burst", 6)
    for r in (1, 3, 5):
        assert res[r] == list(range(300))


@register("t_ring_equiv")
def ring_equiv(world):
    rank, size = world.rank, world.size
    if rank == 0:
        world.send(1 % size, 0, [0])
        return world.receive(size - 1, 0, Kind.ARRAY_I32)
    path = world.receive(rank - 1, 0, Kind.ARRAY_I32)
    world.send((rank + 1) % size, 0, path + [rank])
    return path


def test_cross_transport_equivalence(cluster):
    from mpignite import LocalContext

    local = LocalContext().submit("t_ring_equiv", 16).result(10)
    tcp = cluster.submit("t_ring_equiv", 16, None, Routing.P2P).result(10)
    assert local == tcp
    assert local[0] == list(range(16))


@register("t_hang_on_worker")
def hang_on_worker(world):
    # ranks block on a message that never comes
    if world.rank == 0:
        return 0
    return world.receive(0, 0)


def test_worker_disconnect_fails_job():
    with LocalCluster(2) as c:
        handle = c.submit("t_hang_on_worker", 4)
        threading.Timer(0.2, c.workers[1].stop).start()
        with pytest.raises(JobFailed) as info:
            handle.result(10)
        assert "disconnected" in str(info.value.errors)
