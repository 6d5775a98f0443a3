import threading
import time

import pytest

from websailor import protocol
from websailor.partition import DSet, normalize_url
from websailor.registry import doc_id
from websailor.server import SeedServer, ServerConfig

from conftest import ProtocolPeer, wait_until


def url(s):
    return normalize_url(s)


@pytest.fixture
def server(two_dset_table):
    srv = SeedServer(ServerConfig(table=two_dset_table, assumed_connections=10,
                                  low_watermark=20, high_watermark=500, step=5))
    srv.start()
    yield srv
    srv.stop()


@pytest.fixture
def peer(server):
    peers = []

    def connect(register_as=None, dsets=(1,)):
        p = ProtocolPeer(server.address)
        peers.append(p)
        if register_as:
            resp = p.rpc(protocol.Register(register_as, list(dsets)))
            assert isinstance(resp, protocol.Ack), resp
        return p

    yield connect
    for p in peers:
        p.close()


# -- registration -----------------------------------------------------------------

def test_register_then_conflict(server, peer):
    peer(register_as="c1", dsets=[1])
    p2 = peer()
    resp = p2.rpc(protocol.Register("c2", [1]))
    assert isinstance(resp, protocol.Err) and resp.code == "DSetConflict"


def test_register_unknown_dset(server, peer):
    p = peer()
    resp = p.rpc(protocol.Register("c1", [9]))
    assert isinstance(resp, protocol.Err) and resp.code == "UnknownDSet"
    resp = p.rpc(protocol.Register("c1", []))
    assert isinstance(resp, protocol.Err)


def test_register_duplicate_client_id(server, peer):
    peer(register_as="c1", dsets=[1])
    p2 = peer()
    resp = p2.rpc(protocol.Register("c1", [2]))
    assert isinstance(resp, protocol.Err) and resp.code == "DSetConflict"


def test_registration_is_invisible_to_other_clients(server, peer):
    p1 = peer(register_as="c1", dsets=[1])
    p2 = peer(register_as="c2", dsets=[2])
    out_before = [dict(rec.out_counts) for rec in server.session_records()[:2]]
    p3 = peer()
    resp = p3.rpc(protocol.Register("c3", [2]))
    assert isinstance(resp, protocol.Err)  # dset 2 already owned; still no fanout
    # neither existing session saw any traffic from that registration
    assert p1.quiet() and p2.quiet()
    out_after = [dict(rec.out_counts) for rec in server.session_records()[:2]]
    assert out_after == out_before


def test_disconnect_releases_dsets(server, peer):
    p1 = peer(register_as="c1", dsets=[1])
    p1.close()
    assert wait_until(lambda: server.client_session_count() == 1
                      and not server._claims, timeout=5)
    p2 = peer()
    resp = p2.rpc(protocol.Register("c1b", [1]))
    assert isinstance(resp, protocol.Ack)


# -- link reports --------------------------------------------------------------------

def test_link_report_records_and_marks_visited(server, peer):
    p = peer(register_as="c1", dsets=[1])
    server.inject_seeds(["http://src1.com/index.html"])
    batch = p.rpc(protocol.SeedRequest("c1", 10))
    assert batch.urls == ["http://src1.com/index.html"]
    resp = p.rpc(protocol.LinkReport("c1", "http://src1.com/index.html", [
        "http://a.com/", "http://b.com/", "http://c.com/"]))
    assert isinstance(resp, protocol.Ack)
    reg = server.registries[1]
    assert reg.pending_count() == 3
    assert reg.get(doc_id(url("http://src1.com/index.html"))).state == "Visited"


def test_link_report_duplicate_urls_count_per_reference(server, peer):
    p = peer(register_as="c1", dsets=[1])
    server.inject_seeds(["http://src1.com/index.html"])
    p.rpc(protocol.SeedRequest("c1", 1))
    p.rpc(protocol.LinkReport("c1", "http://src1.com/index.html",
                              ["http://dup.com/x", "http://dup.com/x"]))
    node = server.registries[1].get(doc_id(url("http://dup.com/x")))
    assert node.count == 2


def test_link_report_unassigned_without_parent_is_dropped(server, peer):
    p = peer(register_as="c1", dsets=[1])
    server.inject_seeds(["http://src1.com/index.html"])
    p.rpc(protocol.SeedRequest("c1", 1))
    p.rpc(protocol.LinkReport("c1", "http://src1.com/index.html",
                              ["http://x.museum/", "http://localhost/x", "://bad"]))
    snap = server.counter_snapshot()
    assert snap["drops"]["unassigned"] == 1
    assert snap["drops"]["no_extension"] == 1
    assert snap["drops"]["malformed"] == 1
    audit = server.conservation_audit()
    assert audit["balanced"]


def test_link_report_requires_registration(server, peer):
    p = peer()
    resp = p.rpc(protocol.LinkReport("ghost", "http://a.com/", []))
    assert isinstance(resp, protocol.Err) and resp.code == "UnknownClient"
    resp = p.rpc(protocol.SeedRequest("ghost", 5))
    assert isinstance(resp, protocol.Err) and resp.code == "UnknownClient"


def test_page_stored_is_counted(server, peer):
    p = peer(register_as="c1", dsets=[1])
    resp = p.rpc(protocol.PageStored("c1", 1234))
    assert isinstance(resp, protocol.Ack)
    assert server.stored_pages_reported()["c1"] == 1


# -- seed dispatch ----------------------------------------------------------------------

def test_seed_request_respects_batch_cap(server, peer):
    p = peer(register_as="c1", dsets=[1])
    server.inject_seeds(["http://s%d.com/" % i for i in range(30)])
    batch = p.rpc(protocol.SeedRequest("c1", 50))
    assert len(batch.urls) == server.config.batch_cap
    batch = p.rpc(protocol.SeedRequest("c1", 3))
    assert len(batch.urls) == 3


def test_seed_request_empty_when_no_pending(server, peer):
    p = peer(register_as="c1", dsets=[1])
    batch = p.rpc(protocol.SeedRequest("c1", 10))
    assert batch.urls == []


def test_seed_request_round_robin_across_dsets(server, peer):
    p = peer(register_as="c1", dsets=[1, 2])
    server.inject_seeds(["http://a%d.com/" % i for i in range(4)])
    server.inject_seeds(["http://b%d.edu/" % i for i in range(4)])
    batch = p.rpc(protocol.SeedRequest("c1", 6))
    exts = [u.split(".")[-1].rstrip("/") for u in batch.urls]
    # alternating dsets while both have pending seeds
    assert exts[:6] in (["com", "edu"] * 3, ["edu", "com"] * 3)


def test_dispatch_matches_popularity_oracle(server, peer):
    p = peer(register_as="c1", dsets=[1])
    counts = {"http://s%d.com/" % i: (i % 5) + 1 for i in range(20)}
    for u, n in counts.items():
        server.inject_seeds([u] * n)
    got = []
    while True:
        batch = p.rpc(protocol.SeedRequest("c1", 7))
        if not batch.urls:
            break
        got.extend(batch.urls)
    expected = [u for u, _ in sorted(counts.items(),
                                     key=lambda kv: (-kv[1], doc_id(url(kv[0]))))]
    assert got == expected


def test_stalled_client_does_not_block_others(server, peer):
    peer(register_as="stalled", dsets=[2])  # connects, registers, then goes silent
    p2 = peer(register_as="c1", dsets=[1])
    server.inject_seeds(["http://a.com/"])
    start = time.monotonic()
    batch = p2.rpc(protocol.SeedRequest("c1", 1), timeout=5)
    assert batch.urls and time.monotonic() - start < 2


def test_interleaved_requests_on_two_sessions(server, peer):
    p1 = peer(register_as="c1", dsets=[1])
    p2 = peer(register_as="c2", dsets=[2])
    server.inject_seeds(["http://a%d.com/" % i for i in range(20)])
    server.inject_seeds(["http://b%d.edu/" % i for i in range(20)])
    results = {}

    def hammer(name, p, cid):
        got = []
        for _ in range(10):
            got.extend(p.rpc(protocol.SeedRequest(cid, 2)).urls)
        results[name] = got

    t1 = threading.Thread(target=hammer, args=("a", p1, "c1"))
    t2 = threading.Thread(target=hammer, args=("b", p2, "c2"))
    t1.start(); t2.start(); t1.join(5); t2.join(5)
    assert len(results["a"]) == 20 and len(results["b"]) == 20
    assert set(results["a"]) != set(results["b"])


# -- wire robustness ----------------------------------------------------------------------

def test_undecodable_lines_get_err_and_session_survives(server, peer):
    p = peer()
    p.send_raw(b"this is not json\n")
    resp = p.recv()
    assert isinstance(resp, protocol.Err) and resp.code == "BadJson"
    p.send_raw(b'{"type":"Wat"}\n')
    resp = p.recv()
    assert isinstance(resp, protocol.Err) and resp.code == "UnknownType"
    p.send_raw(b'{"type":"SeedRequest","client_id":"x"}\n')
    resp = p.recv()
    assert isinstance(resp, protocol.Err) and resp.code == "MissingField"
    # session still usable afterwards
    resp = p.rpc(protocol.Register("c9", [1]))
    assert isinstance(resp, protocol.Ack)


def test_unexpected_message_types_are_rejected_politely(server, peer):
    p = peer(register_as="c1", dsets=[1])
    resp = p.rpc(protocol.SeedBatch(["http://a.com/"]))
    assert isinstance(resp, protocol.Err) and resp.code == "Unexpected"
    resp = p.rpc(protocol.Err("ForeignSeed", "http://a.edu/x"))
    assert isinstance(resp, protocol.Ack)  # tripwire reports are absorbed


# -- load controller ---------------------------------------------------------------------

def test_evaluate_load_slow_down(server, peer):
    peer(register_as="c1", dsets=[1])
    server.inject_seeds(["http://s%d.com/" % i for i in range(5)])  # below low=20
    cmd = server.evaluate_load(1)
    assert cmd == protocol.RateCommand(protocol.SLOW_DOWN, 5)  # 10 - step


def test_evaluate_load_hurry_up(server, peer):
    peer(register_as="c1", dsets=[1])
    server.inject_seeds(["http://s%d.com/" % i for i in range(501)])
    cmd = server.evaluate_load(1)
    assert cmd == protocol.RateCommand(protocol.HURRY_UP, 15)  # 10 + step


def test_evaluate_load_dead_band(server, peer):
    peer(register_as="c1", dsets=[1])
    server.inject_seeds(["http://s%d.com/" % i for i in range(100)])
    assert server.evaluate_load(1) is None


def test_evaluate_load_edge_triggered_hysteresis(server, peer):
    peer(register_as="c1", dsets=[1])
    server.inject_seeds(["http://s%d.com/" % i for i in range(5)])
    first = server.evaluate_load(1)
    assert first is not None and first.direction == protocol.SLOW_DOWN
    # same excursion: no repeat command
    assert server.evaluate_load(1) is None
    assert server.evaluate_load(1) is None
    # back into the band re-arms the trigger
    server.inject_seeds(["http://t%d.com/" % i for i in range(100)])
    assert server.evaluate_load(1) is None  # in band, no command
    for _ in range(2):  # drain back to a drought
        while server.registries[1].take_seeds(50):
            pass
    second = server.evaluate_load(1)
    assert second is not None and second.direction == protocol.SLOW_DOWN
    assert second != first  # belief moved, so targets differ


def test_evaluate_load_floor_at_one_connection(server, peer):
    peer(register_as="c1", dsets=[1])
    # drought with belief already at 1: no command at all
    with server._lock:
        server._sessions["c1"].connections = 1
    assert server.evaluate_load(1) is None
    with server._lock:
        server._sessions["c1"].connections = 3
    cmd = server.evaluate_load(1)
    assert cmd == protocol.RateCommand(protocol.SLOW_DOWN, 1)  # max(1, 3-5)


def test_rate_command_pushed_to_owning_session(server, peer):
    p = peer(register_as="c1", dsets=[1])
    server.inject_seeds(["http://s%d.com/" % i for i in range(600)])
    p.send(protocol.SeedRequest("c1", 5))
    got = []
    for _ in range(2):
        got.append(p.recv())
    kinds = {type(m).__name__ for m in got}
    assert kinds == {"SeedBatch", "RateCommand"}
    cmd = next(m for m in got if isinstance(m, protocol.RateCommand))
    assert cmd.direction == protocol.HURRY_UP


# -- misc -----------------------------------------------------------------------------------

def test_redispatch_timeout_requeues(two_dset_table):
    srv = SeedServer(ServerConfig(table=two_dset_table, redispatch_timeout=0.0))
    srv.start()
    try:
        p = ProtocolPeer(srv.address)
        assert isinstance(p.rpc(protocol.Register("c1", [1])), protocol.Ack)
        srv.inject_seeds(["http://a.com/"])
        assert p.rpc(protocol.SeedRequest("c1", 1)).urls == ["http://a.com/"]
        # never reported; with timeout 0 the next request hands it out again
        assert p.rpc(protocol.SeedRequest("c1", 1)).urls == ["http://a.com/"]
        p.close()
    finally:
        srv.stop()


def test_snapshot_dump_on_stop(two_dset_table, tmp_path):
    srv = SeedServer(ServerConfig(table=two_dset_table,
                                  snapshot_dir=str(tmp_path / "snaps")))
    srv.start()
    srv.inject_seeds(["http://a.com/", "http://b.edu/"])
    srv.stop()
    com = (tmp_path / "snaps" / "registry_1.tsv").read_text()
    edu = (tmp_path / "snaps" / "registry_2.tsv").read_text()
    assert "http://a.com/" in com and "Pending" in com
    assert "http://b.edu/" in edu


def test_server_config_validation(two_dset_table):
    with pytest.raises(ValueError):
        ServerConfig(table=two_dset_table, low_watermark=50, high_watermark=50)
    with pytest.raises(ValueError):
        ServerConfig(table=two_dset_table, step=0)
    with pytest.raises(ValueError):
        ServerConfig(table=two_dset_table, children={9: ("127.0.0.1", 1)})
