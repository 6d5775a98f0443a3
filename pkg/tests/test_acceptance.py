"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines as they
complete. The long scenarios (full-system runs) size their graphs so the
whole module stays within a few minutes.
"""

import random
import time
from collections import Counter
from contextlib import contextmanager
from pathlib import Path

import pytest

from websailor import protocol
from websailor.baselines import (run_crossover, run_exchange, run_firewall,
                                 run_websailor_sim)
from websailor.client import ClientConfig, CrawlClient, extract_links
from websailor.config import ClientSpec
from websailor.metrics import coefficient_of_variation, window_rates
from websailor.partition import DSet, normalize_url
from websailor.registry import UrlRegistry, bucket_index, doc_id
from websailor.runlocal import ExperimentConfig, pick_seed_urls, run_local
from websailor.server import SeedServer, ServerConfig
from websailor.simweb import SimWebServer, generate_ba_graph, render_page

from conftest import ProtocolPeer, random_message, wait_until


@contextmanager
def criterion(num, desc):
    try:
        yield
    except BaseException:
        print("\nACCEPTANCE %02d FAIL: %s" % (num, desc))
        raise
    print("\nACCEPTANCE %02d PASS: %s" % (num, desc))


TABLE3 = [DSet(1, frozenset({".com"})),
          DSet(2, frozenset({".edu", ".net"})),
          DSet(3, frozenset({".org"}))]


def merged_manifest_ids(out_dir) -> list[int]:
    """Filesystem oracle: parse every client manifest under the run dir."""
    ids = []
    for manifest in sorted(Path(out_dir).glob("repos/*/manifest.tsv")):
        for line in manifest.read_text().splitlines():
            ids.append(int(line.split("\t", 1)[0], 16))
    return ids


def test_criterion_01_zero_overlap(tmp_path):
    with criterion(1, "zero overlap across 3 clients on a 10k-page web"):
        exp = ExperimentConfig(
            table=TABLE3,
            clients=[ClientSpec("c1", [1], connections=8),
                     ClientSpec("c2", [2], connections=6),
                     ClientSpec("c3", [3], connections=4)],
            duration=100.0, graph_nodes=10_000, graph_m=3, graph_seed=4242,
            initial_seeds=3000, sample_period=0.5, poll_interval=0.1)
        start = time.monotonic()
        result = run_local(exp, tmp_path / "run1")
        elapsed = time.monotonic() - start
        assert elapsed < 120.0, "runtime target blown: %.1fs" % elapsed
        assert result.exit_code == 0, result.verdicts
        ids = merged_manifest_ids(result.out_dir)
        duplicates = [doc for doc, n in Counter(ids).items() if n > 1]
        assert duplicates == []
        assert len(ids) == result.summary["stored_total"] > 2000
        # one page per sim host, so batch-level host concurrency is exactly 0
        assert result.summary["host_concurrency"] == 0.0


def test_criterion_02_crawl_decision_oracle(tmp_path):
    with criterion(2, "serial batch-1 dispatch equals best-first oracle"):
        table = [DSet(1, frozenset({".com"}))]
        graph = generate_ba_graph(500, 2, seed=77, ext_weights={".com": 1.0})
        sim = SimWebServer(graph).start()
        server = SeedServer(ServerConfig(table=table, batch_cap=1)).start()
        seeds = pick_seed_urls(graph, 50)
        server.inject_seeds(seeds)
        client = CrawlClient(ClientConfig(
            client_id="c1", server_addr=server.address, dsets=[1],
            initial_connections=1, repository_dir=str(tmp_path / "serial"),
            table=table, host_override=sim.address, poll_interval=0.1,
            serial=True))
        thread = client.start_thread()
        try:
            assert wait_until(lambda: server.quiescent(), timeout=90)
        finally:
            client.stop()
            thread.join(timeout=10)
            sim.stop()
        assert client.fetch_errors == 0
        dispatched = [u for _, _, urls in server.dispatch_log for u in urls]
        server.stop()

        # independent replay: dict + max scan, no shared code with the registry
        node_of = {n.url: n.node_id for n in graph.nodes}
        counts: dict[str, int] = {}
        state: dict[str, str] = {}
        for seed_url in seeds:
            counts[seed_url] = counts.get(seed_url, 0) + 1
            state[seed_url] = "pending"
        expected = []
        while True:
            pending = [u for u, st in state.items() if st == "pending"]
            if not pending:
                break
            best = min(pending,
                       key=lambda u: (-counts[u], doc_id(normalize_url(u))))
            expected.append(best)
            state[best] = "visited"
            for target in graph.out_adj[node_of[best]]:
                u = graph.nodes[target].url
                counts[u] = counts.get(u, 0) + 1
                state.setdefault(u, "pending")
        assert dispatched == expected
        assert len(dispatched) > 100  # the crawl actually went somewhere


FIVE_EXT_WEIGHTS = {".com": 0.3, ".edu": 0.2, ".net": 0.2, ".org": 0.2,
                    ".biz": 0.1}


def test_criterion_03_session_economy(tmp_path):
    with criterion(3, "N clients need exactly N sessions, no client-client edges"):
        scenarios = {
            1: ([DSet(1, frozenset({".com", ".edu", ".net", ".org"}))], None),
            2: ([DSet(1, frozenset({".com"})),
                 DSet(2, frozenset({".edu", ".net", ".org"}))], None),
            5: ([DSet(i + 1, frozenset({ext}))
                 for i, ext in enumerate(sorted(FIVE_EXT_WEIGHTS))],
                FIVE_EXT_WEIGHTS),
        }
        for n_clients, (table, weights) in scenarios.items():
            exp = ExperimentConfig(
                table=table,
                clients=[ClientSpec("c%d" % (i + 1), [i + 1], connections=2)
                         for i in range(n_clients)],
                duration=30.0, graph_nodes=600, graph_m=2, graph_seed=11,
                weights=weights, initial_seeds=200, sample_period=0.5,
                poll_interval=0.1)
            result = run_local(exp, tmp_path / ("run_n%d" % n_clients))
            assert result.exit_code == 0, result.verdicts
            assert result.summary["client_sessions"] == n_clients
            assert result.verdicts["topology"]

        # mid-run registration touches only the server
        server = SeedServer(ServerConfig(table=TABLE3)).start()
        try:
            p1 = ProtocolPeer(server.address)
            p2 = ProtocolPeer(server.address)
            assert isinstance(p1.rpc(protocol.Register("c1", [1])), protocol.Ack)
            assert isinstance(p2.rpc(protocol.Register("c2", [2])), protocol.Ack)
            p3 = ProtocolPeer(server.address)
            assert isinstance(p3.rpc(protocol.Register("c3", [3])), protocol.Ack)
            assert p1.quiet() and p2.quiet()  # registration fanned out nothing
            records = server.session_records()
            assert len(records) == 3
            for rec in records:
                non_rate_out = sum(n for name, n in rec.out_counts.items()
                                   if name != "RateCommand")
                assert non_rate_out == sum(rec.in_counts.values())
            for p in (p1, p2, p3):
                p.close()
        finally:
            server.stop()


@pytest.fixture
def load_rig(tmp_path):
    table = [DSet(1, frozenset({".com"}))]
    graph = generate_ba_graph(2000, 2, seed=5, ext_weights={".com": 1.0})
    sim = SimWebServer(graph, latency_ms=50).start()
    stack = []

    def build(connections, n_seeds, tag):
        server = SeedServer(ServerConfig(
            table=table, low_watermark=20, high_watermark=500, step=5,
            assumed_connections=connections)).start()
        server.inject_seeds(graph.nodes[i].url
                            for i in range(len(graph.nodes) - n_seeds,
                                           len(graph.nodes)))
        client = CrawlClient(ClientConfig(
            client_id="c1", server_addr=server.address, dsets=[1],
            initial_connections=connections,
            repository_dir=str(tmp_path / tag), table=table,
            host_override=sim.address, poll_interval=0.1))
        thread = client.start_thread()
        stack.append((server, client, thread))
        return server, client

    yield graph, build
    for server, client, thread in stack:
        client.stop()
        thread.join(timeout=10)
        server.stop()
    sim.stop()


def test_criterion_04_load_balancing(load_rig):
    with criterion(4, "slow down / hurry up move the connection cap exactly"):
        graph, build = load_rig
        # drought: 5 pending < low watermark 20, belief 10, step 5 -> SlowDown 5
        server, client = build(connections=10, n_seeds=5, tag="slow")
        assert wait_until(lambda: client.gate.cap == 5, timeout=15)
        assert client.rate_commands_log == [
            protocol.RateCommand(protocol.SLOW_DOWN, 5)]
        counters = server.counter_snapshot()["counters"]
        assert counters["evals_at_last_command"] <= 2
        client.gate.reset_watermark()
        stored_before = client.pages_stored
        server.inject_seeds(graph.nodes[i].url for i in range(100, 130))
        assert wait_until(lambda: client.pages_stored >= stored_before + 10,
                          timeout=20)
        assert client.gate.max_in_flight <= 5  # exact cap compliance
        # flood: 800 pending > high watermark 500 -> HurryUp to 15
        server2, client2 = build(connections=10, n_seeds=800, tag="hurry")
        assert wait_until(lambda: client2.gate.cap == 15, timeout=15)
        assert client2.rate_commands_log == [
            protocol.RateCommand(protocol.HURRY_UP, 15)]
        client2.gate.reset_watermark()
        assert wait_until(lambda: client2.gate.max_in_flight >= 11, timeout=20)
        assert client2.gate.max_in_flight <= 15
        # sanity: no client ever saw two identical consecutive commands
        for c in (client, client2):
            for a, b in zip(c.rate_commands_log, c.rate_commands_log[1:]):
                assert a != b
            assert c.gate.cap >= 1


def test_criterion_05_hierarchy_routing():
    with criterion(5, "foreign URL crosses the hierarchy in exactly one hop"):
        leaf1 = SeedServer(ServerConfig(
            table=[DSet(1, frozenset({".net", ".biz"}))])).start()
        leaf2 = SeedServer(ServerConfig(table=[DSet(2, frozenset({".edu"}))])).start()
        root = SeedServer(ServerConfig(
            table=[DSet(1, frozenset({".net", ".biz"})),
                   DSet(2, frozenset({".edu"}))],
            children={1: leaf1.address, 2: leaf2.address})).start()
        leaf1.set_parent(root.address)
        try:
            peer = ProtocolPeer(leaf1.address)
            assert isinstance(peer.rpc(protocol.Register("c1", [1])), protocol.Ack)
            leaf1.inject_seeds(["http://src.net/index.html"])
            assert peer.rpc(protocol.SeedRequest("c1", 1)).urls
            outbound = ["http://uni.edu/booklist", "http://peer.net/x",
                        "http://lost.museum/y"]
            assert isinstance(
                peer.rpc(protocol.LinkReport(
                    "c1", "http://src.net/index.html", outbound)), protocol.Ack)
            assert leaf1.flush_forwards() and root.flush_forwards()
            assert wait_until(
                lambda: leaf2.registries[2].pending_count() == 1, timeout=10)

            # exactly one hop up and one hop through the root, for each of the
            # two URLs leaf1 could not place (.edu and .museum)
            assert leaf1.upstream.enqueued == leaf1.upstream.delivered == 2
            root_counters = root.counter_snapshot()
            assert root_counters["counters"]["forwards_received"] == 2
            assert root.downstream[2].delivered == 1
            assert root_counters["drops"]["unassigned"] == 1  # .museum ends here
            node = leaf2.registries[2].get(
                doc_id(normalize_url("http://uni.edu/booklist")))
            assert node is not None and node.count == 1

            # conservation: every reported URL counted exactly once somewhere
            for server in (leaf1, leaf2, root):
                assert server.conservation_audit()["balanced"]
            recorded = sum(s.conservation_audit()["recorded"]
                           for s in (leaf1, leaf2, root))
            dropped = sum(sum(s.counter_snapshot()["drops"].values())
                          for s in (leaf1, leaf2, root))
            assert recorded + dropped == len(outbound) + 1  # +1 injected seed
            peer.close()
        finally:
            for server in (leaf1, leaf2, root):
                server.stop()


def test_criterion_06_registry_structure():
    with criterion(6, "bucket placement, exact chain halving, sort-oracle dispatch"):
        com = frozenset({".com"})
        # 10^5 randomized operations, then every node sits in doc_id mod n
        rng = random.Random(606)
        reg = UrlRegistry(1, com, n_buckets=128)
        pool = ["http://s%d.com/p%d" % (i % 4000, i % 7) for i in range(8000)]
        for _ in range(100_000):
            roll = rng.random()
            if roll < 0.75:
                reg.record_reference(normalize_url(rng.choice(pool)))
            elif roll < 0.95:
                reg.take_seeds(rng.randrange(1, 6))
            else:
                node = reg.get(doc_id(normalize_url(rng.choice(pool))))
                if node is not None and node.state == "Dispatched":
                    reg.mark_visited(node.doc_id)
        placed = 0
        for idx, chain in enumerate(reg.buckets):
            for node in chain:
                assert bucket_index(node.doc_id, reg.n_buckets) == idx
                placed += 1
        assert placed == len(reg) > 0

        # doubling bucket count halves the mean chain length exactly
        urls = [normalize_url("http://h%d.com/" % i) for i in range(10_000)]
        means = []
        for n_buckets in (512, 1024):
            reg2 = UrlRegistry(1, com, n_buckets=n_buckets)
            for u in urls:
                reg2.record_reference(u)
            means.append(reg2.chain_stats()[0])
        assert means[1] == means[0] / 2

        # dispatch equals the brute-force sort oracle on 1000 random registries
        for case in range(1000):
            case_rng = random.Random(9000 + case)
            reg3 = UrlRegistry(1, com, n_buckets=case_rng.choice([1, 4, 32]))
            counts: dict[str, int] = {}
            for _ in range(case_rng.randrange(1, 25)):
                u = "http://c%d-%d.com/" % (case, case_rng.randrange(12))
                reps = case_rng.randrange(1, 5)
                for _ in range(reps):
                    reg3.record_reference(normalize_url(u))
                counts[u] = counts.get(u, 0) + reps
            k = case_rng.randrange(1, len(counts) + 2)
            got = [str(u) for u in reg3.take_seeds(k)]
            oracle = [u for u, _ in sorted(
                counts.items(),
                key=lambda kv: (-kv[1], doc_id(normalize_url(kv[0]))))]
            assert got == oracle[:k]


def test_criterion_08_baseline_contrasts():
    with criterion(8, "firewall/crossover/exchange/websailor contrasts exact"):
        graph = generate_ba_graph(2000, 3, seed=2024)
        parts3 = [frozenset({".com"}), frozenset({".edu", ".net"}),
                  frozenset({".org"})]
        fw = run_firewall(graph, parts3, 3)
        assert fw.overlap == 0 and fw.lost_urls > 0
        co = run_crossover(graph, parts3, 3)
        assert co.lost_urls == 0 and co.overlap > 0
        ex = run_exchange(graph, parts3, 3)
        assert ex.overlap == 0 and ex.lost_urls == 0 and ex.channels == 3
        ws = run_websailor_sim(graph, parts3, 3)
        assert ws.overlap == 0 and ws.lost_urls == 0 and ws.channels == 3
        assert ws.distinct_pages == ex.distinct_pages >= fw.distinct_pages
        parts4 = [frozenset({".com"}), frozenset({".edu"}),
                  frozenset({".net"}), frozenset({".org"})]
        assert run_websailor_sim(graph, parts4, 3).channels == 4
        assert run_exchange(graph, parts4, 3).channels == 6


def test_criterion_09_protocol_round_trip():
    with criterion(9, "10^4 generated messages survive encode/decode + framing"):
        rng = random.Random(909)
        failures = 0
        encoded = []
        msgs = []
        for _ in range(10_000):
            msg = random_message(rng)
            line = protocol.encode(msg)
            if protocol.decode(line) != msg or b"\n" in line[:-1]:
                failures += 1
            msgs.append(msg)
            encoded.append(line)
        assert failures == 0
        blob = b"".join(encoded)
        lines = blob.split(b"\n")
        assert lines.pop() == b""
        assert len(lines) == len(msgs)
        for line, msg in zip(lines, msgs):
            assert protocol.decode(line) == msg


def test_criterion_10_parser_totality():
    with criterion(10, "extract_links total on fuzz, render/extract exact"):
        rng = random.Random(1010)
        base = normalize_url("http://fuzz.com/here/")
        fragments = [b"<a href=", b'"http://x.com/y"', b">", b"</a>", b"<", b">",
                     b"&amp;", b"<!--", b"--!>", b"<a", b"href", b"=", b"'",
                     b'"', b"\\", b"\x00", b"<script>", b"<a href='", b"%ff"]
        for i in range(10_000):
            kind = i % 3
            if kind == 0:
                blob = bytes(rng.randrange(256) for _ in range(rng.randrange(400)))
            elif kind == 1:
                blob = b"".join(rng.choice(fragments)
                                for _ in range(rng.randrange(40)))
            else:
                page = render_page(generate_ba_graph(12, 2, seed=i), i % 12)
                cut = rng.randrange(len(page))
                blob = page[:cut] + bytes(rng.randrange(256) for _ in range(5))
            links = extract_links(blob, base)
            assert isinstance(links, list)

        for case in range(100):
            g = generate_ba_graph(20 + case, 1 + case % 4, seed=case,
                                  pages_per_host=1 + case % 2)
            for node in range(0, len(g.nodes), max(1, len(g.nodes) // 8)):
                got = [u.serialize() for u in
                       extract_links(render_page(g, node),
                                     normalize_url(g.nodes[node].url))]
                assert got == [g.nodes[t].url for t in g.out_adj[node]]


def test_criterion_07_throughput_steadiness(tmp_path):
    with criterion(7, "steady per-client rates over 60s, no dropout at client join"):
        exp = ExperimentConfig(
            table=TABLE3,
            clients=[ClientSpec("c1", [1], connections=25),
                     ClientSpec("c2", [2], connections=10),
                     ClientSpec("c3", [3], connections=10, join_at=30.0)],
            duration=60.0, graph_nodes=50_000, graph_m=3, graph_seed=4242,
            initial_seeds=50_000, latency_ms=10.0, jitter_ms=5.0,
            high_watermark=10**6, sample_period=1.0, poll_interval=0.2,
            stop_on_coverage=False)
        result = run_local(exp, tmp_path / "run7")
        assert result.exit_code == 0, result.verdicts

        for client_id in ("c1", "c2"):
            rows = [r for r in result.rows
                    if r.entity == client_id and r.t >= 10.0]
            rates = [rate for _, rate in window_rates(rows, client_id, 5.0)]
            assert len(rates) >= 8, rates
            cv = coefficient_of_variation(rates)
            assert cv < 0.25, "%s rate CV %.3f" % (client_id, cv)
            assert min(rates) > 0
        total_rates = window_rates(result.rows, "total", 5.0)
        assert len(total_rates) >= 11
        assert all(rate > 0 for _, rate in total_rates), total_rates
        assert result.stored_by_client.get("c3", 0) > 0  # the late join crawled
        c3_rows = [r for r in result.rows if r.entity == "c3"]
        assert c3_rows and min(r.t for r in c3_rows) >= 30.0