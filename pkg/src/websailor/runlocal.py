"""One-machine experiment orchestrator: sim web + seed server + clients.

Runs the whole system in-process, samples metrics once a second, and audits
the run afterwards (overlap, manifest consistency, session topology). The
run doubles as a test: any audit failure turns into a nonzero exit status.
"""

from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .client import ClientConfig, CrawlClient
from .config import ClientSpec, Config, parse_client_spec, parse_weights
from .metrics import MetricsRow, host_concurrency_metric, write_metrics
from .partition import DSet
from .server import SeedServer, ServerConfig
from .simweb import SimWebServer, WebGraph, generate_ba_graph, load_graph

log = logging.getLogger("websailor.runlocal")


@dataclass
class ExperimentConfig:
    table: list[DSet]
    clients: list[ClientSpec]
    duration: float = 30.0
    graph_nodes: int = 1000
    graph_m: int = 3
    graph_seed: int = 1
    weights: dict[str, float] | None = None
    pages_per_host: int = 1
    graph_file: str | None = None
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    sample_period: float = 1.0
    batch_cap: int = 10
    low_watermark: int | None = None
    high_watermark: int | None = None
    step: int = 5
    initial_seeds: int = 100
    stop_on_coverage: bool = True
    poll_interval: float = 0.2
    fetch_timeout: float = 10.0
    n_buckets: int = 1024

    def __post_init__(self):
        if not self.clients:
            raise ValueError("experiment needs at least one client")


def load_experiment_config(cfg: Config) -> ExperimentConfig:
    weights = None
    if cfg.get("weights"):
        weights = parse_weights(cfg.get("weights"))
    return ExperimentConfig(
        table=cfg.routing_table(),
        clients=[parse_client_spec(line) for line in cfg.lines("client")],
        duration=cfg.get("duration", 30.0, float),
        graph_nodes=cfg.get("graph_nodes", 1000, int),
        graph_m=cfg.get("graph_m", 3, int),
        graph_seed=cfg.get("graph_seed", 1, int),
        weights=weights,
        pages_per_host=cfg.get("pages_per_host", 1, int),
        graph_file=cfg.get("graph_file"),
        latency_ms=cfg.get("latency_ms", 0.0, float),
        jitter_ms=cfg.get("jitter_ms", 0.0, float),
        sample_period=cfg.get("sample_period", 1.0, float),
        batch_cap=cfg.get("batch_cap", 10, int),
        low_watermark=cfg.get("low_watermark", None, int),
        high_watermark=cfg.get("high_watermark", None, int),
        step=cfg.get("step", 5, int),
        initial_seeds=cfg.get("initial_seeds", 100, int),
        stop_on_coverage=cfg.get("stop_on_coverage", True, bool),
        poll_interval=cfg.get("poll_interval", 0.2, float),
        fetch_timeout=cfg.get("fetch_timeout", 10.0, float),
        n_buckets=cfg.get("n_buckets", 1024, int),
    )


@dataclass
class RunResult:
    exit_code: int
    out_dir: Path
    metrics_path: Path
    summary_path: Path
    rows: list[MetricsRow]
    verdicts: dict[str, bool]
    summary: dict
    stored_by_client: dict[str, int] = field(default_factory=dict)


def pick_seed_urls(graph: WebGraph, count: int) -> list[str]:
    """Deterministic bootstrap seeds: the newest `count` nodes (every one of
    them has out-links, so discovery can fan out from each)."""
    count = min(count, len(graph.nodes))
    return [graph.nodes[i].url for i in range(len(graph.nodes) - count,
                                              len(graph.nodes))]


def run_local(exp: ExperimentConfig, out_dir) -> RunResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    summary_path = out_dir / "summary.txt"

    if exp.graph_file:
        graph = load_graph(exp.graph_file)
    else:
        graph = generate_ba_graph(exp.graph_nodes, exp.graph_m, exp.graph_seed,
                                  ext_weights=exp.weights,
                                  pages_per_host=exp.pages_per_host)
    sim = SimWebServer(graph, latency_ms=exp.latency_ms, jitter_ms=exp.jitter_ms)
    sim.start()
    server = SeedServer(ServerConfig(
        table=exp.table, batch_cap=exp.batch_cap,
        low_watermark=exp.low_watermark, high_watermark=exp.high_watermark,
        step=exp.step, n_buckets=exp.n_buckets,
        snapshot_dir=str(out_dir / "snapshots")))
    server.start()
    server.inject_seeds(pick_seed_urls(graph, exp.initial_seeds))

    clients: list[CrawlClient] = []
    threads = {}
    pending_joins = sorted(exp.clients, key=lambda spec: spec.join_at)
    rows: list[MetricsRow] = []
    join_log: list[tuple[float, str]] = []

    def start_client(spec: ClientSpec):
        cfg = ClientConfig(
            client_id=spec.client_id,
            server_addr=server.address,
            dsets=list(spec.dsets),
            initial_connections=spec.connections,
            repository_dir=str(out_dir / "repos" / spec.client_id),
            table=exp.table,
            host_override=sim.address,
            fetch_timeout=exp.fetch_timeout,
            poll_interval=exp.poll_interval,
            serial=spec.serial,
        )
        client = CrawlClient(cfg)
        clients.append(client)
        threads[spec.client_id] = client.start_thread()
        join_log.append((time.monotonic() - t0, spec.client_id))
        log.info("started client %s (dsets %s, %d connections)",
                 spec.client_id, spec.dsets, spec.connections)

    def sample(t: float):
        total_stored = total_conns = total_pending = total_cmds = 0
        pending = server.pending_counts()
        for client in clients:
            own_pending = sum(pending.get(ds, 0) for ds in client.config.dsets)
            row = MetricsRow(t, client.config.client_id, client.pages_stored,
                             client.gate.cap, own_pending,
                             client.rate_cmds_received)
            rows.append(row)
            total_stored += client.pages_stored
            total_conns += client.gate.cap
            total_cmds += client.rate_cmds_received
        for dset_id, reg in sorted(server.registries.items()):
            rows.append(MetricsRow(t, "server:%d" % dset_id, reg.visited_count(),
                                   0, pending.get(dset_id, 0),
                                   server.rate_cmds_by_dset.get(dset_id, 0)))
        total_pending = sum(pending.values())
        rows.append(MetricsRow(t, "total", total_stored, total_conns,
                               total_pending, total_cmds))

    t0 = time.monotonic()
    quiet_samples = 0
    try:
        if exp.duration > 0:
            while True:
                now = time.monotonic() - t0
                while pending_joins and pending_joins[0].join_at <= now:
                    start_client(pending_joins.pop(0))
                sample(now)
                if now >= exp.duration:
                    break
                if exp.stop_on_coverage and not pending_joins:
                    if server.quiescent():
                        quiet_samples += 1
                        if quiet_samples >= 2:
                            log.info("full coverage reached at t=%.1fs", now)
                            break
                    else:
                        quiet_samples = 0
                time.sleep(exp.sample_period)
    finally:
        for client in clients:
            client.stop()
        for thread in threads.values():
            thread.join(timeout=15)
        server.flush_forwards()
        server.stop()
        sim.stop()

    write_metrics(rows, metrics_path)
    result = _audit_and_summarize(exp, graph, server, clients, rows,
                                  out_dir, metrics_path, summary_path, join_log)
    return result


def _audit_and_summarize(exp, graph, server: SeedServer, clients, rows,
                         out_dir: Path, metrics_path: Path, summary_path: Path,
                         join_log) -> RunResult:
    # -- overlap: merged manifests must contain no duplicate doc id
    merged: Counter = Counter()
    stored_by_client = {}
    for client in clients:
        ids = client.repo.manifest_doc_ids()
        stored_by_client[client.config.client_id] = len(ids)
        merged.update(ids)
    duplicates = {doc: n for doc, n in merged.items() if n > 1}
    overlap_ok = not duplicates and all(c.store_errors == 0 for c in clients)

    # -- manifest consistency: one file per manifest line, per repository
    manifest_ok = all(
        client.repo.page_file_count() == len(client.repo.manifest_doc_ids())
        for client in clients)

    # -- topology: N client sessions, responses on their own sessions only,
    #    clients talked to nothing but the server
    audit = server.topology_audit()
    expected_sessions = len(join_log)
    peers_ok = all(client.protocol_peers <= {tuple(server.address)}
                   for client in clients)
    topology_ok = (audit["client_sessions"] >= expected_sessions
                   and not audit["response_overflow_sessions"]
                   and audit["server_sessions"] == 0
                   and peers_ok)

    conservation = server.conservation_audit()
    snap = server.counter_snapshot()
    host_metric = host_concurrency_metric(server.dispatch_log)

    # client-side link tallies must equal what the server absorbed
    links_reported = sum(c.links_reported for c in clients)
    conservation_ok = (conservation["balanced"]
                       and links_reported
                       == snap["counters"].get("outbound_received", 0))

    verdicts = {"overlap": overlap_ok, "manifest": manifest_ok,
                "topology": topology_ok, "conservation": conservation_ok}
    exit_code = 0 if all(verdicts.values()) else 1

    total_stored = sum(stored_by_client.values())
    lines = [
        "websailor run summary",
        "graph: nodes=%d m=%d seed=%d extensions=%s" % (
            graph.n, graph.m, graph.rng_seed, ",".join(sorted(graph.extensions()))),
        "clients: %s" % ", ".join("%s(+%.1fs)" % (cid, t) for t, cid in join_log),
        "pages_stored: total=%d %s" % (
            total_stored,
            " ".join("%s=%d" % kv for kv in sorted(stored_by_client.items()))),
        "fetch_errors: %d" % sum(c.fetch_errors for c in clients),
        "batches_sent: %d seeds_dispatched: %d" % (
            snap["counters"].get("batches_sent", 0),
            snap["counters"].get("seeds_dispatched", 0)),
        "rate_commands_sent: %d" % snap["counters"].get("rate_commands_sent", 0),
        "drops: %s" % (dict(snap["drops"]) or "{}"),
        "hash_collisions: %d" % snap["collisions"],
        "host_concurrency_metric: %.4f" % host_metric,
        "conservation: arrived=%d routed=%d links_reported=%d" % (
            conservation["arrived"], conservation["routed"], links_reported),
        "audit overlap: %s (%d duplicate doc ids, %d store errors)" % (
            "PASS" if overlap_ok else "FAIL", len(duplicates),
            sum(c.store_errors for c in clients)),
        "audit manifest: %s" % ("PASS" if manifest_ok else "FAIL"),
        "audit topology: %s (%d client sessions, overflow=%s, peers_ok=%s)" % (
            "PASS" if topology_ok else "FAIL", audit["client_sessions"],
            audit["response_overflow_sessions"], peers_ok),
        "verdict: %s" % ("PASS" if exit_code == 0 else "FAIL"),
    ]
    summary_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        log.info("%s", line)

    summary = {
        "stored_total": total_stored,
        "duplicates": len(duplicates),
        "host_concurrency": host_metric,
        "client_sessions": audit["client_sessions"],
        "counters": snap["counters"],
        "drops": snap["drops"],
        "conservation": conservation,
        "join_log": join_log,
    }
    return RunResult(exit_code, out_dir, metrics_path, summary_path, rows,
                     verdicts, summary, stored_by_client)
