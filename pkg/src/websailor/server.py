"""Seed server: owns every URL registry and makes every crawl decision.

Clients register for disjoint DSets, request seed batches, and report the
links they parsed; the server records references, dispatches the most
popular pending URLs, balances client load through rate commands, and
routes foreign-DSet URLs up or down a server hierarchy.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from queue import Queue, Empty

from . import protocol
from .partition import (DSet, UrlError, NoExtension, dset_of,
                        extract_extension, normalize_url,
                        validate_routing_table)
from .registry import (DEFAULT_BUCKETS, InvalidTransition, UnknownDocId,
                       UrlRegistry, WrongDSet, doc_id)

log = logging.getLogger("websailor.server")


@dataclass
class ServerConfig:
    table: list[DSet]
    listen: tuple[str, int] = ("127.0.0.1", 0)
    batch_cap: int = 10
    low_watermark: int | None = None     # default 2 x batch_cap
    high_watermark: int | None = None    # default 50 x batch_cap
    step: int = 5
    assumed_connections: int = 10        # belief about a client pool before any command
    n_buckets: int = DEFAULT_BUCKETS
    parent: tuple[str, int] | None = None
    children: dict[int, tuple[str, int]] = field(default_factory=dict)
    redispatch_timeout: float | None = None
    snapshot_dir: str | None = None
    priority: object = None              # pluggable seed scorer, default back-link count

    def __post_init__(self):
        validate_routing_table(self.table)
        if self.low_watermark is None:
            self.low_watermark = 2 * self.batch_cap
        if self.high_watermark is None:
            self.high_watermark = 50 * self.batch_cap
        if not self.low_watermark < self.high_watermark:
            raise ValueError("need low_watermark < high_watermark")
        if self.step < 1:
            raise ValueError("step must be >= 1")
        known = {ds.id for ds in self.table}
        for child in self.children:
            if child not in known:
                raise ValueError("child dset %d not in routing table" % child)


@dataclass
class _ClientSession:
    client_id: str
    session_id: int
    dsets: list[int]
    send: object                # callable(msg) on this session's socket
    connections: int            # server-side belief, updated per command
    last_rate_dir: str | None = None
    pages_stored: int = 0


@dataclass
class SessionRecord:
    """Trace entry for one accepted connection, kept for topology audits."""
    session_id: int
    peer: tuple[str, int]
    opened_at: float
    client_id: str | None = None
    closed_at: float | None = None
    in_counts: Counter = field(default_factory=Counter)
    out_counts: Counter = field(default_factory=Counter)


class _ForwardLink:
    """One long-lived outbound connection used to push Forward messages."""

    def __init__(self, addr: tuple[str, int], name: str):
        self.addr = tuple(addr)
        self.name = name
        self.enqueued = 0
        self.delivered = 0
        self.failed = 0
        self._queue: Queue = Queue()
        self._lock = threading.Lock()
        self._sock: socket.socket | None = None
        self._rfile = None
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._worker,
                                        name="forward-%s" % name, daemon=True)
        self._thread.start()

    def send(self, url: str):
        with self._lock:
            self.enqueued += 1
        self._queue.put(url)

    def _ensure_sock(self):
        if self._sock is None:
            self._sock = socket.create_connection(self.addr, timeout=5.0)
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._rfile = self._sock.makefile("rb")
        return self._sock

    def _drop_sock(self):
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None
            self._rfile = None

    def _deliver(self, url: str) -> bool:
        for attempt in range(3):
            if self._stop.is_set():
                return False
            try:
                sock = self._ensure_sock()
                sock.sendall(protocol.encode(protocol.Forward(url)))
                line = self._rfile.readline()
                if not line:
                    raise ConnectionError("peer closed")
                protocol.decode(line)  # Ack or Err; either means it arrived
                return True
            except (OSError, protocol.ProtocolError) as exc:
                self._drop_sock()
                log.warning("%s: forward attempt %d failed: %s", self.name,
                            attempt + 1, exc)
                time.sleep(0.2)
        return False

    def _worker(self):
        while True:
            try:
                url = self._queue.get(timeout=0.2)
            except Empty:
                if self._stop.is_set():
                    return
                continue
            ok = self._deliver(url)
            with self._lock:
                if ok:
                    self.delivered += 1
                else:
                    self.failed += 1

    def flush(self, timeout: float = 10.0) -> bool:
        """Wait for the queue to drain (used before conservation audits)."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                done = self.enqueued == self.delivered + self.failed
            if done and self._queue.empty():
                return True
            time.sleep(0.02)
        return False

    def stop(self):
        self._stop.set()
        self._thread.join(timeout=5)
        self._drop_sock()


class SeedServer:
    """Multithreaded coordinator; one handler thread per session so a
    stalled peer never blocks the others."""

    def __init__(self, config: ServerConfig):
        self.config = config
        self.table = config.table
        self.registries: dict[int, UrlRegistry] = {}
        for ds in config.table:
            if ds.id not in config.children:
                self.registries[ds.id] = UrlRegistry(
                    ds.id, ds.extensions, n_buckets=config.n_buckets,
                    priority=config.priority)
        self._lock = threading.Lock()          # sessions, claims, counters
        self._sessions: dict[str, _ClientSession] = {}
        self._claims: dict[int, str] = {}      # dset -> client_id
        self._session_records: list[SessionRecord] = []
        self._next_session = 0
        self._batch_seq = 0
        self.dispatch_log: list[tuple[int, str, tuple[str, ...]]] = []
        self.counters: Counter = Counter()
        self.drops: Counter = Counter()
        self.rate_cmds_by_dset: Counter = Counter()
        self.register_events: list[tuple[str, int, float]] = []
        self.upstream = _ForwardLink(config.parent, "up") if config.parent else None
        self.downstream: dict[int, _ForwardLink] = {}
        for dset_id, addr in config.children.items():
            self.downstream[dset_id] = _ForwardLink(addr, "down-%d" % dset_id)
        self._listener: socket.socket | None = None
        self._address: tuple[str, int] | None = None
        self._accept_thread: threading.Thread | None = None
        self._session_threads: list[threading.Thread] = []
        self._live_socks: set[socket.socket] = set()
        self._stopping = threading.Event()
        self.started_at = time.monotonic()

    # -- lifecycle ------------------------------------------------------------

    @property
    def address(self) -> tuple[str, int]:
        assert self._address is not None, "server not started"
        return self._address

    def start(self) -> "SeedServer":
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(tuple(self.config.listen))
        listener.listen(64)
        listener.settimeout(0.5)  # lets the accept loop notice shutdown
        self._listener = listener
        host, port = listener.getsockname()[:2]
        self._address = (str(host), int(port))
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="server-accept", daemon=True)
        self._accept_thread.start()
        log.info("seed server listening on %s:%d (dsets %s)",
                 *self.address, sorted(self.registries))
        return self

    def stop(self):
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._lock:
            live = list(self._live_socks)
        for sock in live:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if self.upstream is not None:
            self.upstream.flush(timeout=5.0)
            self.upstream.stop()
        for link in self.downstream.values():
            link.flush(timeout=5.0)
            link.stop()
        for thread in list(self._session_threads):
            thread.join(timeout=2)
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2)
        if self.config.snapshot_dir:
            self.dump_snapshots(self.config.snapshot_dir)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def set_parent(self, addr: tuple[str, int]):
        """Attach (or replace) the upstream link; lets a hierarchy be wired
        after the listeners exist, since addresses are circular otherwise."""
        if self.upstream is not None:
            self.upstream.stop()
        self.upstream = _ForwardLink(addr, "up")

    def dump_snapshots(self, directory):
        from pathlib import Path
        outdir = Path(directory)
        outdir.mkdir(parents=True, exist_ok=True)
        for dset_id, reg in self.registries.items():
            path = outdir / ("registry_%d.tsv" % dset_id)
            path.write_text("\n".join(reg.snapshot_lines()) + "\n", encoding="utf-8")

    # -- seeding / sampling -----------------------------------------------------

    def inject_seeds(self, urls) -> int:
        """Feed bootstrap URLs straight into the owning registries."""
        injected = 0
        for raw in urls:
            with self._lock:
                self.counters["seeds_injected"] += 1
            self._absorb_url(str(raw))
            injected += 1
        return injected

    def pending_counts(self) -> dict[int, int]:
        return {ds: reg.pending_count() for ds, reg in self.registries.items()}

    def dispatched_open_counts(self) -> dict[int, int]:
        return {ds: reg.dispatched_open_count() for ds, reg in self.registries.items()}

    def quiescent(self) -> bool:
        """True when no registry has pending or unreported dispatched URLs."""
        return all(reg.pending_count() == 0 and reg.dispatched_open_count() == 0
                   for reg in self.registries.values())

    def counter_snapshot(self) -> dict:
        with self._lock:
            counters = dict(self.counters)
            drops = dict(self.drops)
        links = {}
        if self.upstream is not None:
            links["up"] = (self.upstream.enqueued, self.upstream.delivered,
                           self.upstream.failed)
        for dset_id, link in self.downstream.items():
            links["down-%d" % dset_id] = (link.enqueued, link.delivered, link.failed)
        return {"counters": counters, "drops": drops, "links": links,
                "collisions": sum(r.collision_drops for r in self.registries.values())}

    def flush_forwards(self, timeout: float = 10.0) -> bool:
        ok = True
        if self.upstream is not None:
            ok &= self.upstream.flush(timeout)
        for link in self.downstream.values():
            ok &= link.flush(timeout)
        return ok

    def session_records(self) -> list[SessionRecord]:
        with self._lock:
            return list(self._session_records)

    def client_session_count(self) -> int:
        with self._lock:
            return sum(1 for rec in self._session_records if rec.client_id is not None)

    def rate_commands_sent(self) -> int:
        with self._lock:
            return self.counters["rate_commands_sent"]

    def stored_pages_reported(self) -> dict[str, int]:
        with self._lock:
            return {cid: cs.pages_stored for cid, cs in self._sessions.items()}

    # -- session machinery ------------------------------------------------------

    def _accept_loop(self):
        while not self._stopping.is_set():
            try:
                sock, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            thread = threading.Thread(target=self._session_loop, args=(sock, addr),
                                      name="session-%s:%d" % addr[:2], daemon=True)
            self._session_threads.append(thread)
            thread.start()

    def _session_loop(self, sock: socket.socket, addr):
        with self._lock:
            self._next_session += 1
            record = SessionRecord(self._next_session, tuple(addr[:2]), time.monotonic())
            self._session_records.append(record)
            self._live_socks.add(sock)
        send_lock = threading.Lock()

        def send(msg):
            data = protocol.encode(msg)
            with send_lock:
                sock.sendall(data)
            with self._lock:
                record.out_counts[type(msg).__name__] += 1

        rfile = sock.makefile("rb")
        bound_client: list[str | None] = [None]
        try:
            for line in rfile:
                try:
                    msg = protocol.decode(line)
                except protocol.ProtocolError as exc:
                    send(protocol.Err(type(exc).__name__, str(exc)))
                    continue
                with self._lock:
                    record.in_counts[type(msg).__name__] += 1
                try:
                    response, pushes = self._dispatch(msg, record, send, bound_client)
                except Exception as exc:  # keep the session alive
                    log.exception("handler failure for %r", msg)
                    response, pushes = protocol.Err("Internal", str(exc)), []
                try:
                    send(response)
                    for push_send, cmd in pushes:
                        push_send(cmd)
                except OSError:
                    break
        except OSError:
            pass
        finally:
            try:
                sock.close()
            except OSError:
                pass
            with self._lock:
                self._live_socks.discard(sock)
            self._release_session(record, bound_client[0])

    def _release_session(self, record: SessionRecord, client_id: str | None):
        with self._lock:
            record.closed_at = time.monotonic()
            if client_id is None:
                return
            session = self._sessions.get(client_id)
            if session is not None and session.session_id == record.session_id:
                del self._sessions[client_id]
                for ds in session.dsets:
                    if self._claims.get(ds) == client_id:
                        del self._claims[ds]
                log.info("client %s disconnected; dsets %s released",
                         client_id, session.dsets)

    # -- message handlers ---------------------------------------------------------

    def _dispatch(self, msg, record: SessionRecord, send, bound_client):
        pushes: list = []
        if isinstance(msg, protocol.Register):
            response = self._handle_register(msg, record, send, bound_client)
        elif isinstance(msg, protocol.SeedRequest):
            response = self._handle_seed_request(msg, pushes)
        elif isinstance(msg, protocol.LinkReport):
            response = self._handle_link_report(msg, pushes)
        elif isinstance(msg, protocol.PageStored):
            response = self._handle_page_stored(msg)
        elif isinstance(msg, protocol.Forward):
            response = self._handle_forward(msg, pushes)
        elif isinstance(msg, protocol.Err):
            log.warning("peer error report: %s %s", msg.code, msg.detail)
            with self._lock:
                self.counters["peer_errors"] += 1
            response = protocol.Ack()
        else:
            response = protocol.Err("Unexpected", type(msg).__name__)
        return response, pushes

    def _handle_register(self, msg: protocol.Register, record, send, bound_client):
        known = {ds.id for ds in self.table}
        with self._lock:
            self.register_events.append((msg.client_id, record.session_id,
                                         time.monotonic()))
            for ds in msg.dsets:
                if ds not in known or ds not in self.registries:
                    return protocol.Err("UnknownDSet", str(ds))
            if msg.client_id in self._sessions:
                return protocol.Err("DSetConflict",
                                    "client id %s already registered" % msg.client_id)
            for ds in msg.dsets:
                owner = self._claims.get(ds)
                if owner is not None:
                    return protocol.Err("DSetConflict",
                                        "dset %d owned by %s" % (ds, owner))
            if not msg.dsets:
                return protocol.Err("UnknownDSet", "empty dset list")
            session = _ClientSession(msg.client_id, record.session_id,
                                     list(msg.dsets), send,
                                     self.config.assumed_connections)
            self._sessions[msg.client_id] = session
            for ds in msg.dsets:
                self._claims[ds] = msg.client_id
            record.client_id = msg.client_id
        bound_client[0] = msg.client_id
        log.info("client %s registered for dsets %s", msg.client_id, msg.dsets)
        return protocol.Ack()

    def _client(self, client_id: str) -> _ClientSession | None:
        with self._lock:
            return self._sessions.get(client_id)

    def _handle_seed_request(self, msg: protocol.SeedRequest, pushes):
        session = self._client(msg.client_id)
        if session is None:
            return protocol.Err("UnknownClient", msg.client_id)
        want = min(msg.max, self.config.batch_cap)
        urls: list[str] = []
        if want > 0:
            if self.config.redispatch_timeout is not None:
                for ds in session.dsets:
                    self.registries[ds].requeue_stale(self.config.redispatch_timeout)
            # round-robin one seed per dset so multi-dset clients stay fair
            active = [self.registries[ds] for ds in session.dsets]
            while len(urls) < want and active:
                producing = []
                for reg in active:
                    got = reg.take_seeds(1)
                    if got:
                        urls.append(got[0].serialize())
                        producing.append(reg)
                        if len(urls) == want:
                            break
                if len(urls) == want:
                    break
                active = producing
        if urls:
            with self._lock:
                self._batch_seq += 1
                self.dispatch_log.append((self._batch_seq, msg.client_id, tuple(urls)))
                self.counters["batches_sent"] += 1
                self.counters["seeds_dispatched"] += len(urls)
        for ds in session.dsets:
            self._maybe_rate_command(ds, pushes)
        return protocol.SeedBatch(urls)

    def _absorb_url(self, raw: str) -> int | None:
        """Route one reported URL occurrence: record locally, forward, or drop.

        Returns the dset id it was recorded under, else None.
        """
        try:
            url = normalize_url(raw)
        except UrlError:
            with self._lock:
                self.drops["malformed"] += 1
            return None
        try:
            ext = extract_extension(url)
        except NoExtension:
            log.warning("discarding %s: host has no domain extension", url)
            with self._lock:
                self.drops["no_extension"] += 1
            return None
        ds = dset_of(ext, self.table)
        if ds is not None and ds in self.registries:
            self.registries[ds].record_reference(url)
            with self._lock:
                self.counters["references_recorded"] += 1
            return ds
        if ds is not None and ds in self.downstream:
            self.downstream[ds].send(url.serialize())
            with self._lock:
                self.counters["forwards_down"] += 1
            return None
        if self.upstream is not None:
            self.upstream.send(url.serialize())
            with self._lock:
                self.counters["forwards_up"] += 1
            return None
        with self._lock:
            self.drops["unassigned" if ds is None else "no_child"] += 1
        return None

    def _handle_link_report(self, msg: protocol.LinkReport, pushes):
        session = self._client(msg.client_id)
        if session is None:
            return protocol.Err("UnknownClient", msg.client_id)
        with self._lock:
            self.counters["reports_received"] += 1
            self.counters["outbound_received"] += len(msg.outbound)
        touched: set[int] = set()
        for raw in msg.outbound:
            ds = self._absorb_url(raw)
            if ds is not None:
                touched.add(ds)
        # the report proves the page was fetched and parsed
        try:
            source = normalize_url(msg.source_url)
            ext = extract_extension(source)
            ds = dset_of(ext, self.table)
            if ds in self.registries:
                self.registries[ds].mark_visited(doc_id(source))
                touched.add(ds)
            else:
                raise WrongDSet(str(ds))
        except (UrlError, UnknownDocId, InvalidTransition, WrongDSet) as exc:
            log.warning("link report for unexpected source %r: %s", msg.source_url, exc)
            with self._lock:
                self.counters["source_anomalies"] += 1
        for ds in sorted(touched):
            self._maybe_rate_command(ds, pushes)
        return protocol.Ack()

    def _handle_page_stored(self, msg: protocol.PageStored):
        session = self._client(msg.client_id)
        if session is None:
            return protocol.Err("UnknownClient", msg.client_id)
        with self._lock:
            session.pages_stored += 1
            self.counters["pages_stored_reported"] += 1
        return protocol.Ack()

    def _handle_forward(self, msg: protocol.Forward, pushes):
        with self._lock:
            self.counters["forwards_received"] += 1
        ds = self._absorb_url(msg.url)
        if ds is not None:
            self._maybe_rate_command(ds, pushes)
        return protocol.Ack()

    # -- load controller -----------------------------------------------------------

    def evaluate_load(self, dset_id: int) -> protocol.RateCommand | None:
        """Watermark check for one dset; returns the command it would send."""
        pushes: list = []
        self._maybe_rate_command(dset_id, pushes)
        return pushes[0][1] if pushes else None

    def _maybe_rate_command(self, dset_id: int, pushes):
        reg = self.registries.get(dset_id)
        if reg is None:
            return
        pending = reg.pending_count()
        with self._lock:
            self.counters["load_evaluations"] += 1
            owner = self._claims.get(dset_id)
            session = self._sessions.get(owner) if owner else None
            if session is None:
                return
            if pending < self.config.low_watermark and session.connections > 1:
                direction = protocol.SLOW_DOWN
                target = max(1, session.connections - self.config.step)
            elif pending > self.config.high_watermark:
                direction = protocol.HURRY_UP
                target = session.connections + self.config.step
            else:
                # back inside the band: re-arm the edge trigger
                session.last_rate_dir = None
                return
            if session.last_rate_dir == direction:
                return  # one command per watermark excursion
            session.last_rate_dir = direction
            session.connections = target
            self.counters["rate_commands_sent"] += 1
            self.counters["evals_at_last_command"] = self.counters["load_evaluations"]
            self.rate_cmds_by_dset[dset_id] += 1
            send = session.send
        log.info("dset %d pending=%d -> %s %d for %s", dset_id, pending,
                 direction, target, owner)
        pushes.append((send, protocol.RateCommand(direction, target)))

    # -- audits ----------------------------------------------------------------

    def topology_audit(self) -> dict:
        """Session-economy audit: how many client sessions, and whether every
        response stayed on the session that asked (rate pushes excepted)."""
        with self._lock:
            records = list(self._session_records)
        client_sessions = [r for r in records if r.client_id is not None]
        plain = lambda counts: sum(n for name, n in counts.items()
                                   if name != "RateCommand")
        mismatches = [r.session_id for r in records
                      if plain(r.out_counts) > sum(r.in_counts.values())]
        return {
            "client_sessions": len(client_sessions),
            "server_sessions": len(records) - len(client_sessions),
            "edges": sorted({("client", r.client_id, "server") for r in client_sessions}),
            "response_overflow_sessions": mismatches,
        }

    def conservation_audit(self) -> dict:
        """Every URL occurrence entering this server must leave exactly once:
        recorded in a registry, forwarded along one link, or dropped."""
        snap = self.counter_snapshot()
        counters, drops = snap["counters"], snap["drops"]
        arrived = (counters.get("outbound_received", 0)
                   + counters.get("forwards_received", 0)
                   + counters.get("seeds_injected", 0))
        routed = (counters.get("references_recorded", 0)
                  + counters.get("forwards_up", 0)
                  + counters.get("forwards_down", 0)
                  + sum(drops.values()))
        registry_refs = sum(r.reference_count() for r in self.registries.values())
        return {
            "arrived": arrived,
            "routed": routed,
            "balanced": arrived == routed,
            "registry_references": registry_refs,
            "recorded": counters.get("references_recorded", 0),
        }
