"""Crawl client: fetches seed URLs, extracts links, reports upstream.

The client never follows a link it discovered; the only source of work is
the seed batches handed out by the server. Fetches run on a pool of worker
threads capped by a runtime-adjustable connection gate, while all protocol
traffic is serialized over the client's single server session.
"""

from __future__ import annotations

import http.client
import logging
import socket
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from html.parser import HTMLParser
from pathlib import Path
from queue import Queue, Empty

from . import protocol
from .partition import (DSet, NormalizedUrl, UrlError, dset_of,
                        extract_extension, normalize_url)
from .registry import doc_id

log = logging.getLogger("websailor.client")

_REDIRECT_CODES = {301, 302, 303, 307, 308}


# -- fetching -----------------------------------------------------------------

class FetchError(Exception):
    pass


class FetchTimeout(FetchError):
    pass


class HttpStatus(FetchError):
    def __init__(self, code: int):
        super().__init__("HTTP status %d" % code)
        self.code = code


class NotHtml(FetchError):
    pass


class ConnectFailed(FetchError):
    pass


_STALE_CONN_ERRORS = (http.client.RemoteDisconnected, http.client.BadStatusLine,
                      http.client.CannotSendRequest, BrokenPipeError,
                      ConnectionResetError)


class Fetcher:
    """HTTP GET with redirect following and per-thread connection reuse.

    `resolver(url)` maps a URL to the (host, port) actually dialed; the sim
    web harness uses it to route every synthetic host to one local server
    while the Host header keeps carrying the logical hostname.
    """

    def __init__(self, timeout: float = 10.0, resolver=None, max_redirects: int = 3):
        self.timeout = timeout
        self.resolver = resolver
        self.max_redirects = max_redirects
        self._local = threading.local()
        self.endpoints: set[tuple[str, int]] = set()
        self._endpoints_lock = threading.Lock()

    def _connect_addr(self, url: NormalizedUrl) -> tuple[str, int]:
        if self.resolver is not None:
            return self.resolver(url)
        default = 443 if url.scheme == "https" else 80
        return url.host, url.port or default

    def _connection(self, addr: tuple[str, int], scheme: str):
        cache = getattr(self._local, "conns", None)
        if cache is None:
            cache = self._local.conns = {}
        conn = cache.get(addr)
        fresh = conn is None
        if fresh:
            cls = http.client.HTTPSConnection if scheme == "https" else http.client.HTTPConnection
            conn = cls(addr[0], addr[1], timeout=self.timeout)
            cache[addr] = conn
            with self._endpoints_lock:
                self.endpoints.add(addr)
        return conn, fresh

    def _drop(self, addr):
        cache = getattr(self._local, "conns", None)
        if cache and addr in cache:
            try:
                cache.pop(addr).close()
            except OSError:
                pass

    def _get_once(self, url: NormalizedUrl):
        addr = self._connect_addr(url)
        hostport = url.host if url.port is None else "%s:%d" % (url.host, url.port)
        target = url.path + ("?" + url.query if url.query is not None else "")
        headers = {"Host": hostport, "User-Agent": "websailor/0.1",
                   "Accept": "text/html"}
        conn, fresh = self._connection(addr, url.scheme)
        try:
            conn.request("GET", target, headers=headers)
            resp = conn.getresponse()
            body = resp.read()
        except socket.timeout:
            self._drop(addr)
            raise FetchTimeout(str(url))
        except _STALE_CONN_ERRORS:
            self._drop(addr)
            if fresh:
                raise ConnectFailed(str(url))
            # server closed a kept-alive socket between requests: retry once
            conn, _ = self._connection(addr, url.scheme)
            try:
                conn.request("GET", target, headers=headers)
                resp = conn.getresponse()
                body = resp.read()
            except socket.timeout:
                self._drop(addr)
                raise FetchTimeout(str(url))
            except (OSError, http.client.HTTPException):
                self._drop(addr)
                raise ConnectFailed(str(url))
        except (OSError, http.client.HTTPException):
            self._drop(addr)
            raise ConnectFailed(str(url))
        return resp, body

    def fetch(self, url: NormalizedUrl) -> bytes:
        """Body bytes for a 200 text/html response; follows up to
        `max_redirects` redirects. Raises subclasses of FetchError."""
        current = url
        for _ in range(self.max_redirects + 1):
            resp, body = self._get_once(current)
            if resp.status in _REDIRECT_CODES:
                location = resp.getheader("Location")
                if not location:
                    raise HttpStatus(resp.status)
                try:
                    current = normalize_url(location, base=current)
                except UrlError:
                    raise HttpStatus(resp.status)
                continue
            if resp.status != 200:
                raise HttpStatus(resp.status)
            ctype = resp.getheader("Content-Type", "")
            if "html" not in ctype.lower():
                raise NotHtml(ctype or "<no content type>")
            return body
        raise HttpStatus(302)

    def close_all(self):
        cache = getattr(self._local, "conns", None)
        if cache:
            for conn in cache.values():
                try:
                    conn.close()
                except OSError:
                    pass
            cache.clear()


def fetch_page(url: NormalizedUrl, timeout: float = 10.0, resolver=None) -> bytes:
    """One-shot fetch without connection reuse."""
    fetcher = Fetcher(timeout=timeout, resolver=resolver)
    try:
        return fetcher.fetch(url)
    finally:
        fetcher.close_all()


# -- link extraction ----------------------------------------------------------

class _AnchorParser(HTMLParser):
    def __init__(self, base: NormalizedUrl):
        super().__init__(convert_charrefs=True)
        self.base = base
        self.links: list[NormalizedUrl] = []

    def handle_starttag(self, tag, attrs):
        if tag != "a":
            return
        for name, value in attrs:
            if name.lower() == "href":
                if value:
                    try:
                        self.links.append(normalize_url(value, self.base))
                    except UrlError:
                        pass
                return


def extract_links(html: bytes | str, base: NormalizedUrl) -> list[NormalizedUrl]:
    """Anchor hrefs resolved against `base`, in document order, duplicates
    kept (back-link counting is per reference). Never raises: malformed
    input degrades to whatever was parsed before the damage."""
    if isinstance(html, bytes):
        html = html.decode("utf-8", errors="replace")
    parser = _AnchorParser(base)
    try:
        parser.feed(html)
        parser.close()
    except Exception:
        log.debug("parser bailed out on malformed input", exc_info=True)
    return parser.links


# -- connection gate ----------------------------------------------------------

def apply_rate_command(current_cap: int, cmd: protocol.RateCommand) -> int:
    """New connection cap after a server rate command (floor of 1)."""
    return max(1, cmd.target_connections)


class ConnectionGate:
    """Counting gate whose capacity can be changed while holders are active.

    Over-cap holders (after a SlowDown) finish normally; new acquisitions
    block until in-flight drops below the cap again.
    """

    def __init__(self, cap: int):
        self._cap = max(1, cap)
        self._in_flight = 0
        self.max_in_flight = 0
        self._cond = threading.Condition()

    @property
    def cap(self) -> int:
        with self._cond:
            return self._cap

    @property
    def in_flight(self) -> int:
        with self._cond:
            return self._in_flight

    def set_cap(self, cap: int):
        with self._cond:
            self._cap = max(1, cap)
            self._cond.notify_all()

    def acquire(self, stop: threading.Event | None = None) -> bool:
        with self._cond:
            while self._in_flight >= self._cap:
                if stop is not None and stop.is_set():
                    return False
                self._cond.wait(timeout=0.1)
            if stop is not None and stop.is_set():
                return False
            self._in_flight += 1
            if self._in_flight > self.max_in_flight:
                self.max_in_flight = self._in_flight
            return True

    def release(self):
        with self._cond:
            self._in_flight -= 1
            self._cond.notify()

    def reset_watermark(self):
        with self._cond:
            self.max_in_flight = self._in_flight


# -- page repository ----------------------------------------------------------

class DuplicateDocId(Exception):
    pass


@dataclass
class PageRecord:
    doc_id: int
    url: str
    fetched_at: float
    body: bytes


class PageRepository:
    """Stores page bodies as `<root>/<dset>/<16-hex docid>.html` plus a
    tab-separated manifest. A doc id may be stored once, ever: a second
    store is an overlap bug upstream and raises instead of overwriting."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.tsv"
        self._lock = threading.Lock()
        self.stored = 0

    def store(self, record: PageRecord, dset_id: int) -> Path:
        subdir = self.root / str(dset_id)
        target = subdir / ("%016x.html" % record.doc_id)
        with self._lock:
            if target.exists():
                raise DuplicateDocId("%016x already stored at %s" % (record.doc_id, target))
            subdir.mkdir(parents=True, exist_ok=True)
            target.write_bytes(record.body)
            with open(self.manifest_path, "a", encoding="utf-8", newline="") as fh:
                fh.write("%016x\t%s\t%.6f\n" % (record.doc_id, record.url, record.fetched_at))
            self.stored += 1
        return target

    def manifest_doc_ids(self) -> list[int]:
        if not self.manifest_path.exists():
            return []
        out = []
        with open(self.manifest_path, "r", encoding="utf-8") as fh:
            for line in fh:
                out.append(int(line.split("\t", 1)[0], 16))
        return out

    def page_file_count(self) -> int:
        return sum(1 for _ in self.root.glob("*/*.html"))


def store_page(repo: PageRepository, record: PageRecord, dset_id: int) -> Path:
    return repo.store(record, dset_id)


# -- the client ---------------------------------------------------------------

class ClientDisconnected(Exception):
    pass


@dataclass
class ClientConfig:
    client_id: str
    server_addr: tuple[str, int]
    dsets: list[int]
    initial_connections: int = 1
    repository_dir: str = "repo"
    table: list[DSet] | None = None
    host_override: tuple[str, int] | None = None
    fetch_timeout: float = 10.0
    poll_interval: float = 0.5
    request_timeout: float = 30.0
    serial: bool = False
    reconnect_attempts: int = 3
    refill_factor: int = 2
    request_factor: int = 4

    def __post_init__(self):
        if self.initial_connections < 1:
            raise ValueError("initial_connections must be >= 1")
        if not self.dsets:
            raise ValueError("client must own at least one dset")
        if self.table is None and len(self.dsets) > 1:
            raise ValueError("multi-dset client needs a routing table to "
                             "resolve repository subdirectories")


_STOP = object()


class CrawlClient:
    """One crawl worker process: seed intake, governed fetch pool, link
    reporting and local page storage."""

    def __init__(self, config: ClientConfig):
        self.config = config
        self.gate = ConnectionGate(config.initial_connections)
        self.repo = PageRepository(config.repository_dir)
        resolver = None
        if config.host_override is not None:
            override = tuple(config.host_override)
            resolver = lambda url: override
        self.fetcher = Fetcher(timeout=config.fetch_timeout, resolver=resolver)
        self._stop = threading.Event()
        self._sock: socket.socket | None = None
        self._rfile = None
        self._responses: Queue = Queue()
        self._req_lock = threading.Lock()
        self._send_lock = threading.Lock()
        self._counters_lock = threading.Lock()
        self.pages_stored = 0
        self.fetch_errors = 0
        self.reports_sent = 0
        self.links_reported = 0
        self.rate_cmds_received = 0
        self.store_errors = 0
        self.protocol_errors = 0
        self.duplicate_seeds = 0
        self.rate_commands_log: list[protocol.RateCommand] = []
        self.seed_ids_received: set[int] = set()
        self.fetched_ids: set[int] = set()
        self.protocol_peers: set[tuple[str, int]] = set()
        self._pool_size = max(64, config.initial_connections * 4 + 16)
        self._executor: ThreadPoolExecutor | None = None
        self._reader_thread: threading.Thread | None = None
        self.last_error: str | None = None

    # -- session plumbing ---------------------------------------------------

    def _bump(self, name: str, by: int = 1):
        with self._counters_lock:
            setattr(self, name, getattr(self, name) + by)

    def _connect_and_register(self):
        addr = tuple(self.config.server_addr)
        try:
            sock = socket.create_connection(addr, timeout=self.config.request_timeout)
        except OSError as exc:
            raise ClientDisconnected("connect to %s:%d failed: %s"
                                     % (addr[0], addr[1], exc))
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._rfile = sock.makefile("rb")
        self.protocol_peers.add(addr)
        self._responses = Queue()
        self._reader_thread = threading.Thread(
            target=self._reader, name="%s-reader" % self.config.client_id, daemon=True)
        self._reader_thread.start()
        resp = self._request(protocol.Register(self.config.client_id,
                                               list(self.config.dsets)))
        if isinstance(resp, protocol.Err):
            raise ClientDisconnected("registration rejected: %s %s" % (resp.code, resp.detail))

    def _reader(self):
        rfile = self._rfile
        while True:
            try:
                line = rfile.readline()
            except (OSError, ValueError):
                line = b""
            if not line:
                break
            try:
                msg = protocol.decode(line)
            except protocol.ProtocolError as exc:
                log.warning("%s: undecodable server message: %s", self.config.client_id, exc)
                self._bump("protocol_errors")
                continue
            if isinstance(msg, protocol.RateCommand):
                self._apply_rate(msg)
            else:
                self._responses.put(msg)
        self._responses.put(_STOP)

    def _apply_rate(self, cmd: protocol.RateCommand):
        new_cap = apply_rate_command(self.gate.cap, cmd)
        log.info("%s: rate command %s -> cap %d", self.config.client_id,
                 cmd.direction, new_cap)
        if new_cap > self._pool_size:
            # the cap is still honored by the gate, but concurrency saturates
            # at the worker pool
            log.warning("%s: cap %d exceeds worker pool %d",
                        self.config.client_id, new_cap, self._pool_size)
        self.rate_commands_log.append(cmd)
        self.gate.set_cap(new_cap)
        self._bump("rate_cmds_received")

    def _request(self, msg):
        """Send one message and wait for its (non-RateCommand) response."""
        with self._req_lock:
            try:
                with self._send_lock:
                    self._sock.sendall(protocol.encode(msg))
            except (OSError, AttributeError):
                raise ClientDisconnected("send failed")
            try:
                resp = self._responses.get(timeout=self.config.request_timeout)
            except Empty:
                raise ClientDisconnected("no response within %.1fs"
                                         % self.config.request_timeout)
            if resp is _STOP:
                raise ClientDisconnected("server closed the session")
            return resp

    def _close_session(self):
        sock, self._sock = self._sock, None
        rfile, self._rfile = self._rfile, None
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass
        if rfile is not None:
            try:
                rfile.close()
            except OSError:
                pass
        if self._reader_thread is not None:
            self._reader_thread.join(timeout=2)
            self._reader_thread = None

    # -- crawl work ---------------------------------------------------------

    def _dset_for(self, url: NormalizedUrl) -> int:
        if self.config.table is not None:
            ext = extract_extension(url)
            ds = dset_of(ext, self.config.table)
            if ds is None:
                raise UrlError("no dset for %s" % ext)
            return ds
        return self.config.dsets[0]

    def _is_foreign(self, url: NormalizedUrl) -> bool:
        if self.config.table is None:
            return False
        try:
            ds = dset_of(extract_extension(url), self.config.table)
        except UrlError:
            return True
        return ds not in self.config.dsets

    def _process_seed(self, raw_url: str):
        try:
            url = normalize_url(raw_url)
        except UrlError:
            log.error("%s: server sent unparseable seed %r", self.config.client_id, raw_url)
            self._bump("protocol_errors")
            return
        if self._is_foreign(url):
            # protocol-violation tripwire: the server must never hand a
            # client seeds outside its registered dsets
            log.error("%s: foreign seed %s", self.config.client_id, url)
            self._request(protocol.Err("ForeignSeed", str(url)))
            return
        doc = doc_id(url)
        self.fetched_ids.add(doc)
        try:
            body = self.fetcher.fetch(url)
        except FetchError as exc:
            log.debug("%s: fetch %s failed: %s", self.config.client_id, url, exc)
            self._bump("fetch_errors")
            # report with no outbound links so the server retires the URL
            self._report(url, [])
            return
        links = extract_links(body, url)
        self._report(url, links)
        record = PageRecord(doc, url.serialize(), time.monotonic(), body)
        try:
            self.repo.store(record, self._dset_for(url))
        except DuplicateDocId as exc:
            log.error("%s: overlap detected: %s", self.config.client_id, exc)
            self._bump("store_errors")
            return
        except UrlError:
            self._bump("store_errors")
            return
        self._bump("pages_stored")

    def _report(self, url: NormalizedUrl, links):
        resp = self._request(protocol.LinkReport(
            self.config.client_id, url.serialize(),
            [link.serialize() for link in links]))
        self._bump("reports_sent")
        self._bump("links_reported", len(links))
        if isinstance(resp, protocol.Err):
            log.warning("%s: link report rejected: %s %s", self.config.client_id,
                        resp.code, resp.detail)
            self._bump("protocol_errors")

    def _absorb_batch(self, batch: protocol.SeedBatch) -> list[str]:
        urls = []
        for raw in batch.urls:
            try:
                doc = doc_id(normalize_url(raw))
            except UrlError:
                doc = None
            if doc is not None:
                if doc in self.seed_ids_received:
                    self._bump("duplicate_seeds")
                self.seed_ids_received.add(doc)
            urls.append(raw)
        return urls

    def _request_seeds(self, how_many: int) -> list[str]:
        resp = self._request(protocol.SeedRequest(self.config.client_id, how_many))
        if isinstance(resp, protocol.SeedBatch):
            return self._absorb_batch(resp)
        if isinstance(resp, protocol.Err):
            log.warning("%s: seed request rejected: %s %s", self.config.client_id,
                        resp.code, resp.detail)
            self._bump("protocol_errors")
            return []
        raise ClientDisconnected("unexpected response %r" % (resp,))

    def _gated(self, raw_url: str):
        try:
            self._process_seed(raw_url)
        except ClientDisconnected:
            pass  # main loop notices via its own traffic
        except Exception:
            log.exception("%s: worker failed on %s", self.config.client_id, raw_url)
        finally:
            self.gate.release()

    def _main_loop(self):
        buffer: deque[str] = deque()
        next_refill_at = 0.0
        while not self._stop.is_set():
            now = time.monotonic()
            cap = self.gate.cap
            if (len(buffer) < self.config.refill_factor * cap
                    and now >= next_refill_at):
                urls = self._request_seeds(self.config.request_factor * cap)
                if urls:
                    buffer.extend(urls)
                else:
                    next_refill_at = time.monotonic() + self.config.poll_interval
            if buffer:
                raw_url = buffer.popleft()
                if not self.gate.acquire(self._stop):
                    break
                self._executor.submit(self._gated, raw_url)
            else:
                self._stop.wait(timeout=0.05)

    def _serial_loop(self):
        while not self._stop.is_set():
            urls = self._request_seeds(1)
            if not urls:
                self._stop.wait(timeout=self.config.poll_interval)
                continue
            if self.gate.acquire(self._stop):
                try:
                    self._process_seed(urls[0])
                finally:
                    self.gate.release()

    def run(self):
        """Crawl until stop() or an unrecoverable server disconnect."""
        attempts = 0
        self._executor = ThreadPoolExecutor(
            max_workers=self._pool_size,
            thread_name_prefix="%s-fetch" % self.config.client_id)
        try:
            while not self._stop.is_set():
                try:
                    self._connect_and_register()
                    attempts = 0
                    log.info("%s: registered for dsets %s", self.config.client_id,
                             self.config.dsets)
                    if self.config.serial:
                        self._serial_loop()
                    else:
                        self._main_loop()
                except ClientDisconnected as exc:
                    self.last_error = str(exc)
                    attempts += 1
                    if self._stop.is_set() or attempts > self.config.reconnect_attempts:
                        if not self._stop.is_set():
                            log.error("%s: giving up after %d attempts: %s",
                                      self.config.client_id, attempts, exc)
                        break
                    log.warning("%s: session lost (%s), reconnecting", self.config.client_id, exc)
                    self._close_session()
                    self._stop.wait(timeout=min(2.0, 0.2 * attempts))
                else:
                    break
        finally:
            self._executor.shutdown(wait=True)
            self._close_session()
            self.fetcher.close_all()

    def start_thread(self) -> threading.Thread:
        thread = threading.Thread(target=self.run, name=self.config.client_id, daemon=True)
        thread.start()
        return thread

    def stop(self):
        self._stop.set()
        self._close_session()
