"""Deterministic synthetic web for desk-scale crawls.

A preferential-attachment hyperlink graph is generated from a fixed seed,
labeled with domain extensions, and served as real HTML over local HTTP.
Every node's URL follows `http://site<group>.<ext>/...` so crawlers resolve
hosts through a test-mode override instead of DNS.
"""

from __future__ import annotations

import logging
import random
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .partition import validate_extension

log = logging.getLogger("websailor.simweb")

DEFAULT_EXT_WEIGHTS = {".com": 0.5, ".edu": 0.2, ".net": 0.2, ".org": 0.1}


class BadParams(ValueError):
    pass


class UnknownNode(KeyError):
    pass


class BadGraphFile(ValueError):
    pass


@dataclass
class GraphNode:
    node_id: int
    url: str
    extension: str


@dataclass
class WebGraph:
    n: int
    m: int
    rng_seed: int
    nodes: list[GraphNode]
    edges: list[tuple[int, int]]
    out_adj: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.out_adj:
            adj: list[list[int]] = [[] for _ in self.nodes]
            for src, dst in self.edges:
                adj[src].append(dst)
            self.out_adj = adj

    def url_of(self, node_id: int) -> str:
        try:
            return self.nodes[node_id].url
        except IndexError:
            raise UnknownNode(node_id) from None

    def extensions(self) -> set[str]:
        return {node.extension for node in self.nodes}

    def host_path_index(self) -> dict[tuple[str, str], int]:
        """(host, path) -> node_id lookup for the HTTP responder."""
        index = {}
        for node in self.nodes:
            rest = node.url.split("://", 1)[1]
            host, _, path = rest.partition("/")
            index[(host, "/" + path)] = node.node_id
        return index


def _node_url(group: int, ext: str, page: int) -> str:
    host = "site%d%s" % (group, ext)
    path = "index.html" if page == 0 else "page%d.html" % page
    return "http://%s/%s" % (host, path)


def generate_ba_graph(n: int, m: int, seed: int,
                      ext_weights: dict[str, float] | None = None,
                      pages_per_host: int = 1) -> WebGraph:
    """Preferential-attachment graph: m fully connected starter nodes, then
    each new node links to m distinct earlier nodes drawn with probability
    proportional to in-degree + 1.

    Extensions are assigned per host by weighted draw, independent of
    topology. `pages_per_host` > 1 groups consecutive node ids onto one
    host so that same-host dispatch concurrency becomes measurable.
    """
    if m < 1 or n <= m:
        raise BadParams("need n > m >= 1, got n=%d m=%d" % (n, m))
    if pages_per_host < 1:
        raise BadParams("pages_per_host must be >= 1")
    weights = dict(ext_weights) if ext_weights else dict(DEFAULT_EXT_WEIGHTS)
    for ext, weight in weights.items():
        validate_extension(ext)
        if weight <= 0:
            raise BadParams("weight for %s must be positive" % ext)

    rng = random.Random(seed)
    ext_labels = sorted(weights)
    ext_mass = [weights[ext] for ext in ext_labels]

    n_groups = (n + pages_per_host - 1) // pages_per_host
    group_ext = [rng.choices(ext_labels, weights=ext_mass)[0]
                 for _ in range(n_groups)]

    nodes = []
    for node_id in range(n):
        group, page = divmod(node_id, pages_per_host)
        ext = group_ext[group]
        nodes.append(GraphNode(node_id, _node_url(group, ext, page), ext))

    edges: list[tuple[int, int]] = []
    # one attractiveness entry per node (the +1 smoothing), plus one per
    # received in-link; drawing uniformly from this list is the weighted draw
    attract: list[int] = list(range(m))
    for later in range(m):
        for earlier in range(later):
            edges.append((later, earlier))
            attract.append(earlier)

    for source in range(m, n):
        targets: set[int] = set()
        while len(targets) < m:
            targets.add(rng.choice(attract))
        for target in sorted(targets):
            edges.append((source, target))
            attract.append(target)
        attract.append(source)

    return WebGraph(n=n, m=m, rng_seed=seed, nodes=nodes, edges=edges)


def backlink_counts(graph: WebGraph) -> dict[str, int]:
    """Ground-truth in-degree per node URL."""
    counts = {node.url: 0 for node in graph.nodes}
    for _, dst in graph.edges:
        counts[graph.nodes[dst].url] += 1
    return counts


def render_page(graph: WebGraph, node_id: int) -> bytes:
    """Minimal HTML page with one anchor per out-edge, in edge order."""
    if node_id < 0 or node_id >= len(graph.nodes):
        raise UnknownNode(node_id)
    node = graph.nodes[node_id]
    lines = [
        "<!DOCTYPE html>",
        "<html><head><title>node %d</title></head>" % node_id,
        "<body>",
        "<h1>%s</h1>" % node.url,
    ]
    for target in graph.out_adj[node_id]:
        lines.append('<p><a href="%s">node %d</a></p>' % (graph.nodes[target].url, target))
    lines.append("</body></html>")
    return ("\n".join(lines) + "\n").encode("ascii")


# -- graph file format -------------------------------------------------------

def save_graph(graph: WebGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("webgraph v1 n=%d m=%d seed=%d\n" % (graph.n, graph.m, graph.rng_seed))
        for node in graph.nodes:
            fh.write("node %d %s %s\n" % (node.node_id, node.url, node.extension))
        for src, dst in graph.edges:
            fh.write("edge %d %d\n" % (src, dst))


def load_graph(path) -> WebGraph:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) < 2 or header[0] != "webgraph" or header[1] != "v1":
            raise BadGraphFile("bad header in %s" % path)
        params = dict(tok.split("=", 1) for tok in header[2:] if "=" in tok)
        try:
            n = int(params["n"])
            m = int(params["m"])
            seed = int(params["seed"])
        except (KeyError, ValueError):
            raise BadGraphFile("bad header params in %s" % path) from None
        nodes: list[GraphNode] = []
        edges: list[tuple[int, int]] = []
        for lineno, line in enumerate(fh, 2):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "node" and len(parts) == 4:
                nodes.append(GraphNode(int(parts[1]), parts[2], parts[3]))
            elif parts[0] == "edge" and len(parts) == 3:
                edges.append((int(parts[1]), int(parts[2])))
            else:
                raise BadGraphFile("line %d: %r" % (lineno, line.rstrip()))
    if len(nodes) != n:
        raise BadGraphFile("header says n=%d but found %d nodes" % (n, len(nodes)))
    for node_id, node in enumerate(nodes):
        if node.node_id != node_id:
            raise BadGraphFile("node ids out of order at %d" % node.node_id)
    for src, dst in edges:
        if not (0 <= src < n and 0 <= dst < n):
            raise BadGraphFile("edge (%d, %d) references missing node" % (src, dst))
    return WebGraph(n=n, m=m, rng_seed=seed, nodes=nodes, edges=edges)


# -- HTTP responder -----------------------------------------------------------

class SimWebServer:
    """Serves every graph node as HTML at its URL's host + path.

    Requests are matched on the Host header, so crawlers point their socket
    at this server's address and keep the logical URL untouched. Optional
    per-request latency (fixed + uniform jitter) models slow sites.
    """

    def __init__(self, graph: WebGraph, host: str = "127.0.0.1", port: int = 0,
                 latency_ms: float = 0.0, jitter_ms: float = 0.0):
        self.graph = graph
        self.latency_ms = latency_ms
        self.jitter_ms = jitter_ms
        self.requests_served = 0
        self._count_lock = threading.Lock()
        self._index = graph.host_path_index()
        self._cache: dict[int, bytes] = {}
        self._rng = random.Random()

        class Server(ThreadingHTTPServer):
            daemon_threads = True

            def handle_error(self, request, client_address):
                # clients dropping keep-alive sockets mid-shutdown is routine
                log.debug("request error from %s", client_address, exc_info=True)

        self._httpd = Server((host, port), self._make_handler())
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._httpd.server_address[:2]
        return str(host), int(port)

    def _body_for(self, node_id: int) -> bytes:
        body = self._cache.get(node_id)
        if body is None:
            body = render_page(self.graph, node_id)
            self._cache[node_id] = body
        return body

    def _sleep_latency(self):
        if self.latency_ms <= 0 and self.jitter_ms <= 0:
            return
        delay = self.latency_ms
        if self.jitter_ms > 0:
            delay += self._rng.uniform(-self.jitter_ms, self.jitter_ms)
        if delay > 0:
            time.sleep(delay / 1000.0)

    def _make_handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def do_GET(self):
                server._sleep_latency()
                host = (self.headers.get("Host") or "").split(":")[0].lower()
                node_id = server._index.get((host, self.path))
                if node_id is None:
                    body = b"not found\n"
                    self.send_response(404)
                    self.send_header("Content-Type", "text/plain")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                    return
                body = server._body_for(node_id)
                self.send_response(200)
                self.send_header("Content-Type", "text/html; charset=ascii")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
                with server._count_lock:
                    server.requests_served += 1

            def log_message(self, fmt, *args):
                log.debug("sim %s " + fmt, self.client_address[0], *args)

        return Handler

    def start(self) -> "SimWebServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        name="simweb", daemon=True)
        self._thread.start()
        log.info("sim web serving %d pages on %s:%d", len(self.graph.nodes),
                 *self.address)
        return self

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
