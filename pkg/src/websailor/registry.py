"""Per-DSet URL registry: hash-bucketed store of every known URL.

Each entry tracks the back-link count (how many times the URL was
referenced) and a lifecycle state Pending -> Dispatched -> Visited.
Dispatch order is best-first by priority (back-link count by default),
ties broken by ascending doc id, which makes dispatch deterministic and
externally checkable against a sort oracle.
"""

from __future__ import annotations

import heapq
import logging
import threading
import time
from dataclasses import dataclass

from .partition import NormalizedUrl, extract_extension, NoExtension

log = logging.getLogger("websailor.registry")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

PENDING = "Pending"
DISPATCHED = "Dispatched"
VISITED = "Visited"

DEFAULT_BUCKETS = 1024


class RegistryError(Exception):
    pass


class WrongDSet(RegistryError):
    pass


class UnknownDocId(RegistryError):
    pass


class InvalidTransition(RegistryError):
    pass


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a hash; fixed algorithm so doc ids are portable."""
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def doc_id(url: NormalizedUrl) -> int:
    return fnv1a_64(url.serialize().encode("utf-8"))


def bucket_index(doc: int, n_buckets: int) -> int:
    return doc % n_buckets


@dataclass
class UrlNode:
    doc_id: int
    url: NormalizedUrl
    count: int = 1
    state: str = PENDING
    dispatched_at: float | None = None


class UrlRegistry:
    """Thread-safe registry for one DSet.

    Nodes live in `buckets[doc_id % n_buckets]`; a lazy max-heap over
    (-priority, doc_id) keeps take_seeds O(log n) even though counts keep
    growing. The priority function must be nondecreasing in successive
    references to the same node (the default, the raw back-link count, is).
    """

    def __init__(self, dset_id: int, extensions: frozenset[str] | set[str],
                 n_buckets: int = DEFAULT_BUCKETS, priority=None):
        if n_buckets < 1:
            raise ValueError("n_buckets must be >= 1")
        self.dset_id = dset_id
        self.extensions = frozenset(extensions)
        self.n_buckets = n_buckets
        self.buckets: list[list[UrlNode]] = [[] for _ in range(n_buckets)]
        self._priority = priority or (lambda node: node.count)
        self._heap: list[tuple[int, int]] = []  # (-priority, doc_id)
        self._by_id: dict[int, UrlNode] = {}
        self._pending = 0
        self._dispatched_open = 0
        self._visited = 0
        self._references = 0
        self.collision_drops = 0
        self._lock = threading.Lock()

    # -- core operations ---------------------------------------------------

    def record_reference(self, url: NormalizedUrl) -> tuple[int, int]:
        """Insert the URL or bump its back-link count; returns (doc_id, count)."""
        try:
            ext = extract_extension(url)
        except NoExtension:
            raise WrongDSet("%s has no extension" % url)
        if ext not in self.extensions:
            raise WrongDSet("%s not in dset %d %s" % (ext, self.dset_id,
                                                      sorted(self.extensions)))
        doc = doc_id(url)
        with self._lock:
            self._references += 1
            node = self._by_id.get(doc)
            if node is None:
                node = UrlNode(doc, url)
                self._by_id[doc] = node
                self.buckets[bucket_index(doc, self.n_buckets)].append(node)
                self._pending += 1
            else:
                if node.url != url:
                    # 64-bit collision: treat as the same document, drop the
                    # second spelling but keep the reference.
                    self.collision_drops += 1
                    log.warning("doc id collision: %s vs %s", node.url, url)
                node.count += 1
            if node.state == PENDING:
                heapq.heappush(self._heap, (-self._priority(node), doc))
            return doc, node.count

    def take_seeds(self, k: int) -> list[NormalizedUrl]:
        """Up to k Pending URLs, best-first by (priority desc, doc_id asc).

        Returned nodes move to Dispatched and are never handed out again.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        out: list[NormalizedUrl] = []
        now = time.monotonic()
        with self._lock:
            while len(out) < k and self._heap:
                neg_prio, doc = heapq.heappop(self._heap)
                node = self._by_id[doc]
                if node.state != PENDING or -neg_prio != self._priority(node):
                    continue  # stale heap entry
                node.state = DISPATCHED
                node.dispatched_at = now
                self._pending -= 1
                self._dispatched_open += 1
                out.append(node.url)
        return out

    def mark_visited(self, doc: int) -> None:
        with self._lock:
            node = self._by_id.get(doc)
            if node is None:
                raise UnknownDocId(doc)
            if node.state == PENDING:
                raise InvalidTransition("doc %d visited before dispatch" % doc)
            if node.state == DISPATCHED:
                node.state = VISITED
                self._dispatched_open -= 1
                self._visited += 1

    def requeue_stale(self, older_than: float) -> int:
        """Return Dispatched nodes older than `older_than` seconds to Pending.

        Off by default at the call sites; exists for deployments where a dead
        client would otherwise strand its seeds forever.
        """
        cutoff = time.monotonic() - older_than
        requeued = 0
        with self._lock:
            for node in self._by_id.values():
                if node.state == DISPATCHED and node.dispatched_at is not None \
                        and node.dispatched_at < cutoff:
                    node.state = PENDING
                    node.dispatched_at = None
                    self._pending += 1
                    self._dispatched_open -= 1
                    heapq.heappush(self._heap, (-self._priority(node), node.doc_id))
                    requeued += 1
        return requeued

    # -- inspection ---------------------------------------------------------

    def pending_count(self) -> int:
        with self._lock:
            return self._pending

    def dispatched_open_count(self) -> int:
        with self._lock:
            return self._dispatched_open

    def visited_count(self) -> int:
        with self._lock:
            return self._visited

    def reference_count(self) -> int:
        with self._lock:
            return self._references

    def __len__(self) -> int:
        with self._lock:
            return len(self._by_id)

    def get(self, doc: int) -> UrlNode | None:
        with self._lock:
            return self._by_id.get(doc)

    def chain_stats(self) -> tuple[float, int]:
        """(mean chain length, max chain length) over the hash buckets."""
        with self._lock:
            if not self._by_id:
                return 0.0, 0
            longest = max(len(chain) for chain in self.buckets)
            return len(self._by_id) / self.n_buckets, longest

    def snapshot_lines(self) -> list[str]:
        """Debug dump: `doc_id<TAB>count<TAB>state<TAB>url`, sorted by doc id."""
        with self._lock:
            nodes = sorted(self._by_id.values(), key=lambda n: n.doc_id)
            return ["%d\t%d\t%s\t%s" % (n.doc_id, n.count, n.state, n.url)
                    for n in nodes]
