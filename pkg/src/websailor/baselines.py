"""Static-crawler coordination modes simulated over a synthetic web graph.

Firewall (discard foreign links), Cross-over (follow them anyway) and
Exchange (mail them to their owner) are run as synchronous round-based
crawls so their overlap / lost-URL / channel counts are exactly
reproducible, plus an in-memory rendition of the server-centric design
using the same registry dispatch code as the live system.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

from .partition import DSet, normalize_url
from .registry import UrlRegistry, doc_id
from .simweb import WebGraph


class BadPartition(ValueError):
    pass


@dataclass
class BaselineMetrics:
    mode: str
    pages_stored: int
    distinct_pages: int
    overlap: int
    lost_urls: int
    messages: int
    channels: int

    CSV_HEADER = "mode,pages_stored,distinct_pages,overlap,lost_urls,messages,channels"

    def csv_row(self) -> str:
        return "%s,%d,%d,%d,%d,%d,%d" % (
            self.mode, self.pages_stored, self.distinct_pages, self.overlap,
            self.lost_urls, self.messages, self.channels)


def _owner_map(graph: WebGraph, partitions: Sequence) -> dict[str, int]:
    owners: dict[str, int] = {}
    for idx, part in enumerate(partitions):
        if not part:
            raise BadPartition("crawler %d owns no extensions" % idx)
        for ext in part:
            if ext in owners:
                raise BadPartition("extension %s assigned twice" % ext)
            owners[ext] = idx
    missing = graph.extensions() - set(owners)
    if missing:
        raise BadPartition("graph extensions not covered: %s" % sorted(missing))
    return owners


def _seed_nodes(graph: WebGraph, owners: dict[str, int], n_crawlers: int,
                seeds_per_crawler) -> list[list[int]]:
    """Deterministic seed placement: newest node ids of each partition (every
    late node carries out-links, so crawls actually fan out).

    `seeds_per_crawler` may be one int for all crawlers or a per-crawler list
    (metric values depend on seed placement, so it is always explicit).
    """
    if isinstance(seeds_per_crawler, int):
        limits = [seeds_per_crawler] * n_crawlers
    else:
        limits = list(seeds_per_crawler)
        if len(limits) != n_crawlers:
            raise BadPartition("need one seed count per crawler, got %d for %d"
                               % (len(limits), n_crawlers))
    seeds: list[list[int]] = [[] for _ in range(n_crawlers)]
    for node in reversed(graph.nodes):
        crawler = owners[node.extension]
        if len(seeds[crawler]) < limits[crawler]:
            seeds[crawler].append(node.node_id)
        if all(len(s) >= limit for s, limit in zip(seeds, limits)):
            break
    return seeds


def _metrics(mode: str, stored: list[set[int]], lost_urls: int, messages: int,
             channels: int) -> BaselineMetrics:
    total = sum(len(s) for s in stored)
    distinct: set[int] = set()
    for s in stored:
        distinct |= s
    return BaselineMetrics(mode=mode, pages_stored=total,
                           distinct_pages=len(distinct), overlap=total - len(distinct),
                           lost_urls=lost_urls, messages=messages, channels=channels)


def run_firewall(graph: WebGraph, partitions: Sequence, seeds_per_crawler,
                 rounds: int | None = None, slots: int = 1) -> BaselineMetrics:
    """Each crawler BFS-crawls its own partition and discards foreign URLs.

    Zero overlap by construction; URLs whose owner never reaches them are
    lost to the crawl.
    """
    owners = _owner_map(graph, partitions)
    n = len(partitions)
    node_owner = [owners[node.extension] for node in graph.nodes]
    frontiers = [deque(s) for s in _seed_nodes(graph, owners, n, seeds_per_crawler)]
    seen = [set(f) for f in frontiers]
    stored: list[set[int]] = [set() for _ in range(n)]
    discarded: set[int] = set()
    budget = rounds
    while any(frontiers) and (budget is None or budget > 0):
        if budget is not None:
            budget -= 1
        for c in range(n):
            for _ in range(slots):
                if not frontiers[c]:
                    break
                node = frontiers[c].popleft()
                stored[c].add(node)
                for target in graph.out_adj[node]:
                    if node_owner[target] == c:
                        if target not in seen[c]:
                            seen[c].add(target)
                            frontiers[c].append(target)
                    else:
                        discarded.add(target)
    lost = sum(1 for node in discarded if node not in stored[node_owner[node]])
    return _metrics("firewall", stored, lost, 0, 0)


def run_crossover(graph: WebGraph, partitions: Sequence, seeds_per_crawler,
                  rounds: int | None = None, slots: int = 1) -> BaselineMetrics:
    """Crawlers follow foreign URLs too, deduplicating only against their own
    visited set, so the same page can be stored by several crawlers."""
    owners = _owner_map(graph, partitions)
    n = len(partitions)
    frontiers = [deque(s) for s in _seed_nodes(graph, owners, n, seeds_per_crawler)]
    seen = [set(f) for f in frontiers]
    stored: list[set[int]] = [set() for _ in range(n)]
    budget = rounds
    while any(frontiers) and (budget is None or budget > 0):
        if budget is not None:
            budget -= 1
        for c in range(n):
            for _ in range(slots):
                if not frontiers[c]:
                    break
                node = frontiers[c].popleft()
                stored[c].add(node)
                for target in graph.out_adj[node]:
                    if target not in seen[c]:
                        seen[c].add(target)
                        frontiers[c].append(target)
    return _metrics("crossover", stored, 0, 0, 0)


def run_exchange(graph: WebGraph, partitions: Sequence, seeds_per_crawler,
                 rounds: int | None = None, slots: int = 1) -> BaselineMetrics:
    """Foreign URLs are mailed to their owning crawler over pairwise links.

    Every cross-partition traversal costs one message; the channel count is
    the full mesh C(C-1)/2.
    """
    owners = _owner_map(graph, partitions)
    n = len(partitions)
    node_owner = [owners[node.extension] for node in graph.nodes]
    frontiers = [deque(s) for s in _seed_nodes(graph, owners, n, seeds_per_crawler)]
    seen = [set(f) for f in frontiers]
    stored: list[set[int]] = [set() for _ in range(n)]
    inboxes: list[list[int]] = [[] for _ in range(n)]
    messages = 0
    budget = rounds
    while (any(frontiers) or any(inboxes)) and (budget is None or budget > 0):
        if budget is not None:
            budget -= 1
        for c in range(n):
            for node in inboxes[c]:
                if node not in seen[c]:
                    seen[c].add(node)
                    frontiers[c].append(node)
            inboxes[c].clear()
        for c in range(n):
            for _ in range(slots):
                if not frontiers[c]:
                    break
                node = frontiers[c].popleft()
                stored[c].add(node)
                for target in graph.out_adj[node]:
                    owner = node_owner[target]
                    if owner == c:
                        if target not in seen[c]:
                            seen[c].add(target)
                            frontiers[c].append(target)
                    else:
                        messages += 1
                        inboxes[owner].append(target)
    channels = n * (n - 1) // 2
    return _metrics("exchange", stored, 0, messages, channels)


def run_websailor_sim(graph: WebGraph, partitions: Sequence, seeds_per_crawler,
                      rounds: int | None = None, slots: int = 1,
                      batch_cap: int = 10, dispatch_sink: list | None = None,
                      ) -> BaselineMetrics:
    """Protocol-free rendition of the server-centric design: one registry per
    partition (shared dispatch code with the live server), clients pull
    popularity-ordered batches and report links back centrally.

    Messages count seed batches plus per-page link reports; channels is the
    star topology, one per client.
    """
    owners = _owner_map(graph, partitions)
    n = len(partitions)
    node_owner = [owners[node.extension] for node in graph.nodes]
    table = [DSet(c, frozenset(part)) for c, part in enumerate(partitions)]
    regs = {c: UrlRegistry(c, table[c].extensions) for c in range(n)}
    urls = [normalize_url(node.url) for node in graph.nodes]
    node_by_doc = {doc_id(u): i for i, u in enumerate(urls)}
    for c, seed_nodes in enumerate(_seed_nodes(graph, owners, n, seeds_per_crawler)):
        for node in seed_nodes:
            regs[c].record_reference(urls[node])
    buffers: list[deque[int]] = [deque() for _ in range(n)]
    stored: list[set[int]] = [set() for _ in range(n)]
    messages = 0
    budget = rounds
    while budget is None or budget > 0:
        if budget is not None:
            budget -= 1
        progress = False
        for c in range(n):
            if not buffers[c]:
                batch = regs[c].take_seeds(batch_cap)
                if batch:
                    messages += 1  # one SeedRequest/SeedBatch exchange
                    buffers[c].extend(node_by_doc[doc_id(u)] for u in batch)
                    if dispatch_sink is not None:
                        dispatch_sink.extend(str(u) for u in batch)
            for _ in range(slots):
                if not buffers[c]:
                    break
                node = buffers[c].popleft()
                stored[c].add(node)
                messages += 1  # the link report for this page
                for target in graph.out_adj[node]:
                    regs[node_owner[target]].record_reference(urls[target])
                regs[c].mark_visited(doc_id(urls[node]))
                progress = True
        if not progress and not any(buffers) \
                and all(reg.pending_count() == 0 for reg in regs.values()):
            break
    return _metrics("websailor", stored, 0, messages, n)


RUNNERS = {
    "firewall": run_firewall,
    "crossover": run_crossover,
    "exchange": run_exchange,
    "websailor": run_websailor_sim,
}
