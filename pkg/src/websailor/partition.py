"""URL normalization and domain-extension partitioning.

URL identity everywhere in the system is the byte equality of the
normalized serialization produced here, so every component (registries,
repositories, crawl clients) must funnel URLs through normalize_url
before comparing or hashing them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from urllib.parse import urljoin, urlsplit

_EXTENSION_RE = re.compile(r"\.[a-z0-9]+")
_DEFAULT_PORTS = {"http": 80, "https": 443}


class UrlError(ValueError):
    """Base class for URL normalization failures."""


class MalformedUrl(UrlError):
    pass


class MissingBase(UrlError):
    pass


class UnsupportedScheme(UrlError):
    pass


class NoExtension(UrlError):
    pass


class BadRoutingTable(ValueError):
    pass


@dataclass(frozen=True)
class NormalizedUrl:
    """Canonical URL form: lowercase host, no fragment, no default port."""

    scheme: str
    host: str
    port: int | None
    path: str
    query: str | None

    def serialize(self) -> str:
        host = self.host
        if ":" in host:  # bare IPv6 literal needs brackets back
            host = "[%s]" % host
        netloc = host if self.port is None else "%s:%d" % (host, self.port)
        url = "%s://%s%s" % (self.scheme, netloc, self.path)
        if self.query is not None:
            url += "?" + self.query
        return url

    def __str__(self) -> str:
        return self.serialize()


def _remove_dot_segments(path: str) -> str:
    # RFC 3986 section 5.2.4
    output: list[str] = []
    for segment in path.split("/"):
        if segment == ".":
            continue
        if segment == "..":
            if len(output) > 1:
                output.pop()
            continue
        output.append(segment)
    # trailing "." / ".." leave a directory reference, keep the slash
    if path.endswith(("/.", "/..")):
        output.append("")
    resolved = "/".join(output)
    if path.startswith("/") and not resolved.startswith("/"):
        resolved = "/" + resolved
    return resolved


def normalize_url(raw: str, base: NormalizedUrl | None = None) -> NormalizedUrl:
    """Return the canonical form of `raw`, resolved against `base` if relative.

    Fragments are stripped, the host is lowercased, default ports removed and
    "." / ".." path segments resolved. Only http and https are accepted.
    Raises MalformedUrl, MissingBase or UnsupportedScheme.
    """
    candidate = raw.strip()
    if not candidate:
        raise MalformedUrl("empty URL")
    try:
        parts = urlsplit(candidate)
    except ValueError as exc:
        raise MalformedUrl("%s: %s" % (candidate, exc)) from None
    scheme = parts.scheme.lower()
    if scheme and scheme not in _DEFAULT_PORTS:
        raise UnsupportedScheme(scheme)
    if not scheme:
        # relative reference (path-only or scheme-relative)
        if base is None:
            raise MissingBase(candidate)
        try:
            parts = urlsplit(urljoin(base.serialize(), candidate))
        except ValueError as exc:
            raise MalformedUrl("%s: %s" % (candidate, exc)) from None
        scheme = parts.scheme.lower()
        if scheme not in _DEFAULT_PORTS:
            raise UnsupportedScheme(scheme)
    try:
        host = parts.hostname
        port = parts.port
    except ValueError as exc:
        raise MalformedUrl("%s: %s" % (candidate, exc)) from None
    if not host:
        raise MalformedUrl("no host in %r" % candidate)
    if port == _DEFAULT_PORTS[scheme]:
        port = None
    path = _remove_dot_segments(parts.path) or "/"
    if not path.startswith("/"):
        path = "/" + path
    query = parts.query or None  # a bare trailing "?" folds to no query
    return NormalizedUrl(scheme, host, port, path, query)


def validate_extension(label: str) -> str:
    """Check a domain-extension label like ".com"; returns it unchanged."""
    if not _EXTENSION_RE.fullmatch(label):
        raise ValueError("bad domain extension %r (want e.g. '.com')" % label)
    return label


def extract_extension(url: NormalizedUrl) -> str:
    """Final dot-separated label of the host, e.g. ".edu".

    Hosts without a dot (or with a non [a-z0-9] final label) have no home
    in the extension partitioning and raise NoExtension.
    """
    labels = url.host.split(".")
    if len(labels) < 2:
        raise NoExtension(url.host)
    ext = "." + labels[-1]
    if not _EXTENSION_RE.fullmatch(ext):
        raise NoExtension(url.host)
    return ext


@dataclass(frozen=True)
class DSet:
    """A crawl partition: a set of domain extensions owned together."""

    id: int
    extensions: frozenset[str]

    def __post_init__(self):
        if not self.extensions:
            raise ValueError("DSet %d has no extensions" % self.id)
        for ext in self.extensions:
            validate_extension(ext)


def validate_routing_table(table: list[DSet]) -> list[DSet]:
    """Enforce the partition property: no extension in two DSets, unique ids."""
    seen_ids: set[int] = set()
    seen_ext: dict[str, int] = {}
    for dset in table:
        if dset.id in seen_ids:
            raise BadRoutingTable("duplicate dset id %d" % dset.id)
        seen_ids.add(dset.id)
        for ext in dset.extensions:
            if ext in seen_ext:
                raise BadRoutingTable(
                    "extension %s appears in dsets %d and %d"
                    % (ext, seen_ext[ext], dset.id)
                )
            seen_ext[ext] = dset.id
    return table


def dset_of(ext: str, table: list[DSet]) -> int | None:
    """DSet id owning `ext`, or None when the extension is unassigned."""
    for dset in table:
        if ext in dset.extensions:
            return dset.id
    return None


def parse_routing_table(lines) -> list[DSet]:
    """Parse `dset <id>: <ext> [<ext> ...]` lines into a validated table."""
    table: list[DSet] = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if not line.startswith("dset "):
            raise BadRoutingTable("line %d: expected 'dset <id>: ...'" % lineno)
        head, sep, tail = line[5:].partition(":")
        if not sep:
            raise BadRoutingTable("line %d: missing ':'" % lineno)
        try:
            dset_id = int(head.strip())
        except ValueError:
            raise BadRoutingTable("line %d: bad dset id %r" % (lineno, head.strip()))
        exts = tail.split()
        if not exts:
            raise BadRoutingTable("line %d: dset %d has no extensions" % (lineno, dset_id))
        try:
            table.append(DSet(dset_id, frozenset(exts)))
        except ValueError as exc:
            raise BadRoutingTable("line %d: %s" % (lineno, exc))
    return validate_routing_table(table)


def format_routing_table(table: list[DSet]) -> str:
    lines = []
    for dset in table:
        lines.append("dset %d: %s" % (dset.id, " ".join(sorted(dset.extensions))))
    return "\n".join(lines) + "\n"


def load_routing_table(path) -> list[DSet]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_routing_table(fh)
