"""Plain-text key-value config shared by every CLI subcommand.

One setting per line, first token is the key; `#` starts a comment.
Repeatable keys (`dset`, `child`, `client`, `seed_url`) accumulate, all
others keep the last value. Flag overrides are applied by the CLI on top.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .partition import DSet, parse_routing_table, validate_extension

MULTI_KEYS = {"dset", "child", "client", "seed_url"}


class BadConfig(ValueError):
    pass


@dataclass
class Config:
    values: dict[str, str] = field(default_factory=dict)
    multi: dict[str, list[str]] = field(default_factory=dict)

    def get(self, key: str, default=None, cast=str):
        if key not in self.values:
            return default
        raw = self.values[key]
        try:
            if cast is bool:
                return raw.lower() in ("1", "true", "yes", "on")
            return cast(raw)
        except ValueError:
            raise BadConfig("bad value for %s: %r" % (key, raw)) from None

    def lines(self, key: str) -> list[str]:
        return self.multi.get(key, [])

    def set(self, key: str, value) -> None:
        self.values[key] = str(value)

    def routing_table(self) -> list[DSet]:
        return parse_routing_table("dset %s" % line for line in self.lines("dset"))

    def children(self) -> dict[int, tuple[str, int]]:
        out: dict[int, tuple[str, int]] = {}
        for line in self.lines("child"):
            parts = line.split()
            if len(parts) != 2:
                raise BadConfig("child line needs '<dset-id> <host:port>': %r" % line)
            out[int(parts[0])] = parse_addr(parts[1])
        return out


def parse_config_text(text: str) -> Config:
    cfg = Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        rest = rest.strip()
        if not rest:
            raise BadConfig("line %d: key %r has no value" % (lineno, key))
        if key in MULTI_KEYS:
            cfg.multi.setdefault(key, []).append(rest)
        else:
            cfg.values[key] = rest
    return cfg


def load_config(path) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port:
        raise BadConfig("expected host:port, got %r" % text)
    try:
        return host, int(port)
    except ValueError:
        raise BadConfig("bad port in %r" % text) from None


def parse_weights(text: str) -> dict[str, float]:
    """`.com=0.5,.edu=0.2` -> {'.com': 0.5, '.edu': 0.2}"""
    weights: dict[str, float] = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        ext, _, value = item.partition("=")
        validate_extension(ext.strip())
        try:
            weights[ext.strip()] = float(value)
        except ValueError:
            raise BadConfig("bad weight %r" % item) from None
    if not weights:
        raise BadConfig("empty weight spec %r" % text)
    return weights


@dataclass
class ClientSpec:
    """One `client` line of a run-local config:
    `client <id> <dset-ids> [connections=N] [join=T] [serial]`."""
    client_id: str
    dsets: list[int]
    connections: int = 10
    join_at: float = 0.0
    serial: bool = False


def parse_client_spec(line: str) -> ClientSpec:
    parts = line.split()
    if len(parts) < 2:
        raise BadConfig("client line needs '<id> <dset-ids> ...': %r" % line)
    client_id = parts[0]
    try:
        dsets = [int(tok) for tok in parts[1].split(",")]
    except ValueError:
        raise BadConfig("bad dset list %r" % parts[1]) from None
    spec = ClientSpec(client_id, dsets)
    for token in parts[2:]:
        if token == "serial":
            spec.serial = True
            continue
        key, _, value = token.partition("=")
        try:
            if key == "connections":
                spec.connections = int(value)
            elif key == "join":
                spec.join_at = float(value)
            else:
                raise BadConfig("unknown client option %r" % token)
        except ValueError:
            raise BadConfig("bad client option %r" % token) from None
    return spec
