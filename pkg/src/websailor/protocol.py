"""Wire vocabulary: line-delimited JSON messages over TCP.

One message per UTF-8 line, `{"type": <variant>, ...fields}`. Unknown
trailing fields are ignored so peers can evolve independently; unknown
types are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields as dc_fields

SLOW_DOWN = "SlowDown"
HURRY_UP = "HurryUp"


class ProtocolError(Exception):
    pass


class BadJson(ProtocolError):
    pass


class UnknownType(ProtocolError):
    pass


class MissingField(ProtocolError):
    def __init__(self, msg_type: str, field_name: str):
        super().__init__("%s missing field %r" % (msg_type, field_name))
        self.msg_type = msg_type
        self.field = field_name


@dataclass
class Register:
    client_id: str
    dsets: list[int]


@dataclass
class SeedRequest:
    client_id: str
    max: int


@dataclass
class SeedBatch:
    urls: list[str]


@dataclass
class LinkReport:
    client_id: str
    source_url: str
    outbound: list[str]


@dataclass
class PageStored:
    client_id: str
    doc_id: int


@dataclass
class RateCommand:
    direction: str  # SLOW_DOWN or HURRY_UP
    target_connections: int


@dataclass
class Forward:
    url: str


@dataclass
class Ack:
    pass


@dataclass
class Err:
    code: str
    detail: str


Message = (Register, SeedRequest, SeedBatch, LinkReport, PageStored,
           RateCommand, Forward, Ack, Err)

_TYPES = {cls.__name__: cls for cls in Message}


def encode(msg) -> bytes:
    """One `\\n`-terminated JSON line; strings are escaped so the payload
    itself never contains a raw newline."""
    name = type(msg).__name__
    if name not in _TYPES:
        raise ProtocolError("not a protocol message: %r" % (msg,))
    obj = {"type": name}
    for f in dc_fields(msg):
        obj[f.name] = getattr(msg, f.name)
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")


def decode(line: bytes | str):
    """Parse one line back into a message object.

    Raises BadJson, UnknownType or MissingField; extra fields are dropped.
    """
    if isinstance(line, bytes):
        line = line.decode("utf-8", errors="replace")
    line = line.strip()
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise BadJson(str(exc)) from None
    if not isinstance(obj, dict):
        raise BadJson("message is not a JSON object")
    name = obj.get("type")
    if name is None:
        raise MissingField("<message>", "type")
    cls = _TYPES.get(name)
    if cls is None:
        raise UnknownType(str(name))
    kwargs = {}
    for f in dc_fields(cls):
        if f.name not in obj:
            raise MissingField(name, f.name)
        kwargs[f.name] = obj[f.name]
    return cls(**kwargs)
