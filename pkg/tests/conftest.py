"""Shared helpers for the test suite."""

import socket
import time

import pytest

from websailor import protocol
from websailor.partition import DSet, normalize_url


def wait_until(cond, timeout=10.0, interval=0.02):
    """Poll `cond` until truthy or the timeout elapses."""
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if cond():
            return True
        time.sleep(interval)
    return False


class ProtocolPeer:
    """Raw protocol session for poking servers directly in tests."""

    def __init__(self, addr):
        self.sock = socket.create_connection(tuple(addr), timeout=5)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.rfile = self.sock.makefile("rb")

    def send(self, msg):
        self.sock.sendall(protocol.encode(msg))

    def send_raw(self, data: bytes):
        self.sock.sendall(data)

    def recv(self, timeout=5.0):
        self.sock.settimeout(timeout)
        try:
            line = self.rfile.readline()
        finally:
            self.sock.settimeout(None)
        if not line:
            raise ConnectionError("peer closed")
        return protocol.decode(line)

    def rpc(self, msg, timeout=5.0):
        """Send and return the first non-RateCommand response."""
        self.send(msg)
        while True:
            resp = self.recv(timeout)
            if not isinstance(resp, protocol.RateCommand):
                return resp

    def quiet(self, window=0.2) -> bool:
        """True if nothing arrives within `window` seconds."""
        self.sock.settimeout(window)
        try:
            data = self.sock.recv(1, socket.MSG_PEEK)
            return not data
        except socket.timeout:
            return True
        finally:
            self.sock.settimeout(None)

    def close(self):
        # shutdown, not just close: the makefile reader holds a reference to
        # the fd, so close() alone would never send the FIN
        for action in (lambda: self.sock.shutdown(socket.SHUT_RDWR),
                       self.rfile.close, self.sock.close):
            try:
                action()
            except OSError:
                pass


def url(s: str):
    return normalize_url(s)


_WEIRD_STRINGS = ["", "plain", "with space", 'quote"inside', "back\\slash",
                  "new\nline", "tab\ttab", "ünïcodé ✓", "日本語",
                  "{\"type\":\"Ack\"}", "\r\n", "\x00nul"]


def random_message(rng):
    """One random protocol message, fields drawn to stress the codec."""
    s = lambda: rng.choice(_WEIRD_STRINGS) + str(rng.randrange(1000))
    maker = rng.randrange(9)
    if maker == 0:
        return protocol.Register(s(), [rng.randrange(100) for _ in range(rng.randrange(4))])
    if maker == 1:
        return protocol.SeedRequest(s(), rng.randrange(1, 10**6))
    if maker == 2:
        return protocol.SeedBatch([s() for _ in range(rng.randrange(5))])
    if maker == 3:
        return protocol.LinkReport(s(), s(), [s() for _ in range(rng.randrange(6))])
    if maker == 4:
        return protocol.PageStored(s(), rng.randrange(2**64))
    if maker == 5:
        return protocol.RateCommand(rng.choice([protocol.SLOW_DOWN, protocol.HURRY_UP]),
                                    rng.randrange(1, 1000))
    if maker == 6:
        return protocol.Forward(s())
    if maker == 7:
        return protocol.Ack()
    return protocol.Err(s(), s())


@pytest.fixture
def two_dset_table():
    return [DSet(1, frozenset({".com"})),
            DSet(2, frozenset({".edu", ".net", ".org"}))]
