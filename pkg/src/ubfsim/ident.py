"""Identity query protocol: codec, responder and client.

Wire format, one ASCII line each way::

    UBFIDENT/1 <TCP|UDP> <client_ip> <client_port> <server_ip> <server_port>\\n
    OK <uid> <egid> <username>\\n
    ERR <NO-SOCKET|INVALID|UNSUPPORTED-PROTO>\\n

Numbers are canonical decimal (no sign, no leading zeros), so decoding then
re-encoding a valid line reproduces it byte for byte.  Lines longer than 256
bytes, including the newline, are rejected.
"""

from __future__ import annotations

import enum
import re
import socket
import socketserver
import time
from dataclasses import dataclass
from typing import Callable, Protocol, Union

from .directory import USERNAME_RE
from .errors import IdentProtocolError, UnsupportedProtoError
from .host import Host, Proto, Role

MAX_LINE = 256
IDENT_PORT = 10113
DEFAULT_TIMEOUT_MS = 200
MAGIC = b"UBFIDENT/1"

_ADDR_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9._:-]{0,62}\Z")
_NUM_RE = re.compile(rb"(0|[1-9][0-9]{0,9})\Z")
_PROTO_TOKEN_RE = re.compile(rb"[A-Z][A-Z0-9]{0,15}\Z")
MAX_ID = 2**32 - 1


class ErrCode(str, enum.Enum):
    NO_SOCKET = "NO-SOCKET"
    INVALID = "INVALID"
    UNSUPPORTED_PROTO = "UNSUPPORTED-PROTO"


class QueryFailure(enum.Enum):
    """Client-side outcomes that never reached a decodable response."""

    TIMEOUT = "TIMEOUT"
    TRANSPORT_ERROR = "TRANSPORT_ERROR"


@dataclass(frozen=True)
class IdentQuery:
    proto: str
    client_ip: str
    client_port: int
    server_ip: str
    server_port: int


@dataclass(frozen=True)
class IdentOk:
    uid: int
    egid: int
    username: str


@dataclass(frozen=True)
class IdentErr:
    code: ErrCode


IdentResponse = Union[IdentOk, IdentErr]
QueryResult = Union[IdentOk, IdentErr, QueryFailure]


# -- codec ---------------------------------------------------------------------


def _num(raw: bytes, limit: int, what: str) -> int:
    if not _NUM_RE.match(raw):
        raise IdentProtocolError(f"bad {what} {raw[:16]!r}")
    value = int(raw)
    if value > limit:
        raise IdentProtocolError(f"{what} {value} out of range")
    return value


def _addr(raw: bytes) -> str:
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        raise IdentProtocolError("address is not ASCII") from None
    if not _ADDR_RE.match(text):
        raise IdentProtocolError(f"bad address token {text[:16]!r}")
    return text


def _body(line: bytes) -> bytes:
    if not isinstance(line, (bytes, bytearray)):
        raise IdentProtocolError("line must be bytes")
    if len(line) > MAX_LINE:
        raise IdentProtocolError(f"line longer than {MAX_LINE} bytes")
    if not line.endswith(b"\n"):
        raise IdentProtocolError("line not newline-terminated")
    body = bytes(line[:-1])
    if b"\n" in body or b"\r" in body:
        raise IdentProtocolError("embedded line break")
    return body


def _validate_query(q: IdentQuery) -> None:
    if q.proto not in (Proto.TCP.value, Proto.UDP.value):
        raise UnsupportedProtoError(f"unsupported protocol {q.proto!r}")
    for port in (q.client_port, q.server_port):
        if not isinstance(port, int) or isinstance(port, bool) or not 0 <= port <= 65535:
            raise IdentProtocolError(f"port {port!r} out of range")
    for addr in (q.client_ip, q.server_ip):
        if not isinstance(addr, str) or not _ADDR_RE.match(addr):
            raise IdentProtocolError(f"bad address token {addr!r}")


def encode_query(q: IdentQuery) -> bytes:
    _validate_query(q)
    return (f"UBFIDENT/1 {q.proto} {q.client_ip} {q.client_port} "
            f"{q.server_ip} {q.server_port}\n").encode("ascii")


def decode_query(line: bytes) -> IdentQuery:
    """Parse a request line.

    Raises :class:`UnsupportedProtoError` for a well-formed line naming an
    unknown protocol and :class:`IdentProtocolError` for anything else that
    is off-grammar.
    """
    parts = _body(line).split(b" ")
    if len(parts) != 6:
        raise IdentProtocolError(f"expected 6 fields, got {len(parts)}")
    magic, proto, cip, cport, sip, sport = parts
    if magic != MAGIC:
        raise IdentProtocolError("bad protocol tag")
    client_ip, server_ip = _addr(cip), _addr(sip)
    client_port = _num(cport, 65535, "port")
    server_port = _num(sport, 65535, "port")
    if proto not in (b"TCP", b"UDP"):
        if _PROTO_TOKEN_RE.match(proto):
            raise UnsupportedProtoError(f"unsupported protocol {proto.decode()}")
        raise IdentProtocolError("bad protocol token")
    return IdentQuery(proto.decode(), client_ip, client_port, server_ip, server_port)


def encode_response(r: IdentResponse) -> bytes:
    if isinstance(r, IdentErr):
        return f"ERR {ErrCode(r.code).value}\n".encode("ascii")
    if not (0 <= r.uid <= MAX_ID and 0 <= r.egid <= MAX_ID):
        raise IdentProtocolError("id out of range")
    if not USERNAME_RE.match(r.username):
        raise IdentProtocolError(f"bad username {r.username!r}")
    return f"OK {r.uid} {r.egid} {r.username}\n".encode("ascii")


def decode_response(line: bytes) -> IdentResponse:
    parts = _body(line).split(b" ")
    if parts[0] == b"ERR" and len(parts) == 2:
        try:
            return IdentErr(ErrCode(parts[1].decode("ascii")))
        except (UnicodeDecodeError, ValueError):
            raise IdentProtocolError("unknown error code") from None
    if parts[0] == b"OK" and len(parts) == 4:
        uid = _num(parts[1], MAX_ID, "uid")
        egid = _num(parts[2], MAX_ID, "egid")
        try:
            name = parts[3].decode("ascii")
        except UnicodeDecodeError:
            raise IdentProtocolError("username is not ASCII") from None
        if not USERNAME_RE.match(name):
            raise IdentProtocolError("bad username")
        return IdentOk(uid, egid, name)
    raise IdentProtocolError("malformed response")


# -- responder -----------------------------------------------------------------


def respond(host: Host, q: IdentQuery) -> IdentResponse:
    """Answer a query about an outbound socket on ``host``.  Read-only."""
    if q.proto not in (Proto.TCP.value, Proto.UDP.value):
        return IdentErr(ErrCode.UNSUPPORTED_PROTO)
    owner = host.lookup_socket_owner(q.proto, q.client_port, Role.OUTBOUND,
                                     (q.server_ip, q.server_port))
    if owner is None:
        return IdentErr(ErrCode.NO_SOCKET)
    return IdentOk(owner.uid, owner.egid, owner.username)


def handle_line(host: Host, line: bytes) -> bytes:
    """Full responder round: raw request bytes in, response line out."""
    try:
        q = decode_query(line)
    except UnsupportedProtoError:
        return encode_response(IdentErr(ErrCode.UNSUPPORTED_PROTO))
    except IdentProtocolError:
        return encode_response(IdentErr(ErrCode.INVALID))
    return encode_response(respond(host, q))


# -- transports ----------------------------------------------------------------


class Transport(Protocol):
    def exchange(self, addr: str, line: bytes, timeout_ms: int) -> bytes:
        """Send one request line to ``addr`` and return the reply line.

        Raises ``TimeoutError`` once the deadline passes and
        ``ConnectionError`` when the responder cannot be reached.
        """


class SimTransport:
    """In-process transport for the simulator.

    Each registered address maps to a host whose responder is reached
    through :func:`handle_line`.  Latency is simulated time; nothing sleeps.
    """

    def __init__(self) -> None:
        self.hosts: dict[str, Host] = {}
        self.latency_ms: dict[str, int] = {}
        self.down: set[str] = set()
        self.exchanges = 0

    def register(self, host: Host, latency_ms: int = 0, down: bool = False) -> None:
        self.hosts[host.address] = host
        self.latency_ms[host.address] = latency_ms
        if down:
            self.down.add(host.address)

    def exchange(self, addr: str, line: bytes, timeout_ms: int) -> bytes:
        self.exchanges += 1
        if addr not in self.hosts or addr in self.down:
            raise ConnectionError(f"no responder at {addr}")
        if self.latency_ms.get(addr, 0) > timeout_ms:
            raise TimeoutError(f"responder at {addr} did not answer within {timeout_ms} ms")
        return handle_line(self.hosts[addr], line)


class TcpTransport:
    """Real sockets; ``resolve`` maps an address token to ``(host, port)``."""

    def __init__(self, port: int = IDENT_PORT,
                 resolve: Callable[[str], tuple[str, int]] | None = None):
        self.port = port
        self.resolve = resolve or (lambda addr: (addr, self.port))

    def exchange(self, addr: str, line: bytes, timeout_ms: int) -> bytes:
        deadline = time.monotonic() + timeout_ms / 1000
        target = self.resolve(addr)
        try:
            with socket.create_connection(target, timeout=timeout_ms / 1000) as conn:
                conn.sendall(line)
                buf = b""
                while not buf.endswith(b"\n"):
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise TimeoutError("ident deadline passed")
                    conn.settimeout(remaining)
                    chunk = conn.recv(MAX_LINE + 1 - len(buf))
                    if not chunk:
                        raise ConnectionError("responder closed the connection")
                    buf += chunk
                    if len(buf) > MAX_LINE:
                        raise ConnectionError("oversized response")
                return buf
        except socket.timeout as exc:
            raise TimeoutError(str(exc)) from None


def query_remote(transport: Transport, remote_host_addr: str, q: IdentQuery,
                 timeout_ms: int = DEFAULT_TIMEOUT_MS) -> QueryResult:
    if timeout_ms <= 0:
        raise ValueError("timeout_ms must be positive")
    try:
        line = encode_query(q)
    except UnsupportedProtoError:
        return IdentErr(ErrCode.UNSUPPORTED_PROTO)
    except IdentProtocolError:
        return IdentErr(ErrCode.INVALID)
    try:
        reply = transport.exchange(remote_host_addr, line, timeout_ms)
    except TimeoutError:
        return QueryFailure.TIMEOUT
    except OSError:
        return QueryFailure.TRANSPORT_ERROR
    try:
        return decode_response(reply)
    except IdentProtocolError:
        return QueryFailure.TRANSPORT_ERROR


# -- TCP server ------------------------------------------------------------------


class _IdentHandler(socketserver.StreamRequestHandler):
    timeout = 5

    def handle(self) -> None:
        try:
            line = self.rfile.readline(MAX_LINE + 1)
        except OSError:
            return
        if len(line) > MAX_LINE:
            # drain nothing further; the request is already invalid
            reply = encode_response(IdentErr(ErrCode.INVALID))
        else:
            reply = handle_line(self.server.host, line)
        try:
            self.wfile.write(reply)
        except OSError:
            pass


class IdentServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, host: Host, bind: tuple[str, int] = ("127.0.0.1", IDENT_PORT)):
        self.host = host
        super().__init__(bind, _IdentHandler)
