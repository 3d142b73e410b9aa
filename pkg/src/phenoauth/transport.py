"""Message delivery: an interposable in-process channel and a framed socket transport.

Both carry one authentication exchange (M1 to the verifier, M2 back) and log
every traversal in a :class:`Transcript`.  The interposer sees each message
before delivery and decides its fate, which is how the adversary harness
drops, rewrites, delays or injects traffic.
"""

from __future__ import annotations

import socket
import struct
import threading
from collections.abc import Callable
from dataclasses import dataclass, field

from .errors import ChannelClosed, DecodeError
from .protocol import AbortReason, Node, SessionOutcome

TO_VERIFIER = "P->V"
TO_PROVER = "V->P"
DEFAULT_STEP_BUDGET = 4
MAX_FRAME = 1 << 24


@dataclass(frozen=True)
class Deliver:
    pass


@dataclass(frozen=True)
class Drop:
    pass


@dataclass(frozen=True)
class Replace:
    data: bytes


@dataclass(frozen=True)
class Delay:
    steps: int


Action = Deliver | Drop | Replace | Delay
Interposer = Callable[[str, bytes], Action]


def identity(direction: str, data: bytes) -> Action:
    return Deliver()


@dataclass(frozen=True)
class Event:
    step: int
    direction: str
    original: bytes
    delivered: bytes | None  # None when dropped or timed out


@dataclass
class Transcript:
    events: list[Event] = field(default_factory=list)

    def append(self, event: Event) -> None:
        self.events.append(event)

    def messages(self, direction: str) -> list[bytes]:
        return [e.delivered for e in self.events if e.direction == direction and e.delivered is not None]


class Channel:
    """In-process channel with a step clock.

    Each send costs one step; ``Delay(k)`` costs ``k`` more.  A message whose
    delivery step exceeds the budget is never delivered and the receiver
    times out.
    """

    def __init__(self, interposer: Interposer = identity, step_budget: int = DEFAULT_STEP_BUDGET):
        self.interposer = interposer
        self.step_budget = step_budget
        self.transcript = Transcript()
        self.step = 0
        self.closed = False

    def send(self, direction: str, data: bytes) -> bytes | None:
        if self.closed:
            raise ChannelClosed("channel is closed")
        self.step += 1
        action = self.interposer(direction, data)
        delivered: bytes | None = data
        if isinstance(action, Drop):
            delivered = None
        elif isinstance(action, Replace):
            delivered = bytes(action.data)
        elif isinstance(action, Delay):
            self.step += max(0, action.steps)
        if self.step > self.step_budget:
            delivered = None
        self.transcript.append(Event(self.step, direction, data, delivered))
        return delivered

    def close(self) -> None:
        self.closed = True


@dataclass
class SessionReport:
    prover: SessionOutcome
    verifier: SessionOutcome | None
    transcript: Transcript

    @property
    def ok(self) -> bool:
        return self.prover.ok and self.verifier is not None and self.verifier.ok

    @property
    def keys_agree(self) -> bool:
        return self.ok and self.prover.mk == self.verifier.mk


def run_session(prover: Node, verifier: Node, peer_label: str | None = None,
                channel: Channel | None = None) -> SessionReport:
    """One authentication exchange over an in-process channel."""
    channel = channel or Channel()
    peer_label = peer_label or verifier.label
    m1, pending = prover.auth_initiate(peer_label)
    verifier_outcome = None
    m1_in = channel.send(TO_VERIFIER, m1)
    if m1_in is None:
        return SessionReport(prover.auth_abort(pending), None, channel.transcript)
    m2, verifier_outcome = verifier.auth_respond(m1_in)
    if m2 is None:
        return SessionReport(prover.auth_abort(pending), verifier_outcome, channel.transcript)
    m2_in = channel.send(TO_PROVER, m2)
    if m2_in is None:
        return SessionReport(prover.auth_abort(pending), verifier_outcome, channel.transcript)
    return SessionReport(prover.auth_finalize(pending, m2_in), verifier_outcome, channel.transcript)


# --- socket transport --------------------------------------------------------

def write_frame(sock: socket.socket, data: bytes) -> None:
    sock.sendall(struct.pack("<I", len(data)) + data)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ChannelClosed("peer closed the connection")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(sock, 4))
    if n > MAX_FRAME:
        raise DecodeError(f"frame of {n} bytes exceeds limit")
    return _read_exact(sock, n)


class FrameServer:
    """Serve one verifier on a TCP port.

    Each connection carries frames of M1; each is answered with a frame of M2,
    or an empty frame when the verifier aborts.  Outcomes are kept in
    ``outcomes`` for the harness.
    """

    def __init__(self, verifier: Node, host: str = "127.0.0.1", port: int = 0):
        self.verifier = verifier
        self.outcomes: list[SessionOutcome] = []
        self.errors: list[str] = []
        self._lock = threading.Lock()
        self._sock = socket.create_server((host, port))
        self._sock.settimeout(0.2)
        self.address = self._sock.getsockname()[:2]
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)

    def __enter__(self) -> FrameServer:
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except (TimeoutError, socket.timeout):
                continue
            except OSError:
                return
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    def _handle(self, conn: socket.socket) -> None:
        with conn:
            conn.settimeout(5.0)
            while True:
                try:
                    frame = read_frame(conn)
                except (ChannelClosed, OSError):
                    return
                except DecodeError as exc:
                    self.errors.append(str(exc))
                    return
                with self._lock:
                    reply, outcome = self.verifier.auth_respond(frame)
                    self.outcomes.append(outcome)
                try:
                    write_frame(conn, reply or b"")
                except OSError:
                    return

    def close(self) -> None:
        self._stop.set()
        self._sock.close()
        if self._thread.is_alive():
            self._thread.join(timeout=2)


class SocketChannel:
    """Client end of a framed TCP connection, with the same interposer hook."""

    def __init__(self, address: tuple[str, int], interposer: Interposer = identity,
                 timeout: float = 5.0):
        self.interposer = interposer
        self.transcript = Transcript()
        self.step = 0
        self._sock = socket.create_connection(address, timeout=timeout)

    def exchange(self, m1: bytes) -> bytes | None:
        self.step += 1
        action = self.interposer(TO_VERIFIER, m1)
        out = None if isinstance(action, Drop) else (action.data if isinstance(action, Replace) else m1)
        self.transcript.append(Event(self.step, TO_VERIFIER, m1, out))
        if out is None:
            return None
        write_frame(self._sock, out)
        try:
            m2 = read_frame(self._sock)
        except (ChannelClosed, OSError):
            return None
        if not m2:
            return None
        self.step += 1
        action = self.interposer(TO_PROVER, m2)
        back = None if isinstance(action, Drop) else (action.data if isinstance(action, Replace) else m2)
        self.transcript.append(Event(self.step, TO_PROVER, m2, back))
        return back

    def close(self) -> None:
        self._sock.close()

    def __enter__(self) -> SocketChannel:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_socket_transport(address: tuple[str, int], interposer: Interposer = identity) -> SocketChannel:
    return SocketChannel(address, interposer)


def run_socket_session(prover: Node, channel: SocketChannel, peer_label: str) -> SessionOutcome:
    """Prover side of one exchange over a socket; the verifier runs in a :class:`FrameServer`."""
    m1, pending = prover.auth_initiate(peer_label)
    m2 = channel.exchange(m1)
    if m2 is None:
        return prover.auth_abort(pending, AbortReason.TIMEOUT)
    return prover.auth_finalize(pending, m2)
