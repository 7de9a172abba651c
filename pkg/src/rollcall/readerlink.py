"""Wire protocol between reader nodes and the edge node.

Frames are single ASCII lines, LF-terminated, at most 64 bytes:

    reader -> edge:   HELLO <node_id> <fw_version> | UID <8-hex> | PING
    edge -> reader:   WELCOME <nonce> | ACK <P|L|D> | NAK <code> | PONG | RESET

Every UID frame gets exactly one ACK or NAK, in request order.  Malformed
lines get `NAK ERR`; three consecutive malformed lines earn a `RESET` and
the session is dropped, mirroring the reader firmware's reinitialize-on-
failure behavior.  The transport is any reliable ordered byte stream: TCP,
an in-process socket pair, or a serial device path.
"""

from __future__ import annotations

import logging
import secrets
import socket
import threading
import time
from dataclasses import dataclass

from .domain import Status, normalize_uid
from .engine import AttendanceEngine, OutcomeKind, RejectReason, ScanOutcome
from .errors import EdgeStoreUnavailable, MalformedUid

log = logging.getLogger(__name__)

MAX_LINE_BYTES = 64          # including the LF terminator
IDLE_TIMEOUT_S = 60.0
MALFORMED_LIMIT = 3

ACK_PRESENT = "ACK P"
ACK_LATE = "ACK L"
ACK_DUPLICATE = "ACK D"

NAK_CODES = {
    RejectReason.CARD_BLOCKED: "BLK",
    RejectReason.UNKNOWN_CARD: "UNK",
    RejectReason.UNLINKED_CARD: "UNK",   # indistinguishable from unknown at the reader
    RejectReason.BEFORE_WINDOW: "WIN",
    RejectReason.AFTER_CLOSURE: "CLO",
    RejectReason.NON_SCHOOL_DAY: "DAY",
}


class FrameError(ValueError):
    pass


def parse_reader_frame(line: bytes) -> tuple[str, list[str]]:
    """Decode one reader->edge line (without LF); raises FrameError."""
    if len(line) + 1 > MAX_LINE_BYTES:
        raise FrameError("line exceeds 64 bytes")
    if line.endswith(b"\r"):
        line = line[:-1]
    try:
        text = line.decode("ascii")
    except UnicodeDecodeError:
        raise FrameError("non-ASCII bytes") from None
    tokens = text.split(" ")
    if not tokens or tokens[0] == "":
        raise FrameError("empty frame")
    verb, args = tokens[0], tokens[1:]
    if verb == "HELLO":
        if len(args) != 2 or not args[0]:
            raise FrameError("HELLO wants <node_id> <fw_version>")
    elif verb == "UID":
        if len(args) != 1:
            raise FrameError("UID wants one argument")
        try:
            args[0] = normalize_uid(args[0])
        except MalformedUid:
            raise FrameError("bad uid") from None
    elif verb == "PING":
        if args:
            raise FrameError("PING takes no arguments")
    else:
        raise FrameError(f"unknown verb {verb!r}")
    return verb, args


def outcome_to_frame(outcome: ScanOutcome) -> str:
    if outcome.kind is OutcomeKind.RECORDED:
        return ACK_PRESENT if outcome.status is Status.PRESENT else ACK_LATE
    if outcome.kind is OutcomeKind.DUPLICATE:
        return ACK_DUPLICATE
    return f"NAK {NAK_CODES[outcome.reason]}"


class ReaderSession:
    """One connected reader; replies are written only by this session's thread."""

    def __init__(self, sock: socket.socket, engine: AttendanceEngine,
                 idle_timeout_s: float = IDLE_TIMEOUT_S, on_close=None):
        self.sock = sock
        self.engine = engine
        self.idle_timeout_s = idle_timeout_s
        self.on_close = on_close
        self.node_id: str | None = None
        self._malformed_run = 0
        self._discarding = False
        self._closed = False

    def _send(self, text: str) -> None:
        try:
            self.sock.sendall(text.encode("ascii") + b"\n")
        except OSError:
            self._closed = True

    def serve(self) -> None:
        buf = b""
        last_activity = time.monotonic()
        self.sock.settimeout(0.5)
        try:
            while not self._closed:
                try:
                    chunk = self.sock.recv(4096)
                except socket.timeout:
                    if time.monotonic() - last_activity > self.idle_timeout_s:
                        log.info("reader session idle; closing")
                        break
                    continue
                except OSError:
                    break
                if not chunk:
                    break
                last_activity = time.monotonic()
                buf += chunk
                buf = self._drain_buffer(buf)
        finally:
            self._closed = True
            try:
                self.sock.close()
            except OSError:
                pass
            if self.on_close is not None:
                self.on_close(self)

    def _drain_buffer(self, buf: bytes) -> bytes:
        while not self._closed:
            nl = buf.find(b"\n")
            if nl < 0:
                if len(buf) >= MAX_LINE_BYTES and not self._discarding:
                    # overlong line: reject now, skip bytes until the next LF
                    self._discarding = True
                    self._malformed(b"<overlong>")
                return buf
            line, buf = buf[:nl], buf[nl + 1:]
            if self._discarding:
                self._discarding = False
                continue
            self._handle_line(line)
        return b""

    def _handle_line(self, line: bytes) -> None:
        try:
            verb, args = parse_reader_frame(line)
        except FrameError:
            self._malformed(line)
            return
        self._malformed_run = 0
        if verb == "HELLO":
            self.node_id = args[0]
            self._send(f"WELCOME {secrets.token_hex(4)}")
        elif verb == "PING":
            self._send("PONG")
        elif verb == "UID":
            if self.node_id is None:
                self._send("NAK ERR")
                return
            try:
                outcome = self.engine.process_scan(args[0], node_id=self.node_id)
                self._send(outcome_to_frame(outcome))
            except EdgeStoreUnavailable:
                self._send("NAK ERR")
            except Exception:
                log.exception("scan handling failed")
                self._send("NAK ERR")

    def _malformed(self, line: bytes) -> None:
        self._malformed_run += 1
        if self._malformed_run >= MALFORMED_LIMIT:
            self._send("RESET")
            self._closed = True
        else:
            self._send("NAK ERR")


class ReaderLinkServer:
    """Accepts reader sessions on a TCP endpoint; one handler thread each."""

    def __init__(self, host: str, port: int, engine: AttendanceEngine,
                 idle_timeout_s: float = IDLE_TIMEOUT_S):
        self.engine = engine
        self.idle_timeout_s = idle_timeout_s
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.5)
        self.address = self._listener.getsockname()[:2]
        self._sessions: set[ReaderSession] = set()
        self._sessions_lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.address[1]

    def start(self) -> None:
        self._thread = threading.Thread(target=self._accept_loop, name="reader-accept", daemon=True)
        self._thread.start()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            session = ReaderSession(sock, self.engine, self.idle_timeout_s,
                                    on_close=self._forget)
            with self._sessions_lock:
                self._sessions.add(session)
            threading.Thread(target=session.serve, name="reader-session", daemon=True).start()

    def _forget(self, session: ReaderSession) -> None:
        with self._sessions_lock:
            self._sessions.discard(session)

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._sessions_lock:
            sessions = list(self._sessions)
        for session in sessions:
            session._closed = True
            try:
                session.sock.close()
            except OSError:
                pass
        if self._thread is not None:
            self._thread.join(timeout=5)


def serve_device_path(path: str, engine: AttendanceEngine) -> ReaderSession:
    """Serve a single reader over a serial device path or FIFO.

    The path must already be configured as a raw byte stream; framing is
    identical to the TCP transport.
    """
    fd = open(path, "r+b", buffering=0)
    return ReaderSession(_FileSocket(fd), engine)


class _FileSocket:
    """Minimal socket-like shim over a file object (device path transport)."""

    def __init__(self, fh):
        self._fh = fh

    def recv(self, n: int) -> bytes:
        return self._fh.read(n) or b""

    def sendall(self, data: bytes) -> None:
        self._fh.write(data)

    def settimeout(self, value) -> None:
        pass

    def close(self) -> None:
        self._fh.close()


# -- reader emulator -------------------------------------------------------------

@dataclass
class Exchange:
    direction: str   # "sent" | "received"
    text: str


class ReaderEmulator:
    """Scriptable stand-in for the reader hardware.

    Connects over any byte stream, performs the handshake, replays scans,
    and records every exchanged frame.  With a virtual clock the transcript
    is fully deterministic.
    """

    def __init__(self, endpoint, node_id: str = "reader-1", fw_version: str = "1.0",
                 clock=None, connect_timeout: float = 5.0, reply_timeout: float = 10.0):
        self.node_id = node_id
        self.fw_version = fw_version
        self.clock = clock
        self.reply_timeout = reply_timeout
        self.transcript: list[Exchange] = []
        self.rtts_ms: list[float] = []
        self._buf = b""
        if isinstance(endpoint, tuple):
            self.sock = socket.create_connection(endpoint, timeout=connect_timeout)
        else:
            self.sock = endpoint
        self.sock.settimeout(reply_timeout)

    def handshake(self) -> str:
        reply = self._exchange(f"HELLO {self.node_id} {self.fw_version}")
        if not reply.startswith("WELCOME"):
            raise ConnectionError(f"handshake failed: {reply!r}")
        return reply.split(" ", 1)[1]

    def scan(self, uid: str) -> str:
        t0 = time.perf_counter()
        reply = self._exchange(f"UID {uid}")
        self.rtts_ms.append((time.perf_counter() - t0) * 1000.0)
        return reply

    def ping(self) -> str:
        return self._exchange("PING")

    def run_script(self, script: list[tuple[float, str]]) -> list[Exchange]:
        """Replay (delay_seconds, uid) pairs; returns the transcript."""
        self.handshake()
        for delay, uid in script:
            if self.clock is not None:
                self.clock.sleep(delay)
            else:
                time.sleep(delay)
            self.scan(uid)
        return self.transcript

    def send_raw(self, data: bytes) -> None:
        """Inject arbitrary bytes (noise/fuzz testing)."""
        self.sock.sendall(data)
        self.transcript.append(Exchange("sent", repr(data)))

    def _exchange(self, text: str) -> str:
        self.sock.sendall(text.encode("ascii") + b"\n")
        self.transcript.append(Exchange("sent", text))
        reply = self.read_reply()
        return reply

    def read_reply(self) -> str:
        deadline = time.monotonic() + self.reply_timeout
        while True:
            nl = self._buf.find(b"\n")
            if nl >= 0:
                line, self._buf = self._buf[:nl], self._buf[nl + 1:]
                text = line.decode("ascii", errors="replace")
                self.transcript.append(Exchange("received", text))
                return text
            if time.monotonic() > deadline:
                raise TimeoutError("no reply from edge")
            chunk = self.sock.recv(4096)
            if not chunk:
                raise ConnectionError("edge closed the session")
            self._buf += chunk

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
