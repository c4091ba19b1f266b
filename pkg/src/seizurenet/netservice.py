"""Framed TCP prediction service, client and round-trip benchmark.

Every message is a 12-byte little-endian header followed by the payload::

    b"EEGP" | version u16 | kind u8 | reserved u8 (0) | payload_len u32

Payloads by kind:

    HELLO         free-form UTF-8 peer name
    SEGMENT_DATA  one segment in the segment file format
    PREDICTION    label u8 | probability f64 | server processing time in us u64
    ECHO          arbitrary bytes, returned unchanged
    ERROR         UTF-8 message; the server closes the connection after sending it

This stands in for the MQTT/REST transports of a cloud deployment: one
reliable stream per client, replies in request order.
"""

from __future__ import annotations

import enum
import logging
import socket
import socketserver
import statistics
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .pipeline import TrainedModel, load_trained, predict_segment
from .signal_data import Label, SegmentFormatError, segment_from_bytes, segment_to_bytes, load_segment

log = logging.getLogger(__name__)

MAGIC = b"EEGP"
VERSION = 1
HEADER = struct.Struct("<4sHBBI")
HEADER_SIZE = HEADER.size  # 12
PREDICTION = struct.Struct("<BdQ")
ECHO_PAYLOAD_SIZE = 52  # 64-byte frames on the wire
MAX_PAYLOAD = 1 << 30
SERVER_NAME = b"seizurenet/1"

# ICMP ping times to cloud regions reported for the original deployment (ms)
WAN_REFERENCE_MS = {"Virginia": 15.0, "Oregon": 97.0}


class FrameKind(enum.IntEnum):
    HELLO = 1
    SEGMENT_DATA = 2
    PREDICTION = 3
    ECHO = 4
    ERROR = 5


class ProtocolError(Exception):
    pass


class BadMagicError(ProtocolError):
    pass


class VersionMismatchError(ProtocolError):
    pass


class UnknownKindError(ProtocolError):
    pass


class LengthMismatchError(ProtocolError):
    pass


class RemoteError(ProtocolError):
    """The peer answered with an ERROR frame."""


class ClientTimeoutError(TimeoutError):
    pass


class ServerUnavailableError(ConnectionError):
    pass


@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    payload: bytes = b""

    @property
    def wire_size(self) -> int:
        return HEADER_SIZE + len(self.payload)


def encode_frame(frame: Frame) -> bytes:
    kind = FrameKind(frame.kind)
    if len(frame.payload) > 0xFFFFFFFF:
        raise ValueError("payload too large for a u32 length")
    return HEADER.pack(MAGIC, VERSION, kind, 0, len(frame.payload)) + bytes(frame.payload)


def decode_header(header: bytes) -> tuple[FrameKind, int]:
    if len(header) != HEADER_SIZE:
        raise LengthMismatchError(f"header is {len(header)} bytes, expected {HEADER_SIZE}")
    magic, version, kind, _reserved, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"protocol version {version}, expected {VERSION}")
    try:
        kind = FrameKind(kind)
    except ValueError:
        raise UnknownKindError(f"unknown frame kind {kind}") from None
    return kind, length


def decode_frame(buf: bytes) -> Frame:
    """Decode exactly one frame occupying all of ``buf``."""
    if len(buf) < HEADER_SIZE:
        raise LengthMismatchError(f"{len(buf)} bytes is shorter than a frame header")
    kind, length = decode_header(bytes(buf[:HEADER_SIZE]))
    if len(buf) - HEADER_SIZE != length:
        raise LengthMismatchError(f"header declares {length} payload bytes, got {len(buf) - HEADER_SIZE}")
    return Frame(kind, bytes(buf[HEADER_SIZE:]))


def encode_prediction(label: Label, probability: float, processing_us: int) -> bytes:
    return PREDICTION.pack(int(label), probability, processing_us)


def decode_prediction(payload: bytes) -> tuple[Label, float, int]:
    if len(payload) != PREDICTION.size:
        raise LengthMismatchError(f"prediction payload is {len(payload)} bytes, expected {PREDICTION.size}")
    label, prob, us = PREDICTION.unpack(payload)
    return Label(label), prob, us


def echo_frame(payload_size: int = ECHO_PAYLOAD_SIZE) -> Frame:
    return Frame(FrameKind.ECHO, bytes(i % 256 for i in range(payload_size)))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket, max_payload: int = MAX_PAYLOAD) -> Frame | None:
    """Read one frame; ``None`` on a clean end of stream before a header."""
    first = sock.recv(HEADER_SIZE)
    if not first:
        return None
    header = first + (_recv_exact(sock, HEADER_SIZE - len(first)) if len(first) < HEADER_SIZE else b"")
    kind, length = decode_header(header)
    if length > max_payload:
        raise LengthMismatchError(f"payload of {length} bytes exceeds the {max_payload}-byte limit")
    return Frame(kind, _recv_exact(sock, length) if length else b"")


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


# --------------------------------------------------------------------------
# Server
# --------------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    server: "PredictionServer"

    def handle(self):
        sock = self.request
        while True:
            try:
                frame = read_frame(sock)
            except ProtocolError as exc:
                self._fail(str(exc))
                return
            except (ConnectionError, OSError):
                return
            if frame is None:
                return
            try:
                reply = self.server.respond(frame)
            except (ProtocolError, SegmentFormatError, ValueError) as exc:
                self._fail(str(exc))
                return
            try:
                sock.sendall(encode_frame(reply))
            except OSError:
                return

    def _fail(self, message: str):
        log.info("closing connection from %s: %s", self.client_address, message)
        try:
            self.request.sendall(encode_frame(Frame(FrameKind.ERROR, message.encode("utf-8"))))
        except OSError:
            pass


class PredictionServer(socketserver.ThreadingTCPServer):
    """One thread per connection; frames on a connection are handled in order.

    The model is read-only after construction and shared by all threads.
    ``echo_delay_s`` holds every ECHO reply back by a fixed time, for
    latency-harness tests.
    """

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, model: TrainedModel | None, echo_delay_s: float = 0.0):
        super().__init__(address, _Handler)
        self.model = model
        self.echo_delay_s = echo_delay_s
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def respond(self, frame: Frame) -> Frame:
        if frame.kind is FrameKind.HELLO:
            return Frame(FrameKind.HELLO, SERVER_NAME)
        if frame.kind is FrameKind.ECHO:
            if self.echo_delay_s:
                time.sleep(self.echo_delay_s)
            return Frame(FrameKind.ECHO, frame.payload)
        if frame.kind is FrameKind.SEGMENT_DATA:
            if self.model is None:
                raise ProtocolError("no model loaded")
            t0 = time.perf_counter_ns()
            pred = predict_segment(self.model, segment_from_bytes(frame.payload))
            elapsed_us = (time.perf_counter_ns() - t0) // 1000
            return Frame(FrameKind.PREDICTION, encode_prediction(pred.label, pred.probability, elapsed_us))
        raise ProtocolError(f"clients may not send {frame.kind.name} frames")

    def start(self) -> "PredictionServer":
        self._thread = threading.Thread(target=self.serve_forever, name="seizurenet-server", daemon=True)
        self._thread.start()
        return self

    def join(self) -> None:
        if self._thread is not None:
            self._thread.join()

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(listen: str, model_path, dimred_path, echo_delay_s: float = 0.0) -> PredictionServer:
    """Load the persisted model and start serving in a background thread."""
    model = load_trained(model_path, dimred_path)
    server = PredictionServer(parse_address(listen), model, echo_delay_s)
    log.info("listening on %s", server.address)
    return server.start()


# --------------------------------------------------------------------------
# Client
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StreamResult:
    segment_id: str
    label: Label
    probability: float
    rtt_ms: float
    server_us: int


class PredictionClient:
    def __init__(self, address: str, timeout: float = 10.0):
        host, port = parse_address(address)
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except ConnectionRefusedError as exc:
            raise ServerUnavailableError(f"connection to {address} refused") from exc
        except socket.timeout as exc:
            raise ClientTimeoutError(f"connecting to {address} timed out") from exc
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def send(self, frame: Frame) -> None:
        self.sock.sendall(encode_frame(frame))

    def receive(self) -> Frame:
        try:
            frame = read_frame(self.sock)
        except socket.timeout as exc:
            raise ClientTimeoutError("timed out waiting for a reply") from exc
        if frame is None:
            raise ConnectionError("server closed the connection")
        if frame.kind is FrameKind.ERROR:
            raise RemoteError(frame.payload.decode("utf-8", "replace"))
        return frame

    def request(self, frame: Frame) -> tuple[Frame, float]:
        """Send one frame, wait for its reply; returns (reply, round trip in ms)."""
        t0 = time.perf_counter_ns()
        self.send(frame)
        reply = self.receive()
        return reply, (time.perf_counter_ns() - t0) / 1e6

    def hello(self) -> bytes:
        reply, _ = self.request(Frame(FrameKind.HELLO, b"seizurenet-client"))
        return reply.payload

    def predict(self, segment_bytes: bytes) -> tuple[Label, float, int, float]:
        reply, rtt = self.request(Frame(FrameKind.SEGMENT_DATA, segment_bytes))
        if reply.kind is not FrameKind.PREDICTION:
            raise ProtocolError(f"expected PREDICTION, got {reply.kind.name}")
        label, prob, us = decode_prediction(reply.payload)
        return label, prob, us, rtt

    def predict_pipelined(self, segments_bytes) -> list[tuple[Label, float, int]]:
        """Send every segment before reading any reply."""
        segments_bytes = list(segments_bytes)
        self.sock.sendall(b"".join(encode_frame(Frame(FrameKind.SEGMENT_DATA, b)) for b in segments_bytes))
        out = []
        for _ in segments_bytes:
            reply = self.receive()
            out.append(decode_prediction(reply.payload))
        return out


def stream_client(server: str, segment_paths, timeout: float = 10.0) -> list[StreamResult]:
    paths = [Path(p) for p in segment_paths]
    if not paths:
        return []
    results = []
    with PredictionClient(server, timeout) as client:
        for path in paths:
            seg = load_segment(path)
            label, prob, us, rtt = client.predict(segment_to_bytes(seg))
            results.append(StreamResult(seg.segment_id, label, prob, rtt, us))
    return results


@dataclass(frozen=True)
class RttStats:
    samples: tuple[float, ...]
    frame_bytes: int

    @property
    def min(self) -> float:
        return min(self.samples)

    @property
    def max(self) -> float:
        return max(self.samples)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.samples)

    @property
    def stddev(self) -> float:
        return statistics.pstdev(self.samples)

    def report(self) -> str:
        lines = [
            f"application-layer echo RTT over {len(self.samples)} round trips of {self.frame_bytes}-byte frames",
            f"min {self.min:.3f} ms  mean {self.mean:.3f} ms  max {self.max:.3f} ms  stddev {self.stddev:.3f} ms",
            "reference (ICMP ping to cloud regions, not measured here): "
            + ", ".join(f"{k} {v:g} ms" for k, v in WAN_REFERENCE_MS.items()),
        ]
        return "\n".join(lines)


def rtt_bench(server: str, repetitions: int = 10, payload_size: int = ECHO_PAYLOAD_SIZE,
              timeout: float = 10.0) -> RttStats:
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    frame = echo_frame(payload_size)
    samples = []
    with PredictionClient(server, timeout) as client:
        for _ in range(repetitions):
            reply, rtt = client.request(frame)
            if reply != frame:
                raise ProtocolError("echo reply differs from the probe")
            samples.append(rtt)
    return RttStats(tuple(samples), frame.wire_size)
