"""Length-prefixed binary predictor protocol over a byte stream.

Every message is one frame:

    magic   4 bytes  b"SNP1"
    kind    u8       message kind
    length  u32 LE   payload byte count
    payload

Tensors are serialized as u32 rank, u32 dims[rank], then the float32 data
little-endian in C order. All scalar fields are little-endian.

Message kinds and payloads:

    NOISE_QUERY (1)
        u32 view_id | u32 timestep | u8 mode | u8 n_hook |
        u32 hook_layer * n_hook | u32 prompt_len | prompt utf8 |
        u8 has_cond | tensor latent | [tensor cond_image]
    NOISE_REPLY (2)
        tensor eps | u32 n_features | (u32 layer_id | tensor) * n
    FEATURE_INJECT_QUERY (3)
        same as NOISE_QUERY, then u32 n_injected | (u32 layer_id | tensor) * n
    DECODE_QUERY (4)
        u32 view_id | tensor latent
    DECODE_REPLY (5)
        tensor image
    ERROR (6)
        u32 code | u32 message_len | message utf8
    SCHEDULER_STEP (7)
        u32 timestep | u32 timestep_next | tensor latent | tensor eps
    SCHEDULER_REPLY (8)
        tensor latent

Servers reply ERROR (code 1, "bad magic") to a frame whose magic bytes do
not match, then resynchronize by scanning the stream for the next magic;
the connection stays alive.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import PredictorProtocolError
from .predictors import ConditioningMode, PredictorRequest, PredictorResponse

MAGIC = b"SNP1"
HEADER = struct.Struct("<4sBI")
MAX_PAYLOAD = 1 << 30


class MessageKind(IntEnum):
    NOISE_QUERY = 1
    NOISE_REPLY = 2
    FEATURE_INJECT_QUERY = 3
    DECODE_QUERY = 4
    DECODE_REPLY = 5
    ERROR = 6
    SCHEDULER_STEP = 7
    SCHEDULER_REPLY = 8


class ErrorCode(IntEnum):
    BAD_MAGIC = 1
    BAD_MESSAGE = 2
    MODEL_FAILURE = 3
    SHAPE_MISMATCH = 4


# ---------------------------------------------------------------------------
# Tensor and payload codecs


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    parts = [struct.pack("<I", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    """Sequential payload reader with bounds checking."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise PredictorProtocolError(
                f"truncated payload: wanted {n} bytes at offset {self.pos}, have {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self) -> np.ndarray:
        rank = self.u32()
        if rank > 8:
            raise PredictorProtocolError(f"tensor rank {rank} out of range")
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = self.take(4 * count)
        return np.frombuffer(data, dtype="<f4").reshape(dims).copy()

    def done(self) -> None:
        if self.pos != len(self.data):
            raise PredictorProtocolError(f"{len(self.data) - self.pos} trailing payload bytes")


def decode_tensor(data: bytes) -> np.ndarray:
    r = _Reader(data)
    t = r.tensor()
    r.done()
    return t


def encode_request(request: PredictorRequest) -> tuple[MessageKind, bytes]:
    prompt = request.prompt.encode("utf-8")
    parts = [
        struct.pack(
            "<IIBB",
            request.view_id,
            request.timestep,
            int(request.mode),
            len(request.hook_layers),
        )
    ]
    for layer in request.hook_layers:
        parts.append(struct.pack("<I", layer))
    parts.append(struct.pack("<I", len(prompt)))
    parts.append(prompt)
    parts.append(struct.pack("<B", 0 if request.cond_image is None else 1))
    parts.append(encode_tensor(request.latent))
    if request.cond_image is not None:
        parts.append(encode_tensor(request.cond_image))
    if request.injected_features:
        parts.append(struct.pack("<I", len(request.injected_features)))
        for layer in sorted(request.injected_features):
            parts.append(struct.pack("<I", layer))
            parts.append(encode_tensor(request.injected_features[layer]))
        return MessageKind.FEATURE_INJECT_QUERY, b"".join(parts)
    return MessageKind.NOISE_QUERY, b"".join(parts)


def decode_request(kind: MessageKind, payload: bytes) -> PredictorRequest:
    r = _Reader(payload)
    view_id = r.u32()
    timestep = r.u32()
    mode = ConditioningMode(r.u8())
    n_hook = r.u8()
    hook_layers = tuple(r.u32() for _ in range(n_hook))
    prompt = r.take(r.u32()).decode("utf-8")
    has_cond = r.u8()
    latent = r.tensor()
    cond = r.tensor() if has_cond else None
    injected: dict[int, np.ndarray] = {}
    if kind == MessageKind.FEATURE_INJECT_QUERY:
        n = r.u32()
        for _ in range(n):
            layer = r.u32()
            injected[layer] = r.tensor()
    r.done()
    return PredictorRequest(
        view_id=view_id,
        timestep=timestep,
        mode=mode,
        latent=latent,
        prompt=prompt,
        hook_layers=hook_layers,
        cond_image=cond,
        injected_features=injected,
    )


def encode_response(response: PredictorResponse) -> bytes:
    parts = [encode_tensor(response.eps), struct.pack("<I", len(response.features))]
    for layer in sorted(response.features):
        parts.append(struct.pack("<I", layer))
        parts.append(encode_tensor(response.features[layer]))
    return b"".join(parts)


def decode_response(payload: bytes) -> PredictorResponse:
    r = _Reader(payload)
    eps = r.tensor()
    features = {}
    for _ in range(r.u32()):
        layer = r.u32()
        features[layer] = r.tensor()
    r.done()
    return PredictorResponse(eps=eps, features=features)


def encode_error(code: int, message: str) -> bytes:
    data = message.encode("utf-8")
    return struct.pack("<II", code, len(data)) + data


def decode_error(payload: bytes) -> tuple[int, str]:
    r = _Reader(payload)
    code = r.u32()
    message = r.take(r.u32()).decode("utf-8")
    r.done()
    return code, message


# ---------------------------------------------------------------------------
# Framing


def write_frame(sock: socket.socket, kind: MessageKind, payload: bytes) -> None:
    sock.sendall(HEADER.pack(MAGIC, int(kind), len(payload)) + payload)


def _recv_exactly(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[MessageKind, bytes] | None:
    """Read one frame; None on orderly EOF. Raises on malformed input."""
    header = _recv_exactly(sock, HEADER.size)
    if header is None:
        return None
    magic, kind, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise PredictorProtocolError(f"bad magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise PredictorProtocolError(f"payload length {length} exceeds limit")
    payload = _recv_exactly(sock, length)
    if payload is None:
        raise PredictorProtocolError("connection closed mid-frame")
    try:
        return MessageKind(kind), payload
    except ValueError as e:
        raise PredictorProtocolError(f"unknown message kind {kind}") from e


# ---------------------------------------------------------------------------
# Client


class WirePredictor:
    """Predictor backed by a protocol server over TCP or a unix socket.

    One request is in flight at a time; instances are not thread-safe.
    """

    def __init__(self, endpoint: str, latent_channels: int = 4, timeout: float = 60.0):
        self.endpoint = endpoint
        self.latent_channels = latent_channels
        self._sock = _connect(endpoint, timeout)

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _roundtrip(self, kind: MessageKind, payload: bytes) -> tuple[MessageKind, bytes]:
        if self._sock is None:
            raise PredictorProtocolError("connection closed")
        write_frame(self._sock, kind, payload)
        frame = read_frame(self._sock)
        if frame is None:
            raise PredictorProtocolError("server closed the connection")
        reply_kind, reply = frame
        if reply_kind == MessageKind.ERROR:
            code, message = decode_error(reply)
            raise PredictorProtocolError(f"server error {code}: {message}")
        return reply_kind, reply

    def query(self, request: PredictorRequest) -> PredictorResponse:
        kind, payload = encode_request(request)
        reply_kind, reply = self._roundtrip(kind, payload)
        if reply_kind != MessageKind.NOISE_REPLY:
            raise PredictorProtocolError(f"expected NOISE_REPLY, got {reply_kind.name}")
        return decode_response(reply)

    def decode(self, view_id: int, latent: np.ndarray) -> np.ndarray:
        payload = struct.pack("<I", view_id) + encode_tensor(latent)
        reply_kind, reply = self._roundtrip(MessageKind.DECODE_QUERY, payload)
        if reply_kind != MessageKind.DECODE_REPLY:
            raise PredictorProtocolError(f"expected DECODE_REPLY, got {reply_kind.name}")
        return decode_tensor(reply)


def _connect(endpoint: str, timeout: float) -> socket.socket:
    if endpoint.startswith("tcp:"):
        rest = endpoint[4:]
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"expected tcp:HOST:PORT, got {endpoint!r}")
        sock = socket.create_connection((host, int(port)), timeout=timeout)
        sock.settimeout(timeout)
        return sock
    if endpoint.startswith("unix:"):
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.settimeout(timeout)
        sock.connect(endpoint[5:])
        return sock
    raise ValueError(f"unknown endpoint {endpoint!r}; expected tcp:HOST:PORT or unix:PATH")


# ---------------------------------------------------------------------------
# Server side (used by tests and to expose builtin predictors)


def serve_connection(predictor, sock: socket.socket) -> None:
    """Answer protocol requests on one connection until EOF.

    Bad magic gets an ERROR reply followed by a resync scan for the next
    frame; other per-request failures get ERROR replies with the connection
    kept alive.
    """
    buffer = bytearray()
    in_resync = False

    def fill(n: int) -> bool:
        while len(buffer) < n:
            chunk = sock.recv(65536)
            if not chunk:
                return False
            buffer.extend(chunk)
        return True

    while True:
        if not fill(HEADER.size):
            return
        if bytes(buffer[:4]) != MAGIC:
            if not in_resync:
                write_frame(sock, MessageKind.ERROR, encode_error(ErrorCode.BAD_MAGIC, "bad magic"))
                in_resync = True
            idx = buffer.find(MAGIC, 1)
            if idx < 0:
                # keep a possible magic prefix, wait for more bytes
                tail = bytes(buffer[-3:])
                buffer.clear()
                buffer.extend(tail)
                continue
            del buffer[:idx]
            continue
        in_resync = False
        magic, kind, length = HEADER.unpack(bytes(buffer[: HEADER.size]))
        if length > MAX_PAYLOAD:
            write_frame(sock, MessageKind.ERROR, encode_error(ErrorCode.BAD_MESSAGE, "payload too large"))
            del buffer[: HEADER.size]
            continue
        if not fill(HEADER.size + length):
            return
        payload = bytes(buffer[HEADER.size : HEADER.size + length])
        del buffer[: HEADER.size + length]
        try:
            _dispatch(predictor, sock, MessageKind(kind), payload)
        except PredictorProtocolError as e:
            write_frame(sock, MessageKind.ERROR, encode_error(ErrorCode.BAD_MESSAGE, str(e)))
        except Exception as e:  # pragma: no cover - defensive
            write_frame(sock, MessageKind.ERROR, encode_error(ErrorCode.MODEL_FAILURE, str(e)))


def _dispatch(predictor, sock: socket.socket, kind: MessageKind, payload: bytes) -> None:
    if kind in (MessageKind.NOISE_QUERY, MessageKind.FEATURE_INJECT_QUERY):
        request = decode_request(kind, payload)
        response = predictor.query(request)
        write_frame(sock, MessageKind.NOISE_REPLY, encode_response(response))
    elif kind == MessageKind.DECODE_QUERY:
        r = _Reader(payload)
        view_id = r.u32()
        latent = r.tensor()
        r.done()
        image = predictor.decode(view_id, latent)
        write_frame(sock, MessageKind.DECODE_REPLY, encode_tensor(image))
    else:
        write_frame(
            sock,
            MessageKind.ERROR,
            encode_error(ErrorCode.BAD_MESSAGE, f"unsupported message kind {kind.name}"),
        )


def serve_once(predictor, endpoint: str, ready=None) -> None:
    """Listen on endpoint and serve connections until the listener closes.

    Intended for tests and for exposing builtin predictors; each connection
    is served on the accepting thread, one at a time.
    """
    if endpoint.startswith("tcp:"):
        rest = endpoint[4:]
        host, _, port = rest.rpartition(":")
        listener = socket.create_server((host, int(port)))
    elif endpoint.startswith("unix:"):
        listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        listener.bind(endpoint[5:])
        listener.listen(1)
    else:
        raise ValueError(f"unknown endpoint {endpoint!r}")
    if ready is not None:
        ready.set()
    try:
        while True:
            try:
                conn, _ = listener.accept()
            except OSError:
                return
            with conn:
                serve_connection(predictor, conn)
    finally:
        listener.close()
