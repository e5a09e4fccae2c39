"""
fedvit.transport

RoundMessage framing plus two carriers with the same interface: an in-process
loopback pair and a TCP stream socket. Both carry encoded bytes, so whatever
leaves one endpoint is exactly what a wire observer would see.

Frame layout (little endian)::

    length u32 | "FVM1" | version u8 | msg_type u8 | round u32 |
    sender u32 | tensor count u16 | tensors

length counts the bytes after itself.
"""
import dataclasses
import enum
import logging
import queue
import socket
import threading
import time
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .codec import (
    CorruptFrame,
    FrameTooLarge,
    IncompleteFrame,
    Reader,
    UnsupportedVersion,
    Writer,
    tensor_size,
)
from .errors import FedVitError
from .model import GradientUpdate, ModelParams
from .numerics import Matrix, as_matrix

logger = logging.getLogger(__name__)

MAGIC = b"FVM1"
VERSION = 1
PREFIX_SIZE = 4
HEADER_SIZE = 16
MAX_FRAME = 2**31

Address = Tuple[str, int]


class MessageType(enum.IntEnum):
    REGISTER = 1
    GLOBAL_MODEL = 2
    LOCAL_UPDATE_GRAD = 3
    LOCAL_UPDATE_PARAMS = 4
    ROUND_COMPLETE = 5
    SHUTDOWN = 6


_MODEL_SCHEMA = ModelParams.TENSOR_FIELDS + ("meta",)

SCHEMAS: Dict[MessageType, Tuple[str, ...]] = {
    MessageType.REGISTER: (),
    MessageType.GLOBAL_MODEL: _MODEL_SCHEMA,
    MessageType.LOCAL_UPDATE_GRAD: GradientUpdate.TENSOR_FIELDS + ("meta",),
    MessageType.LOCAL_UPDATE_PARAMS: _MODEL_SCHEMA,
    MessageType.ROUND_COMPLETE: _MODEL_SCHEMA,
    MessageType.SHUTDOWN: (),
}


class SchemaError(FedVitError, ValueError):
    """A message payload does not follow the schema of its type."""


class TransportError(FedVitError):
    """
    A carrier failed: connection refused, reset or closed, or no message
    arrived in time.
    """

    def __init__(self, message: str, *, endpoint: str):
        """
        :param message: str Error message
        :param endpoint: str Name of the endpoint that failed
        """
        super().__init__(f"{endpoint}: {message}")
        self.endpoint = endpoint


@dataclasses.dataclass(frozen=True, eq=False)
class RoundMessage:
    """
    Usage:
        msg = RoundMessage.for_params(
            MessageType.GLOBAL_MODEL, params, round_=3
        )
        assert decode(encode(msg)).params().encrypted == params.encrypted
    """

    msg_type: MessageType
    round: int = 0
    sender_id: int = 0
    payload: Dict[str, Matrix] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "msg_type", MessageType(self.msg_type))
        check_schema(self.msg_type, self.payload)

    @classmethod
    def register(cls, client_id: int) -> "RoundMessage":
        return cls(MessageType.REGISTER, sender_id=client_id)

    @classmethod
    def shutdown(cls, round_: int) -> "RoundMessage":
        return cls(MessageType.SHUTDOWN, round=round_)

    @classmethod
    def for_params(
        cls,
        msg_type: MessageType,
        params: ModelParams,
        *,
        round_: int,
        sender_id: int = 0,
        loss: float = 0.0,
    ) -> "RoundMessage":
        """
        :param msg_type: GLOBAL_MODEL, ROUND_COMPLETE or LOCAL_UPDATE_PARAMS
        :param params: ModelParams, plain or encrypted
        :param round_: int
        :param sender_id: int 0 for the server
        :param loss: float Client mean loss, 0 for the server
        """
        payload = dict(params.tensors())
        payload["meta"] = _meta(params.encrypted, loss)
        return cls(msg_type, round_, sender_id, payload)

    @classmethod
    def for_gradient(cls, grad: GradientUpdate) -> "RoundMessage":
        payload = dict(grad.tensors())
        payload["meta"] = _meta(grad.encrypted, grad.loss)
        return cls(
            MessageType.LOCAL_UPDATE_GRAD, grad.round, grad.client_id, payload
        )

    @property
    def encrypted(self) -> bool:
        return bool(self.payload["meta"][0, 0])

    @property
    def loss(self) -> float:
        return float(self.payload["meta"][0, 1])

    def params(self) -> ModelParams:
        if SCHEMAS[self.msg_type] != _MODEL_SCHEMA:
            raise SchemaError(f"{self.msg_type.name} carries no model")
        return ModelParams.from_tensors(
            self.payload, encrypted=self.encrypted
        )

    def gradient(self) -> GradientUpdate:
        if self.msg_type is not MessageType.LOCAL_UPDATE_GRAD:
            raise SchemaError(f"{self.msg_type.name} carries no gradients")
        return GradientUpdate.from_tensors(
            self.payload,
            round=self.round,
            client_id=self.sender_id,
            encrypted=self.encrypted,
            loss=self.loss,
        )


def _meta(encrypted: bool, loss: float) -> Matrix:
    return as_matrix([[1.0 if encrypted else 0.0, loss]])


def check_schema(msg_type: MessageType, payload: Dict[str, Matrix]):
    """
    :raises SchemaError: names out of order or a malformed meta tensor
    """
    expected = SCHEMAS[msg_type]
    if tuple(payload) != expected:
        raise SchemaError(
            f"{msg_type.name} expects tensors {list(expected)}, "
            f"got {list(payload)}"
        )
    for name, matrix in payload.items():
        if np.ndim(matrix) != 2:
            raise SchemaError(f"Tensor {name!r} is not a matrix")
    meta = payload.get("meta")
    if meta is not None:
        if meta.shape != (1, 2) or meta[0, 0] not in (0.0, 1.0):
            raise SchemaError("meta must be [[encrypted 0/1, loss]]")


def encoded_size(msg: RoundMessage) -> int:
    """
    :return: int Frame size in bytes, length prefix included
    """
    body = HEADER_SIZE + sum(
        tensor_size(name, matrix) for name, matrix in msg.payload.items()
    )
    return PREFIX_SIZE + body


def encode(msg: RoundMessage) -> bytes:
    """
    :param msg: RoundMessage
    :return: bytes One complete frame
    """
    size = encoded_size(msg)
    if size - PREFIX_SIZE > MAX_FRAME:
        raise FrameTooLarge("Message exceeds the frame limit", size=size)
    writer = Writer().u32(size - PREFIX_SIZE).raw(MAGIC).u8(VERSION)
    writer.u8(msg.msg_type).u32(msg.round).u32(msg.sender_id)
    return writer.tensors(msg.payload).getvalue()


def frame_length(prefix: bytes) -> int:
    """
    :param prefix: bytes The 4 byte length prefix
    :return: int Number of bytes that follow it
    """
    length = Reader(prefix).u32()
    if length < HEADER_SIZE:
        raise CorruptFrame(f"Frame length {length} is too small", offset=0)
    if length > MAX_FRAME:
        raise CorruptFrame(f"Frame length {length} is too large", offset=0)
    return length


def decode(data: bytes) -> RoundMessage:
    """
    Inverse of encode.

    :param data: bytes Exactly one frame, length prefix included
    :raises IncompleteFrame: data ends before the frame does
    :raises CorruptFrame: data can never be a valid frame
    :raises UnsupportedVersion: frame from a newer protocol version
    """
    head = Reader(data)
    prefix = head.take(PREFIX_SIZE)
    # Reject a foreign magic as soon as its bytes are visible.
    visible = bytes(data[PREFIX_SIZE:PREFIX_SIZE + len(MAGIC)])
    if visible != MAGIC[:len(visible)]:
        raise CorruptFrame("Bad magic", offset=PREFIX_SIZE)
    length = frame_length(prefix)
    if head.remaining < length:
        raise IncompleteFrame(
            f"Frame needs {length} bytes, {head.remaining} present",
            offset=len(data),
        )
    # The prefix vouches for the body, so running short inside it is
    # corruption rather than truncation.
    body = Reader(
        head.take(length), offset=PREFIX_SIZE, exhausted=CorruptFrame
    )
    body.take(len(MAGIC))
    version = body.u8()
    if version != VERSION:
        raise UnsupportedVersion(
            "Unsupported protocol version", offset=8, version=version
        )
    type_offset = body.offset
    try:
        msg_type = MessageType(body.u8())
    except ValueError as exc:
        raise CorruptFrame("Unknown msg_type", offset=type_offset) from exc
    round_, sender_id = body.u32(), body.u32()
    tensors_offset = body.offset
    payload = body.tensors()
    body.expect_end()
    head.expect_end()
    try:
        return RoundMessage(msg_type, round_, sender_id, payload)
    except SchemaError as exc:
        raise CorruptFrame(str(exc), offset=tensors_offset) from exc


class Endpoint:
    """
    One side of an ordered, reliable, bidirectional message channel.
    """

    name: str = "endpoint"

    def send(self, msg: RoundMessage):
        raise NotImplementedError

    def recv(self, timeout: Optional[float] = None) -> RoundMessage:
        raise NotImplementedError

    def close(self):
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


_CLOSED = None


class LoopbackEndpoint(Endpoint):
    """
    In-process carrier. Frames travel as encoded bytes through a pair of
    queues.
    """

    def __init__(
        self, name: str, inbox: "queue.Queue", outbox: "queue.Queue"
    ):
        self.name = name
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send(self, msg: RoundMessage):
        if self._closed:
            raise TransportError("Endpoint is closed", endpoint=self.name)
        frame = encode(msg)
        logger.debug(
            "%s sent %s round %d (%d bytes)",
            self.name,
            msg.msg_type.name,
            msg.round,
            len(frame),
        )
        self._outbox.put(frame)

    def recv(self, timeout: Optional[float] = None) -> RoundMessage:
        if self._closed:
            raise TransportError("Endpoint is closed", endpoint=self.name)
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty as exc:
            raise TransportError(
                f"No message within {timeout} s", endpoint=self.name
            ) from exc
        if frame is _CLOSED:
            self._inbox.put(_CLOSED)
            raise TransportError("Peer closed", endpoint=self.name)
        return decode(frame)

    def close(self):
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def loopback_pair(
    name: str = "loopback",
) -> Tuple[LoopbackEndpoint, LoopbackEndpoint]:
    """
    :param name: str Prefix for the endpoint names
    :return: (client endpoint, server endpoint)
    """
    to_server: "queue.Queue" = queue.Queue()
    to_client: "queue.Queue" = queue.Queue()
    client = LoopbackEndpoint(f"{name}/client", to_client, to_server)
    server = LoopbackEndpoint(f"{name}/server", to_server, to_client)
    return client, server


def recv_all(sock: socket.socket, size: int) -> bytes:
    """
    Read exactly size bytes.
    :raises EOFError: the peer closed the connection first
    """
    buf = bytearray()
    while size > 0:
        chunk = sock.recv(size)
        if not chunk:
            raise EOFError("Connection closed mid-frame" if buf else "EOF")
        buf.extend(chunk)
        size -= len(chunk)
    return bytes(buf)


class SocketEndpoint(Endpoint):
    """
    Stream socket carrier. One reader and one writer per connection; send
    is serialized by a lock so frames never interleave.
    """

    def __init__(self, sock: socket.socket, name: str):
        self.name = name
        self._sock = sock
        self._send_lock = threading.Lock()

    def send(self, msg: RoundMessage):
        frame = encode(msg)
        try:
            with self._send_lock:
                self._sock.sendall(frame)
        except OSError as exc:
            raise TransportError(str(exc), endpoint=self.name) from exc
        logger.debug(
            "%s sent %s round %d (%d bytes)",
            self.name,
            msg.msg_type.name,
            msg.round,
            len(frame),
        )

    def recv(self, timeout: Optional[float] = None) -> RoundMessage:
        try:
            self._sock.settimeout(timeout)
            prefix = recv_all(self._sock, PREFIX_SIZE)
            body = recv_all(self._sock, frame_length(prefix))
        except (OSError, EOFError) as exc:
            raise TransportError(
                str(exc) or type(exc).__name__, endpoint=self.name
            ) from exc
        return decode(prefix + body)

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class Listener:
    """
    Listening socket handing out a SocketEndpoint per accepted connection.
    """

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._accepted = 0

    @property
    def address(self) -> Address:
        host, port = self._sock.getsockname()[:2]
        return host, port

    def accept(self, timeout: Optional[float] = None) -> SocketEndpoint:
        name = "%s:%d" % self.address
        try:
            self._sock.settimeout(timeout)
            conn, peer = self._sock.accept()
        except OSError as exc:
            raise TransportError(str(exc), endpoint=name) from exc
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._accepted += 1
        logger.debug("Accepted connection %d from %s", self._accepted, peer)
        return SocketEndpoint(conn, f"{name}<-{peer[0]}:{peer[1]}")

    def close(self):
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def parse_address(value: Union[str, Address]) -> Address:
    """
    :param value: "host:port" or (host, port)
    :return: (host, port)
    """
    if isinstance(value, tuple):
        return value
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"Address must look like host:port, got {value!r}")
    return host or "127.0.0.1", int(port)


def socket_listen(address: Union[str, Address], backlog: int = 16) -> Listener:
    """
    :param address: "host:port" or (host, port); port 0 picks a free port
    :param backlog: int
    :return: Listener
    """
    host, port = parse_address(address)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
        sock.listen(backlog)
    except OSError as exc:
        sock.close()
        raise TransportError(str(exc), endpoint=f"{host}:{port}") from exc
    logger.info("Listening on %s:%d", *sock.getsockname()[:2])
    return Listener(sock)


def socket_connect(
    address: Union[str, Address],
    *,
    timeout: Optional[float] = None,
    attempts: int = 1,
    retry_delay: float = 0.2,
) -> SocketEndpoint:
    """
    :param address: "host:port" or (host, port)
    :param timeout: Optional float Connect timeout in seconds
    :param attempts: int Connection attempts before giving up
    :param retry_delay: float Seconds between attempts
    :return: SocketEndpoint
    """
    host, port = parse_address(address)
    name = f"{host}:{port}"
    for attempt in range(1, attempts + 1):
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            if attempt == attempts:
                raise TransportError(str(exc), endpoint=name) from exc
            logger.debug("Connect to %s failed, retrying: %s", name, exc)
            time.sleep(retry_delay)
            continue
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return SocketEndpoint(sock, name)
    raise TransportError("No connection attempts made", endpoint=name)
