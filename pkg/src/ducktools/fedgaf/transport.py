# MIT License
#
# Copyright (c) 2025 David C Ellis
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in all
# copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.


"""
Framed wire protocol, parameter serialization and byte accounting.

Every message is a frame::

    magic "FGAF" | u8 version | u8 message type | u32 payload length | payload

with all integers little endian. The same framing code runs over TCP
sockets and over in-process loopback channels so both transports count
exactly the same bytes.
"""
import logging
import math
import queue
import socket
import struct
import threading
import time
from enum import IntEnum

import numpy as np

from ducktools.classbuilder.prefab import Prefab, attribute

from .exceptions import (
    ChannelClosed,
    ConfigError,
    DeserializeError,
    ProtocolError,
    SerializeError,
)

log = logging.getLogger(__name__)

FRAME_MAGIC = b"FGAF"
PROTOCOL_VERSION = 1
FRAME_HEADER = struct.Struct("<4sBBI")
HEADER_SIZE = FRAME_HEADER.size  # 10
MAX_PAYLOAD = 256 * 1024 * 1024

_LOCAL_UPDATE_HEADER = struct.Struct("<IIff")


class MessageType(IntEnum):
    REGISTER = 1
    GLOBAL_MODEL = 2
    LOCAL_UPDATE = 3
    DONE = 4


class Frame(Prefab, frozen=True):
    msg_type: MessageType
    payload: bytes = b""

    @property
    def wire_size(self):
        return HEADER_SIZE + len(self.payload)

    def to_bytes(self):
        if len(self.payload) > MAX_PAYLOAD:
            raise ProtocolError(
                f"Payload of {len(self.payload)} bytes exceeds the {MAX_PAYLOAD} byte limit"
            )
        header = FRAME_HEADER.pack(
            FRAME_MAGIC, PROTOCOL_VERSION, int(self.msg_type), len(self.payload)
        )
        return header + self.payload


class CommStats(Prefab):
    """
    Frame level traffic counters, safe to share between sessions.

    Counts include the 10 byte frame header and exclude anything below the
    framing layer (TCP/IP overhead).
    """
    bytes_sent: int = 0
    bytes_received: int = 0
    frames_sent: dict = attribute(default_factory=dict)
    frames_received: dict = attribute(default_factory=dict)
    lock: object = attribute(default_factory=threading.Lock, private=True)

    def record_sent(self, msg_type, nbytes):
        with self.lock:
            self.bytes_sent += nbytes
            key = MessageType(msg_type).name
            self.frames_sent[key] = self.frames_sent.get(key, 0) + 1

    def record_received(self, msg_type, nbytes):
        with self.lock:
            self.bytes_received += nbytes
            key = MessageType(msg_type).name
            self.frames_received[key] = self.frames_received.get(key, 0) + 1

    def snapshot(self):
        with self.lock:
            return {
                "bytes_sent": self.bytes_sent,
                "bytes_received": self.bytes_received,
                "frames_sent": dict(sorted(self.frames_sent.items())),
                "frames_received": dict(sorted(self.frames_received.items())),
            }


# Parameter serialization
def _items(params):
    return params.items() if hasattr(params, "items") else params


def serialize_params(params):
    """
    Serialize named tensors in their given order.

    Layout: u32 tensor count, then per tensor u8 name length, name bytes,
    u8 ndim, ndim x u32 dims and the values as little endian float32.

    :param params: mapping (or sequence of pairs) of name to array
    :return: bytes
    """
    items = list(_items(params))
    parts = [struct.pack("<I", len(items))]
    for name, tensor in items:
        encoded = name.encode("utf-8")
        if len(encoded) > 255:
            raise SerializeError(f"Tensor name {name!r} exceeds 255 bytes")
        arr = np.asarray(tensor)
        if arr.ndim > 255:
            raise SerializeError(f"Tensor {name!r} has {arr.ndim} dimensions, at most 255 fit")
        if any(d >= 2**32 for d in arr.shape):
            raise SerializeError(f"Tensor {name!r} has a dimension that does not fit in 32 bits")
        parts.append(struct.pack("<B", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize_params(data):
    """
    Inverse of serialize_params. Trailing bytes are an error.

    :param data: serialized parameters
    :return: dict of name to float32 array, in stream order
    """
    view = memoryview(data)
    size = len(view)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > size:
            raise DeserializeError(f"Stream truncated reading {what} at byte {pos}")
        start = pos
        pos += n
        return start

    (count,) = struct.unpack_from("<I", view, take(4, "tensor count"))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<B", view, take(1, "name length"))
        start = take(name_len, "name")
        try:
            name = bytes(view[start:start + name_len]).decode("utf-8")
        except UnicodeDecodeError as e:
            raise DeserializeError(f"Tensor name at byte {start} is not UTF-8") from e
        if name in params:
            raise DeserializeError(f"Duplicate tensor name {name!r}")

        (ndim,) = struct.unpack_from("<B", view, take(1, "ndim"))
        dims = struct.unpack_from(f"<{ndim}I", view, take(4 * ndim, "dims"))
        numel = math.prod(dims)
        if numel * 4 > size - pos:
            raise DeserializeError(
                f"Tensor {name!r} with dims {dims} needs {numel * 4} bytes, "
                f"only {size - pos} remain"
            )
        start = take(numel * 4, "values")
        if numel:
            values = np.frombuffer(view, dtype="<f4", count=numel, offset=start)
            params[name] = values.astype(np.float32).reshape(dims)
        else:
            params[name] = np.zeros(dims, dtype=np.float32)

    if pos != size:
        raise DeserializeError(f"{size - pos} trailing bytes after {count} tensors")
    return params


def params_payload_size(params):
    """
    Analytic size of serialize_params(params) in bytes.
    """
    total = 4
    for name, tensor in _items(params):
        shape = np.shape(tensor)
        total += 1 + len(name.encode("utf-8")) + 1 + 4 * len(shape) + 4 * math.prod(shape)
    return total


# Payload codecs
def encode_register(client_id):
    encoded = client_id.encode("utf-8")
    if not 0 < len(encoded) <= 255:
        raise SerializeError(f"Client id {client_id!r} must be 1 to 255 bytes")
    return struct.pack("<B", len(encoded)) + encoded


def decode_register(payload):
    if not payload or len(payload) != 1 + payload[0]:
        raise ProtocolError("Malformed REGISTER payload")
    try:
        return bytes(payload[1:]).decode("utf-8")
    except UnicodeDecodeError as e:
        raise ProtocolError("REGISTER client id is not UTF-8") from e


def encode_local_update(round_index, sample_count, mean_loss, train_accuracy, params):
    """
    LOCAL_UPDATE payload: u32 round, u32 sample count, f32 mean loss,
    f32 train accuracy, then serialized parameters.
    """
    header = _LOCAL_UPDATE_HEADER.pack(round_index, sample_count, mean_loss, train_accuracy)
    return header + serialize_params(params)


def decode_local_update(payload):
    """
    :return: (round, sample_count, mean_loss, train_accuracy, params)
    """
    if len(payload) < _LOCAL_UPDATE_HEADER.size:
        raise ProtocolError("LOCAL_UPDATE payload is shorter than its header")
    round_index, count, loss, accuracy = _LOCAL_UPDATE_HEADER.unpack_from(payload, 0)
    try:
        params = deserialize_params(memoryview(payload)[_LOCAL_UPDATE_HEADER.size:])
    except DeserializeError as e:
        raise ProtocolError(f"LOCAL_UPDATE parameters are malformed: {e}") from e
    return round_index, count, loss, accuracy, params


# Channels
class Channel:
    """
    An ordered, reliable byte stream owned by one session.

    :param stats: CommStats updated by send_frame/recv_frame
    :param timeout: seconds a receive may block, None waits forever
    """
    def __init__(self, stats=None, timeout=None):
        self.stats = stats if stats is not None else CommStats()
        self.timeout = timeout

    def wait_budget(self, deadline=None):
        """
        Seconds the next blocking read may take.

        :param deadline: optional ``time.monotonic()`` value no read may pass
        :return: the smaller of the channel timeout and the time left
        """
        if deadline is None:
            return self.timeout
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise TimeoutError("Deadline passed before the read completed")
        return remaining if self.timeout is None else min(self.timeout, remaining)

    def send_bytes(self, data):
        raise NotImplementedError

    def recv_exact(self, n, deadline=None):
        raise NotImplementedError

    def close(self):
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()


class _Pipe:
    # One direction of a loopback pair
    def __init__(self):
        self.buffer = bytearray()
        self.cond = threading.Condition()
        self.closed = False

    def write(self, data):
        with self.cond:
            if self.closed:
                raise ChannelClosed("Peer has closed the channel")
            self.buffer += data
            self.cond.notify_all()

    def read_exact(self, n, timeout):
        deadline = None if timeout is None else time.monotonic() + timeout
        with self.cond:
            while len(self.buffer) < n:
                if self.closed:
                    raise ChannelClosed(
                        f"Channel closed with {len(self.buffer)} of {n} bytes pending"
                    )
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError(f"No data within {timeout} seconds")
                self.cond.wait(remaining)
            out = bytes(self.buffer[:n])
            del self.buffer[:n]
            return out

    def close(self):
        with self.cond:
            self.closed = True
            self.cond.notify_all()


class LoopbackChannel(Channel):
    def __init__(self, inbound, outbound, stats=None, timeout=None):
        super().__init__(stats, timeout)
        self._inbound = inbound
        self._outbound = outbound
        self._closed = False

    def send_bytes(self, data):
        if self._closed:
            raise ChannelClosed("Send on a closed channel")
        self._outbound.write(data)

    def recv_exact(self, n, deadline=None):
        if self._closed:
            raise ChannelClosed("Receive on a closed channel")
        return self._inbound.read_exact(n, self.wait_budget(deadline))

    def close(self):
        self._closed = True
        self._inbound.close()
        self._outbound.close()


def loopback_channel_pair(server_stats=None, client_stats=None, timeout=None):
    """
    Create two connected in-process channel ends.

    Bytes written to one end arrive unchanged and in order at the other.
    Data already written stays readable after the writer closes.

    :return: (server end, client end)
    """
    to_client, to_server = _Pipe(), _Pipe()
    server_end = LoopbackChannel(to_server, to_client, server_stats, timeout)
    client_end = LoopbackChannel(to_client, to_server, client_stats, timeout)
    return server_end, client_end


class SocketChannel(Channel):
    def __init__(self, sock, stats=None, timeout=None):
        super().__init__(stats, timeout)
        self.sock = sock
        self.sock.settimeout(timeout)
        try:
            self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:  # pragma: no cover
            pass

    def send_bytes(self, data):
        try:
            self.sock.sendall(data)
        except TimeoutError:
            raise
        except OSError as e:
            raise ChannelClosed(f"Send failed: {e}") from e

    def recv_exact(self, n, deadline=None):
        chunks = []
        got = 0
        try:
            while got < n:
                try:
                    # A slow sender cannot stretch the read past the deadline
                    if deadline is not None:
                        self.sock.settimeout(self.wait_budget(deadline))
                    chunk = self.sock.recv(min(n - got, 1 << 20))
                except TimeoutError:
                    raise
                except OSError as e:
                    raise ChannelClosed(f"Receive failed: {e}") from e
                if not chunk:
                    raise ChannelClosed(f"Connection closed with {got} of {n} bytes received")
                chunks.append(chunk)
                got += len(chunk)
        finally:
            if deadline is not None:
                try:
                    self.sock.settimeout(self.timeout)
                except OSError:
                    pass
        return b"".join(chunks)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def send_frame(channel, msg_type, payload=b""):
    """
    Write one frame and count it.

    :return: number of bytes written, 10 + len(payload)
    """
    data = Frame(MessageType(msg_type), bytes(payload)).to_bytes()
    channel.send_bytes(data)
    channel.stats.record_sent(msg_type, len(data))
    log.debug("Sent %s frame, %d bytes", MessageType(msg_type).name, len(data))
    return len(data)


def _check_header(magic, version, code, length):
    if magic != FRAME_MAGIC:
        raise ProtocolError(f"Bad frame magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"Unsupported protocol version {version}")
    try:
        msg_type = MessageType(code)
    except ValueError:
        raise ProtocolError(f"Unknown message type {code}") from None
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"Payload length {length} exceeds the {MAX_PAYLOAD} byte limit")
    return msg_type


def recv_frame(channel, deadline=None):
    """
    Read one complete frame and count it.

    :param deadline: optional ``time.monotonic()`` value by which the whole
                     frame must have arrived, otherwise TimeoutError
    :return: Frame
    """
    header = channel.recv_exact(HEADER_SIZE, deadline)
    msg_type = _check_header(*FRAME_HEADER.unpack(header))
    (length,) = struct.unpack_from("<I", header, 6)
    payload = channel.recv_exact(length, deadline) if length else b""
    channel.stats.record_received(msg_type, HEADER_SIZE + length)
    log.debug("Received %s frame, %d bytes", msg_type.name, HEADER_SIZE + length)
    return Frame(msg_type, payload)


def parse_frame(data):
    """
    Try to take one frame off the front of a buffer.

    :param data: bytes received so far
    :return: (Frame, remaining bytes), or (None, data) if the buffer does
             not yet hold a complete frame
    """
    if len(data) < HEADER_SIZE:
        return None, data
    magic, version, code, length = FRAME_HEADER.unpack_from(data, 0)
    msg_type = _check_header(magic, version, code, length)
    end = HEADER_SIZE + length
    if len(data) < end:
        return None, data
    return Frame(msg_type, bytes(data[HEADER_SIZE:end])), data[end:]


# Listeners
class LoopbackListener:
    """
    In-process stand-in for a listening socket.

    Clients call ``connect`` to get their end; the server receives the
    matching ends from ``accept`` in connection order.
    """
    def __init__(self, stats=None, timeout=None):
        self.stats = stats if stats is not None else CommStats()
        self.timeout = timeout
        self._pending = queue.Queue()

    def connect(self, stats=None):
        server_end, client_end = loopback_channel_pair(self.stats, stats, self.timeout)
        self._pending.put(server_end)
        return client_end

    def accept(self, timeout=None):
        try:
            return self._pending.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"No client connected within {timeout} seconds") from None

    def close(self):
        pass


def parse_address(text):
    """
    Split ``host:port`` into a (host, port) tuple.
    """
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"Address {text!r} is not of the form HOST:PORT")
    return host or "127.0.0.1", int(port)


class TcpListener:
    def __init__(self, host="127.0.0.1", port=0, stats=None, timeout=None):
        self.stats = stats if stats is not None else CommStats()
        self.timeout = timeout
        self.sock = socket.create_server((host, port))

    @property
    def address(self):
        host, port = self.sock.getsockname()[:2]
        return host, port

    def accept(self, timeout=None):
        self.sock.settimeout(timeout)
        conn, peer = self.sock.accept()
        log.debug("Accepted connection from %s:%s", *peer[:2])
        return SocketChannel(conn, self.stats, self.timeout)

    def close(self):
        self.sock.close()


def tcp_connect(address, stats=None, timeout=None, retry_for=10.0):
    """
    Connect to a server, retrying while it is not yet listening.

    :param address: (host, port)
    :param retry_for: seconds to keep retrying refused connections
    :return: SocketChannel
    """
    deadline = time.monotonic() + retry_for
    while True:
        try:
            sock = socket.create_connection(address, timeout=timeout)
        except ConnectionRefusedError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.1)
        else:
            return SocketChannel(sock, stats, timeout)
