"""Peer-to-peer message transport.

Wire format (TCP) and the in-process equivalent carry the same frames:
a 4-byte big-endian length (covering everything after itself), one type
byte, then the payload.  Multi-byte integers are big-endian; reals are
IEEE-754 binary64 big-endian.  Channels are reliable, ordered and
exactly-once; both endpoints record the sequence of message types they
saw, which the transport differential test compares across backends.
"""

import queue
import socket
import struct
import time

import numpy as np

from .errors import ChannelClosedError, ProtocolError, ShutdownError

# message types ---------------------------------------------------------------
MSG_PUSH = 0x01
MSG_PULL_REQ = 0x02
MSG_PULL_RESP = 0x03

MSG_PSI_PARAMS = 0x10
MSG_PSI_CLIENT_BF = 0x11
MSG_PSI_INTERSECTION_GBF = 0x12
MSG_PSI_DONE = 0x13
MSG_PSI_IDS = 0x14

MSG_ENC_ACT = 0x20
MSG_MASKED_CT = 0x21
MSG_MASKED_PT = 0x22
MSG_GRAD_PASSIVE = 0x23

MSG_HELLO = 0x30
MSG_SHUTDOWN = 0x7F

MSG_NAMES = {
    MSG_PUSH: "PUSH", MSG_PULL_REQ: "PULL_REQ", MSG_PULL_RESP: "PULL_RESP",
    MSG_PSI_PARAMS: "PSI_PARAMS", MSG_PSI_CLIENT_BF: "PSI_CLIENT_BF",
    MSG_PSI_INTERSECTION_GBF: "PSI_INTERSECTION_GBF", MSG_PSI_DONE: "PSI_DONE",
    MSG_PSI_IDS: "PSI_IDS", MSG_ENC_ACT: "ENC_ACT",
    MSG_MASKED_CT: "MASKED_CT", MSG_MASKED_PT: "MASKED_PT",
    MSG_GRAD_PASSIVE: "GRAD_PASSIVE", MSG_HELLO: "HELLO",
    MSG_SHUTDOWN: "SHUTDOWN",
}

MAX_FRAME = 1 << 31  # sanity cap, not a protocol limit


def pack_frame(msg_type, payload):
    if not 0 <= msg_type <= 0xFF:
        raise ValueError("message type out of range")
    return struct.pack(">IB", len(payload) + 1, msg_type) + payload


class Channel:
    """One endpoint of a bidirectional, ordered, reliable message pipe."""

    def __init__(self):
        self.trace = []  # (direction, msg_type) in observation order

    def send(self, msg_type, payload=b""):
        self.trace.append(("send", msg_type))
        self._send(msg_type, payload)

    def recv(self):
        msg_type, payload = self._recv()
        self.trace.append(("recv", msg_type))
        return msg_type, payload

    def recv_expect(self, expected_type):
        """Receive one message, insisting on its type."""
        msg_type, payload = self.recv()
        if msg_type == MSG_SHUTDOWN and expected_type != MSG_SHUTDOWN:
            raise ShutdownError("peer shut down while %s was expected"
                                % MSG_NAMES.get(expected_type, hex(expected_type)))
        if msg_type != expected_type:
            raise ProtocolError("expected %s, got %s"
                                % (MSG_NAMES.get(expected_type, hex(expected_type)),
                                   MSG_NAMES.get(msg_type, hex(msg_type))))
        return payload

    def close(self):
        raise NotImplementedError

    def type_sequence(self):
        return list(self.trace)


class _ClosedMarker:
    pass


_CLOSED = _ClosedMarker()


class InProcChannel(Channel):
    """Queue-backed endpoint for threads inside one process."""

    def __init__(self, inbox, outbox):
        super().__init__()
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def _send(self, msg_type, payload):
        if self._closed:
            raise ChannelClosedError("send on closed channel")
        self._outbox.put((msg_type, payload))

    def _recv(self):
        item = self._inbox.get()
        if item is _CLOSED:
            self._inbox.put(_CLOSED)  # keep later receivers failing too
            raise ChannelClosedError("peer closed the channel")
        return item

    def close(self):
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def inproc_pair():
    """Two connected in-process endpoints (a, b)."""
    q_ab, q_ba = queue.Queue(), queue.Queue()
    return InProcChannel(q_ba, q_ab), InProcChannel(q_ab, q_ba)


class TcpChannel(Channel):
    """Socket-backed endpoint; framing as documented in the module header."""

    def __init__(self, sock):
        super().__init__()
        self._sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _send(self, msg_type, payload):
        try:
            self._sock.sendall(pack_frame(msg_type, payload))
        except OSError as e:
            raise ChannelClosedError("send failed: %s" % e) from e

    def _recv_exact(self, n):
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(min(n - len(buf), 1 << 20))
            except OSError as e:
                raise ChannelClosedError("recv failed: %s" % e) from e
            if not chunk:
                raise ChannelClosedError("peer closed the connection")
            buf.extend(chunk)
        return bytes(buf)

    def _recv(self):
        (length,) = struct.unpack(">I", self._recv_exact(4))
        if not 1 <= length <= MAX_FRAME:
            raise ProtocolError("bad frame length %d" % length)
        body = self._recv_exact(length)
        return body[0], body[1:]

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def open_listener(host, port, backlog=16):
    s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    s.bind((host, port))
    s.listen(backlog)
    return s


def accept_channel(listener):
    sock, _ = listener.accept()
    return TcpChannel(sock)


def connect_channel(host, port, retries=50, delay=0.1):
    last = None
    for _ in range(retries):
        try:
            return TcpChannel(socket.create_connection((host, port), timeout=30))
        except OSError as e:
            last = e
            time.sleep(delay)
    raise ChannelClosedError("could not connect to %s:%d: %s" % (host, port, last))


# weight payloads -------------------------------------------------------------
#
# Vectors longer than CHUNK_ENTRIES entries are split into numbered chunks so
# a single frame never carries an unbounded run of reals.  Block layout:
# total entries (8B) | n_chunks (4B) | repeated {chunk id (4B) | count (4B) |
# count big-endian float64 values}.

CHUNK_ENTRIES = 4096


def encode_vector_block(values):
    values = np.asarray(values, dtype=np.float64)
    total = values.size
    n_chunks = max(1, -(-total // CHUNK_ENTRIES))
    out = [struct.pack(">QI", total, n_chunks)]
    for i in range(n_chunks):
        part = values[i * CHUNK_ENTRIES:(i + 1) * CHUNK_ENTRIES]
        out.append(struct.pack(">II", i, part.size))
        out.append(part.astype(">f8").tobytes())
    return b"".join(out)


def decode_vector_block(buf, offset=0):
    total, n_chunks = struct.unpack_from(">QI", buf, offset)
    offset += 12
    parts = []
    for expect_id in range(n_chunks):
        cid, count = struct.unpack_from(">II", buf, offset)
        offset += 8
        if cid != expect_id:
            raise ProtocolError("chunk %d arrived where %d was expected" % (cid, expect_id))
        parts.append(np.frombuffer(buf, dtype=">f8", count=count, offset=offset))
        offset += count * 8
    values = np.concatenate(parts) if parts else np.zeros(0)
    if values.size != total:
        raise ProtocolError("vector block reassembled to %d of %d entries"
                            % (values.size, total))
    return values.astype(np.float64), offset


def encode_push(worker_id, round_no, values):
    return struct.pack(">IQ", worker_id, round_no) + encode_vector_block(values)


def decode_push(buf):
    worker_id, round_no = struct.unpack_from(">IQ", buf, 0)
    values, _ = decode_vector_block(buf, 12)
    return worker_id, round_no, values


def encode_pull_req(worker_id, round_no):
    return struct.pack(">IQ", worker_id, round_no)


def decode_pull_req(buf):
    return struct.unpack_from(">IQ", buf, 0)


def encode_pull_resp(round_no, values):
    return struct.pack(">Q", round_no) + encode_vector_block(values)


def decode_pull_resp(buf):
    (round_no,) = struct.unpack_from(">Q", buf, 0)
    values, _ = decode_vector_block(buf, 8)
    return round_no, values


def encode_f64_grid(arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D grid")
    return struct.pack(">II", arr.shape[0], arr.shape[1]) + arr.astype(">f8").tobytes()


def decode_f64_grid(buf, offset=0):
    rows, cols = struct.unpack_from(">II", buf, offset)
    offset += 8
    grid = np.frombuffer(buf, dtype=">f8", count=rows * cols, offset=offset)
    return grid.astype(np.float64).reshape(rows, cols), offset + rows * cols * 8
