"""Per-party parameter server with bulk-synchronous rounds.

Workers push their locally updated weight vectors for round r; once all n
workers have pushed, the server publishes the round r+1 global vector as the
elementwise mean and wakes blocked pulls.  Aggregation always walks pending
vectors in worker-id order and sums them pairwise, so the published vector is
bit-identical no matter how the pushes interleaved.
"""

import threading

import numpy as np

from . import transport
from .errors import ProtocolError, ShutdownError
from .nn import WeightVector

_HISTORY_ROUNDS = 4  # BSP keeps workers within one round of each other


def pairwise_sum(arrays):
    """Summation by halving; a fixed reduction tree bounds float drift."""
    arrs = list(arrays)
    if not arrs:
        raise ValueError("nothing to sum")
    while len(arrs) > 1:
        nxt = []
        for i in range(0, len(arrs) - 1, 2):
            nxt.append(arrs[i] + arrs[i + 1])
        if len(arrs) % 2:
            nxt.append(arrs[-1])
        arrs = nxt
    return arrs[0]


class ParameterServer:
    def __init__(self, init_weights, n_workers):
        if n_workers < 1:
            raise ValueError("need at least one worker")
        self._cv = threading.Condition()
        self._layout = init_weights.layout
        self._vectors = {0: init_weights.copy()}
        self._round = 0
        self._pending = {}
        self._n = n_workers
        self._down = False

    @property
    def round(self):
        with self._cv:
            return self._round

    def push(self, worker_id, vec, round_no):
        """Submit worker ``worker_id``'s round ``round_no`` result."""
        if not 0 <= worker_id < self._n:
            raise ProtocolError("worker id %d out of range" % worker_id)
        if vec.layout != self._layout:
            raise ProtocolError("pushed vector layout does not match the server's")
        with self._cv:
            if self._down:
                raise ShutdownError("parameter server is shut down")
            if round_no != self._round:
                raise ProtocolError("push for round %d but server is at round %d"
                                    % (round_no, self._round))
            if worker_id in self._pending:
                raise ProtocolError("duplicate push from worker %d in round %d"
                                    % (worker_id, round_no))
            self._pending[worker_id] = vec.values.copy()
            if len(self._pending) == self._n:
                ordered = [self._pending[w] for w in sorted(self._pending)]
                mean = pairwise_sum(ordered) / float(self._n)
                self._round += 1
                self._vectors[self._round] = WeightVector(self._layout, mean)
                self._pending = {}
                for old in [r for r in self._vectors if r < self._round - _HISTORY_ROUNDS]:
                    del self._vectors[old]
                self._cv.notify_all()

    def pull(self, worker_id, round_no, timeout=None):
        """Block until round ``round_no`` is published, then return it."""
        if not 0 <= worker_id < self._n:
            raise ProtocolError("worker id %d out of range" % worker_id)
        with self._cv:
            ok = self._cv.wait_for(lambda: self._down or self._round >= round_no,
                                   timeout)
            if self._down:
                raise ShutdownError("parameter server is shut down")
            if not ok:
                raise ProtocolError("pull(round=%d) timed out at round %d"
                                    % (round_no, self._round))
            if round_no not in self._vectors:
                raise ProtocolError("round %d is no longer retained (server at %d)"
                                    % (round_no, self._round))
            return self._vectors[round_no].copy()

    def current_weights(self):
        with self._cv:
            return self._vectors[self._round].copy()

    def shutdown(self):
        with self._cv:
            self._down = True
            self._cv.notify_all()


# --- serving a PS across a channel ------------------------------------------

def serve_ps(ps, channel):
    """Answer PUSH / PULL_REQ frames until SHUTDOWN or channel close.

    Run one serving thread per connected worker channel; pulls block inside
    this loop, which is fine because each worker owns its channel.
    """
    while True:
        try:
            msg_type, payload = channel.recv()
        except ProtocolError:
            return
        if msg_type == transport.MSG_SHUTDOWN:
            return
        if msg_type == transport.MSG_PUSH:
            worker_id, round_no, values = transport.decode_push(payload)
            ps.push(worker_id, WeightVector(ps._layout, values), round_no)
        elif msg_type == transport.MSG_PULL_REQ:
            worker_id, round_no = transport.decode_pull_req(payload)
            vec = ps.pull(worker_id, round_no)
            channel.send(transport.MSG_PULL_RESP,
                         transport.encode_pull_resp(round_no, vec.values))
        else:
            raise ProtocolError("parameter server got unexpected %s"
                                % transport.MSG_NAMES.get(msg_type, hex(msg_type)))


class RemoteParameterServer:
    """Client stub with the same push/pull surface as the local server."""

    def __init__(self, channel, layout):
        self._channel = channel
        self._layout = tuple(layout)

    def push(self, worker_id, vec, round_no):
        if vec.layout != self._layout:
            raise ProtocolError("pushed vector layout does not match")
        self._channel.send(transport.MSG_PUSH,
                           transport.encode_push(worker_id, round_no, vec.values))

    def pull(self, worker_id, round_no, timeout=None):
        self._channel.send(transport.MSG_PULL_REQ,
                           transport.encode_pull_req(worker_id, round_no))
        got_round, values = transport.decode_pull_resp(
            self._channel.recv_expect(transport.MSG_PULL_RESP))
        if got_round != round_no:
            raise ProtocolError("pull answered with round %d, wanted %d"
                                % (got_round, round_no))
        return WeightVector(self._layout, values)

    def shutdown(self):
        self._channel.send(transport.MSG_SHUTDOWN)
