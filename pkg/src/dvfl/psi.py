"""Private set intersection over hash-partitioned id sets.

One bucket pair runs the filter exchange: the client builds a Bloom filter
over its ids, the server holds a garbled Bloom filter over its own ids and
answers with an intersection filter that reveals shares only at positions the
client claimed.  The client then recognises exactly the common ids.  Scaling
out is sheer data parallelism: both parties split their ids into co-indexed
buckets with one shared keyed hash, run a session per bucket, and union the
results.

The share-transfer step is pluggable behind :class:`TransferOracle`.  The
only implementation here hands the whole intersection filter over directly;
it is NOT oblivious (the server learns which filter positions the client
set) and is labeled as such in logs and config.
"""

import concurrent.futures
import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import transport
from .errors import ConfigError, ProtocolError
from .filters import (DEFAULT_SIGMA, BloomFilter, FilterParams,
                      GarbledBloomFilter, deserialize_bf, deserialize_gbf,
                      gbf_build, serialize_bf, serialize_gbf)
from .seeds import derive_seed

log = logging.getLogger(__name__)


def dedupe_ids(ids, label=""):
    """Sorted unique id list; logs when duplicates were dropped."""
    unique = sorted(set(ids))
    dropped = len(list(ids)) - len(unique)
    if dropped:
        log.warning("dropped %d duplicate ids%s", dropped,
                    " from %s" % label if label else "")
    return unique


def hash_partition(ids, n_buckets, seed):
    """Split ids into co-indexed buckets by keyed hash; order-independent."""
    if n_buckets < 1:
        raise ValueError("need at least one bucket")
    key = (seed % (1 << 64)).to_bytes(8, "big")
    buckets = [[] for _ in range(n_buckets)]
    for item in sorted(set(ids)):
        d = hashlib.blake2b(item, key=key, person=b"bucketing", digest_size=8).digest()
        buckets[int.from_bytes(d, "big") % n_buckets].append(item)
    return buckets


def build_intersection_gbf(server_gbf, client_bf, rng_seed):
    """Server-side reply filter.

    Slot i keeps the server's share where the client's bit i is set and is
    replaced by fresh uniform noise everywhere else, so the client learns
    shares only at positions its own set touches.
    """
    if (server_gbf.m, server_gbf.k, server_gbf.hash_seed) != \
            (client_bf.m, client_bf.k, client_bf.hash_seed):
        raise ValueError("filter parameters differ between the two sides")
    m, width = server_gbf.slots.shape
    rng = np.random.default_rng(rng_seed)
    noise = rng.integers(0, 256, size=(m, width), dtype=np.uint8)
    slots = np.where(client_bf.bits[:, None], server_gbf.slots, noise)
    return GarbledBloomFilter(server_gbf.m, server_gbf.k, server_gbf.sigma,
                              server_gbf.hash_seed, slots)


class TransferOracle:
    """Obtains the intersection filter for a client Bloom filter.

    Stand-in seam for an oblivious-transfer step; implementations declare
    whether they actually hide the client's positions.
    """

    name = "abstract"
    oblivious = False

    def intersect(self, client_bf):
        raise NotImplementedError


class DirectTransfer(TransferOracle):
    """In-memory transfer: server-side filter is consulted directly."""

    name = "direct-transfer"
    oblivious = False

    def __init__(self, server_gbf, rng_seed):
        self.server_gbf = server_gbf
        self.rng_seed = rng_seed

    def intersect(self, client_bf):
        return build_intersection_gbf(self.server_gbf, client_bf, self.rng_seed)


class ChannelTransfer(TransferOracle):
    """Client side of the transfer over a peer channel."""

    name = "direct-transfer"
    oblivious = False

    def __init__(self, channel):
        self.channel = channel

    def intersect(self, client_bf):
        self.channel.send(transport.MSG_PSI_CLIENT_BF, serialize_bf(client_bf))
        return deserialize_gbf(self.channel.recv_expect(transport.MSG_PSI_INTERSECTION_GBF))


_PHASES = ("init", "params", "exchange", "done")


@dataclass
class PsiSessionState:
    """Tracks one session's role and forward-only phase progression."""

    role: str
    phase: str = "init"
    params: FilterParams = None
    result: set = field(default_factory=set)

    def advance(self, phase):
        if _PHASES.index(phase) < _PHASES.index(self.phase):
            raise ProtocolError("psi session cannot move from %s back to %s"
                                % (self.phase, phase))
        self.phase = phase


def psi_pair(client_ids, server_ids, fp_target=1e-6, params=None,
             hash_seed=1, rng_seed=1, sigma=DEFAULT_SIGMA, transfer=None):
    """One full in-memory session; returns the ids common to both sides."""
    client = dedupe_ids(client_ids, "client")
    server = dedupe_ids(server_ids, "server")
    if params is None:
        params = FilterParams.from_target(max(len(client), len(server)), fp_target)
    state = PsiSessionState(role="client", params=params)
    if transfer is None:
        gbf = gbf_build(server, params, hash_seed, derive_seed(rng_seed, "gbf"), sigma)
        transfer = DirectTransfer(gbf, derive_seed(rng_seed, "reply-noise"))
        final_seed = gbf.hash_seed
    else:
        final_seed = hash_seed
    if not transfer.oblivious:
        log.info("transfer oracle '%s' is not oblivious; "
                 "client filter positions are visible to the server", transfer.name)
    state.advance("params")
    bf = BloomFilter.build(client, params, final_seed)
    reply = transfer.intersect(bf)
    state.advance("exchange")
    state.result = {x for x in client if reply.query(x)}
    state.advance("done")
    return state.result


# --- wire payloads ----------------------------------------------------------

def encode_psi_proposal(n_items, fp_target, hash_seed, sigma):
    return struct.pack(">QdQH", n_items, fp_target, hash_seed, sigma)


def decode_psi_proposal(buf):
    return struct.unpack(">QdQH", buf)


def encode_psi_params(params, hash_seed, sigma):
    return struct.pack(">QdQHQH", params.expected_items, params.fp_target,
                       params.m, params.k, hash_seed, sigma)


def decode_psi_params(buf):
    expected, fp, m, k, hash_seed, sigma = struct.unpack(">QdQHQH", buf)
    return FilterParams(expected, fp, m, k), hash_seed, sigma


def encode_id_list(ids):
    out = [struct.pack(">I", len(ids))]
    for item in ids:
        out.append(struct.pack(">I", len(item)))
        out.append(item)
    return b"".join(out)


def decode_id_list(buf):
    (count,) = struct.unpack_from(">I", buf, 0)
    offset = 4
    items = []
    for _ in range(count):
        (ln,) = struct.unpack_from(">I", buf, offset)
        offset += 4
        items.append(bytes(buf[offset:offset + ln]))
        offset += ln
    return items


# --- channel-driven sessions ------------------------------------------------

def psi_client_session(ids, channel, fp_target=1e-6, hash_seed=1,
                       sigma=DEFAULT_SIGMA, share_result=True):
    """Client half of a bucket session.  Returns this bucket's intersection."""
    client = dedupe_ids(ids, "client")
    state = PsiSessionState(role="client")
    channel.send(transport.MSG_PSI_PARAMS,
                 encode_psi_proposal(len(client), fp_target, hash_seed, sigma))
    params, final_seed, srv_sigma = decode_psi_params(
        channel.recv_expect(transport.MSG_PSI_PARAMS))
    if srv_sigma != sigma or params.fp_target != fp_target:
        raise ConfigError("filter parameters disagree between parties "
                          "(sigma %d/%d, fp %g/%g)" % (sigma, srv_sigma,
                                                       fp_target, params.fp_target))
    state.params = params
    state.advance("params")
    bf = BloomFilter.build(client, params, final_seed)
    reply = ChannelTransfer(channel).intersect(bf)
    state.advance("exchange")
    result = {x for x in client if reply.query(x)}
    channel.send(transport.MSG_PSI_DONE, struct.pack(">Q", len(result)))
    if share_result:
        channel.send(transport.MSG_PSI_IDS, encode_id_list(sorted(result)))
    state.result = result
    state.advance("done")
    return result


def psi_server_session(ids, channel, fp_target=1e-6, rng_seed=1,
                       sigma=DEFAULT_SIGMA, share_result=True):
    """Server half of a bucket session.

    Learns the intersection only through the client's final id share (the
    aligned training phase needs it on both sides).
    """
    server = dedupe_ids(ids, "server")
    state = PsiSessionState(role="server")
    n_client, fp, seed_hint, cl_sigma = decode_psi_proposal(
        channel.recv_expect(transport.MSG_PSI_PARAMS))
    if cl_sigma != sigma or fp != fp_target:
        raise ConfigError("filter parameters disagree between parties "
                          "(sigma %d/%d, fp %g/%g)" % (sigma, cl_sigma, fp_target, fp))
    params = FilterParams.from_target(max(n_client, len(server)), fp_target)
    gbf = gbf_build(server, params, seed_hint, derive_seed(rng_seed, "gbf"), sigma)
    channel.send(transport.MSG_PSI_PARAMS,
                 encode_psi_params(params, gbf.hash_seed, sigma))
    state.params = params
    state.advance("params")
    bf = deserialize_bf(channel.recv_expect(transport.MSG_PSI_CLIENT_BF))
    if (bf.m, bf.k, bf.hash_seed) != (params.m, params.k, gbf.hash_seed):
        raise ProtocolError("client filter does not match negotiated parameters")
    reply = build_intersection_gbf(gbf, bf, derive_seed(rng_seed, "reply-noise"))
    channel.send(transport.MSG_PSI_INTERSECTION_GBF, serialize_gbf(reply))
    state.advance("exchange")
    (count,) = struct.unpack(">Q", channel.recv_expect(transport.MSG_PSI_DONE))
    result = set()
    if share_result:
        result = set(decode_id_list(channel.recv_expect(transport.MSG_PSI_IDS)))
        if len(result) != count:
            raise ProtocolError("intersection share has %d ids, count said %d"
                                % (len(result), count))
    state.result = result
    state.advance("done")
    return result


# --- distributed driver -----------------------------------------------------

def _psi_bucket(args):
    client, server, fp_target, hash_seed, rng_seed, sigma = args
    return psi_pair(client, server, fp_target=fp_target, hash_seed=hash_seed,
                    rng_seed=rng_seed, sigma=sigma)


def distributed_psi(client_ids, server_ids, n_workers=1, fp_target=1e-6,
                    seed=1, sigma=DEFAULT_SIGMA, executor="thread"):
    """Hash-partition both sides, intersect per bucket, union the results.

    The result is a pure function of (ids, seed, fp_target, sigma); the
    bucket count and executor backend only change the schedule.  Use
    executor="process" to beat the interpreter lock on multi-core hosts.
    """
    if executor not in ("serial", "thread", "process"):
        raise ConfigError("unknown executor %r" % executor)
    client = dedupe_ids(client_ids, "client")
    server = dedupe_ids(server_ids, "server")
    bucket_seed = derive_seed(seed, "bucketing")
    c_buckets = hash_partition(client, n_workers, bucket_seed)
    s_buckets = hash_partition(server, n_workers, bucket_seed)
    jobs = [(c_buckets[i], s_buckets[i], fp_target,
             derive_seed(seed, "filter", i), derive_seed(seed, "session", i),
             sigma) for i in range(n_workers)]
    if executor == "serial" or n_workers == 1:
        results = [_psi_bucket(j) for j in jobs]
    elif executor == "thread":
        with concurrent.futures.ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_psi_bucket, jobs))
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_psi_bucket, jobs))
    out = set()
    for r in results:
        out |= r
    return out
