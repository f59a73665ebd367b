"""Set-intersection protocol checks.

The ground truth everywhere is Python's set intersection computed directly
on the input id lists; the protocol under test must reproduce it exactly at
the configured false-positive target of 1e-6.
"""

import logging
import random
import threading

import numpy as np
import pytest

from dvfl import filters, psi, transport
from dvfl.errors import ConfigError, ProtocolError


def _ids(n, tag=b"id", start=0):
    return [b"%s-%08d" % (tag, i) for i in range(start, start + n)]


# --- bucketing ---------------------------------------------------------------

def test_partition_unions_back_to_input():
    ids = _ids(5000)
    buckets = psi.hash_partition(ids, 8, seed=42)
    assert len(buckets) == 8
    flat = [x for b in buckets for x in b]
    assert sorted(flat) == sorted(ids)
    assert len(flat) == len(ids)


def test_partition_single_bucket_and_errors():
    ids = _ids(10)
    assert psi.hash_partition(ids, 1, seed=1)[0] == sorted(ids)
    with pytest.raises(ValueError):
        psi.hash_partition(ids, 0, seed=1)


def test_partition_is_consistent_across_parties():
    # both sides must place a shared id into the same bucket index
    shared = _ids(300, tag=b"both")
    a = psi.hash_partition(shared + _ids(100, tag=b"a"), 4, seed=9)
    b = psi.hash_partition(shared + _ids(100, tag=b"b"), 4, seed=9)
    where_a = {x: i for i, bucket in enumerate(a) for x in bucket}
    where_b = {x: i for i, bucket in enumerate(b) for x in bucket}
    assert all(where_a[x] == where_b[x] for x in shared)


def test_partition_balance():
    ids = _ids(100000)
    sizes = [len(b) for b in psi.hash_partition(ids, 8, seed=3)]
    assert sum(sizes) == len(ids)
    assert max(sizes) <= 1.15 * min(sizes), sizes


def test_partition_seed_changes_layout():
    ids = _ids(1000)
    a = psi.hash_partition(ids, 4, seed=1)
    b = psi.hash_partition(ids, 4, seed=2)
    assert [len(x) for x in a] != [len(x) for x in b] or a != b


def test_dedupe_logs_duplicates(caplog):
    with caplog.at_level(logging.WARNING, logger="dvfl.psi"):
        out = psi.dedupe_ids([b"a", b"b", b"a"], "client")
    assert out == [b"a", b"b"]
    assert any("duplicate" in r.message for r in caplog.records)


# --- single-pair sessions ----------------------------------------------------

def test_pair_worked_examples():
    assert psi.psi_pair([b"a", b"b", b"c"], [b"b", b"c", b"d"]) == {b"b", b"c"}
    assert psi.psi_pair([b"a"], [b"b"]) == set()
    assert psi.psi_pair(_ids(50), _ids(50)) == set(_ids(50))
    assert psi.psi_pair([], _ids(10)) == set()
    assert psi.psi_pair(_ids(10), []) == set()


def test_pair_against_set_oracle():
    rng = random.Random(77)
    for trial in range(30):
        universe = _ids(rng.randrange(1, 400))
        client = rng.sample(universe, rng.randrange(0, len(universe) + 1))
        server = rng.sample(universe, rng.randrange(0, len(universe) + 1))
        expect = set(client) & set(server)
        got = psi.psi_pair(client, server, hash_seed=trial, rng_seed=trial)
        assert got == expect, trial


def test_pair_flags_non_oblivious_transfer(caplog):
    with caplog.at_level(logging.INFO, logger="dvfl.psi"):
        psi.psi_pair([b"a"], [b"a"])
    assert any("not oblivious" in r.message for r in caplog.records)
    assert psi.DirectTransfer.oblivious is False
    assert psi.ChannelTransfer.oblivious is False


def test_session_state_is_forward_only():
    state = psi.PsiSessionState(role="client")
    state.advance("exchange")
    with pytest.raises(ProtocolError):
        state.advance("params")


def test_reply_filter_reveals_only_claimed_positions():
    params = filters.FilterParams.from_target(100, 1e-6)
    gbf = filters.gbf_build(_ids(100), params, hash_seed=1, rng_seed=1)
    ones = filters.BloomFilter(gbf.m, gbf.k, gbf.hash_seed)
    ones.bits[:] = True
    reply = psi.build_intersection_gbf(gbf, ones, rng_seed=5)
    assert np.array_equal(reply.slots, gbf.slots)

    zeros = filters.BloomFilter(gbf.m, gbf.k, gbf.hash_seed)
    reply = psi.build_intersection_gbf(gbf, zeros, rng_seed=5)
    assert not np.array_equal(reply.slots, gbf.slots)
    assert not any(reply.query(x) for x in _ids(100))


def test_reply_filter_rejects_mismatched_params():
    params = filters.FilterParams.from_target(10, 1e-6)
    gbf = filters.gbf_build(_ids(10), params, hash_seed=1, rng_seed=1)
    bf = filters.BloomFilter(gbf.m, gbf.k, hash_seed=999)
    with pytest.raises(ValueError):
        psi.build_intersection_gbf(gbf, bf, rng_seed=1)


# --- wire payload codecs -----------------------------------------------------

def test_proposal_and_params_codecs():
    buf = psi.encode_psi_proposal(12, 1e-6, 345, 128)
    assert psi.decode_psi_proposal(buf) == (12, 1e-6, 345, 128)
    params = filters.FilterParams.from_target(500, 1e-6)
    buf = psi.encode_psi_params(params, 99, 64)
    got, seed, sigma = psi.decode_psi_params(buf)
    assert got == params and seed == 99 and sigma == 64


def test_id_list_codec():
    for ids in ([], [b""], [b"a", b"longer-identifier", b"\x00\xff"]):
        assert psi.decode_id_list(psi.encode_id_list(ids)) == ids


# --- channel-driven sessions -------------------------------------------------

def _run_channel_session(client_ids, server_ids, **kw):
    left, right = transport.inproc_pair()
    out = {}

    def client():
        out["client"] = psi.psi_client_session(client_ids, left, **kw)

    def server():
        out["server"] = psi.psi_server_session(server_ids, right, **kw)

    threads = [threading.Thread(target=client), threading.Thread(target=server)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30)
    return out, left, right


def test_channel_session_matches_oracle():
    client_ids = _ids(400) + _ids(100, tag=b"conly")
    server_ids = _ids(400) + _ids(150, tag=b"sonly")
    out, left, right = _run_channel_session(client_ids, server_ids)
    expect = set(client_ids) & set(server_ids)
    assert out["client"] == expect
    assert out["server"] == expect
    sent_types = [t for d, t in left.trace if d == "send"]
    assert sent_types == [transport.MSG_PSI_PARAMS, transport.MSG_PSI_CLIENT_BF,
                          transport.MSG_PSI_DONE, transport.MSG_PSI_IDS]
    recv_types = [t for d, t in left.trace if d == "recv"]
    assert recv_types == [transport.MSG_PSI_PARAMS,
                          transport.MSG_PSI_INTERSECTION_GBF]


def test_channel_session_without_result_share():
    client_ids, server_ids = _ids(60), _ids(40)
    out, _, _ = _run_channel_session(client_ids, server_ids, share_result=False)
    assert out["client"] == set(_ids(40))
    assert out["server"] == set()  # server only saw the count


def test_channel_session_rejects_sigma_mismatch():
    left, right = transport.inproc_pair()
    errors = {}

    def client():
        try:
            psi.psi_client_session(_ids(5), left, sigma=64)
        except (ConfigError, ProtocolError) as e:
            # the server may tear the channel down before replying
            errors["client"] = e

    def server():
        try:
            psi.psi_server_session(_ids(5), right, sigma=128)
        except ConfigError as e:
            errors["server"] = e
        finally:
            right.close()

    threads = [threading.Thread(target=client), threading.Thread(target=server)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=10)
    assert "server" in errors


# --- distributed driver ------------------------------------------------------

def test_distributed_result_independent_of_worker_count():
    rng = random.Random(5)
    universe = _ids(3000)
    client = rng.sample(universe, 2000)
    server = rng.sample(universe, 2000)
    expect = set(client) & set(server)
    results = {n: psi.distributed_psi(client, server, n_workers=n, seed=7)
               for n in (1, 2, 4, 8)}
    for n, got in results.items():
        assert got == expect, "bucket count %d changed the result" % n


def test_distributed_serial_and_thread_agree():
    client, server = _ids(800), _ids(500, start=300)
    a = psi.distributed_psi(client, server, n_workers=4, seed=1, executor="serial")
    b = psi.distributed_psi(client, server, n_workers=4, seed=1, executor="thread")
    assert a == b == set(_ids(500, start=300))


def test_distributed_unknown_executor():
    with pytest.raises(ConfigError):
        psi.distributed_psi([b"a"], [b"a"], executor="fibers")
