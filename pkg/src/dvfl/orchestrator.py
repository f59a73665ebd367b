"""End-to-end run pipeline: handshake, set intersection, aligned sharding,
bulk-synchronous split training, evaluation.

Single-process mode wires both parties' threads together over in-process
channels and is the primary test vehicle; giving each party its own process
connected over TCP loopback exercises exactly the same frames.  Worker pairs
are lock-stepped per training step, so all concurrency lives across pairs
and between the two parties of one pair.
"""

import logging
import math
import random
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn, paillier, psi, secure, transport
from .data import (align_to_intersection, load_csv, load_libsvm, parse_col_range,
                   replicate_records, sequential_partition, vertical_split,
                   VerticalSplitSpec)
from .errors import ConfigError, DataError, ProtocolError
from .ps import ParameterServer
from .seeds import derive_seed

log = logging.getLogger(__name__)

PHASES = ("forward_bottom", "he_exchange", "top", "backward", "ps_sync")

# step sub-phases carried in message headers
_PH_ACT = 0      # bottom activation handoff
_PH_FWD = 1      # masked forward product exchange
_PH_GRAD = 2     # plaintext gradient to the passive bottom
_PH_GWP = 3      # masked weight-gradient exchange for the passive slice

_CTRL_HELLO = 0
_CTRL_CONTINUE = 1
_CTRL_STOP = 2


@dataclass
class StepMetrics:
    role: str
    worker: int
    epoch: int
    round_no: int
    step: int
    rows: int
    loss: float
    phase_ms: dict


@dataclass
class RunResult:
    role: str
    intersection_size: int
    weights: dict                  # party -> WeightVector (or None)
    model: object                  # assembled SplitModel in local mode
    metrics: list
    epoch_losses: list
    traces: dict                   # pair index -> message type sequence
    train_wall_s: float
    rows_per_s: float


# --- handshake ---------------------------------------------------------------

def _hello_payload(cfg, role, pair, input_dim, pk):
    body = bytes([_CTRL_HELLO]) + cfg.negotiation_fingerprint()
    body += bytes([0 if role == "active" else 1])
    body += struct.pack(">II", pair, input_dim)
    if pk is not None:
        body += b"\x01" + paillier.serialize_public_key(pk)
    else:
        body += b"\x00"
    return body


def _handshake(channel, cfg, role, pair, input_dim, pk=None):
    """Symmetric config negotiation; returns (peer_input_dim, peer_pk)."""
    channel.send(transport.MSG_HELLO, _hello_payload(cfg, role, pair, input_dim, pk))
    buf = channel.recv_expect(transport.MSG_HELLO)
    if buf[0] != _CTRL_HELLO:
        raise ProtocolError("expected a handshake control frame")
    peer_fp = buf[1:33]
    if peer_fp != cfg.negotiation_fingerprint():
        raise ConfigError("negotiated settings disagree with the peer; aborting")
    peer_role = "active" if buf[33] == 0 else "passive"
    if peer_role == role:
        raise ConfigError("both endpoints claim role %r" % role)
    peer_pair, peer_dim = struct.unpack_from(">II", buf, 34)
    if peer_pair != pair:
        raise ConfigError("pair index mismatch: %d vs %d" % (pair, peer_pair))
    peer_pk = None
    if buf[42] == 1:
        peer_pk, _ = paillier.deserialize_public_key(buf, 43)
    return peer_dim, peer_pk


def _send_control(channel, stop):
    channel.send(transport.MSG_HELLO,
                 bytes([_CTRL_STOP if stop else _CTRL_CONTINUE]))


def _recv_control(channel):
    buf = channel.recv_expect(transport.MSG_HELLO)
    if buf[0] not in (_CTRL_CONTINUE, _CTRL_STOP):
        raise ProtocolError("expected an epoch control frame")
    return buf[0] == _CTRL_STOP


# --- step message helpers ----------------------------------------------------

def _send_step(channel, msg_type, step_id, phase, body=b""):
    channel.send(msg_type, struct.pack(">QB", step_id, phase) + body)


def _recv_step(channel, msg_type, step_id, phase):
    buf = channel.recv_expect(msg_type)
    sid, ph = struct.unpack_from(">QB", buf, 0)
    if (sid, ph) != (step_id, phase):
        raise ProtocolError(
            "workers desynchronised: got step %d/phase %d, expected %d/%d"
            % (sid, ph, step_id, phase))
    return buf[9:]


# --- party context -----------------------------------------------------------

class _PartyContext:
    def __init__(self, cfg, role, records, channels):
        self.cfg = cfg
        self.role = role
        self.records = records
        self.channels = channels
        self.pk = None           # passive party's public key (both sides)
        self.sk = None           # secret key, passive side only
        self.codec = None
        self.model = None        # full structure; only own party slice is live
        self.worker_models = []  # one clone per local worker
        self.ps = None
        self.shards = []
        self.steps_per_epoch = 0
        self.intersection = set()
        self.metrics = []
        self.metrics_lock = threading.Lock()
        self.mask_seed = derive_seed(cfg.seed, "masks")
        self.enc_seed = derive_seed(cfg.seed, "encryption")

    def add_metrics(self, sm):
        with self.metrics_lock:
            self.metrics.append(sm)


def _stack_batch(batch):
    xs = np.stack([r.features for r in batch])
    ys = np.array([r.label for r in batch], dtype=np.float64) \
        if batch[0].label is not None else None
    return xs, ys


def _clone_layers(layers):
    return [nn.DenseLayer(l.weights.copy(), l.bias.copy(), l.activation)
            for l in layers]


# --- worker epoch bodies -----------------------------------------------------

def _active_worker_epoch(ctx, w, epoch):
    cfg = ctx.cfg
    ch = ctx.channels[w]
    model = ctx.worker_models[w]
    named = model.named_layers("active")
    shard = ctx.shards[w]
    bs = cfg.batch_size
    he_on = cfg.he == "on"
    per_batch = cfg.sync_every == "batch"
    losses = []

    for step in range(ctx.steps_per_epoch):
        step_id = epoch * ctx.steps_per_epoch + step
        round_no = step_id if per_batch else epoch
        ms = {p: 0.0 for p in PHASES}

        if per_batch or step == 0:
            t0 = time.perf_counter()
            vec = ctx.ps.pull(w, round_no)
            nn.assign_params(named, vec)
            ms["ps_sync"] += (time.perf_counter() - t0) * 1e3

        batch = shard[step * bs:(step + 1) * bs]
        loss = float("nan")
        if batch:
            xa, y = _stack_batch(batch)
            t0 = time.perf_counter()
            a, ca = nn.forward(model.active_bottom, xa)
            ms["forward_bottom"] += (time.perf_counter() - t0) * 1e3

            wa, wp = model.interactive_slices()
            t0 = time.perf_counter()
            body = _recv_step(ch, transport.MSG_ENC_ACT, step_id, _PH_ACT)
            if body[0] == 0:
                if he_on:
                    raise ProtocolError("peer sent plaintext activations in a "
                                        "privacy-enabled run")
                b, _ = transport.decode_f64_grid(body, 1)
                zb = b @ wp.T
            else:
                b = None
                ea = secure.decode_encrypted_grid(body[1:], ctx.pk)
                mask = secure.MaskState.generate(
                    len(batch), model.interactive.n_out, ctx.codec,
                    derive_seed(ctx.mask_seed, w, step_id, 0), cfg.mask_range)
                masked = secure.homomorphic_linear(ea, wp, mask, ctx.pk, ctx.codec)
                _send_step(ch, transport.MSG_MASKED_CT, step_id, _PH_FWD,
                           secure.encode_encrypted_grid(masked))
                pt = _recv_step(ch, transport.MSG_MASKED_PT, step_id, _PH_FWD)
                grid, _ = transport.decode_f64_grid(pt)
                zb = secure.unmask(grid, mask)
            ms["he_exchange"] += (time.perf_counter() - t0) * 1e3

            t0 = time.perf_counter()
            z = a @ wa.T + zb + model.interactive.bias
            out, ct = nn.forward(model.top, z)
            loss, dpred = nn.bce_loss(out, y)
            ms["top"] += (time.perf_counter() - t0) * 1e3

            t0 = time.perf_counter()
            g_top, dz = nn.backward(model.top, ct, dpred)
            db = dz @ wp
            _send_step(ch, transport.MSG_GRAD_PASSIVE, step_id, _PH_GRAD,
                       transport.encode_f64_grid(db))
            gwa = dz.T @ a
            gb_int = dz.sum(axis=0)
            ms["backward"] += (time.perf_counter() - t0) * 1e3

            if he_on:
                t0 = time.perf_counter()
                mask2 = secure.MaskState.generate(
                    model.passive_out_dim, model.interactive.n_out, ctx.codec,
                    derive_seed(ctx.mask_seed, w, step_id, 1), cfg.mask_range)
                masked2 = secure.homomorphic_linear(ea.transposed(), dz.T, mask2,
                                                    ctx.pk, ctx.codec)
                _send_step(ch, transport.MSG_MASKED_CT, step_id, _PH_GWP,
                           secure.encode_encrypted_grid(masked2))
                pt = _recv_step(ch, transport.MSG_MASKED_PT, step_id, _PH_GWP)
                grid, _ = transport.decode_f64_grid(pt)
                gwp = secure.unmask(grid, mask2).T
                ms["he_exchange"] += (time.perf_counter() - t0) * 1e3
            else:
                t0 = time.perf_counter()
                gwp = dz.T @ b
                ms["backward"] += (time.perf_counter() - t0) * 1e3

            t0 = time.perf_counter()
            da = dz @ wa
            g_a, _ = nn.backward(model.active_bottom, ca, da)
            glist = g_a + [(np.concatenate([gwa, gwp], axis=1), gb_int)] + g_top
            grads = nn.grads_to_vector(named, glist)
            new_vec = nn.sgd_step(nn.collect_params(named), grads, cfg.lr)
            nn.assign_params(named, new_vec)
            ms["backward"] += (time.perf_counter() - t0) * 1e3
            losses.append(loss)
        else:
            new_vec = nn.collect_params(named)

        if per_batch:
            t0 = time.perf_counter()
            ctx.ps.push(w, new_vec, round_no)
            ms["ps_sync"] += (time.perf_counter() - t0) * 1e3
        ctx.add_metrics(StepMetrics("active", w, epoch, round_no, step,
                                    len(batch), loss, ms))
    if not per_batch:
        ctx.ps.push(w, nn.collect_params(named), epoch)
    return losses


def _passive_worker_epoch(ctx, w, epoch):
    cfg = ctx.cfg
    ch = ctx.channels[w]
    model = ctx.worker_models[w]
    named = model.named_layers("passive")
    shard = ctx.shards[w]
    bs = cfg.batch_size
    he_on = cfg.he == "on"
    per_batch = cfg.sync_every == "batch"

    for step in range(ctx.steps_per_epoch):
        step_id = epoch * ctx.steps_per_epoch + step
        round_no = step_id if per_batch else epoch
        ms = {p: 0.0 for p in PHASES}

        if per_batch or step == 0:
            t0 = time.perf_counter()
            vec = ctx.ps.pull(w, round_no)
            nn.assign_params(named, vec)
            ms["ps_sync"] += (time.perf_counter() - t0) * 1e3

        batch = shard[step * bs:(step + 1) * bs]
        if batch:
            xp, _ = _stack_batch(batch)
            t0 = time.perf_counter()
            b, cb = nn.forward(model.passive_bottom, xp)
            ms["forward_bottom"] += (time.perf_counter() - t0) * 1e3

            t0 = time.perf_counter()
            if he_on:
                enc_rng = random.Random(derive_seed(ctx.enc_seed, w, step_id))
                ea = secure.encrypt_activation(b, ctx.pk, ctx.codec, enc_rng)
                _send_step(ch, transport.MSG_ENC_ACT, step_id, _PH_ACT,
                           b"\x01" + secure.encode_encrypted_grid(ea))
                body = _recv_step(ch, transport.MSG_MASKED_CT, step_id, _PH_FWD)
                masked = secure.decode_encrypted_grid(body, ctx.pk)
                view = secure.decrypt_activation(masked, ctx.sk, ctx.codec)
                _send_step(ch, transport.MSG_MASKED_PT, step_id, _PH_FWD,
                           transport.encode_f64_grid(view))
            else:
                _send_step(ch, transport.MSG_ENC_ACT, step_id, _PH_ACT,
                           b"\x00" + transport.encode_f64_grid(b))
            ms["he_exchange"] += (time.perf_counter() - t0) * 1e3

            t0 = time.perf_counter()
            body = _recv_step(ch, transport.MSG_GRAD_PASSIVE, step_id, _PH_GRAD)
            db, _ = transport.decode_f64_grid(body)
            ms["backward"] += (time.perf_counter() - t0) * 1e3

            if he_on:
                t0 = time.perf_counter()
                body = _recv_step(ch, transport.MSG_MASKED_CT, step_id, _PH_GWP)
                masked = secure.decode_encrypted_grid(body, ctx.pk)
                view = secure.decrypt_activation(masked, ctx.sk, ctx.codec)
                _send_step(ch, transport.MSG_MASKED_PT, step_id, _PH_GWP,
                           transport.encode_f64_grid(view))
                ms["he_exchange"] += (time.perf_counter() - t0) * 1e3

            t0 = time.perf_counter()
            g_p, _ = nn.backward(model.passive_bottom, cb, db)
            grads = nn.grads_to_vector(named, g_p)
            new_vec = nn.sgd_step(nn.collect_params(named), grads, cfg.lr)
            nn.assign_params(named, new_vec)
            ms["backward"] += (time.perf_counter() - t0) * 1e3
        else:
            new_vec = nn.collect_params(named)

        if per_batch:
            t0 = time.perf_counter()
            ctx.ps.push(w, new_vec, round_no)
            ms["ps_sync"] += (time.perf_counter() - t0) * 1e3
        ctx.add_metrics(StepMetrics("passive", w, epoch, round_no, step,
                                    len(batch), float("nan"), ms))
    if not per_batch:
        ctx.ps.push(w, nn.collect_params(named), epoch)
    return []


# --- per-party pipeline ------------------------------------------------------

def _run_threads(targets, ps_to_kill):
    """Run callables in threads; re-raise the first worker failure."""
    errors = []

    def wrap(fn):
        def run():
            try:
                out.append(fn())
            except BaseException as e:  # propagate to the orchestrator
                errors.append(e)
                for p in ps_to_kill:
                    p.shutdown()
        out = []
        return run, out

    threads, boxes = [], []
    for fn in targets:
        run, out = wrap(fn)
        boxes.append(out)
        threads.append(threading.Thread(target=run))
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return [b[0] if b else None for b in boxes]


def _party_pipeline(cfg, role, records, channels):
    if len(channels) != cfg.n_workers:
        raise ConfigError("%d channels for %d workers" % (len(channels), cfg.n_workers))
    if not records:
        raise DataError("party %r has no records" % role)
    dims = {r.features.size for r in records}
    if len(dims) != 1:
        raise DataError("inconsistent feature widths: %s" % sorted(dims))
    my_dim = dims.pop()
    ctx = _PartyContext(cfg, role, records, channels)

    if cfg.he == "on" and role == "passive":
        ctx.pk, ctx.sk = paillier.keygen(cfg.key_bits, derive_seed(cfg.seed, "paillier"))

    # 1. handshake on every pair channel
    peer_dim = None
    for pair, ch in enumerate(channels):
        pd, peer_pk = _handshake(ch, cfg, role, pair, my_dim,
                                 ctx.pk if role == "passive" else None)
        peer_dim = pd
        if role == "active" and cfg.he == "on":
            if peer_pk is None:
                raise ConfigError("privacy enabled but the peer sent no public key")
            ctx.pk = peer_pk
    if cfg.he == "on":
        ctx.codec = paillier.FixedPointCodec(ctx.pk.n, cfg.frac_bits)

    # 2. set intersection, one session per pair, concurrently
    ids = [r.id for r in records]
    buckets = psi.hash_partition(ids, cfg.n_workers, derive_seed(cfg.seed, "bucketing"))

    def client_job(i):
        return lambda: psi.psi_client_session(
            buckets[i], channels[i], cfg.fp_target,
            derive_seed(cfg.seed, "filter", i), cfg.sigma)

    def server_job(i):
        return lambda: psi.psi_server_session(
            buckets[i], channels[i], cfg.fp_target,
            derive_seed(cfg.seed, "session", i), cfg.sigma)

    jobs = [client_job(i) if role == "active" else server_job(i)
            for i in range(cfg.n_workers)]
    parts = _run_threads(jobs, [])
    for p in parts:
        ctx.intersection |= p
    if not ctx.intersection:
        raise DataError("the parties share no ids; nothing to train on")

    # 3. align and shard
    aligned = align_to_intersection(records, ctx.intersection)
    ctx.shards = sequential_partition(aligned, cfg.n_workers)
    max_shard = max(len(s) for s in ctx.shards)
    ctx.steps_per_epoch = max(1, math.ceil(max_shard / cfg.batch_size))

    # 4. model structure and parameter server
    active_in = my_dim if role == "active" else peer_dim
    passive_in = peer_dim if role == "active" else my_dim
    ctx.model = nn.build_split_model(active_in, passive_in, cfg.arch(),
                                     derive_seed(cfg.seed, "init"))
    ctx.worker_models = []
    for _ in range(cfg.n_workers):
        clone = nn.SplitModel(_clone_layers(ctx.model.active_bottom),
                              _clone_layers(ctx.model.passive_bottom),
                              _clone_layers([ctx.model.interactive])[0],
                              _clone_layers(ctx.model.top))
        ctx.worker_models.append(clone)
    ctx.ps = ParameterServer(ctx.model.params(role), cfg.n_workers)

    # 5. epochs (workers joined at every epoch boundary)
    body = _active_worker_epoch if role == "active" else _passive_worker_epoch
    epoch_losses = []
    t_train = time.perf_counter()
    for epoch in range(cfg.epochs):
        results = _run_threads(
            [(lambda w=w: body(ctx, w, epoch)) for w in range(cfg.n_workers)],
            [ctx.ps])
        if role == "active":
            flat = [l for r in results for l in r]
            mean_loss = float(np.mean(flat)) if flat else float("nan")
            epoch_losses.append(mean_loss)
            stop = (cfg.stop_kind == "loss_below"
                    and mean_loss == mean_loss
                    and mean_loss < cfg.loss_threshold
                    and epoch < cfg.epochs - 1)
            if cfg.stop_kind == "loss_below":
                for ch in channels:
                    _send_control(ch, stop)
            if stop:
                log.info("loss %.6f under threshold %.6f; stopping after epoch %d",
                         mean_loss, cfg.loss_threshold, epoch)
                break
        else:
            if cfg.stop_kind == "loss_below":
                if _recv_control(channels[0]):
                    for ch in channels[1:]:
                        _recv_control(ch)
                    break
                for ch in channels[1:]:
                    _recv_control(ch)
    train_wall = time.perf_counter() - t_train

    rows_done = sum(m.rows for m in ctx.metrics)
    final = ctx.ps.current_weights()
    ctx.ps.shutdown()
    return {
        "role": role,
        "weights": final,
        "intersection": ctx.intersection,
        "metrics": ctx.metrics,
        "epoch_losses": epoch_losses,
        "train_wall_s": train_wall,
        "rows_per_s": rows_done / train_wall if train_wall > 0 else 0.0,
        "traces": {i: ch.type_sequence() for i, ch in enumerate(channels)},
    }


# --- data loading ------------------------------------------------------------

def load_party_data(cfg, role):
    """Resolve the configured dataset for one party (or both, via `input`)."""
    if cfg.input:
        recs = load_libsvm(cfg.input, cfg.n_features or None)
        width = recs[0].features.size
        spec = VerticalSplitSpec.from_active(
            parse_col_range(cfg.active_cols or "0:%d" % (width // 2), width), width)
        active, passive = vertical_split(recs, spec)
    else:
        active = load_csv(cfg.active_data, with_labels=True) \
            if cfg.active_data and role in ("local", "active") else None
        passive = load_csv(cfg.passive_data, with_labels=False) \
            if cfg.passive_data and role in ("local", "passive") else None
    if cfg.replicate > 1:
        active = replicate_records(active, cfg.replicate) if active else active
        passive = replicate_records(passive, cfg.replicate) if passive else passive
    return active, passive


# --- entry points ------------------------------------------------------------

def run_local(cfg, active_records=None, passive_records=None):
    """Both parties in this process over in-process channels.

    With backend=process the per-pair step work is farmed out to a process
    pool instead (same math, same results); that is the only way the
    bignum-heavy privacy path can use more than one core.
    """
    cfg.validate()
    if active_records is None or passive_records is None:
        loaded_a, loaded_p = load_party_data(cfg, "local")
        active_records = active_records or loaded_a
        passive_records = passive_records or loaded_p
    if not active_records or not passive_records:
        raise ConfigError("local mode needs records for both parties")
    if cfg.backend == "process":
        return _run_local_process(cfg, active_records, passive_records)
    pairs = [transport.inproc_pair() for _ in range(cfg.n_workers)]
    a_ends = [p[0] for p in pairs]
    p_ends = [p[1] for p in pairs]
    out = _run_threads(
        [lambda: _party_pipeline(cfg, "active", active_records, a_ends),
         lambda: _party_pipeline(cfg, "passive", passive_records, p_ends)],
        [])
    a_res = out[0] if out[0]["role"] == "active" else out[1]
    p_res = out[1] if out[1]["role"] == "passive" else out[0]
    model = nn.build_split_model(active_records[0].features.size,
                                 passive_records[0].features.size,
                                 cfg.arch(), derive_seed(cfg.seed, "init"))
    model.load_params(a_res["weights"], "active")
    model.load_params(p_res["weights"], "passive")
    result = RunResult(
        role="local",
        intersection_size=len(a_res["intersection"]),
        weights={"active": a_res["weights"], "passive": p_res["weights"]},
        model=model,
        metrics=a_res["metrics"] + p_res["metrics"],
        epoch_losses=a_res["epoch_losses"],
        traces=a_res["traces"],
        train_wall_s=a_res["train_wall_s"],
        rows_per_s=a_res["rows_per_s"],
    )
    _write_outputs(cfg, result)
    return result


def run_party(cfg, records=None):
    """One party of a two-process run, talking TCP to its peer."""
    cfg.validate()
    role = cfg.role
    if role not in ("active", "passive"):
        raise ConfigError("run_party needs role active or passive")
    if records is None:
        a, p = load_party_data(cfg, role)
        records = a if role == "active" else p
    if not records:
        raise ConfigError("no records for party %r" % role)
    channels = []
    if role == "active":
        # the passive side connects one socket per pair in index order; the
        # handshake double-checks the pairing either way
        listener = transport.open_listener(cfg.host, cfg.port)
        try:
            channels = [transport.accept_channel(listener)
                        for _ in range(cfg.n_workers)]
        finally:
            listener.close()
    else:
        for i in range(cfg.n_workers):
            channels.append(transport.connect_channel(cfg.host, cfg.port))
    try:
        res = _party_pipeline(cfg, role, records, channels)
    finally:
        for ch in channels:
            ch.close()
    result = RunResult(
        role=role,
        intersection_size=len(res["intersection"]),
        weights={role: res["weights"],
                 ("passive" if role == "active" else "active"): None},
        model=None,
        metrics=res["metrics"],
        epoch_losses=res["epoch_losses"],
        traces=res["traces"],
        train_wall_s=res["train_wall_s"],
        rows_per_s=res["rows_per_s"],
    )
    _write_outputs(cfg, result)
    return result


def _write_outputs(cfg, result):
    if cfg.checkpoint_out:
        if result.model is not None:
            nn.save_weights_file(cfg.checkpoint_out, result.model.params("all"))
        else:
            vec = result.weights[result.role]
            nn.save_weights_file(cfg.checkpoint_out, vec)
    if cfg.metrics_out:
        write_metrics_csv(cfg.metrics_out, result.metrics)


def write_metrics_csv(path, metrics):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["role", "worker", "epoch", "round", "step", "rows", "loss"]
                   + ["%s_ms" % p for p in PHASES])
        for m in metrics:
            w.writerow([m.role, m.worker, m.epoch, m.round_no, m.step, m.rows,
                        "%.9g" % m.loss] +
                       ["%.3f" % m.phase_ms[p] for p in PHASES])


# --- process-pool backend ----------------------------------------------------
#
# One task per worker pair per round.  The pair's two halves are lock-stepped
# anyway, so fusing them into one function changes no math: the only thread-
# mode steps skipped are the wire round trips, and binary64 values survive
# those bit-exactly.  Seeds derive identically, so results match the thread
# backend to the last bit.

_POOL_STATE = {}


def _pool_init(cfg_dict, active_in, passive_in, a_shards, p_shards):
    from .config import RunConfig
    cfg = RunConfig(**cfg_dict)
    model = nn.build_split_model(active_in, passive_in, cfg.arch(),
                                 derive_seed(cfg.seed, "init"))
    st = {
        "cfg": cfg, "model": model,
        "a_shards": a_shards, "p_shards": p_shards,
        "named_a": model.named_layers("active"),
        "named_p": model.named_layers("passive"),
        "mask_seed": derive_seed(cfg.seed, "masks"),
        "enc_seed": derive_seed(cfg.seed, "encryption"),
        "pk": None, "sk": None, "codec": None,
    }
    if cfg.he == "on":
        pk, sk = paillier.keygen(cfg.key_bits, derive_seed(cfg.seed, "paillier"))
        st["pk"], st["sk"] = pk, sk
        st["codec"] = paillier.FixedPointCodec(pk.n, cfg.frac_bits)
    _POOL_STATE.clear()
    _POOL_STATE.update(st)


def _pair_step_task(args):
    w, epoch, step, steps_per_epoch, a_values, p_values = args
    st = _POOL_STATE
    cfg = st["cfg"]
    model = st["model"]
    named_a, named_p = st["named_a"], st["named_p"]
    nn.assign_params(named_a, nn.WeightVector(_layout_of(named_a), a_values))
    nn.assign_params(named_p, nn.WeightVector(_layout_of(named_p), p_values))
    step_id = epoch * steps_per_epoch + step
    bs = cfg.batch_size
    batch_a = st["a_shards"][w][step * bs:(step + 1) * bs]
    batch_p = st["p_shards"][w][step * bs:(step + 1) * bs]
    ms = {p: 0.0 for p in PHASES}
    if not batch_a:
        return w, a_values, p_values, float("nan"), 0, ms
    xa, y = _stack_batch(batch_a)
    xp, _ = _stack_batch(batch_p)

    t0 = time.perf_counter()
    a, ca = nn.forward(model.active_bottom, xa)
    b, cb = nn.forward(model.passive_bottom, xp)
    ms["forward_bottom"] += (time.perf_counter() - t0) * 1e3

    wa, wp = model.interactive_slices()
    he_on = cfg.he == "on"
    t0 = time.perf_counter()
    if he_on:
        enc_rng = random.Random(derive_seed(st["enc_seed"], w, step_id))
        ea = secure.encrypt_activation(b, st["pk"], st["codec"], enc_rng)
        mask = secure.MaskState.generate(
            len(batch_a), model.interactive.n_out, st["codec"],
            derive_seed(st["mask_seed"], w, step_id, 0), cfg.mask_range)
        masked = secure.homomorphic_linear(ea, wp, mask, st["pk"], st["codec"])
        view = secure.decrypt_activation(masked, st["sk"], st["codec"])
        zb = secure.unmask(view, mask)
    else:
        zb = b @ wp.T
    ms["he_exchange"] += (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    z = a @ wa.T + zb + model.interactive.bias
    out, ct = nn.forward(model.top, z)
    loss, dpred = nn.bce_loss(out, y)
    ms["top"] += (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    g_top, dz = nn.backward(model.top, ct, dpred)
    db = dz @ wp
    gwa = dz.T @ a
    gb_int = dz.sum(axis=0)
    ms["backward"] += (time.perf_counter() - t0) * 1e3
    if he_on:
        t0 = time.perf_counter()
        mask2 = secure.MaskState.generate(
            model.passive_out_dim, model.interactive.n_out, st["codec"],
            derive_seed(st["mask_seed"], w, step_id, 1), cfg.mask_range)
        masked2 = secure.homomorphic_linear(ea.transposed(), dz.T, mask2,
                                            st["pk"], st["codec"])
        gwp = secure.unmask(secure.decrypt_activation(masked2, st["sk"],
                                                      st["codec"]), mask2).T
        ms["he_exchange"] += (time.perf_counter() - t0) * 1e3
    else:
        t0 = time.perf_counter()
        gwp = dz.T @ b
        ms["backward"] += (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    da = dz @ wa
    g_a, _ = nn.backward(model.active_bottom, ca, da)
    glist = g_a + [(np.concatenate([gwa, gwp], axis=1), gb_int)] + g_top
    new_a = nn.sgd_step(nn.collect_params(named_a),
                        nn.grads_to_vector(named_a, glist), cfg.lr)
    g_p, _ = nn.backward(model.passive_bottom, cb, db)
    new_p = nn.sgd_step(nn.collect_params(named_p),
                        nn.grads_to_vector(named_p, g_p), cfg.lr)
    ms["backward"] += (time.perf_counter() - t0) * 1e3
    return w, new_a.values, new_p.values, loss, len(batch_a), ms


def _layout_of(named_layers):
    layout = []
    for name, layer in named_layers:
        layout.append((name + ".w", layer.weights.shape))
        layout.append((name + ".b", layer.bias.shape))
    return layout


def _run_local_process(cfg, active_records, passive_records):
    import multiprocessing

    if cfg.sync_every != "batch":
        raise ConfigError("process backend supports sync_every=batch only")
    inter = psi.distributed_psi([r.id for r in active_records],
                                [r.id for r in passive_records],
                                n_workers=cfg.n_workers, fp_target=cfg.fp_target,
                                seed=cfg.seed, sigma=cfg.sigma,
                                executor="process" if cfg.n_workers > 1 else "serial")
    if not inter:
        raise DataError("the parties share no ids; nothing to train on")
    aligned_a = align_to_intersection(active_records, inter)
    aligned_p = align_to_intersection(passive_records, inter)
    a_shards = sequential_partition(aligned_a, cfg.n_workers)
    p_shards = sequential_partition(aligned_p, cfg.n_workers)
    steps_per_epoch = max(1, math.ceil(max(len(s) for s in a_shards)
                                       / cfg.batch_size))
    active_in = aligned_a[0].features.size
    passive_in = aligned_p[0].features.size
    model = nn.build_split_model(active_in, passive_in, cfg.arch(),
                                 derive_seed(cfg.seed, "init"))
    ps_a = ParameterServer(model.params("active"), cfg.n_workers)
    ps_p = ParameterServer(model.params("passive"), cfg.n_workers)
    metrics, epoch_losses = [], []
    try:
        mp_ctx = multiprocessing.get_context("fork")
    except ValueError:
        mp_ctx = multiprocessing.get_context()
    pool = mp_ctx.Pool(cfg.n_workers, initializer=_pool_init,
                       initargs=(dict(cfg.__dict__), active_in, passive_in,
                                 a_shards, p_shards))
    t_train = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            losses_epoch = []
            for step in range(steps_per_epoch):
                round_no = epoch * steps_per_epoch + step
                t0 = time.perf_counter()
                tasks = [(w, epoch, step, steps_per_epoch,
                          ps_a.pull(w, round_no).values,
                          ps_p.pull(w, round_no).values)
                         for w in range(cfg.n_workers)]
                results = pool.map(_pair_step_task, tasks)
                for w, new_a, new_p, loss, rows, ms in results:
                    ps_a.push(w, nn.WeightVector(ps_a._layout, new_a), round_no)
                    ps_p.push(w, nn.WeightVector(ps_p._layout, new_p), round_no)
                    ms["ps_sync"] += (time.perf_counter() - t0) * 1e3 - \
                        sum(ms[p] for p in PHASES if p != "ps_sync")
                    if rows:
                        losses_epoch.append(loss)
                    metrics.append(StepMetrics("active", w, epoch, round_no,
                                               step, rows, loss, ms))
            mean_loss = float(np.mean(losses_epoch)) if losses_epoch else float("nan")
            epoch_losses.append(mean_loss)
            if (cfg.stop_kind == "loss_below" and mean_loss == mean_loss
                    and mean_loss < cfg.loss_threshold):
                break
    finally:
        pool.close()
        pool.join()
    train_wall = time.perf_counter() - t_train
    a_vec = ps_a.current_weights()
    p_vec = ps_p.current_weights()
    model.load_params(a_vec, "active")
    model.load_params(p_vec, "passive")
    rows_done = sum(m.rows for m in metrics)
    result = RunResult(
        role="local", intersection_size=len(inter),
        weights={"active": a_vec, "passive": p_vec}, model=model,
        metrics=metrics, epoch_losses=epoch_losses, traces={},
        train_wall_s=train_wall,
        rows_per_s=rows_done / train_wall if train_wall > 0 else 0.0,
    )
    _write_outputs(cfg, result)
    return result


# --- evaluation --------------------------------------------------------------

def rank_auc(scores, labels):
    """Area under the ROC curve via the rank statistic (ties averaged)."""
    from scipy.stats import rankdata
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos == 0 or neg == 0:
        return float("nan")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def evaluate(model, active_records, passive_records, batch=512):
    """Plaintext inference: (accuracy, auc, mean ms per row)."""
    if len(active_records) != len(passive_records):
        raise DataError("party tables differ in length")
    for ra, rp in zip(active_records, passive_records):
        if ra.id != rp.id:
            raise DataError("party tables are not aligned at id %r" % ra.id)
    scores = []
    labels = np.array([r.label for r in active_records], dtype=np.int64)
    t0 = time.perf_counter()
    for i in range(0, len(active_records), batch):
        xa, _ = _stack_batch(active_records[i:i + batch])
        xp, _ = _stack_batch(passive_records[i:i + batch])
        scores.append(nn.predict(model, xa, xp).ravel())
    wall = time.perf_counter() - t0
    scores = np.concatenate(scores)
    acc = float(((scores >= 0.5).astype(np.int64) == labels).mean())
    return acc, rank_auc(scores, labels), wall * 1e3 / max(1, len(labels))
