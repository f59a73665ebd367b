"""Desk-scale benchmark harness.

Runs small training/intersection workloads across worker counts and privacy
settings and reports wall time plus throughput.  The CSV header quotes the
published large-cluster reference points so desk-scale numbers can be read
in context; absolute values here are not comparable, ratios are.
"""

import csv
import itertools
import time

import numpy as np

from .config import RunConfig
from .data import synthesize_adult_like, vertical_split, VerticalSplitSpec
from .errors import ConfigError
from .orchestrator import PHASES, evaluate, run_local
from .psi import distributed_psi
from .seeds import derive_seed

TRAIN_REFERENCE = [
    "# context (large-cluster reference, end-to-end training): "
    "25865 s on 1 worker vs 2252 s on 32 workers; "
    "7732 rows/s (1 worker) to 88810 rows/s (32 workers)",
    "# context (reference runtimes by privacy setting, one node): "
    "training 89 s vanilla / 878 s 128-bit / 19021 s 1024-bit; "
    "inference 72 s / 73 s / 74 s",
]

PSI_REFERENCE = [
    "# context (large-cluster reference, set intersection): "
    "2680 s to 593 s wall; 186567 to 843170 items/s",
]


def make_bench_data(rows, seed=7):
    """Synthetic aligned two-party tables for throughput runs."""
    joined = synthesize_adult_like(rows, seed)
    width = joined[0].features.size
    spec = VerticalSplitSpec.from_active(list(range(width // 2)), width)
    return vertical_split(joined, spec)


def parse_sweep(text):
    """"workers=1,2,4 he=off,on key_bits=128,1024" -> dict of lists."""
    out = {}
    for tok in text.split():
        if "=" not in tok:
            raise ConfigError("bad sweep term %r" % tok)
        key, vals = tok.split("=", 1)
        if key not in ("workers", "he", "key_bits"):
            raise ConfigError("unknown sweep axis %r" % key)
        out[key] = vals.split(",")
    out.setdefault("workers", ["1"])
    out.setdefault("he", ["off"])
    out.setdefault("key_bits", ["128"])
    return out


def bench_train(base_cfg, sweep, rows, out_path=None, seed=7):
    """Sweep training cells on one synthetic dataset; returns result rows."""
    active, passive = make_bench_data(rows, seed)
    results = []
    seen = set()
    for w, he, kb in itertools.product(sweep["workers"], sweep["he"],
                                       sweep["key_bits"]):
        workers, key_bits = int(w), int(kb)
        cell = (workers, he, key_bits if he == "on" else 0)
        if cell in seen:  # key size is irrelevant without privacy
            continue
        seen.add(cell)
        cfg = RunConfig(**{**base_cfg.__dict__})
        cfg.role = "local"
        cfg.n_workers = workers
        cfg.he = he
        cfg.key_bits = key_bits
        cfg.checkpoint_out = ""
        cfg.metrics_out = ""
        t0 = time.perf_counter()
        res = run_local(cfg, active, passive)
        wall = time.perf_counter() - t0
        phase_means = {p: float(np.mean([m.phase_ms[p] for m in res.metrics
                                         if m.role == "active"]))
                       for p in PHASES}
        acc, auc, infer_ms = evaluate(res.model,
                                      *_aligned_eval_slice(active, passive, res))
        row = {
            "workers": workers, "he": he,
            "key_bits": key_bits if he == "on" else "",
            "rows": rows, "train_wall_s": round(res.train_wall_s, 4),
            "total_wall_s": round(wall, 4),
            "rows_per_s": round(res.rows_per_s, 2),
            "final_loss": round(res.epoch_losses[-1], 6),
            "accuracy": round(acc, 4), "auc": round(auc, 4),
            "infer_ms_per_row": round(infer_ms, 5),
        }
        for p in PHASES:
            row["%s_ms" % p] = round(phase_means[p], 3)
        results.append(row)
    if out_path:
        _write_csv(out_path, results, TRAIN_REFERENCE)
    return results


def _aligned_eval_slice(active, passive, res):
    ids = {r.id for r in active} & {r.id for r in passive}
    fa = sorted((r for r in active if r.id in ids), key=lambda r: r.id)
    fp = sorted((r for r in passive if r.id in ids), key=lambda r: r.id)
    return fa, fp


def bench_psi(n_ids, workers_list, fp_target=1e-3, overlap=0.5, seed=7,
              executor="process", sigma=64, out_path=None):
    """Distributed-intersection throughput across worker counts.

    items/s counts both parties' inputs, matching how cluster-side
    intersection throughput is usually quoted.
    """
    n_shared = int(n_ids * overlap)
    shared = [b"s%d" % i for i in range(n_shared)]
    client = shared + [b"c%d" % i for i in range(n_ids - n_shared)]
    server = shared + [b"v%d" % i for i in range(n_ids - n_shared)]
    results = []
    expected = None
    for w in workers_list:
        t0 = time.perf_counter()
        inter = distributed_psi(client, server, n_workers=int(w),
                                fp_target=fp_target,
                                seed=derive_seed(seed, "psi-bench"),
                                sigma=sigma, executor=executor)
        wall = time.perf_counter() - t0
        if expected is None:
            expected = inter
        elif inter != expected:
            raise AssertionError("intersection changed with worker count")
        results.append({
            "workers": int(w), "ids_per_side": n_ids,
            "intersection": len(inter), "wall_s": round(wall, 4),
            "items_per_s": round(2 * n_ids / wall, 1),
        })
    if out_path:
        _write_csv(out_path, results, PSI_REFERENCE)
    return results


def _write_csv(path, rows, reference_lines):
    with open(path, "w", newline="") as fh:
        for line in reference_lines:
            fh.write(line + "\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for r in rows:
            w.writerow(r)
