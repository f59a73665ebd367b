"""Command line entry point: dvfl {psi,split,train,bench,eval}."""

import argparse
import logging
import sys

from . import bench as bench_mod
from . import nn
from .config import RunConfig, load_config
from .data import (load_csv, load_libsvm, parse_col_range, vertical_split,
                   write_csv, VerticalSplitSpec)
from .errors import ConfigError, DataError, ProtocolError
from .orchestrator import evaluate, run_local, run_party
from .psi import distributed_psi
from .seeds import derive_seed

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_DATA = 4


def _read_id_file(path):
    with open(path, "rb") as fh:
        return [line.strip() for line in fh if line.strip()]


def cmd_psi(args):
    client = _read_id_file(args.active)
    server = _read_id_file(args.passive)
    inter = distributed_psi(client, server, n_workers=args.workers,
                            fp_target=args.fp, seed=args.seed,
                            sigma=args.sigma, executor=args.executor)
    ordered = sorted(inter)
    if args.out:
        with open(args.out, "wb") as fh:
            for item in ordered:
                fh.write(item + b"\n")
    print("intersection: %d of %d (active) / %d (passive) ids"
          % (len(inter), len(set(client)), len(set(server))))
    return EXIT_OK


def cmd_split(args):
    records = load_libsvm(args.input, args.n_features or None)
    if not records:
        raise DataError("%s: no rows" % args.input)
    width = records[0].features.size
    spec = VerticalSplitSpec.from_active(parse_col_range(args.active_cols, width),
                                         width)
    active, passive = vertical_split(records, spec)
    write_csv(args.out_active, active, with_labels=True)
    write_csv(args.out_passive, passive, with_labels=False)
    print("split %d rows: %d active columns -> %s, %d passive columns -> %s"
          % (len(records), len(spec.active_cols), args.out_active,
             len(spec.passive_cols), args.out_passive))
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.role:
        cfg.role = args.role
    if args.checkpoint_out:
        cfg.checkpoint_out = args.checkpoint_out
    if args.metrics_out:
        cfg.metrics_out = args.metrics_out
    cfg.validate()
    if cfg.role == "local":
        res = run_local(cfg)
    else:
        res = run_party(cfg)
    if res.epoch_losses:
        print("trained %d epochs; final mean loss %.6f"
              % (len(res.epoch_losses), res.epoch_losses[-1]))
    print("intersection %d rows; %.1f rows/s over %.2f s"
          % (res.intersection_size, res.rows_per_s, res.train_wall_s))
    return EXIT_OK


def cmd_bench(args):
    base = load_config(args.config) if args.config else RunConfig()
    sweep = bench_mod.parse_sweep(args.sweep)
    if args.mode == "train":
        rows = bench_mod.bench_train(base, sweep, args.rows, args.out)
    else:
        rows = bench_mod.bench_psi(args.ids,
                                   [int(w) for w in sweep["workers"]],
                                   fp_target=args.fp,
                                   executor=args.executor,
                                   out_path=args.out)
    for r in rows:
        print(" ".join("%s=%s" % kv for kv in r.items()))
    return EXIT_OK


def cmd_eval(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    active = load_csv(args.test_active, with_labels=True)
    passive = load_csv(args.test_passive, with_labels=False)
    vec = nn.load_weights_file(args.model)
    model = nn.build_split_model(active[0].features.size,
                                 passive[0].features.size, cfg.arch(),
                                 derive_seed(cfg.seed, "init"))
    model.load_params(vec, "all")
    ids = {r.id for r in active} & {r.id for r in passive}
    active = sorted((r for r in active if r.id in ids), key=lambda r: r.id)
    passive = sorted((r for r in passive if r.id in ids), key=lambda r: r.id)
    acc, auc, ms = evaluate(model, active, passive)
    print("accuracy %.4f  auc %.4f  %.4f ms/row over %d rows"
          % (acc, auc, ms, len(active)))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dvfl",
                                description="Two-party split training with "
                                            "private id intersection")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("psi", help="intersect two id files")
    sp.add_argument("--active", required=True)
    sp.add_argument("--passive", required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--fp", type=float, default=1e-6)
    sp.add_argument("--sigma", type=int, default=128)
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--executor", choices=["serial", "thread", "process"],
                    default="thread")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_psi)

    sp = sub.add_parser("split", help="vertically split a LIBSVM file")
    sp.add_argument("--input", required=True)
    sp.add_argument("--active-cols", required=True,
                    help="half-open range a:b or comma list for the active party")
    sp.add_argument("--n-features", type=int, default=0)
    sp.add_argument("--out-active", required=True)
    sp.add_argument("--out-passive", required=True)
    sp.set_defaults(fn=cmd_split)

    sp = sub.add_parser("train", help="run the training pipeline")
    sp.add_argument("--config")
    sp.add_argument("--role", choices=["local", "active", "passive"])
    sp.add_argument("--checkpoint-out")
    sp.add_argument("--metrics-out")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("bench", help="throughput sweeps")
    sp.add_argument("--mode", choices=["train", "psi"], default="train")
    sp.add_argument("--sweep", default="workers=1",
                    help='e.g. "workers=1,2,4 he=off,on key_bits=128,1024"')
    sp.add_argument("--rows", type=int, default=2048)
    sp.add_argument("--ids", type=int, default=100000)
    sp.add_argument("--fp", type=float, default=1e-3)
    sp.add_argument("--executor", choices=["serial", "thread", "process"],
                    default="process")
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--model", required=True)
    sp.add_argument("--test-active", required=True)
    sp.add_argument("--test-passive", required=True)
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as e:
        print("protocol error: %s" % e, file=sys.stderr)
        return EXIT_PROTOCOL
    except (DataError, OSError) as e:
        print("data error: %s" % e, file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
