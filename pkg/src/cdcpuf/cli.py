"""Command-line entry point: ``cdcpuf gen|attack|sweep|report``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bench
from .attack_lr import LrTrainConfig, lr_accuracy, lr_train, save_lr_model
from .attack_nn import NnTrainConfig, nn_accuracy, nn_train, save_nn_model
from .crp import LcgParams, generate_crpset, read_crpset, split_crpset, write_crpset, write_csv
from .errors import PufError
from .puf import load_puf, sample_cdc_xpuf, save_puf


def _cmd_gen(args):
    if args.puf:
        puf = load_puf(args.puf)
    else:
        if args.n is None or args.k is None:
            raise SystemExit("gen: give --puf FILE or both -n and -k")
        puf = sample_cdc_xpuf(args.n, args.k, args.seed, args.noise)
        if args.save_puf:
            save_puf(puf, args.save_puf)
    lcg = None
    if args.source == "lcg" and (args.lcg_a is not None or args.lcg_g is not None):
        kw = {k: v for k, v in (("a", args.lcg_a), ("g", args.lcg_g)) if v is not None}
        lcg = LcgParams.for_stages(puf.n, c0=args.seed, **kw)
    crps = generate_crpset(puf, args.count, args.source, args.seed, lcg, broadcast=args.xor)
    write_crpset(crps, args.out)
    if args.csv:
        write_csv(crps, args.csv)
    print(f"wrote {len(crps)} CRPs (n={puf.n}, k={puf.k}) to {args.out}")


def _cmd_attack(args):
    crps = read_crpset(args.crps)
    train, val, test = split_crpset(crps, shuffle_seed=bench.derive_seed(args.seed, 0))
    kw = {"init_seed": bench.derive_seed(args.seed, 1),
          "shuffle_seed": bench.derive_seed(args.seed, 2),
          "wall_clock_budget": args.wall_clock_budget}
    if args.max_epochs:
        kw["max_epochs"] = args.max_epochs
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    if args.attack == "lr":
        model, rep = lr_train(train, val, LrTrainConfig(**kw), log)
        acc = lr_accuracy(model, test)
        save = save_lr_model
    else:
        model, rep = nn_train(train, val, NnTrainConfig(**kw), log)
        acc = nn_accuracy(model, test)
        save = save_nn_model
    if args.model_out:
        save(model, args.model_out)
    result = {
        "kind": "attack_run", "attack": args.attack, "n": crps.n, "k": crps.k,
        "trainingSize": len(train) + len(val), "testAccuracy": acc, "converged": True,
        "epochs": rep.epochs, "wallTime": rep.wall_time, "stopReason": rep.stop_reason,
        "valAccuracy": rep.val_accuracy,
    }
    print(json.dumps(result, sort_keys=True))


def _experiment_config(args):
    overrides = {
        "puf_type": args.puf_type, "n": args.n, "k": args.k,
        "instance_count": args.instances, "attack": args.attack,
        "training_sizes": args.sizes, "success_threshold": args.success_threshold,
        "max_crp_budget": args.max_crp_budget, "wall_clock_budget": args.wall_clock_budget,
        "master_seed": args.seed, "source": args.source, "max_epochs": args.max_epochs,
    }
    return bench.load_config(args.config, **overrides)


def _cmd_sweep(args):
    config = _experiment_config(args)
    out = Path(args.out)
    tfh = open(bench.timing_path(out), "w")
    with open(out, "w") as fh:
        def on_report(rep):
            fh.write(bench.dumps_record(rep.record()) + "\n")
            fh.flush()
            tfh.write(bench.dumps_record(rep.timing()) + "\n")
            tfh.flush()
            if not args.quiet:
                acc = "-" if rep.test_accuracy is None else f"{rep.test_accuracy:.4f}"
                print(f"instance {rep.instance_id} size {rep.training_size}: "
                      f"accuracy {acc} ({rep.wall_time:.1f} s)", file=sys.stderr)

        summary = bench.run_sweep(config, on_report)
    tfh.close()
    sys.stdout.write(bench.emit_report(summary, args.format))
    if summary.broken:
        print(f"minimal breaking size: {summary.minimal_breaking_size}", file=sys.stderr)
    else:
        print("no breaking size within the budget", file=sys.stderr)


def _cmd_report(args):
    reports = []
    for path in args.results:
        reports.extend(bench.read_results(path))
    sys.stdout.write(bench.emit_report(bench.summarize(reports), args.format))


def build_parser():
    p = argparse.ArgumentParser(prog="cdcpuf", description="CDC-XPUF simulation and modeling attacks")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a CRP file")
    g.add_argument("--puf", help="PUF instance file to evaluate (otherwise a fresh one is sampled)")
    g.add_argument("-n", type=int)
    g.add_argument("-k", type=int)
    g.add_argument("--noise", type=float, default=0.0, help="delay noise sigma")
    g.add_argument("--save-puf", help="write the sampled instance here")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--source", choices=["uniform", "lcg"], default="uniform")
    g.add_argument("--xor", action="store_true", help="broadcast one challenge (plain XOR PUF)")
    g.add_argument("--lcg-a", type=int)
    g.add_argument("--lcg-g", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--csv", help="also export a CSV copy")
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(func=_cmd_gen)

    a = sub.add_parser("attack", help="train and test one attack on a CRP file")
    a.add_argument("crps")
    a.add_argument("--attack", choices=["lr", "nn"], default="lr")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--max-epochs", type=int)
    a.add_argument("--wall-clock-budget", type=float)
    a.add_argument("--model-out", help="write the trained model checkpoint")
    a.add_argument("-v", "--verbose", action="store_true")
    a.set_defaults(func=_cmd_attack)

    s = sub.add_parser("sweep", help="run a full experiment")
    s.add_argument("--config", help="flat key = value config file")
    s.add_argument("--puf-type", choices=["cdc", "xor"])
    s.add_argument("-n", type=int)
    s.add_argument("-k", type=int)
    s.add_argument("--instances", type=int)
    s.add_argument("--attack", choices=["lr", "nn"])
    s.add_argument("--sizes", type=int, nargs="+")
    s.add_argument("--success-threshold", type=float)
    s.add_argument("--max-crp-budget", type=int)
    s.add_argument("--wall-clock-budget", type=float)
    s.add_argument("--source", choices=["uniform", "lcg"])
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--seed", type=int, help="master seed")
    s.add_argument("-o", "--out", default="results.jsonl")
    s.add_argument("--format", choices=["table", "csv", "jsonl"], default="table")
    s.add_argument("-q", "--quiet", action="store_true")
    s.set_defaults(func=_cmd_sweep)

    r = sub.add_parser("report", help="re-render stored results")
    r.add_argument("results", nargs="+")
    r.add_argument("--format", choices=["table", "csv", "jsonl"], default="table")
    r.set_defaults(func=_cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except PufError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
