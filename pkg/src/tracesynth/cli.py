"""Command-line entry points: gen-data, gen-trace, profile, synth, eval."""

from __future__ import annotations

import argparse
import sys

from . import costmodel as cm
from . import pipeline, pool as pool_mod, trace as tr
from .backend import AdapterBackend, MockAdapter, SimulatedBackend
from .catalog import gen_synthetic_catalog, load_dataset, save_dataset


def _add_seed(parser):
    parser.add_argument("--seed", type=int, default=0)


def cmd_gen_data(args) -> int:
    catalog, dataset = gen_synthetic_catalog(args.tables, args.rows, seed=args.seed)
    save_dataset(catalog, dataset, args.out)
    print(f"wrote catalog + {len(catalog.tables)} tables to {args.out}")
    return 0


def cmd_gen_trace(args) -> int:
    catalog, dataset = load_dataset(args.catalog)
    backend = SimulatedBackend(catalog, dataset)
    records, answer_key = tr.gen_synthetic_trace(
        catalog, backend, args.n, seed=args.seed, dup_rate=args.dup
    )
    tr.write_trace(records, args.out)
    if args.key:
        tr.write_answer_key(answer_key, args.key)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_profile(args) -> int:
    catalog, dataset = load_dataset(args.catalog)
    backend = SimulatedBackend(catalog, dataset)
    samples = cm.collect_profiles(catalog, backend, args.queries, seed=args.seed)
    model = cm.fit(samples, join_regressor=args.join_regressor)
    cm.save_model(model, args.out)
    errs = model.metadata.get("in_sample_median_rel_error", {})
    worst = max(errs.values()) if errs else float("nan")
    print(f"fitted {len(samples)} samples; worst per-kind median rel err "
          f"{worst:.4f}; wrote {args.out}")
    return 0


def cmd_synth(args) -> int:
    overrides = {"seed": args.seed}
    for item in args.set or []:
        key, _, value = item.partition("=")
        overrides[key] = value
    config = pipeline.load_config(args.config, overrides)
    catalog, dataset = load_dataset(args.catalog)
    simulated = SimulatedBackend(catalog, dataset)
    if config.backend == "mock-adapter":
        backend = AdapterBackend(MockAdapter(config.mock_profile_dir), simulated)
    elif config.backend == "simulated":
        backend = simulated
    else:
        print(f"unknown backend {config.backend!r}", file=sys.stderr)
        return 2
    model = cm.load_model(args.model)
    records = tr.load_trace(args.trace, tolerance=config.tolerance, eta=config.eta,
                            weights={"cpu_time_ms": config.weight_cpu,
                                     "scanned_bytes": config.weight_bytes})
    pool = pool_mod.QueryPool.load(args.pool) if args.pool_in else None
    result = pipeline.synthesize_workload(records, catalog, backend, model,
                                          config, pool=pool)
    pipeline.write_workload(result, args.out)
    pipeline.write_report(result, args.report)
    if args.pool:
        result.pool.save(args.pool)
    agg = pipeline.aggregate_metrics(result.outcomes)
    med = agg.get("median_cpu_qerror")
    print(f"{len(records)} records; median cpu q-error "
          f"{med if med is not None else 'n/a'}; wrote {args.out}, {args.report}")
    return 0


def cmd_eval(args) -> int:
    rows, _ = pipeline.read_report(args.report)
    cpu = [float(r["cpu_qerror"]) for r in rows if r["cpu_qerror"]]
    byt = [float(r["bytes_qerror"]) for r in rows if r["bytes_qerror"]]
    print(f"{'metric':<16} {'median':>10} {'p90':>10} {'p99':>10}")
    for name, vals in (("cpu_qerror", cpu), ("bytes_qerror", byt)):
        if not vals:
            print(f"{name:<16} {'n/a':>10} {'n/a':>10} {'n/a':>10}")
            continue
        cells = [pipeline.nearest_rank_percentile(vals, q) for q in (50, 90, 99)]
        print(f"{name:<16} " + " ".join(f"{c:10.4f}" for c in cells))
    for kind, attr in (("join", "join_abs_err"), ("aggregate", "agg_abs_err"),
                       ("sort", "sort_abs_err")):
        errs = [float(r[attr]) for r in rows if r[attr]]
        if errs:
            print(f"{kind + '_mae':<16} {sum(errs) / len(errs):10.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracesynth",
        description="Trace-driven SQL workload synthesizer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic catalog + data")
    p.add_argument("--tables", type=int, default=2)
    p.add_argument("--rows", type=int, default=1000)
    p.add_argument("--out", required=True)
    _add_seed(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gen-trace", help="generate a synthetic trace + answer key")
    p.add_argument("--catalog", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--dup", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--key", default=None)
    _add_seed(p)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("profile", help="collect profiling queries and fit the model")
    p.add_argument("--catalog", required=True)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--join-regressor", default="parametric",
                   choices=("parametric", "tree_ensemble"))
    p.add_argument("--out", required=True)
    _add_seed(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("synth", help="synthesize a workload for a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--pool", default=None, help="directory to persist the query pool")
    p.add_argument("--pool-in", action="store_true",
                   help="preload the pool from --pool before the run")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key")
    _add_seed(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="print the percentile table for a report")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
