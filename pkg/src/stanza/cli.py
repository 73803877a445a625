"""Command line front end.

Subcommands: `run` one experiment, `compare` the two protocols over a
worker sweep, `plan` a node assignment from measured constants, and
`bench` the compute constants on an executable model.

The STANZA_SEED environment variable, when set, overrides the seed from
both config files and flags, so a whole scripted sweep can be re-rolled
without editing anything.

Exit codes: 0 on success, 2 for configuration errors (bad flags, bad
config files, non-executable models), 3 when no feasible node assignment
exists, 4 when training produced non-finite numbers.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from .harness import (ExperimentConfig, MismatchedConfigs, NonFinite,
                      bench_constants, compare, load_experiment_file,
                      resolve_model, run)
from .model_partition import (BadBoundary, ConfigError, NoConvBlock,
                              NoFcLayer, NotExecutable, mlp_split, split)
from .perf_model import (Infeasible, PerfConstants, assign_nodes, assign_ps,
                         format_constants_text, load_constants_file,
                         ps_iter_time, stanza_iter_time)

_CONFIG_ERRORS = (ConfigError, MismatchedConfigs, NotExecutable, NoFcLayer,
                  NoConvBlock, BadBoundary, FileNotFoundError)

# run-command flags that map straight onto ExperimentConfig fields
_RUN_FIELDS = ("mode", "model", "seed", "iterations", "epochs", "batch_k",
               "workers", "servers", "fc_workers", "nodes", "bandwidth",
               "latency", "data", "epoch_samples", "lr", "momentum",
               "boundary", "conv_time", "fc_unit_time", "ps_compute_time",
               "out_dir", "label")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment file; flags override it")
    p.add_argument("--mode", choices=("ps", "stanza", "single"))
    p.add_argument("--model", help="builtin name or model file path")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-k", type=int, dest="batch_k")
    p.add_argument("--workers", type=int)
    p.add_argument("--servers", type=int)
    p.add_argument("--fc-workers", type=int, dest="fc_workers")
    p.add_argument("--nodes", type=int,
                   help="plan the split for this node budget instead of "
                        "giving explicit counts")
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--latency", type=float)
    p.add_argument("--data", choices=("gaussian", "separable"))
    p.add_argument("--epoch-samples", type=int, dest="epoch_samples")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--boundary", type=int)
    p.add_argument("--conv-time", type=float, dest="conv_time")
    p.add_argument("--fc-unit-time", type=float, dest="fc_unit_time")
    p.add_argument("--ps-compute-time", type=float, dest="ps_compute_time")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--label")


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {f: getattr(args, f) for f in _RUN_FIELDS
                 if getattr(args, f) is not None}
    if args.config is not None:
        config = load_experiment_file(args.config)
        if overrides:
            config = dataclasses.replace(config, **overrides)
    else:
        for required in ("mode", "model", "seed"):
            if required not in overrides:
                raise ConfigError(f"--{required} is required without --config")
        config = ExperimentConfig(**overrides)
    env_seed = os.environ.get("STANZA_SEED")
    if env_seed is not None:
        try:
            config = dataclasses.replace(config, seed=int(env_seed))
        except ValueError:
            raise ConfigError(f"STANZA_SEED={env_seed!r} is not an integer"
                              ) from None
    return config


def _cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    report = run(config)
    print(f"{report.mode} {report.model}: {report.iterations} iterations on "
          f"{report.workers}+{report.coordinators} nodes "
          f"(global batch {report.global_batch})")
    print(f"logical clock {report.logical_clock_seconds:.6g} s, "
          f"wire bytes {report.total_wire_bytes}")
    if report.final_loss is not None:
        print(f"final loss {report.final_loss:.6f}")
    if report.param_digest is not None:
        print(f"param digest {report.param_digest}")
    if config.out_dir is not None:
        print(f"reports in {config.out_dir}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    if args.config_ps is not None or args.config_stanza is not None:
        if args.config_ps is None or args.config_stanza is None:
            raise ConfigError("give both --config-ps and --config-stanza")
        ps_cfg = load_experiment_file(args.config_ps)
        st_cfg = load_experiment_file(args.config_stanza)
    else:
        for required in ("model", "seed"):
            if getattr(args, required) is None:
                raise ConfigError(f"--{required} is required without config "
                                  "files")
        shared = dict(model=args.model, seed=args.seed)
        for key in ("iterations", "epochs", "batch_k", "bandwidth", "latency",
                    "epoch_samples", "boundary"):
            value = getattr(args, key)
            if value is not None:
                shared[key] = value
        first = args.workers[0] if args.workers else 1
        ps_cfg = ExperimentConfig(mode="ps", workers=first,
                                  servers=args.servers, **shared)
        st_cfg = ExperimentConfig(mode="stanza", workers=first,
                                  fc_workers=args.fc_workers, **shared)
    env_seed = os.environ.get("STANZA_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"STANZA_SEED={env_seed!r} is not an integer"
                              ) from None
        ps_cfg = dataclasses.replace(ps_cfg, seed=seed)
        st_cfg = dataclasses.replace(st_cfg, seed=seed)

    report = compare(ps_cfg, st_cfg, worker_counts=args.workers,
                     out_dir=args.out, stem=args.stem)
    print(f"{report.model}, batch {report.batch_k}, "
          f"{report.iterations} iterations")
    print(f"{'workers':>8} {'speedup':>10} {'fc-data':>10} {'total-data':>11}")
    for r in report.rows:
        fc = "-" if r.fc_data_ratio is None else f"{r.fc_data_ratio:.2f}"
        total = "-" if r.total_data_ratio is None else f"{r.total_data_ratio:.2f}"
        print(f"{r.workers:>8} {r.speedup:>10.3f} {fc:>10} {total:>11}")
    if args.out is not None:
        print(f"reports in {args.out}")
    return 0


def _cmd_plan(args: argparse.Namespace) -> int:
    spec = resolve_model(args.model, args.batch_k)
    if args.constants is not None:
        constants = load_constants_file(args.constants)
        if args.bandwidth is not None:
            constants = dataclasses.replace(constants,
                                            bandwidth=args.bandwidth)
    else:
        constants = PerfConstants(bandwidth=args.bandwidth or 10e9)
    part = (mlp_split(spec, args.boundary) if args.boundary is not None
            else split(spec))
    if args.mode == "ps":
        picked = assign_ps(part.conv_params + part.fc_params, spec.batch_k,
                           args.nodes, constants)
        seconds = ps_iter_time(part.conv_params + part.fc_params,
                               picked.n_workers, picked.n_servers, constants)
        print(f"{spec.name} on {args.nodes} nodes: {picked.n_workers} workers"
              f" + {picked.n_servers} servers")
    else:
        picked = assign_nodes(part, args.nodes, constants,
                              fc_memory_bytes=args.memory)
        seconds = stanza_iter_time(part, picked.n_conv, picked.n_fc,
                                   constants)
        print(f"{spec.name} on {args.nodes} nodes: {picked.n_conv} CONV "
              f"workers + {picked.n_fc} FC workers")
    print(f"iteration time {seconds:.6g} s, "
          f"throughput {picked.throughput:.6g} samples/s")
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    spec = resolve_model(args.model, args.batch_k)
    constants = bench_constants(spec, reps=args.reps, bandwidth=args.bandwidth,
                                boundary=args.boundary, seed=args.seed)
    text = format_constants_text(constants, name=spec.name)
    print(text, end="")
    if args.out is not None:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stanza",
        description="Layer-separated vs parameter-server training on a "
                    "simulated network")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_run_flags(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare",
                           help="run both protocols and tabulate ratios")
    p_cmp.add_argument("--config-ps", dest="config_ps")
    p_cmp.add_argument("--config-stanza", dest="config_stanza")
    p_cmp.add_argument("--model")
    p_cmp.add_argument("--seed", type=int)
    p_cmp.add_argument("--iterations", type=int)
    p_cmp.add_argument("--epochs", type=int)
    p_cmp.add_argument("--batch-k", type=int, dest="batch_k")
    p_cmp.add_argument("--bandwidth", type=float)
    p_cmp.add_argument("--latency", type=float)
    p_cmp.add_argument("--epoch-samples", type=int, dest="epoch_samples")
    p_cmp.add_argument("--boundary", type=int)
    p_cmp.add_argument("--servers", type=int, default=1)
    p_cmp.add_argument("--fc-workers", type=int, dest="fc_workers", default=1)
    p_cmp.add_argument("--workers", type=int, nargs="+",
                       help="worker counts to sweep")
    p_cmp.add_argument("--out", help="directory for report files")
    p_cmp.add_argument("--stem", default="compare")
    p_cmp.set_defaults(func=_cmd_compare)

    p_plan = sub.add_parser("plan",
                            help="pick the best node assignment for a budget")
    p_plan.add_argument("--model", required=True)
    p_plan.add_argument("--nodes", type=int, required=True)
    p_plan.add_argument("--mode", choices=("stanza", "ps"), default="stanza")
    p_plan.add_argument("--constants", help="measured constants file")
    p_plan.add_argument("--bandwidth", type=float)
    p_plan.add_argument("--batch-k", type=int, dest="batch_k")
    p_plan.add_argument("--boundary", type=int)
    p_plan.add_argument("--memory", type=float,
                        help="per-node activation memory limit in bytes")
    p_plan.set_defaults(func=_cmd_plan)

    p_bench = sub.add_parser("bench",
                             help="measure compute constants on this host")
    p_bench.add_argument("--model", required=True)
    p_bench.add_argument("--batch-k", type=int, dest="batch_k")
    p_bench.add_argument("--reps", type=int, default=5)
    p_bench.add_argument("--boundary", type=int)
    p_bench.add_argument("--bandwidth", type=float, default=10e9)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", help="constants file to write")
    p_bench.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"stanza: configuration error: {exc}", file=sys.stderr)
        return 2
    except Infeasible as exc:
        print(f"stanza: no feasible assignment: {exc}", file=sys.stderr)
        return 3
    except NonFinite as exc:
        print(f"stanza: numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
