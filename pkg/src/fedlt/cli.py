"""Command-line entry point: ``fedlt {generate,train,sweep,report}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace

from .config import SWEEP_PARAMS, ConfigError, ExperimentConfig, apply_variant, dump_config, load_config, set_key
from .dataset import ParameterError, write_dataset, write_partition
from .federation import LOG_COLUMNS, build_environment, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SUMMARY_COLUMNS = ("variant", "acc_all", "acc_many", "acc_medium", "acc_few", "nc_mean_angle", "prior_l2")

log = logging.getLogger("fedlt")


class LogParseError(ValueError):
    pass


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "variants", None):
        cfg = set_key(cfg, "variants", args.variants)
    return cfg.validate()


def _fmt(v):
    if v is None:
        return ""
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _table(rows, columns, out=None):
    out = out or sys.stdout
    out.write(",".join(columns) + "\n")
    for row in rows:
        out.write(",".join(_fmt(row.get(c)) for c in columns) + "\n")


def _summary_row(name, result):
    m = result.final
    return {"variant": name, "acc_all": m.acc_all, "acc_many": m.acc_many, "acc_medium": m.acc_medium,
            "acc_few": m.acc_few, "nc_mean_angle": m.nc_mean_angle, "prior_l2": m.prior_l2}


def cmd_generate(args):
    cfg = _resolve_config(args)
    env = build_environment(cfg)
    os.makedirs(args.out, exist_ok=True)
    write_dataset(os.path.join(args.out, "train.txt"), env.train)
    write_dataset(os.path.join(args.out, "test.txt"), env.test)
    write_partition(os.path.join(args.out, "partition.txt"), env.partition)
    with open(os.path.join(args.out, "config.cfg"), "w") as fh:
        fh.write(dump_config(cfg))
    c = cfg.data.num_classes
    rows = [{"client": k, "n": int(row.sum()), **{f"c{j}": int(row[j]) for j in range(c)}}
            for k, row in enumerate(env.partition.counts)]
    _table(rows, ["client", "n"] + [f"c{j}" for j in range(c)])
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve_config(args)
    env = build_environment(cfg)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.cfg"), "w") as fh:
        fh.write(dump_config(cfg))
    rows = []
    for variant in cfg.variants:
        result = run_experiment(apply_variant(cfg, variant), name=variant, out_dir=args.out, env=env)
        rows.append(_summary_row(variant, result))
    _table(rows, SUMMARY_COLUMNS)
    return EXIT_OK


def cmd_sweep(args):
    cfg = _resolve_config(args)
    variants = tuple(args.variants.split(",")) if args.variants else (cfg.train.algorithm,)
    key = SWEEP_PARAMS[args.param]
    shares_data = key.startswith("train.")
    env = build_environment(cfg) if shares_data else None
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for raw in args.values:
        value = float(raw)
        point = set_key(cfg, key, value).validate()
        point_env = env or build_environment(point)
        for variant in variants:
            name = f"{variant}+{args.param}={raw}"
            result = run_experiment(apply_variant(point, variant), name=name, out_dir=args.out, env=point_env)
            rows.append({"param": args.param, "value": raw, **_summary_row(variant, result)})
    _table(rows, ("param", "value") + SUMMARY_COLUMNS)
    return EXIT_OK


def read_log(path):
    """Parse a round-log CSV into a list of row dicts, checking every line."""
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or tuple(lines[0].split(",")) != LOG_COLUMNS:
        raise LogParseError(f"{path}:1: header does not match the round-log columns")
    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        cells = next(csv.reader([line]))
        if len(cells) != len(LOG_COLUMNS):
            raise LogParseError(f"{path}:{lineno}: expected {len(LOG_COLUMNS)} fields, got {len(cells)}")
        row = dict(zip(LOG_COLUMNS, cells))
        try:
            int(row["round"])
            for c in LOG_COLUMNS[2:]:
                if row[c]:
                    float(row[c])
        except ValueError as exc:
            raise LogParseError(f"{path}:{lineno}: {exc}") from exc
        rows.append(row)
    return rows


def merge_logs(logs):
    """Keep only rounds present in every log; return (merged rows, final rows, truncated?)."""
    rounds = [[int(r["round"]) for r in rows] for rows in logs]
    common = set(rounds[0]).intersection(*rounds[1:])
    truncated = any(len(r) != len(common) for r in rounds)
    merged = [r for rows in logs for r in rows if int(r["round"]) in common]
    last = max(common) if common else None
    final = [r for r in merged if int(r["round"]) == last]
    return merged, final, truncated


def cmd_report(args):
    logs = [read_log(p) for p in args.logs]
    merged, final, truncated = merge_logs(logs)
    if truncated:
        log.warning("logs cover different rounds; aligned on the %d rounds they share",
                    len({r["round"] for r in merged}))
    rows = final if args.final else merged
    text = ",".join(LOG_COLUMNS) + "\n" + "".join(",".join(r[c] for c in LOG_COLUMNS) + "\n" for r in rows)
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for name, part in (("merged.csv", merged), ("final.csv", final)):
            with open(os.path.join(args.out, name), "w") as fh:
                fh.write(",".join(LOG_COLUMNS) + "\n")
                fh.writelines(",".join(r[c] for c in LOG_COLUMNS) + "\n" for r in part)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="fedlt", description="Federated long-tail learning simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="flat key = value config file (defaults apply when omitted)")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("generate", help="write dataset and partition files")
    common(p, "data")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run every configured variant on shared data")
    common(p, "runs")
    p.add_argument("--variants", help="comma-separated variants, e.g. fedavg,fedyoyo")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="final accuracy across values of one parameter")
    common(p, "sweep")
    p.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    p.add_argument("--values", required=True, nargs="+")
    p.add_argument("--variants", help="comma-separated variants (default: the configured algorithm)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="merge round logs by round index")
    p.add_argument("logs", nargs="+", help="round-log CSV files")
    p.add_argument("--out", help="also write merged.csv and final.csv here")
    p.add_argument("--final", action="store_true", help="print only the last shared round")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        if args.command == "sweep" and "could not convert" in str(exc):
            print(f"config error: bad sweep value: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
