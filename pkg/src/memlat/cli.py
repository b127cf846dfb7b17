"""Command-line front end: trace generation, single runs, experiment
matrices, the chain-policy lab, and A/B comparison of stats files.

Exit codes: 0 success, 2 configuration or input error, 3 simulation failure.
"""

from __future__ import annotations

import argparse
import csv
import multiprocessing
import os
import sys

from .chains import POLICIES, policy_lab
from .metrics import read_csv
from .runahead import write_intervals_csv
from .sim import MODES, ConfigError, SimConfig, simulate
from .trace import (TraceError, gen_linked_list, gen_pointer_chase,
                    gen_stream, load_trace, store_trace)

_CONFIG_KEYS = {
    "cores": int,
    "mode": str,
    "prefetcher": str,
    "emc_policy": str,
    "enhancements": bool,
    "max_instructions": int,
    "seed": int,
    "stats_path": str,
}

_MEM_INT_KEYS = ("l1_bytes", "llc_bytes_per_core", "mshr_per_core",
                 "mshr_emc", "l1_latency", "llc_latency", "emc_cache_latency")


def _parse_bool(s: str) -> bool:
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _coerce(key: str, raw: str):
    ty = _CONFIG_KEYS[key]
    try:
        if ty is bool:
            return _parse_bool(raw)
        return ty(raw)
    except (ValueError, ConfigError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _set_key(cfg: SimConfig, key: str, raw: str):
    if key.startswith("mem."):
        sub = key[4:]
        try:
            cfg.mem_overrides[sub] = int(raw, 0)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return
    if key not in _CONFIG_KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(cfg, key, _coerce(key, raw))


def parse_config(path: str | None, overrides: list[str] = ()) -> SimConfig:
    """Flat key=value file, then flag overrides, then validation."""
    cfg = SimConfig()
    if path is not None:
        with open(path, encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, _, val = line.partition("=")
                _set_key(cfg, key.strip(), val.strip())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override needs key=value: {item!r}")
        key, _, val = item.partition("=")
        _set_key(cfg, key.strip(), val.strip())
    cfg.validate()
    return cfg


def _out_dir() -> str:
    return os.environ.get("MEMLAT_OUT_DIR", ".")


def _resolve_out(path: str) -> str:
    # explicit directories win; bare filenames land in the output dir
    if os.path.dirname(path):
        return path
    return os.path.join(_out_dir(), path)


# -- gen ---------------------------------------------------------------------

def _cmd_gen(args) -> int:
    if args.kind == "stream":
        t = gen_stream(args.nodes, args.stride)
    elif args.kind == "pointer-chase":
        t = gen_pointer_chase(args.nodes, args.footprint, args.gap, args.seed)
    else:
        t = gen_linked_list(args.nodes, args.stride, args.seed)
    store_trace(t, _resolve_out(args.out))
    print(f"wrote {len(t.ops)} uops to {_resolve_out(args.out)}")
    return 0


# -- run ---------------------------------------------------------------------

def _cmd_run(args) -> int:
    cfg = parse_config(args.config, args.set or [])
    if args.out is not None:
        cfg.stats_path = args.out
    if cfg.stats_path is None:
        cfg.stats_path = "run.csv"
    cfg.stats_path = _resolve_out(cfg.stats_path)
    traces = [load_trace(p) for p in args.trace]
    if cfg.cores != len(traces):
        # trace count is authoritative when the config never set cores
        if cfg.cores == 1 and len(traces) > 1:
            cfg.cores = len(traces)
        else:
            raise ConfigError(
                f"config asks for {cfg.cores} cores but "
                f"{len(traces)} traces given")
    res = simulate(traces, cfg)
    if args.intervals_out:
        write_intervals_csv(res.stats, _resolve_out(args.intervals_out))
    ipc = " ".join(f"{c.ipc:.4f}" for c in res.stats.cores)
    print(f"cycles={res.cycles} ipc=[{ipc}] stats={cfg.stats_path}")
    return 0


# -- matrix ------------------------------------------------------------------

def _cell_name(cfg_path: str, group: str) -> str:
    cfg_stem = os.path.splitext(os.path.basename(cfg_path))[0]
    tr_stem = "+".join(os.path.splitext(os.path.basename(p))[0]
                       for p in group.split(","))
    return f"{cfg_stem}__{tr_stem}"


def _run_cell(job):
    """One isolated (config, trace-group) cell; runs in a worker process."""
    cfg_path, overrides, group, out_path = job
    try:
        cfg = parse_config(cfg_path, overrides)
        paths = group.split(",")
        traces = [load_trace(p) for p in paths]
        if cfg.cores == 1 and len(traces) > 1:
            cfg.cores = len(traces)
        cfg.stats_path = out_path
        res = simulate(traces, cfg)
        return {
            "status": "ok",
            "mode": cfg.mode,
            "cycles": res.cycles,
            "ipc": [c.ipc for c in res.stats.cores],
            "eff_lat_mean": _opt(res.stats, "demand"),
            "eff_lat_dep_core_mean": _opt(res.stats, "dep_core"),
            "eff_lat_dep_emc_mean": _opt(res.stats, "dep_emc"),
        }
    except (ConfigError, TraceError, OSError) as e:
        return {"status": "config-error", "error": str(e)}
    except (RuntimeError, AssertionError) as e:
        return {"status": "sim-error", "error": str(e)}


def _opt(stats, cls):
    s = sum(c.eff_sum[cls][0] for c in stats.cores)
    n = sum(c.eff_sum[cls][1] for c in stats.cores)
    return s / n if n else None


SUMMARY_FIELDS = ("cell", "config", "traces", "mode", "status", "cycles",
                  "ipc_sum", "weighted_speedup_vs_baseline", "eff_lat_mean",
                  "eff_lat_dep_core_mean", "eff_lat_dep_emc_mean", "error")


def run_matrix(configs: list[str], trace_groups: list[str], out_dir: str,
               parallelism: int = 1, overrides: list[str] = ()) -> int:
    """Every (config x trace-group) cell, each in its own worker; cell CSVs
    plus summary.csv land in out_dir. Output bytes do not depend on
    parallelism."""
    os.makedirs(out_dir, exist_ok=True)
    jobs = []
    names = []
    for cp in configs:
        for g in trace_groups:
            name = _cell_name(cp, g)
            names.append((cp, g, name))
            jobs.append((cp, list(overrides), g,
                         os.path.join(out_dir, name + ".csv")))
    if parallelism > 1 and len(jobs) > 1:
        with multiprocessing.Pool(parallelism) as pool:
            results = pool.map(_run_cell, jobs, chunksize=1)
    else:
        results = [_run_cell(j) for j in jobs]

    # reference IPCs: the baseline-mode cell of each trace group
    base_ipc = {}
    for (cp, g, name), r in zip(names, results):
        if r["status"] == "ok" and r["mode"] == "baseline":
            base_ipc.setdefault(g, r["ipc"])
    rows = []
    failed = False
    for (cp, g, name), r in zip(names, results):
        row = {"cell": name, "config": cp, "traces": g,
               "mode": r.get("mode", ""), "status": r["status"]}
        if r["status"] == "ok":
            row["cycles"] = r["cycles"]
            row["ipc_sum"] = f"{sum(r['ipc']):.6f}"
            ref = base_ipc.get(g)
            if ref and len(ref) == len(r["ipc"]) and all(a > 0 for a in ref):
                ws = sum(s / a for s, a in zip(r["ipc"], ref))
                row["weighted_speedup_vs_baseline"] = f"{ws:.6f}"
            for k in ("eff_lat_mean", "eff_lat_dep_core_mean",
                      "eff_lat_dep_emc_mean"):
                if r[k] is not None:
                    row[k] = f"{r[k]:.6f}"
        else:
            row["error"] = r["error"]
            failed = True
        rows.append(row)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS, restval="",
                           lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)
    for row in rows:
        print(f"{row['cell']}: {row['status']}")
    return 3 if failed else 0


def _cmd_matrix(args) -> int:
    out = args.out_dir or _out_dir()
    return run_matrix(args.config, args.trace, out,
                      parallelism=args.parallelism,
                      overrides=args.set or [])


# -- lab ---------------------------------------------------------------------

def _cmd_lab(args) -> int:
    trace = load_trace(args.trace)
    out = _resolve_out(args.out) if args.out else None
    res = policy_lab(trace, args.policy, window_size=args.window,
                     csv_path=out)
    print(f"policy={res.policy} stalls={res.total_stalls} "
          f"unique_chains={res.unique_chains}")
    for length in sorted(res.chain_length_hist):
        print(f"  chain_len={length}: {res.chain_length_hist[length]}")
    return 0


# -- compare -----------------------------------------------------------------

_NON_NUMERIC = {"version", "scope", "core", "digest"}


def compare(path_a: str, path_b: str):
    """Per-metric absolute and relative deltas between two stats files."""
    va, rows_a = read_csv(path_a)
    vb, rows_b = read_csv(path_b)
    if va != vb:
        raise ConfigError(f"schema version mismatch: {va} vs {vb}")
    if len(rows_a) != len(rows_b):
        raise ConfigError("row count mismatch between runs")
    report = []
    for ra, rb in zip(rows_a, rows_b):
        scope = (ra["scope"], ra["core"])
        if (rb["scope"], rb["core"]) != scope:
            raise ConfigError("row order mismatch between runs")
        for key, a_raw in ra.items():
            if key in _NON_NUMERIC:
                continue
            b_raw = rb[key]
            if a_raw == "" and b_raw == "":
                continue
            a = float(a_raw) if a_raw else 0.0
            b = float(b_raw) if b_raw else 0.0
            delta = b - a
            rel = delta / a if a else None
            report.append((scope, key, a, b, delta, rel))
    return report


def _cmd_compare(args) -> int:
    report = compare(args.a, args.b)
    lines = []
    for (scope, core), key, a, b, delta, rel in report:
        tag = f"{scope}[{core}]" if core else scope
        rel_s = f"{rel:+.4f}" if rel is not None else "n/a"
        lines.append(f"{tag}.{key}: {a:g} -> {b:g} "
                     f"(abs {delta:+g}, rel {rel_s})")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(_resolve_out(args.out), "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


# -- argument surface ---------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="memlat",
        description="Trace-driven multicore simulator of on-chip mechanisms "
                    "for reducing effective memory access latency.")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a synthetic trace")
    g.add_argument("kind", choices=("stream", "pointer-chase", "linked-list"))
    g.add_argument("out", help="trace file to write")
    g.add_argument("--nodes", type=int, default=1000,
                   help="loads (stream) or loop iterations (chase, list)")
    g.add_argument("--stride", type=int, default=64,
                   help="stream/list address stride in bytes")
    g.add_argument("--footprint", type=lambda s: int(s, 0), default=1 << 17,
                   help="pointer-chase ring size in bytes")
    g.add_argument("--gap", type=int, default=8,
                   help="filler ALU ops between pointer-chase iterations")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gen)

    r = sub.add_parser("run", help="run one simulation")
    r.add_argument("--trace", action="append", required=True,
                   help="trace file, once per core")
    r.add_argument("--config", help="key=value config file")
    r.add_argument("--set", action="append", metavar="KEY=VAL",
                   help="config override, e.g. mode=ra-emc or mem.l1_bytes=8192")
    r.add_argument("--out", help="stats CSV path")
    r.add_argument("--intervals-out",
                   help="also write per-runahead-interval CSV here")
    r.set_defaults(func=_cmd_run)

    m = sub.add_parser("matrix", help="run a config x trace experiment matrix")
    m.add_argument("--config", action="append", required=True,
                   help="config file, repeatable")
    m.add_argument("--trace", action="append", required=True,
                   help="trace group: comma-separated files, one per core")
    m.add_argument("--set", action="append", metavar="KEY=VAL",
                   help="override applied to every cell")
    m.add_argument("--parallelism", type=int, default=1)
    m.add_argument("--out-dir", help="defaults to $MEMLAT_OUT_DIR or .")
    m.set_defaults(func=_cmd_matrix)

    l = sub.add_parser("lab", help="offline chain-selection policy analysis")
    l.add_argument("--trace", required=True)
    l.add_argument("--policy", choices=POLICIES, default="PC_BASED")
    l.add_argument("--window", type=int, default=256)
    l.add_argument("--out", help="per-stall CSV path")
    l.set_defaults(func=_cmd_lab)

    c = sub.add_parser("compare", help="A/B delta report for two stats files")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--out", help="write the report here instead of stdout")
    c.set_defaults(func=_cmd_compare)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, AssertionError) as e:
        print(f"simulation failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
