"""Measurement and reporting: per-core counters, effective-latency
accounting, weighted speedup, CSV emission, retired-state digest."""

from __future__ import annotations

import csv
import hashlib
import math
import os

CSV_VERSION = "memlat-csv-1"
N_BUCKETS = 32
_BUCKET_SPAN = 12 / N_BUCKETS  # log2 range 1..4096 split evenly

LAT_CLASSES = ("demand", "dep_core", "dep_emc")


def _bucket(lat: int) -> int:
    if lat < 1:
        lat = 1
    return min(N_BUCKETS - 1, int(math.log2(lat) / _BUCKET_SPAN))


class CoreStats:
    def __init__(self):
        self.cycles = 0
        self.retired = 0
        self.llc_misses = 0
        self.dependent_misses = 0
        self.stall_cycles = 0
        self.eff_hist = [0] * N_BUCKETS
        self.eff_sum = {c: [0, 0] for c in LAT_CLASSES}

    @property
    def ipc(self) -> float:
        return self.retired / self.cycles if self.cycles else 0.0

    @property
    def mpki(self) -> float:
        return 1000.0 * self.llc_misses / self.retired if self.retired else 0.0

    def eff_mean(self, cls: str = "demand") -> float | None:
        s, n = self.eff_sum[cls]
        return s / n if n else None


class SimStats:
    def __init__(self, n_cores: int):
        self.n_cores = n_cores
        self.cores = [CoreStats() for _ in range(n_cores)]
        self.dram_reads = 0
        self.dram_writes = 0
        self.row_hits = 0
        self.row_closed = 0
        self.row_conflicts = 0
        self.ring_control = 0
        self.ring_data = 0
        self.pf_issued = [0] * n_cores
        self.pf_useful = [0] * n_cores
        self.pf_late = [0] * n_cores
        self.pf_evicted_untouched = [0] * n_cores
        self.ra_fetched = 0
        self.ra_useful = 0
        self.ra_evicted_untouched = 0
        self.emc_dep_uops = 0
        self.emc_ra_uops = 0
        self.emc_cache_hits = 0
        self.emc_bypasses = 0
        self.emc_aborts = 0
        self.intervals = []      # (interval_id, mode, cycles, uops, misses)
        self.ra_distances = []   # per-interval mean fetched-to-use distance
        self.ra_distance_samples = []  # per-touch retired-instruction gaps

    @property
    def row_conflict_rate(self) -> float | None:
        total = self.row_hits + self.row_closed + self.row_conflicts
        return self.row_conflicts / total if total else None


def weighted_speedup(shared_ipc, alone_ipc) -> float:
    if len(shared_ipc) != len(alone_ipc):
        raise ValueError("per-core IPC lists must have equal length")
    for a in alone_ipc:
        if a <= 0:
            raise ValueError("alone IPC must be positive")
    return sum(s / a for s, a in zip(shared_ipc, alone_ipc))


def eff_latency_record(stats: SimStats, core: int, miss_cycle: int,
                       wakeup_cycle: int, cls: str = "demand"):
    assert wakeup_cycle >= miss_cycle
    lat = wakeup_cycle - miss_cycle
    cs = stats.cores[core]
    cs.eff_hist[_bucket(lat)] += 1
    acc = cs.eff_sum[cls]
    acc[0] += lat
    acc[1] += 1


CSV_COLUMNS = [
    "version", "scope", "core", "cycles", "retired", "ipc", "llc_misses",
    "mpki", "dependent_misses", "stall_cycles", "eff_lat_mean",
    "eff_lat_dep_core_mean", "eff_lat_dep_emc_mean", "dram_reads",
    "dram_writes", "row_hits", "row_closed", "row_conflicts",
    "row_conflict_rate", "ring_control", "ring_data", "pf_issued",
    "pf_useful", "pf_late", "pf_evicted_untouched", "ra_fetched",
    "ra_useful", "ra_evicted_untouched", "emc_dep_uops", "emc_ra_uops",
    "emc_cache_hits", "emc_bypasses", "emc_aborts", "digest",
]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def emit_csv(stats: SimStats, path: str, digest: str | None = None):
    """One row per core plus one global row; stable column order."""
    rows = []
    for i, c in enumerate(stats.cores):
        rows.append({
            "version": CSV_VERSION, "scope": "core", "core": i,
            "cycles": c.cycles, "retired": c.retired, "ipc": c.ipc,
            "llc_misses": c.llc_misses, "mpki": c.mpki,
            "dependent_misses": c.dependent_misses,
            "stall_cycles": c.stall_cycles,
            "eff_lat_mean": c.eff_mean("demand"),
            "eff_lat_dep_core_mean": c.eff_mean("dep_core"),
            "eff_lat_dep_emc_mean": c.eff_mean("dep_emc"),
            "pf_issued": stats.pf_issued[i], "pf_useful": stats.pf_useful[i],
            "pf_late": stats.pf_late[i],
            "pf_evicted_untouched": stats.pf_evicted_untouched[i],
        })
    g = {
        "version": CSV_VERSION, "scope": "global", "core": "",
        "cycles": max((c.cycles for c in stats.cores), default=0),
        "retired": sum(c.retired for c in stats.cores),
        "ipc": sum(c.ipc for c in stats.cores),
        "llc_misses": sum(c.llc_misses for c in stats.cores),
        "mpki": "",
        "dependent_misses": sum(c.dependent_misses for c in stats.cores),
        "stall_cycles": sum(c.stall_cycles for c in stats.cores),
        "eff_lat_mean": _merged_mean(stats, "demand"),
        "eff_lat_dep_core_mean": _merged_mean(stats, "dep_core"),
        "eff_lat_dep_emc_mean": _merged_mean(stats, "dep_emc"),
        "dram_reads": stats.dram_reads, "dram_writes": stats.dram_writes,
        "row_hits": stats.row_hits, "row_closed": stats.row_closed,
        "row_conflicts": stats.row_conflicts,
        "row_conflict_rate": stats.row_conflict_rate,
        "ring_control": stats.ring_control, "ring_data": stats.ring_data,
        "pf_issued": sum(stats.pf_issued), "pf_useful": sum(stats.pf_useful),
        "pf_late": sum(stats.pf_late),
        "pf_evicted_untouched": sum(stats.pf_evicted_untouched),
        "ra_fetched": stats.ra_fetched, "ra_useful": stats.ra_useful,
        "ra_evicted_untouched": stats.ra_evicted_untouched,
        "emc_dep_uops": stats.emc_dep_uops, "emc_ra_uops": stats.emc_ra_uops,
        "emc_cache_hits": stats.emc_cache_hits,
        "emc_bypasses": stats.emc_bypasses, "emc_aborts": stats.emc_aborts,
        "digest": digest,
    }
    rows.append(g)
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"output directory does not exist: {parent}")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS, restval="",
                           lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def _merged_mean(stats: SimStats, cls: str) -> float | None:
    s = sum(c.eff_sum[cls][0] for c in stats.cores)
    n = sum(c.eff_sum[cls][1] for c in stats.cores)
    return s / n if n else None


def read_csv(path: str):
    """Returns (version, list of row dicts); raises on version mismatch."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"empty stats file: {path}")
    version = rows[0]["version"]
    for r in rows:
        if r["version"] != version:
            raise ValueError("mixed schema versions in one file")
    return version, rows


def state_digest(retired_counts, reg_files, image: dict) -> str:
    """Digest of retired architectural state; identical across modes."""
    h = hashlib.sha256()
    for n in retired_counts:
        h.update(str(n).encode())
        h.update(b";")
    for regs in reg_files:
        for r in sorted(regs):
            h.update(f"{r}={regs[r]:x}".encode())
            h.update(b",")
        h.update(b";")
    for addr in sorted(image):
        h.update(f"{addr:x}:{image[addr]:x}".encode())
        h.update(b",")
    return h.hexdigest()
