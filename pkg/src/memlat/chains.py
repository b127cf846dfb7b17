"""Dependence chain extraction.

Three walks over a reorder-buffer snapshot produce the chains the runtime
mechanisms replay:

* backward walk from a repeated stall PC (runahead buffer),
* forward wakeup walk from a miss predicted to feed dependent misses
  (memory-controller acceleration),
* backward walk with remapping and loop-carry MAP uops (memory-controller
  runahead).

Windows are lists of MicroOp in program order, index 0 oldest. The walks are
pure functions; cycle costs are returned, not simulated here. oracle_slice is
the brute-force reference the walks are tested against; policy_lab is the
offline chain-selection study tool.
"""

from __future__ import annotations

import csv
from bisect import bisect_left
from collections import OrderedDict, deque
from dataclasses import dataclass, field

from .trace import MASK64, MicroOp, Trace

# opclasses the controller back-end can execute; IMUL/FP/OTHER stay core-only
EMC_OK_OPS = frozenset(
    ("IADD", "LOGIC", "SHIFT", "MOVE", "SIGNEXT", "LOAD", "STORE", "BRANCH")
)


class _WindowIndex:
    """Per-register writer lists and per-address store/load lists, positions ascending."""

    def __init__(self, window):
        self.writers: dict[int, list[int]] = {}
        self.stores: dict[int, list[int]] = {}
        self.loads: dict[int, list[int]] = {}
        for i, op in enumerate(window):
            if op.dst is not None:
                self.writers.setdefault(op.dst, []).append(i)
            if op.is_store:
                self.stores.setdefault(op.mem_vaddr, []).append(i)
            if op.is_load:
                self.loads.setdefault(op.mem_vaddr, []).append(i)

    def producer(self, consumer_idx, reg):
        lst = self.writers.get(reg)
        if not lst:
            return None
        k = bisect_left(lst, consumer_idx)
        return lst[k - 1] if k else None

    def store_for(self, load_idx, addr):
        lst = self.stores.get(addr)
        if not lst:
            return None
        k = bisect_left(lst, load_idx)
        return lst[k - 1] if k else None

    def load_after(self, store_idx, addr):
        lst = self.loads.get(addr)
        return bool(lst) and bisect_left(lst, store_idx) < len(lst)


# ---------------------------------------------------------------------------
# backward walk (runahead buffer)

@dataclass
class BackwardChain:
    found: bool
    indices: list[int]    # window positions in discovery order
    uops: list[MicroOp]   # same ops in program order, for replay
    latency: int          # walk cycles


def _backward_walk(window, idx, root, max_len):
    """SRSL-driven closure from root; returns (indices, dequeue count)."""
    chain: list[int] = []
    in_chain: set[int] = set()
    srsl: deque[tuple[int, int]] = deque()  # (reg, consumer position)
    dequeues = 0

    def add(i):
        chain.append(i)
        in_chain.add(i)
        for r in window[i].srcs:
            srsl.append((r, i))

    def add_with_spill(i):
        add(i)
        if window[i].is_load and len(chain) < max_len:
            s = idx.store_for(i, window[i].mem_vaddr)
            if s is not None and s not in in_chain:
                add(s)

    add_with_spill(root)
    while srsl and len(chain) < max_len:
        reg, consumer = srsl.popleft()
        dequeues += 1
        p = idx.producer(consumer, reg)
        if p is None or p in in_chain:
            continue
        add_with_spill(p)
    return chain, dequeues


def extract_backwards(window, stall_pc: int | None = None,
                      max_len: int | None = 32) -> BackwardChain:
    """Stall-PC match then backward dataflow walk.

    The head of the window is the stalled op. Its PC is matched against
    younger window entries; the oldest other instance roots the walk. One
    source register is dequeued per cycle; each resolves to the youngest
    older producer. Loads also pull in the youngest older store to the same
    address. Walk stops at max_len ops (None = unbounded). found=False means
    no other window op shares the stall PC.
    """
    if not window:
        return BackwardChain(False, [], [], 1)
    if stall_pc is None:
        stall_pc = window[0].pc
    if max_len is None:
        max_len = len(window)
    root = None
    for i in range(1, len(window)):
        if window[i].pc == stall_pc:
            root = i
            break
    if root is None:
        return BackwardChain(False, [], [], 1)
    idx = _WindowIndex(window)
    chain, dequeues = _backward_walk(window, idx, root, max_len)
    uops = [window[i] for i in sorted(chain)]
    return BackwardChain(True, chain, uops, max(1, dequeues))


# ---------------------------------------------------------------------------
# remapped chains executed at the memory controller

@dataclass(frozen=True)
class EmcUop:
    opclass: str
    dst: int | None            # physical register index at the controller
    srcs: tuple[int, ...]
    imm: int | None
    pc: int
    seq: int | None = None     # originating trace op, when tied to one
    taken: bool | None = None  # recorded direction for branch guards
    is_map: bool = False       # loop-carry move, issues only after all others


@dataclass
class EmcChain:
    kind: str                     # "EMC_DEP" or "EMC_RA"
    uops: list[EmcUop]
    live_ins: dict[int, int]      # register index -> shipped value
    nregs: int
    gen_latency: int
    core_id: int = 0
    source_seq: int | None = None      # dep: miss whose fill triggers execution
    source_dst_reg: int | None = None  # dep: register the fill value lands in
    source_vaddr: int | None = None
    root_pc: int | None = None         # runahead: marked PC
    rrt: dict[int, tuple] = field(default_factory=dict)
    # rrt rows: arch reg -> (first emc reg, current emc reg, live-in flag)

    def validate(self):
        produced = set()
        if self.source_dst_reg is not None:
            produced.add(self.source_dst_reg)
        for u in self.uops:
            for s in u.srcs:
                assert s in produced or s in self.live_ins, (
                    f"register {s} has neither producer nor shipped value")
            if u.dst is not None:
                produced.add(u.dst)


class _Renamer:
    """Instance-keyed register allocation with per-architectural-register
    first and current rows, as the chain walks use them."""

    def __init__(self, cap):
        self.cap = cap
        self.eprs: dict[tuple, int] = {}
        self.first: dict[int, int] = {}
        self.current: dict[int, int] = {}
        self.overflow = False

    def alloc(self, key, car=None):
        e = self.eprs.get(key)
        if e is not None:
            return e
        if len(self.eprs) >= self.cap:
            self.overflow = True
            return None
        e = len(self.eprs)
        self.eprs[key] = e
        if car is not None:
            self.first.setdefault(car, e)
            self.current[car] = e
        return e


def extract_forward(window, source_idx: int, producer_value, extern_value,
                    width: int = 4, max_len: int = 16, reg_cap: int = 16,
                    core_id: int = 0) -> EmcChain:
    """Forward wakeup walk from a source miss.

    The source's destination tag broadcasts first; an op wakes the cycle one
    of its producers broadcasts, provided every other source is already woken
    or has a ready value (captured as a live-in). Woken ops broadcast their
    own tag the next cycle, at most `width` tags per cycle. Only opclasses the
    controller supports participate; stores join only when a younger window
    load reads the same address. producer_value(i) must give the completed
    value of window[i]'s destination or None; extern_value(reg) the committed
    register value or None.
    """
    idx = _WindowIndex(window)
    woken = {source_idx}
    wake_order: list[int] = []
    prods_of: dict[int, list] = {}
    bq: deque[int] = deque([source_idx])
    cycle = 0
    last_wake = -1

    while bq and len(wake_order) < max_len:
        tags = {bq.popleft() for _ in range(min(width, len(bq)))}
        for j in range(source_idx + 1, len(window)):
            if j in woken:
                continue
            op = window[j]
            if op.opclass not in EMC_OK_OPS:
                continue
            prods = [idx.producer(j, r) for r in op.srcs]
            if not any(p in tags for p in prods if p is not None):
                continue
            ok = True
            for r, p in zip(op.srcs, prods):
                if p is None:
                    ok = extern_value(r) is not None
                elif p in woken:
                    ok = True
                elif p < source_idx:
                    ok = producer_value(p) is not None
                else:
                    ok = False  # producer younger than source, not woken yet
                if not ok:
                    break
            if not ok:
                continue
            if op.is_store and not idx.load_after(j, op.mem_vaddr):
                continue
            woken.add(j)
            wake_order.append(j)
            prods_of[j] = prods
            last_wake = cycle
            if op.dst is not None:
                bq.append(j)
            if len(wake_order) >= max_len:
                break
        cycle += 1

    ren = _Renamer(reg_cap)
    e0 = ren.alloc(("op", source_idx))
    live_ins: dict[int, int] = {}
    uops: list[EmcUop] = []
    for j in sorted(wake_order):
        op = window[j]
        srcs = []
        bad = False
        for r, p in zip(op.srcs, prods_of[j]):
            if p is None:
                e = ren.alloc(("ext", r))
                if e is not None:
                    live_ins[e] = extern_value(r) & MASK64
            else:
                e = ren.alloc(("op", p))
                if e is not None and p not in woken:
                    live_ins[e] = producer_value(p) & MASK64
            if e is None:
                bad = True
                break
            srcs.append(e)
        imm = op.imm
        if not bad and imm is not None and len(srcs) < 2:
            e = ren.alloc(("imm", j))
            if e is None:
                bad = True
            else:
                live_ins[e] = imm & MASK64
                srcs.append(e)
                imm = None
        dst = None
        if not bad and op.dst is not None:
            dst = ren.alloc(("op", j))
            bad = dst is None
        if bad:
            break  # register file exhausted; keep the program-order prefix
        uops.append(EmcUop(op.opclass, dst, tuple(srcs), imm, op.pc,
                           seq=op.seq, taken=op.taken))

    chain = EmcChain("EMC_DEP", uops, live_ins, len(ren.eprs),
                     max(1, last_wake + 1), core_id=core_id,
                     source_seq=window[source_idx].seq,
                     source_dst_reg=e0,
                     source_vaddr=window[source_idx].mem_vaddr)
    chain.validate()
    return chain


def extract_runahead_chain(window, marked_pc: int, producer_value,
                           extern_value, max_len: int = 32, reg_cap: int = 32,
                           core_id: int = 0) -> EmcChain | None:
    """Backward walk with remapping for continuous runahead at the controller.

    Roots at the youngest window op whose PC equals marked_pc. Differs from
    the runahead-buffer walk in two ways: each op is renamed to controller
    registers as it joins, and a producer whose PC is already in the chain
    fails the search, so the walk never crosses into the previous loop
    iteration; the consumed register becomes a live-in instead. After the
    walk, every live-in architectural register whose first remap differs from
    its current one gets a MAP uop (first -> current) carrying the value to
    the next iteration. Returns None (retry later) when the marked PC is not
    in the window. A live-in whose in-window producer has not finished falls
    back to the register's retired value; only when that is also unknown does
    the extraction retry.
    """
    root_idx = None
    for i in range(len(window) - 1, -1, -1):
        if window[i].pc == marked_pc:
            root_idx = i
            break
    if root_idx is None:
        return None

    idx = _WindowIndex(window)
    ren = _Renamer(reg_cap)
    mapped: set[int] = set()
    order: list[int] = []
    chain_pcs: set[int] = set()
    live_in_cars: list[int] = []
    car_by_key: dict[tuple, int] = {}
    srsl: deque[tuple] = deque()  # (reg, instance key, producer idx or None)
    dequeues = 0

    def instance(reg, consumer_idx):
        p = idx.producer(consumer_idx, reg)
        return (("op", p) if p is not None else ("ext", reg)), p

    def map_op(i):
        op = window[i]
        if op.dst is not None and ren.alloc(("op", i), car=op.dst) is None:
            return False
        for r in op.srcs:
            key, p = instance(r, i)
            known = key in ren.eprs
            if ren.alloc(key, car=r) is None:
                return False
            car_by_key.setdefault(key, r)
            if not known:
                srsl.append((r, key, p))
        mapped.add(i)
        order.append(i)
        chain_pcs.add(op.pc)
        return True

    if not map_op(root_idx):
        return None
    while srsl and len(order) < max_len and not ren.overflow:
        reg, key, p = srsl.popleft()
        dequeues += 1
        if (p is None or p in mapped or window[p].pc in chain_pcs
                or window[p].opclass not in EMC_OK_OPS):
            if (p is None or p not in mapped) and reg not in live_in_cars:
                live_in_cars.append(reg)
            continue
        if not map_op(p):
            break
        op = window[p]
        if op.is_load and len(order) < max_len:
            s = idx.store_for(p, op.mem_vaddr)
            if s is not None and s not in mapped:
                map_op(s)

    # every register nobody in the chain writes must ship a value
    live_ins: dict[int, int] = {}
    for key, e in ren.eprs.items():
        if key[0] == "op" and key[1] in mapped:
            continue
        v = producer_value(key[1]) if key[0] == "op" else extern_value(key[1])
        if v is None and key[0] == "op":
            # producer still in flight; the retired register value stands in
            v = extern_value(car_by_key[key])
        if v is None:
            return None  # retry once some value exists
        live_ins[e] = v & MASK64

    uops: list[EmcUop] = []
    for i in sorted(order):
        op = window[i]
        srcs = [ren.eprs[instance(r, i)[0]] for r in op.srcs]
        imm = op.imm
        if imm is not None and len(srcs) < 2:
            e = ren.alloc(("imm", i))
            if e is None:
                return None
            live_ins[e] = imm & MASK64
            srcs.append(e)
            imm = None
        dst = ren.eprs[("op", i)] if op.dst is not None else None
        uops.append(EmcUop(op.opclass, dst, tuple(srcs), imm, op.pc,
                           seq=op.seq, taken=op.taken))
    rrt = {}
    for car in set(list(ren.first) + live_in_cars):
        rrt[car] = (ren.first.get(car), ren.current.get(car),
                    car in live_in_cars)
    for car in live_in_cars:
        first, cur = ren.first.get(car), ren.current.get(car)
        if first is not None and cur is not None and first != cur:
            uops.append(EmcUop("MOVE", cur, (first,), None, marked_pc,
                               is_map=True))

    chain = EmcChain("EMC_RA", uops, live_ins, len(ren.eprs), 1 + dequeues,
                     core_id=core_id, root_pc=marked_pc, rrt=rrt)
    chain.validate()
    return chain


# ---------------------------------------------------------------------------
# chain cache (runahead buffer reuse across stalls on the same PC)

class ChainCache:
    def __init__(self, capacity: int = 2):
        self.capacity = capacity
        self.entries: OrderedDict[int, tuple] = OrderedDict()

    def get(self, pc):
        got = self.entries.get(pc)
        if got is not None:
            self.entries.move_to_end(pc)
        return got

    def put(self, pc, uops):
        # one chain per PC; refreshing a PC must not evict another entry
        if pc in self.entries:
            del self.entries[pc]
        elif len(self.entries) >= self.capacity:
            self.entries.popitem(last=False)
        self.entries[pc] = tuple(uops)


def chain_cache_get(cache: ChainCache, pc):
    return cache.get(pc)


def chain_cache_put(cache: ChainCache, pc, chain):
    cache.put(pc, chain)


# ---------------------------------------------------------------------------
# stall-PC profiling for marking runahead chain roots

class PcMissTable:
    """Counts full-window stalls per PC for stalls not classified dependent."""

    def __init__(self, capacity: int = 32):
        self.capacity = capacity
        self.entries: OrderedDict[int, int] = OrderedDict()

    def record_stall(self, pc):
        if pc in self.entries:
            self.entries[pc] += 1
            return
        if len(self.entries) >= self.capacity:
            victim = min(self.entries, key=self.entries.__getitem__)
            del self.entries[victim]
        self.entries[pc] = 1

    def top_pc(self):
        best = None
        best_count = -1
        for pc, c in self.entries.items():  # insertion order breaks ties
            if c > best_count:
                best, best_count = pc, c
        return best

    def decay(self):
        # stale phases age out across marking intervals
        for pc in self.entries:
            self.entries[pc] //= 2


def pc_miss_table_update(table: PcMissTable, stall_pc, is_dependent: bool):
    if not is_dependent:
        table.record_stall(stall_pc)


def mark_top_pc(table: PcMissTable, mpki, threshold: float = 5.0):
    """Interval-boundary marking decision; None when MPKI is at or below 5."""
    if mpki <= threshold or not table.entries:
        return None
    return table.top_pc()


# ---------------------------------------------------------------------------
# dependent-miss likelihood, 3-bit counters hashed by PC

class DependencePredictor:
    def __init__(self, size: int = 256):
        self.ctr = [0] * size

    def _slot(self, pc):
        return (pc ^ (pc >> 8)) % len(self.ctr)

    def train(self, pc, dependent: bool):
        i = self._slot(pc)
        if dependent:
            self.ctr[i] = min(7, self.ctr[i] + 1)
        else:
            self.ctr[i] = max(0, self.ctr[i] - 1)

    def likely(self, pc) -> bool:
        # either of the top two counter bits set
        return self.ctr[self._slot(pc)] >= 2


# ---------------------------------------------------------------------------
# brute-force slicing oracle (reference for the walks; also used by tests)

def oracle_slice(window, target: int) -> set[int]:
    """Exact untruncated backward closure from window[target], including it.

    Closure rules: each op pulls in the youngest older writer of each source
    register; each load additionally pulls in the youngest older store to the
    byte-identical address. Deliberately simple; no search list, no caps.
    """
    need = [target]
    out: set[int] = set()
    while need:
        i = need.pop()
        if i in out:
            continue
        out.add(i)
        op = window[i]
        for r in op.srcs:
            for j in range(i - 1, -1, -1):
                if window[j].dst == r:
                    need.append(j)
                    break
        if op.is_load:
            for j in range(i - 1, -1, -1):
                if window[j].is_store and window[j].mem_vaddr == op.mem_vaddr:
                    need.append(j)
                    break
    return out


# ---------------------------------------------------------------------------
# offline chain-selection study

POLICIES = ("PC_BASED", "MAX_MISSES", "STALL_ORACLE")


@dataclass
class PolicyRow:
    stall_seq: int
    policy: str
    chosen_pc: int | None
    chain_len: int
    unique_flag: int


@dataclass
class PolicyLabResult:
    policy: str
    rows: list[PolicyRow]
    chain_length_hist: dict[int, int]
    unique_chains: int
    total_stalls: int

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["stall_seq", "policy", "chosen_pc", "chain_len",
                        "unique_flag"])
            for r in self.rows:
                pc = f"{r.chosen_pc:#x}" if r.chosen_pc is not None else ""
                w.writerow([r.stall_seq, r.policy, pc, r.chain_len,
                            r.unique_flag])


def policy_lab(trace: Trace, policy: str, window_size: int = 256,
               csv_path=None) -> PolicyLabResult:
    """Replays a baseline run's full-window stalls offline and reports which
    chain each selection policy would load, with unbounded profiling tables.

    PC_BASED picks the stalling PC itself; MAX_MISSES the PC with the most
    LLC misses so far; STALL_ORACLE the PC with the most full-window stalls
    so far. Chains are the backward walk rooted at the youngest window
    instance of the chosen PC.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    from .sim import SimConfig, simulate

    result = simulate([trace], SimConfig())
    miss_counts: dict[int, int] = {}
    stall_counts: dict[int, int] = {}
    miss_log = deque(result.cores[0].llc_miss_log)

    rows: list[PolicyRow] = []
    hist: dict[int, int] = {}
    seen_chains: set[tuple] = set()
    ops = trace.ops
    seq_pos = {op.seq: k for k, op in enumerate(ops)}
    for cycle, seq, pc, _dep in result.cores[0].stall_log:
        while miss_log and miss_log[0][0] <= cycle:
            _, _mseq, mpc = miss_log.popleft()
            miss_counts[mpc] = miss_counts.get(mpc, 0) + 1
        stall_counts[pc] = stall_counts.get(pc, 0) + 1
        if policy == "PC_BASED":
            chosen = pc
        elif policy == "MAX_MISSES":
            chosen = max(miss_counts, key=miss_counts.__getitem__) if miss_counts else pc
        else:
            chosen = max(stall_counts, key=stall_counts.__getitem__)
        k = seq_pos[seq]
        window = ops[k:k + window_size]
        root = None
        for i in range(len(window) - 1, -1, -1):
            if window[i].pc == chosen:
                root = i
                break
        if root is None:
            rows.append(PolicyRow(seq, policy, chosen, 0, 0))
            hist[0] = hist.get(0, 0) + 1
            continue
        idx = _WindowIndex(window)
        chain, _ = _backward_walk(window, idx, root, 32)
        # structural identity: same PCs = same chain, later iterations repeat
        sig = tuple(window[i].pc for i in sorted(chain))
        fresh = sig not in seen_chains
        seen_chains.add(sig)
        rows.append(PolicyRow(seq, policy, chosen, len(chain), int(fresh)))
        hist[len(chain)] = hist.get(len(chain), 0) + 1

    out = PolicyLabResult(policy, rows, hist, len(seen_chains), len(rows))
    if csv_path is not None:
        out.to_csv(csv_path)
    return out
