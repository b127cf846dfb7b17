"""Enhanced memory controller.

Chains extracted by the cores run here, next to the DRAM queues, on a
small two-wide engine with a private data cache, TLB, LSQ and miss
predictor. A dependent-miss chain executes once, triggered by the fill
of its source miss; the runahead context loops its chain continuously
and is re-targeted at interval boundaries by an accuracy-driven
controller that also coordinates throttling with the GHB prefetcher.
"""

from __future__ import annotations

import heapq
import math
from collections import OrderedDict, deque

from .chains import EmcChain
from .core import FU_LAT
from .memhier import paddr_of, route
from .prefetch import GhbPrefetcher
from .trace import MASK64, branch_taken, exec_value

DEP_CONTEXTS = 2
DEP_BUFFER, DEP_REGS = 16, 16
RA_BUFFER, RA_REGS = 32, 32
RS_ENTRIES = 8            # woken uops visible to the scheduler per cycle
ISSUE_WIDTH = 2
MISS_THRESHOLD = 4        # of 7; counters saturate at [0, 7]
TLB_ENTRIES = 32
PAGE = 4096
MPKI_FLOOR = 5.0          # runahead eligibility cutoff
UOP_BYTES, LIVE_IN_BYTES, MSG_BYTES = 8, 4, 64
LSQ_ENTRIES = 16
INTERVAL_STEPS = ((0.95, 100_000), (0.90, 50_000), (0.85, 20_000))
INTERVAL_FLOOR = 10_000
FIXED_INTERVAL = 100_000

REJECTED = "Rejected"
POLICIES = ("ROUND_ROBIN", "IPC", "SCORE")


class EmcContext:
    """One chain execution context: uop buffer, register file with ready
    bits, per-iteration issue state. The epoch counter invalidates stale
    completions after a reset, replacement or abort."""

    def __init__(self, kind: str, buf_cap: int, reg_cap: int):
        self.kind = kind
        self.buf_cap = buf_cap
        self.reg_cap = reg_cap
        self.epoch = 0
        self.chain: EmcChain | None = None
        self.release()

    def release(self):
        self.chain = None
        self.core = None
        self.busy = False
        self.regs: list[int] = []
        self.ready: list[bool] = []
        self.issued: list[bool] = []
        self.done: list[bool] = []
        self.live_in_regs: frozenset[int] = frozenset()
        self.map_dsts: tuple[int, ...] = ()
        self.iteration = 0
        self.waiting_fill = False
        self.start_cycle = 0
        self.epoch += 1

    def load(self, chain: EmcChain, live_ins: dict[int, int], start_cycle: int):
        self.chain = chain
        self.core = chain.core_id
        self.busy = True
        self.regs = [0] * chain.nregs
        self.ready = [False] * chain.nregs
        for r, v in live_ins.items():
            self.regs[r] = v & MASK64
            self.ready[r] = True
        self.live_in_regs = frozenset(live_ins)
        self.issued = [False] * len(chain.uops)
        self.done = [False] * len(chain.uops)
        self.map_dsts = tuple(u.dst for u in chain.uops if u.is_map)
        self.iteration = 0
        self.waiting_fill = chain.kind == "EMC_DEP"
        self.start_cycle = start_cycle
        self.epoch += 1

    def reset_iteration(self):
        # loop boundary: uops rewind, loop-carried register values persist
        self.issued = [False] * len(self.issued)
        self.done = [False] * len(self.done)
        keep = self.live_in_regs | set(self.map_dsts)
        self.ready = [r in keep for r in range(len(self.ready))]
        self.iteration += 1
        self.epoch += 1


class Emc:
    def __init__(self, mem, cores=None, dep_contexts: int = DEP_CONTEXTS,
                 with_ra: bool = True, policy: str = "ROUND_ROBIN",
                 fixed_interval: bool = False):
        assert policy in POLICIES
        self.mem = mem
        self.stats = mem.stats
        self.cores = cores            # optional; enables value delivery
        n = len(mem.stats.cores)
        self.n_cores = n
        self.dep = [EmcContext("EMC_DEP", DEP_BUFFER, DEP_REGS)
                    for _ in range(dep_contexts)]
        self.ra = EmcContext("EMC_RA", RA_BUFFER, RA_REGS) if with_ra else None
        self.tlb = [OrderedDict() for _ in range(n)]
        self.miss_ctr = [[0] * 256 for _ in range(n)]
        self.lsq: deque = deque()     # (ctx, epoch, order, word addr, value)
        self.lsq_order = 0
        self.outstanding: list = []   # (ctx, epoch, uop idx, vaddr, req, bypassed)
        self.pending: list = []       # heap of scheduled completions
        self._tick = 0
        self.ra_width = ISSUE_WIDTH
        self.branch_stops = 0
        self.policy = policy
        self.fixed_interval = fixed_interval
        self.interval_len = FIXED_INTERVAL
        self.interval_start_cycle = 0
        self.accuracy = 1.0           # seeds the first decision
        self.owner: int | None = None
        self.owner_base = 0
        self.last_owner = -1
        self.snap = [(0, 0)] * n      # (retired, llc_misses) at interval start
        self.ownership_log: list[tuple[int, int]] = []
        self._fb_cursor = 0
        self._dist_cursor = 0
        self._ghb_restore: list = []
        self._interval_flagged = False

    def context_id(self, ctx: EmcContext) -> int:
        if ctx.kind == "EMC_RA":
            return len(self.dep)
        return self.dep.index(ctx)


# -- chain acceptance -------------------------------------------------------

def accept_chain(emc: Emc, chain: EmcChain, live_ins=None, pte=None):
    """Load a transmitted chain into a free context. Returns the context
    id, or Rejected when no context of the right kind is available."""
    if not chain.uops:
        return REJECTED
    chain.validate()
    if live_ins is None:
        live_ins = chain.live_ins
    if chain.kind == "EMC_RA":
        ctx = emc.ra
    else:
        ctx = next((c for c in emc.dep if not c.busy), None)
    if ctx is None:
        return REJECTED
    if len(chain.uops) > ctx.buf_cap or chain.nregs > ctx.reg_cap:
        return REJECTED
    mem = emc.mem
    payload = len(chain.uops) * UOP_BYTES + len(live_ins) * LIVE_IN_BYTES
    msgs = math.ceil(payload / MSG_BYTES)
    for _ in range(msgs):
        route(mem.ring, chain.core_id, mem.mc_stop, "DATA")
    start = (mem.cycle + chain.gen_latency
             + mem._link(chain.core_id, mem.mc_stop) + (msgs - 1))
    if pte is not None:
        tlb_install(emc, chain.core_id, pte)
    ctx.load(chain, live_ins, start)
    return emc.context_id(ctx)


# -- TLB and miss predictor -------------------------------------------------

def tlb_install(emc: Emc, core: int, page: int):
    t = emc.tlb[core]
    if page in t:
        t.move_to_end(page)
        return
    t[page] = True
    while len(t) > TLB_ENTRIES:
        t.popitem(last=False)


def tlb_check(emc: Emc, core: int, vaddr: int) -> str:
    page = vaddr // PAGE
    t = emc.tlb[core]
    if page in t:
        t.move_to_end(page)
        return "OK"
    return "ABORT"


def _hash_pc(pc: int) -> int:
    return (pc >> 3) & 0xFF


def miss_predict(emc: Emc, core: int, pc: int) -> bool:
    return emc.miss_ctr[core][_hash_pc(pc)] >= MISS_THRESHOLD


def miss_train(emc: Emc, core: int, pc: int, hit: bool):
    ctr = emc.miss_ctr[core]
    i = _hash_pc(pc)
    ctr[i] = max(0, ctr[i] - 1) if hit else min(7, ctr[i] + 1)


# -- interval control -------------------------------------------------------

def update_interval(emc: Emc, accuracy: float) -> int:
    if emc.fixed_interval:
        emc.interval_len = FIXED_INTERVAL
        return emc.interval_len
    for floor, length in INTERVAL_STEPS:
        if accuracy > floor:
            emc.interval_len = length
            return length
    emc.interval_len = INTERVAL_FLOOR
    return INTERVAL_FLOOR


def interval_accuracy(emc: Emc) -> float:
    """Fraction of runahead-fetched lines touched by a demand before
    eviction, over feedback rows seen since the last call. With no new
    feedback the previous interval's value is carried forward."""
    fb = emc.mem.eviction_feedback
    used = wasted = 0
    while emc._fb_cursor < len(fb):
        if fb[emc._fb_cursor][0] == "used":
            used += 1
        else:
            wasted += 1
        emc._fb_cursor += 1
    if used + wasted:
        emc.accuracy = used / (used + wasted)
    return emc.accuracy


def close_interval(emc: Emc) -> float:
    acc = interval_accuracy(emc)
    samples = emc.stats.ra_distance_samples
    fresh = samples[emc._dist_cursor:]
    emc._dist_cursor = len(samples)
    if fresh:
        emc.stats.ra_distances.append(sum(fresh) / len(fresh))
    if emc.owner is not None:
        # owner reports its retired count back to the controller
        route(emc.mem.ring, emc.owner, emc.mem.mc_stop, "CONTROL")
    return acc


def select_runahead_core(emc: Emc, core_stats, scores=None):
    """Pick the next runahead chain owner among cores whose interval MPKI
    clears the floor; None idles the context for an interval."""
    elig = []
    for i, cs in enumerate(core_stats):
        dr = cs.retired - emc.snap[i][0]
        dm = cs.llc_misses - emc.snap[i][1]
        if dr <= 0:
            mpki = float("inf") if dm else 0.0
        else:
            mpki = 1000.0 * dm / dr
        if mpki > MPKI_FLOOR:
            elig.append((i, dr))
    if not elig:
        return None
    if emc.policy == "IPC":
        # all cores share the cycle count, so retired delta orders interval IPC
        return min(elig, key=lambda t: (t[1], t[0]))[0]
    if emc.policy == "SCORE":
        if scores is None:
            scores = [0] * len(core_stats)
        return max(elig, key=lambda t: (scores[t[0]], -t[0]))[0]
    for i, _ in elig:
        if i > emc.last_owner:
            return i
    return elig[0][0]


def begin_interval(emc: Emc, owner, core_stats=None):
    if core_stats is None:
        core_stats = emc.stats.cores
    for pf, degree in emc._ghb_restore:
        pf.degree = degree
    emc._ghb_restore.clear()
    emc.ra_width = ISSUE_WIDTH
    emc.snap = [(cs.retired, cs.llc_misses) for cs in core_stats]
    emc.owner = owner
    if owner is not None:
        emc.last_owner = owner
        emc.owner_base = core_stats[owner].retired
    emc.interval_start_cycle = emc.mem.cycle
    emc.ownership_log.append((emc.mem.cycle, -1 if owner is None else owner))
    emc._interval_flagged = False


def coordinate_throttle(emc: Emc, emc_acc: float, ghb_acc: float) -> list:
    """One interval of throttling for whichever requester is wasting more
    bandwidth: prefetcher degree is halved (floor 1) or the runahead
    issue width drops to 1. A tie leaves both alone."""
    actions = []
    if emc_acc > ghb_acc:
        for pf in emc.mem.prefetchers:
            if isinstance(pf, GhbPrefetcher):
                old = pf.degree
                pf.degree = max(1, old // 2)
                emc._ghb_restore.append((pf, old))
                actions.append(("GHB_DEGREE", old, pf.degree))
    elif ghb_acc > emc_acc:
        emc.ra_width = 1
        actions.append(("RA_WIDTH", 1))
    return actions


# -- the per-cycle engine ---------------------------------------------------

def emc_step(emc: Emc, memory=None) -> list:
    mem = memory if memory is not None else emc.mem
    now = mem.cycle
    events: list = []
    _drain_completions(emc, now, events)
    _poll_loads(emc, mem, now, events)
    _start_dep_contexts(emc, mem, now)
    _issue(emc, mem, now, events)
    _finish_chains(emc, mem, now, events)
    _check_interval(emc, mem, now, events)
    return events


def _schedule(emc: Emc, cycle: int, ctx: EmcContext, idx: int, value):
    emc._tick += 1
    heapq.heappush(emc.pending, (cycle, emc._tick, ctx, ctx.epoch, idx, value))


def _drain_completions(emc: Emc, now: int, events: list):
    while emc.pending and emc.pending[0][0] <= now:
        _, _, ctx, epoch, idx, value = heapq.heappop(emc.pending)
        if ctx.epoch != epoch:
            continue
        u = ctx.chain.uops[idx]
        _complete(ctx, idx, value)
        if u.opclass == "LOAD":  # forwarded from the LSQ, still goes home
            _deliver_dep_load(emc, emc.mem, ctx, u, value, now, events)


def _complete(ctx: EmcContext, idx: int, value):
    u = ctx.chain.uops[idx]
    if u.dst is not None and value is not None:
        ctx.regs[u.dst] = value & MASK64
        ctx.ready[u.dst] = True
    ctx.done[idx] = True


def _poll_loads(emc: Emc, mem, now: int, events: list):
    still = []
    for entry in emc.outstanding:
        ctx, epoch, idx, vaddr, req, bypassed = entry
        if ctx.epoch != epoch:
            continue  # request keeps warming caches, context moved on
        if req.done_cycle is None or req.done_cycle > now:
            still.append(entry)
            continue
        if not bypassed:
            miss_train(emc, ctx.core, ctx.chain.uops[idx].pc,
                       hit=req.served_by in ("EMC$", "LLC"))
        value = mem.image.get(paddr_of(ctx.core, vaddr) & ~7, 0)
        u = ctx.chain.uops[idx]
        _complete(ctx, idx, value)
        _deliver_dep_load(emc, mem, ctx, u, value, now, events)
    emc.outstanding = still


def _deliver_dep_load(emc: Emc, mem, ctx: EmcContext, u, value, now: int,
                      events: list):
    if ctx.chain.kind != "EMC_DEP" or u.seq is None:
        return
    route(mem.ring, mem.mc_stop, ctx.core, "DATA")
    arrive = now + mem._link(mem.mc_stop, ctx.core)
    events.append(("DepLoadDone", ctx.core, u.seq, value, arrive))
    if emc.cores is not None:
        emc.cores[ctx.core].complete_from_emc(u.seq, value, arrive)


def _start_dep_contexts(emc: Emc, mem, now: int):
    for ctx in emc.dep:
        if not (ctx.busy and ctx.waiting_fill) or now < ctx.start_cycle:
            continue
        ch = ctx.chain
        line = paddr_of(ctx.core, ch.source_vaddr) & ~63
        if line in mem.inflight:
            continue  # source miss still in flight
        value = mem.image.get(paddr_of(ctx.core, ch.source_vaddr) & ~7, 0)
        ctx.regs[ch.source_dst_reg] = value & MASK64
        ctx.ready[ch.source_dst_reg] = True
        ctx.waiting_fill = False


def _issue(emc: Emc, mem, now: int, events: list):
    contexts = [c for c in emc.dep if c.busy]
    if emc.ra is not None and emc.ra.busy:
        contexts.append(emc.ra)
    cand = []
    for ctx in contexts:
        if ctx.waiting_fill or now < ctx.start_cycle:
            continue
        for i, u in enumerate(ctx.chain.uops):
            if ctx.issued[i]:
                continue
            if u.is_map and not all(ctx.issued[:i]):
                continue  # loop-carry moves wait for the whole body
            if all(ctx.ready[s] for s in u.srcs):
                cand.append((ctx, ctx.epoch, i, u))
    budget = ISSUE_WIDTH
    ra_budget = emc.ra_width
    port_free = True
    for ctx, epoch, i, u in cand[:RS_ENTRIES]:
        if budget == 0:
            break
        if ctx.epoch != epoch:
            continue  # context aborted earlier this cycle
        if ctx.kind == "EMC_RA":
            if ra_budget == 0:
                continue
        if u.opclass == "LOAD":
            if not port_free:
                continue  # single data-cache port
            port_free = False
        budget -= 1
        if ctx.kind == "EMC_RA":
            ra_budget -= 1
        ok = _issue_one(emc, mem, ctx, i, u, now, events)
        if ok and ctx.epoch == epoch:  # the uop may have killed its own chain
            ctx.issued[i] = True
            if ctx.kind == "EMC_DEP":
                emc.stats.emc_dep_uops += 1
            else:
                emc.stats.emc_ra_uops += 1


def _issue_one(emc: Emc, mem, ctx: EmcContext, i: int, u, now: int,
               events: list) -> bool:
    """Returns False only when the uop must retry (MSHR full); the issue
    slot and cache port are consumed either way."""
    core = ctx.core
    if u.opclass == "LOAD":
        vaddr = (sum(ctx.regs[s] for s in u.srcs) + (u.imm or 0)) & MASK64
        route(mem.ring, mem.mc_stop, core, "CONTROL")  # home LSQ notice
        if tlb_check(emc, core, vaddr) == "ABORT":
            _abort(emc, mem, ctx, vaddr // PAGE, events)
            return True
        fwd = _lsq_forward(emc, ctx, vaddr)
        if fwd is not None:
            _schedule(emc, now + 1, ctx, i, fwd)
            return True
        bypass = miss_predict(emc, core, u.pc)
        if bypass:
            line = paddr_of(core, vaddr) & ~63
            resident = mem.llc[mem.slice_of(line)].lookup(line, touch=False)
            miss_train(emc, core, u.pc, hit=resident is not None)
        retired = emc.stats.cores[core].retired
        req = mem.emc_load(core, paddr_of(core, vaddr), ctx.chain.kind,
                           bypass=bypass, retired=retired)
        if req is None:
            return False
        emc.outstanding.append((ctx, ctx.epoch, i, vaddr, req, bypass))
        events.append(("EmcLoad", ctx.chain.kind, core, vaddr, bypass))
        return True
    if u.opclass == "STORE":
        addr = (sum(ctx.regs[s] for s in u.srcs[1:]) + (u.imm or 0)) & MASK64
        value = ctx.regs[u.srcs[0]] if u.srcs else 0
        route(mem.ring, mem.mc_stop, core, "CONTROL")
        if tlb_check(emc, core, addr) == "ABORT":
            _abort(emc, mem, ctx, addr // PAGE, events)
            return True
        emc.lsq.append((ctx, ctx.epoch, emc.lsq_order, addr & ~7, value))
        emc.lsq_order += 1
        while len(emc.lsq) > LSQ_ENTRIES:
            emc.lsq.popleft()
        events.append(("EmcStore", ctx.chain.kind, core, addr))
        _schedule(emc, now + FU_LAT["STORE"], ctx, i, None)
        return True
    if u.opclass == "BRANCH":
        a = ctx.regs[u.srcs[0]] if u.srcs else 0
        if branch_taken(u, a) != bool(u.taken):
            emc.branch_stops += 1
            events.append(("EmcBranchStop", ctx.chain.kind, core))
            route(mem.ring, mem.mc_stop, core, "CONTROL")
            ctx.release()
            return True
        _schedule(emc, now + FU_LAT["BRANCH"], ctx, i, None)
        return True
    a = ctx.regs[u.srcs[0]] if len(u.srcs) >= 1 else 0
    b = ctx.regs[u.srcs[1]] if len(u.srcs) >= 2 else 0
    _schedule(emc, now + FU_LAT.get(u.opclass, 1), ctx, i, exec_value(u, a, b))
    return True


def _lsq_forward(emc: Emc, ctx: EmcContext, vaddr: int):
    word = vaddr & ~7
    for owner, epoch, _, addr, value in reversed(emc.lsq):
        if owner is ctx and epoch == ctx.epoch and addr == word:
            return value
    return None


def _abort(emc: Emc, mem, ctx: EmcContext, page: int, events: list):
    # translation missing: halt, signal the core, drop the chain
    emc.stats.emc_aborts += 1
    events.append(("EmcAbort", ctx.chain.kind, ctx.core, page))
    route(mem.ring, mem.mc_stop, ctx.core, "CONTROL")
    ctx.release()


def _finish_chains(emc: Emc, mem, now: int, events: list):
    for ctx in emc.dep:
        if not ctx.busy or ctx.waiting_fill or not all(ctx.done):
            continue
        dsts = {u.dst for u in ctx.chain.uops if u.dst is not None}
        msgs = max(1, math.ceil(len(dsts) / 16))  # live-outs ride home
        for _ in range(msgs):
            route(mem.ring, mem.mc_stop, ctx.core, "DATA")
        events.append(("DepChainDone", ctx.core, emc.context_id(ctx)))
        ctx.release()
    ra = emc.ra
    if ra is not None and ra.busy and ra.done and all(ra.done):
        ra.reset_iteration()
        events.append(("RaIteration", ra.iteration))


def _check_interval(emc: Emc, mem, now: int, events: list):
    if emc.ra is None or emc._interval_flagged:
        return
    if emc.owner is not None:
        progress = emc.stats.cores[emc.owner].retired - emc.owner_base
        if progress >= emc.interval_len:
            emc._interval_flagged = True
            events.append(("IntervalEnd", emc.owner))
    elif now - emc.interval_start_cycle >= emc.interval_len:
        emc._interval_flagged = True
        events.append(("IntervalEnd", None))


# -- CSV surfaces -----------------------------------------------------------

EMC_COUNTER_FIELDS = ("emc_dep_uops", "emc_ra_uops", "emc_cache_hits",
                      "emc_bypasses", "emc_aborts")
OWNERSHIP_FIELDS = ("cycle", "owner")


def emc_counters_csv(stats) -> str:
    row = ",".join(str(getattr(stats, f)) for f in EMC_COUNTER_FIELDS)
    return ",".join(EMC_COUNTER_FIELDS) + "\n" + row + "\n"


def ownership_csv(emc: Emc) -> str:
    lines = [",".join(OWNERSHIP_FIELDS)]
    lines += [f"{cycle},{owner}" for cycle, owner in emc.ownership_log]
    return "\n".join(lines) + "\n"
