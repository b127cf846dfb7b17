"""Shared memory system: per-core L1s, distributed inclusive LLC slices,
bidirectional ring, memory-controller queues, and DDR3 bank/row timing.

Latencies are in core cycles at 3.2 GHz. The three DRAM access classes come
out to 60 (row hit), 104 (closed bank), 148 (row conflict) cycles measured
from command start; queue time accrues separately in the controller queue,
never inside these numbers.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

LINE = 64

# 13.75 ns at 3.2 GHz = 44 core cycles
TCAS = 44
TRCD = 44
TRP = 44
TRAS = 2 * TCAS  # floor on precharge start after activate
BURST = 16       # 64 B burst on the DDR bus, in core cycles

N_CHANNELS = 2
N_BANKS = 8
ROW_BYTES = 8192

LAT_HIT = TCAS + BURST
LAT_CLOSED = TRCD + TCAS + BURST
LAT_CONFLICT = TRP + TRCD + TCAS + BURST

DEMAND_KINDS = frozenset({"DEMAND", "EMC_DEP"})


def paddr_of(core: int, vaddr: int) -> int:
    """Per-core physical address: disjoint 1 TB windows."""
    return vaddr + (core << 40)


def dram_map(paddr: int) -> tuple[int, int, int]:
    """(channel, bank, row): lines interleave channels, then banks."""
    line = paddr // LINE
    channel = line % N_CHANNELS
    bank = (line // N_CHANNELS) % N_BANKS
    local = line // (N_CHANNELS * N_BANKS)
    return channel, bank, local // (ROW_BYTES // LINE)


@dataclass
class BankState:
    open_row: int | None = None
    ready_cycle: int = 0
    last_activate: int = -(1 << 40)
    last_kind: str = ""


def dram_latency(bank: BankState, addr: int, now: int = 0,
                 sink=None, channel: int = 0, bank_id: int = 0,
                 write: bool = False) -> int:
    """Start one request on a ready bank; returns cycles to data.

    Exactly LAT_HIT / LAT_CLOSED / LAT_CONFLICT depending on row state.
    Side effects: open row, ready cycle, last_kind; commands are reported
    through ``sink(cycle, channel, bank, op, row)`` when given.
    """
    assert bank.ready_cycle <= now, "bank not ready"
    row = dram_map(addr)[2]
    col = "WR" if write else "RD"
    if bank.open_row == row:
        lat = LAT_HIT
        bank.last_kind = "hit"
        if sink is not None:
            sink(now, channel, bank_id, col, row)
    elif bank.open_row is None:
        lat = LAT_CLOSED
        bank.last_kind = "closed"
        bank.last_activate = now
        if sink is not None:
            sink(now, channel, bank_id, "ACT", row)
            sink(now + TRCD, channel, bank_id, col, row)
    else:
        assert bank.last_activate + TRAS <= now, "precharge inside tRAS"
        lat = LAT_CONFLICT
        bank.last_kind = "conflict"
        bank.last_activate = now + TRP
        if sink is not None:
            sink(now, channel, bank_id, "PRE", -1)
            sink(now + TRP, channel, bank_id, "ACT", row)
            sink(now + TRP + TRCD, channel, bank_id, col, row)
    bank.open_row = row
    bank.ready_cycle = now + lat
    return lat


class CacheLine:
    __slots__ = ("emc_resident", "runahead_fetched", "prefetch_fetched",
                 "touched", "fetch_mark")

    def __init__(self):
        self.emc_resident = False
        self.runahead_fetched = False
        self.prefetch_fetched = False
        self.touched = False
        self.fetch_mark = None  # opaque tag set by the fetch mechanism


class Cache:
    """Set-associative LRU cache keyed by line index (addr // 64)."""

    def __init__(self, size_bytes: int, ways: int, line_bytes: int = LINE,
                 latency: int = 1, inclusive: bool = False):
        assert size_bytes % (ways * line_bytes) == 0
        self.n_sets = size_bytes // (ways * line_bytes)
        self.ways = ways
        self.line_bytes = line_bytes
        self.latency = latency
        self.inclusive = inclusive
        self.sets = [dict() for _ in range(self.n_sets)]  # line index -> CacheLine

    def _set(self, addr: int) -> dict:
        return self.sets[(addr // self.line_bytes) % self.n_sets]

    def lookup(self, addr: int, touch: bool = True) -> CacheLine | None:
        s = self._set(addr)
        line = addr // self.line_bytes
        entry = s.get(line)
        if entry is not None and touch:
            # dict preserves insertion order; re-insert = move to MRU
            del s[line]
            s[line] = entry
        return entry

    def insert(self, addr: int) -> tuple[int, CacheLine] | None:
        """Returns (evicted line address, its flags) when a victim falls out."""
        s = self._set(addr)
        line = addr // self.line_bytes
        if line in s:
            del s[line]
        evicted = None
        if len(s) >= self.ways:
            old_line = next(iter(s))
            evicted = (old_line * self.line_bytes, s.pop(old_line))
        s[line] = CacheLine()
        return evicted

    def invalidate(self, addr: int) -> CacheLine | None:
        s = self._set(addr)
        return s.pop(addr // self.line_bytes, None)

    def lines(self):
        for s in self.sets:
            yield from s


class RingModel:
    """Bidirectional ring; one cycle per hop, both rings."""

    def __init__(self, stops: int):
        self.stops = stops
        self.control_msgs = 0
        self.data_msgs = 0

    def distance(self, src: int, dst: int) -> int:
        d = abs(src - dst) % self.stops
        return min(d, self.stops - d)


def route(ring: RingModel, src: int, dst: int, size: str) -> int:
    """Ring traversal cycles for one message; src == dst is the local bypass."""
    assert 0 <= src < ring.stops and 0 <= dst < ring.stops
    if size == "DATA":
        ring.data_msgs += 1
    else:
        ring.control_msgs += 1
    return ring.distance(src, dst)


_REQ_ORDER = iter(range(1 << 62))


class MemRequest:
    """One outstanding line fetch; done_cycle is set once the path is known."""

    __slots__ = ("addr", "kind", "core", "issue_cycle", "demand", "origin",
                 "done_cycle", "served_by", "order", "seq", "pc",
                 "llc_probed", "llc_hit", "channel", "bank", "row",
                 "start_cycle", "issue_retired", "ra_merged")

    def __init__(self, addr, kind, core, cycle, origin):
        self.addr = addr & ~(LINE - 1)
        self.kind = kind
        self.core = core
        self.issue_cycle = cycle
        self.demand = kind in DEMAND_KINDS
        self.origin = origin
        self.done_cycle = None
        self.served_by = ""
        self.order = next(_REQ_ORDER)
        self.seq = None
        self.pc = None
        self.llc_probed = False
        self.llc_hit = False
        self.channel, self.bank, self.row = dram_map(self.addr)
        self.start_cycle = None
        self.issue_retired = 0
        self.ra_merged = False

    @property
    def done(self):
        return self.done_cycle is not None


class McQueue:
    """One channel's request queue plus its banks."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.requests: list[MemRequest] = []
        self.overflow: list[MemRequest] = []
        self.banks = [BankState() for _ in range(N_BANKS)]

    def push(self, req: MemRequest):
        if len(self.requests) < self.capacity:
            self.requests.append(req)
        else:
            self.overflow.append(req)

    def drain(self):
        while self.overflow and len(self.requests) < self.capacity:
            self.requests.append(self.overflow.pop(0))


def schedule(queue: McQueue, cycle: int) -> MemRequest | None:
    """Pick the next request to start on this channel, or None.

    Priority: row hit, then demand, then oldest. Demand requests compete
    only from each core's current batch (the 8 oldest queued demands per
    core), which keeps one core from monopolizing the channel.
    """
    batch_seen: dict[int, int] = {}
    best = None
    best_key = None
    for r in queue.requests:
        if r.demand:
            n = batch_seen.get(r.core, 0)
            batch_seen[r.core] = n + 1
            if n >= 8:
                continue
        bank = queue.banks[r.bank]
        if bank.ready_cycle > cycle:
            continue
        row_hit = bank.open_row == r.row
        if (bank.open_row is not None and not row_hit
                and bank.last_activate + TRAS > cycle):
            continue  # precharge would violate tRAS
        key = (not row_hit, not r.demand, r.order)
        if best is None or key < best_key:
            best, best_key = r, key
    return best


def request_issuable_at(queue: McQueue, r: MemRequest) -> int:
    bank = queue.banks[r.bank]
    t = bank.ready_cycle
    if bank.open_row is not None and bank.open_row != r.row:
        t = max(t, bank.last_activate + TRAS)
    return t


@dataclass
class MemConfig:
    l1_bytes: int = 32 * 1024
    l1_ways: int = 8
    l1_latency: int = 3
    llc_bytes_per_core: int = 1024 * 1024
    llc_ways: int = 8
    llc_latency: int = 18
    emc_cache_bytes: int = 4096
    emc_cache_ways: int = 4
    emc_cache_latency: int = 2
    mshr_per_core: int = 32
    mshr_emc: int = 32
    queue_total: int | None = None  # default: 64 single-core, 128 multi


class MemorySystem:
    """Everything below the cores, stepped once per simulation cycle.

    Loads return a MemRequest handle (or None on MSHR exhaustion, retry
    next cycle); callers poll req.done_cycle. Fills install into the
    caches when the step() that owns their cycle runs.
    """

    def __init__(self, n_cores: int, image: dict, stats, cfg: MemConfig | None = None,
                 command_sink=None, prefetchers=None):
        self.cfg = cfg = cfg or MemConfig()
        self.n_cores = n_cores
        self.image = image
        self.stats = stats
        self.cycle = 0
        self.command_sink = command_sink
        self.l1 = [Cache(cfg.l1_bytes, cfg.l1_ways, latency=cfg.l1_latency)
                   for _ in range(n_cores)]
        self.llc = [Cache(cfg.llc_bytes_per_core, cfg.llc_ways,
                          latency=cfg.llc_latency, inclusive=True)
                    for _ in range(n_cores)]
        self.emc_cache = Cache(cfg.emc_cache_bytes, cfg.emc_cache_ways,
                               latency=cfg.emc_cache_latency)
        self.ring = RingModel(n_cores + 1)
        self.mc_stop = n_cores
        total = cfg.queue_total or (64 if n_cores == 1 else 128)
        self.channels = [McQueue(total // N_CHANNELS) for _ in range(N_CHANNELS)]
        self.inflight: dict[int, list[MemRequest]] = {}  # line addr -> waiters
        self.mshr_core = [0] * n_cores
        self.mshr_emc = 0
        self.arrivals: list = []
        self.fills: list = []
        self.prefetchers = prefetchers or [None] * n_cores
        self.eviction_feedback: list = []  # runahead-line outcomes for the EMC

    # -- geometry -------------------------------------------------------

    def slice_of(self, addr: int) -> int:
        return (addr // LINE) % self.n_cores

    def owner_core(self, addr: int) -> int:
        return min(addr >> 40, self.n_cores - 1)

    def _link(self, a: int, b: int) -> int:
        # local slice access costs the 1-cycle bypass instead of ring hops
        if a == b:
            return 1
        return self.ring.distance(a, b)

    # -- spec probe -----------------------------------------------------

    def access(self, level: str, core: int, addr: int, kind: str = "LOAD"):
        """Synchronous probe: (hit flag, latency). LRU updated on hit."""
        if level == "L1":
            hit = self.l1[core].lookup(addr) is not None
            return hit, self.cfg.l1_latency
        s = self.slice_of(addr)
        route(self.ring, core, s, "CONTROL")
        route(self.ring, s, core, "DATA")
        hit = self.llc[s].lookup(addr) is not None
        return hit, self.cfg.llc_latency + self._link(core, s) + self._link(s, core)

    # -- load paths -----------------------------------------------------

    def core_load(self, core: int, paddr: int, kind: str = "DEMAND",
                  seq=None, pc=None, retired: int = 0) -> MemRequest | None:
        now = self.cycle
        line = paddr & ~(LINE - 1)
        # request objects are built only on paths that return one; a core
        # retrying into full MSHRs must stay cheap
        if self.l1[core].lookup(line) is not None:
            req = MemRequest(paddr, kind, core, now, "core")
            req.seq, req.pc, req.issue_retired = seq, pc, retired
            req.done_cycle = now + self.cfg.l1_latency
            req.served_by = "L1"
            if req.demand:
                # usefulness accounting for lines a fill mechanism staged
                entry = self.llc[self.slice_of(line)].lookup(line, touch=False)
                if entry is not None:
                    self._credit_touch(entry, line, demand=True)
            return req
        miss_seen = now + self.cfg.l1_latency
        waiters = self.inflight.get(line)
        if waiters is not None:
            req = MemRequest(paddr, kind, core, now, "core")
            req.seq, req.pc, req.issue_retired = seq, pc, retired
            if req.demand and waiters and waiters[0].kind == "PREFETCH":
                self.stats.pf_late[self.owner_core(line)] += 1
            elif (req.demand and waiters
                    and waiters[0].kind in ("RUNAHEAD", "EMC_RA")
                    and not waiters[0].ra_merged):
                # a demand catching an in-flight runahead fetch is a use;
                # the line will install touched, so credit it here
                head = waiters[0]
                head.ra_merged = True
                self.stats.ra_fetched += 1
                self.stats.ra_useful += 1
                self.eviction_feedback.append(("used", line, head.issue_retired))
                gap = self.stats.cores[head.core].retired - head.issue_retired
                self.stats.ra_distance_samples.append(max(0, gap))
            waiters.append(req)
            return req
        if self.mshr_core[core] >= self.cfg.mshr_per_core:
            return None
        req = MemRequest(paddr, kind, core, now, "core")
        req.seq, req.pc, req.issue_retired = seq, pc, retired
        s = self.slice_of(line)
        route(self.ring, core, s, "CONTROL")
        t_probe = miss_seen + self._link(core, s) + self.cfg.llc_latency
        entry = self.llc[s].lookup(line)
        if entry is not None:
            if entry.prefetch_fetched and req.demand:
                self._train_prefetch(core, line, pc, hit=True)
            self._credit_touch(entry, line, demand=req.demand)
            route(self.ring, s, core, "DATA")
            req.done_cycle = t_probe + self._link(s, core)
            req.served_by = "LLC"
            heapq.heappush(self.fills, (req.done_cycle, req.order, "l1", core, line))
            return req
        # LLC miss: allocate tracking and head for DRAM
        req.llc_probed = True
        self.mshr_core[core] += 1
        self.inflight[line] = [req]
        if req.demand:
            self._train_prefetch(core, line, pc, hit=False)
        route(self.ring, s, self.mc_stop, "CONTROL")
        arrival = t_probe + self._link(s, self.mc_stop)
        heapq.heappush(self.arrivals, (arrival, req.order, req))
        return req

    def emc_load(self, core: int, paddr: int, kind: str,
                 bypass: bool = False, retired: int = 0) -> MemRequest | None:
        now = self.cycle
        req = MemRequest(paddr, kind, core, now, "emc")
        req.issue_retired = retired
        line = req.addr
        if self.emc_cache.lookup(line) is not None:
            req.done_cycle = now + self.cfg.emc_cache_latency
            req.served_by = "EMC$"
            self.stats.emc_cache_hits += 1
            return req
        waiters = self.inflight.get(line)
        if waiters is not None:
            waiters.append(req)
            return req
        if self.mshr_emc >= self.cfg.mshr_emc:
            return None
        t = now + self.cfg.emc_cache_latency
        if bypass:
            self.stats.emc_bypasses += 1
            arrival = t
        else:
            s = self.slice_of(line)
            route(self.ring, self.mc_stop, s, "CONTROL")
            t += self._link(self.mc_stop, s) + self.cfg.llc_latency
            req.llc_probed = True
            entry = self.llc[s].lookup(line)
            if entry is not None:
                req.llc_hit = True
                self._credit_touch(entry, line, demand=req.demand)
                route(self.ring, s, self.mc_stop, "DATA")
                req.done_cycle = t + self._link(s, self.mc_stop)
                req.served_by = "LLC"
                return req
            route(self.ring, s, self.mc_stop, "CONTROL")
            arrival = t + self._link(s, self.mc_stop)
        self.mshr_emc += 1
        self.inflight[line] = [req]
        heapq.heappush(self.arrivals, (arrival, req.order, req))
        return req

    def prefetch_issue(self, core: int, paddr: int):
        line = paddr & ~(LINE - 1)
        if line < 0:
            return
        s = self.slice_of(line)
        if line in self.inflight or self.llc[s].lookup(line, touch=False) is not None:
            return
        req = MemRequest(line, "PREFETCH", core, self.cycle, "pf")
        self.inflight[line] = [req]
        self.stats.pf_issued[core] += 1
        route(self.ring, s, self.mc_stop, "CONTROL")
        arrival = self.cycle + self._link(s, self.mc_stop)
        heapq.heappush(self.arrivals, (arrival, req.order, req))

    # -- accounting -----------------------------------------------------

    def _credit_touch(self, entry: CacheLine, line: int, demand: bool):
        if not demand or entry.touched:
            return
        entry.touched = True
        if entry.prefetch_fetched:
            self.stats.pf_useful[self.owner_core(line)] += 1
        if entry.runahead_fetched:
            self.stats.ra_useful += 1
            self.eviction_feedback.append(("used", line, entry.fetch_mark))
            if entry.fetch_mark is not None:
                gap = self.stats.cores[self.owner_core(line)].retired - entry.fetch_mark
                self.stats.ra_distance_samples.append(max(0, gap))

    def _train_prefetch(self, core: int, line: int, pc, hit: bool):
        pf = self.prefetchers[core]
        if pf is None:
            return
        for addr in pf.train_and_issue(line, pc, hit=hit):
            self.prefetch_issue(core, addr)

    # -- clocked machinery ----------------------------------------------

    def step(self):
        now = self.cycle
        while self.arrivals and self.arrivals[0][0] <= now:
            _, _, req = heapq.heappop(self.arrivals)
            self.channels[req.channel].push(req)
        for ch_id, ch in enumerate(self.channels):
            if not ch.requests:
                continue
            r = schedule(ch, now)
            if r is None:
                continue
            bank = ch.banks[r.bank]
            lat = dram_latency(bank, r.addr, now=now, sink=self.command_sink,
                               channel=ch_id, bank_id=r.bank)
            if bank.last_kind == "hit":
                self.stats.row_hits += 1
            elif bank.last_kind == "closed":
                self.stats.row_closed += 1
            else:
                self.stats.row_conflicts += 1
            self.stats.dram_reads += 1
            r.start_cycle = now
            ch.requests.remove(r)
            ch.drain()
            heapq.heappush(self.fills, (now + lat, r.order, "fill", ch_id, r))
        while self.fills and self.fills[0][0] <= now:
            item = heapq.heappop(self.fills)
            if item[2] == "l1":
                self.l1[item[3]].insert(item[4])
            else:
                self._process_fill(item[0], item[4])
        self.cycle += 1

    def _process_fill(self, fill_at_mc: int, req: MemRequest):
        line = req.addr
        waiters = self.inflight.pop(line, [req])
        self._release_mshr(waiters[0])
        self.emc_cache.insert(line)
        entry = self._install_llc(line, waiters)
        for w in waiters:
            self._finish_waiter(w, fill_at_mc, entry)

    def _release_mshr(self, first: MemRequest):
        if first.origin == "core":
            self.mshr_core[first.core] -= 1
        elif first.origin == "emc":
            self.mshr_emc -= 1

    def _install_llc(self, line: int, waiters) -> CacheLine:
        s = self.slice_of(line)
        evicted = self.llc[s].insert(line)
        if evicted is not None:
            self._back_invalidate(*evicted)
        entry = self.llc[s].lookup(line, touch=False)
        entry.emc_resident = True
        kinds = {w.kind for w in waiters}
        if kinds & DEMAND_KINDS:
            entry.touched = True
        elif "PREFETCH" in kinds:
            entry.prefetch_fetched = True
        if ("RUNAHEAD" in kinds or "EMC_RA" in kinds) and not kinds & DEMAND_KINDS:
            entry.runahead_fetched = True
            self.stats.ra_fetched += 1
            for w in waiters:
                if w.kind in ("RUNAHEAD", "EMC_RA"):
                    entry.fetch_mark = w.issue_retired
                    break
        return entry

    def _back_invalidate(self, addr: int, flags: CacheLine):
        owner = self.owner_core(addr)
        self.l1[owner].invalidate(addr)
        self.emc_cache.invalidate(addr)
        if flags.prefetch_fetched and not flags.touched:
            self.stats.pf_evicted_untouched[owner] += 1
        if flags.runahead_fetched and not flags.touched:
            self.stats.ra_evicted_untouched += 1
            self.eviction_feedback.append(("wasted", addr, flags.fetch_mark))

    def _finish_waiter(self, w: MemRequest, fill_at_mc: int, entry: CacheLine):
        if w.done_cycle is not None:
            return
        line = w.addr
        s = self.slice_of(line)
        if w.origin == "emc":
            w.done_cycle = fill_at_mc
        elif w.origin == "pf":
            w.done_cycle = fill_at_mc + self._link(self.mc_stop, s)
        else:
            route(self.ring, self.mc_stop, s, "DATA")
            route(self.ring, s, w.core, "DATA")
            w.done_cycle = (fill_at_mc + self._link(self.mc_stop, s)
                            + self._link(s, w.core))
            self.l1[w.core].insert(line)
        w.served_by = w.served_by or "DRAM"
        self._credit_touch(entry, line, demand=w.demand)

    def next_event(self) -> int | None:
        """Earliest future cycle at which anything can happen; None if idle."""
        best = None
        if self.arrivals:
            best = self.arrivals[0][0]
        if self.fills:
            c = self.fills[0][0]
            best = c if best is None else min(best, c)
        for ch in self.channels:
            for r in ch.requests:
                c = max(request_issuable_at(ch, r), self.cycle)
                best = c if best is None else min(best, c)
        return best

    def busy(self) -> bool:
        return bool(self.arrivals or self.fills
                    or any(ch.requests or ch.overflow for ch in self.channels))

    def check_inclusion(self) -> bool:
        """Inclusive invariant: every L1 and EMC-cache line is in its slice."""
        for core in range(self.n_cores):
            for line in self.l1[core].lines():
                s = self.slice_of(line * LINE)
                if self.llc[s].lookup(line * LINE, touch=False) is None:
                    return False
        for line in self.emc_cache.lines():
            s = self.slice_of(line * LINE)
            if self.llc[s].lookup(line * LINE, touch=False) is None:
                return False
        return True
