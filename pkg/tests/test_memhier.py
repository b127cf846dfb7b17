"""Memory-system tests: DRAM bank timing against the independent command
checker, controller scheduling priority, ring routing, cache/MSHR behavior,
and end-to-end load timing frozen from hand-computed hop sums."""

import pytest

from oracles import DramChecker, run_dram_stress

from memlat.memhier import (
    BankState, Cache, LAT_CLOSED, LAT_CONFLICT, LAT_HIT, McQueue, MemConfig,
    MemRequest, MemorySystem, RingModel, dram_latency, dram_map, paddr_of,
    request_issuable_at, route, schedule,
)
from memlat.metrics import SimStats


def drain(ms, limit=20000):
    for _ in range(limit):
        if not ms.busy():
            return
        ms.step()
    raise AssertionError("memory system did not drain")


def run_until_done(ms, req, limit=5000):
    for _ in range(limit):
        if req.done:
            return req.done_cycle
        ms.step()
    raise AssertionError("request never completed")


# -- DRAM bank timing ----------------------------------------------------

def test_dram_latency_class_sequence():
    log = []
    sink = lambda *a: log.append(a)
    b = BankState()
    row1_addr = 128 * 1024  # +2048 lines: same channel/bank, next row
    assert dram_latency(b, 0, now=0, sink=sink) == LAT_CLOSED == 104
    assert b.ready_cycle == 104
    assert dram_latency(b, 0, now=104, sink=sink) == LAT_HIT == 60
    assert dram_latency(b, row1_addr, now=164, sink=sink) == LAT_CONFLICT == 148
    assert b.ready_cycle == 312
    assert dram_latency(b, row1_addr, now=312, sink=sink) == LAT_HIT
    assert log == [
        (0, 0, 0, "ACT", 0), (44, 0, 0, "RD", 0),
        (104, 0, 0, "RD", 0),
        (164, 0, 0, "PRE", -1), (208, 0, 0, "ACT", 1), (252, 0, 0, "RD", 1),
        (312, 0, 0, "RD", 1),
    ]
    checker = DramChecker()
    for cmd in log:
        checker(*cmd)
    assert not checker.violations


def test_dram_latency_requires_ready_bank():
    b = BankState()
    b.ready_cycle = 10
    with pytest.raises(AssertionError):
        dram_latency(b, 0, now=5)


def test_dram_latency_asserts_tras_floor():
    b = BankState()
    b.open_row = 5
    b.last_activate = 60
    with pytest.raises(AssertionError):
        dram_latency(b, 0, now=100)  # conflict precharge at 100 < 60 + 88


def test_dram_map_geometry():
    assert dram_map(0) == (0, 0, 0)
    assert dram_map(64) == (1, 0, 0)       # lines interleave channels first
    assert dram_map(128) == (0, 1, 0)      # then banks
    assert dram_map(128 * 1024) == (0, 0, 1)  # 8 KB x 16 banks per row layer
    for paddr in (0, 64, 4096, 1 << 30, paddr_of(3, 0x1234040)):
        ch, bank, row = dram_map(paddr)
        assert 0 <= ch < 2 and 0 <= bank < 8 and row >= 0


# -- controller scheduling -----------------------------------------------

def _req(addr, kind, core):
    return MemRequest(addr, kind, core, 0, "core")


def test_schedule_row_hit_beats_demand():
    q = McQueue(32)
    q.banks[0].open_row = 0
    q.banks[0].last_activate = -1000
    demand = _req(128 * 1024, "DEMAND", 0)   # row 1: conflict
    pf = _req(0, "PREFETCH", 1)              # row 0: hit
    q.push(demand)
    q.push(pf)
    assert schedule(q, 0) is pf


def test_schedule_demand_beats_prefetch_then_oldest():
    q = McQueue(32)
    pf = _req(0, "PREFETCH", 0)
    d1 = _req(128 * 1024, "DEMAND", 0)
    d2 = _req(256 * 1024, "DEMAND", 1)
    for r in (pf, d1, d2):
        q.push(r)
    assert schedule(q, 0) is d1  # closed bank for all: demand first, then older


def test_schedule_empty_and_bank_busy():
    q = McQueue(32)
    assert schedule(q, 0) is None
    r = _req(0, "DEMAND", 0)
    q.push(r)
    q.banks[0].ready_cycle = 50
    assert schedule(q, 10) is None
    assert request_issuable_at(q, r) == 50
    assert schedule(q, 50) is r


def test_schedule_demand_batch_cap():
    q = McQueue(32)
    blocked = [_req(128 + i * 1024 * 1024, "DEMAND", 0) for i in range(8)]
    ninth = _req(0, "DEMAND", 0)
    other = _req(2048, "DEMAND", 1)  # bank 0 too, younger than ninth
    for r in blocked + [ninth, other]:
        assert dram_map(r.addr)[0] == 0
        q.push(r)
    q.banks[1].ready_cycle = 10_000  # the 8 oldest core-0 demands all stuck
    assert all(r.bank == 1 for r in blocked) and ninth.bank == 0
    assert schedule(q, 0) is other   # ninth is outside core 0's batch
    q.requests.remove(blocked[0])
    assert schedule(q, 0) is ninth   # now inside the batch and oldest


# -- ring ------------------------------------------------------------------

def test_route_distances_and_counters():
    ring = RingModel(5)
    assert route(ring, 0, 3, "CONTROL") == 2  # shorter direction
    assert route(ring, 0, 1, "CONTROL") == 1
    assert route(ring, 2, 2, "CONTROL") == 0  # local bypass
    assert route(ring, 4, 0, "DATA") == 1
    assert ring.control_msgs == 3 and ring.data_msgs == 1


# -- cache structure -------------------------------------------------------

def test_cache_lru_and_invalidate():
    c = Cache(512, 8)  # one set, 8 ways
    for i in range(8):
        assert c.insert(i * 64) is None
    c.lookup(0)  # touch line 0 to MRU
    ev = c.insert(8 * 64)
    assert ev is not None and ev[0] == 64  # line 1 is now LRU
    assert c.lookup(0, touch=False) is not None
    assert c.invalidate(0) is not None
    assert c.lookup(0, touch=False) is None


# -- memory system end to end ----------------------------------------------

def test_access_probe():
    ms = MemorySystem(1, {}, SimStats(1))
    assert ms.access("L1", 0, 0x40) == (False, 3)
    ms.l1[0].insert(0x40)
    assert ms.access("L1", 0, 0x40) == (True, 3)
    ms.llc[0].insert(0x80)
    # 18-cycle slice + 1-cycle local bypass each way
    assert ms.access("LLC", 0, 0x80) == (True, 20)


def test_core_load_timing_single_core():
    ms = MemorySystem(1, {}, SimStats(1))
    req = ms.core_load(0, 0x40, seq=1, pc=0x100)
    done = run_until_done(ms, req)
    # 3 (L1 miss) + 1 (bypass to slice) + 18 (slice) + 1 (hop to MC)
    # + 104 (closed bank) + 1 (hop back) + 1 (bypass to core)
    assert done == 3 + 1 + 18 + 1 + 104 + 1 + 1 == 129
    assert req.served_by == "DRAM" and req.llc_probed
    assert ms.stats.dram_reads == 1 and ms.stats.row_closed == 1
    again = ms.core_load(0, 0x40)
    assert again.served_by == "L1" and again.done_cycle == ms.cycle + 3
    assert ms.check_inclusion()


def test_core_load_timing_four_cores():
    ms = MemorySystem(4, {}, SimStats(4))
    paddr = paddr_of(3, 0)
    assert ms.slice_of(paddr) == 0 and ms.owner_core(paddr) == 3
    req = ms.core_load(3, paddr)
    done = run_until_done(ms, req)
    # 3 + 2 hops (core 3 to slice 0 on a 5-stop ring) + 18 + 1 hop to MC
    # + 104 + 1 hop back + 2 hops to core
    assert done == 3 + 2 + 18 + 1 + 104 + 1 + 2 == 131


def test_llc_hit_after_fill():
    ms = MemorySystem(1, {}, SimStats(1))
    run_until_done(ms, ms.core_load(0, 0x40))
    ms.l1[0].invalidate(0x40)
    start = ms.cycle
    req = ms.core_load(0, 0x40)
    assert req.served_by == "LLC"
    assert req.done_cycle == start + 3 + 1 + 18 + 1  # probe there, data back


def test_mshr_merge_one_dram_read():
    ms = MemorySystem(1, {}, SimStats(1))
    r1 = ms.core_load(0, 0x1040, seq=1)
    r2 = ms.core_load(0, 0x1040, seq=2)
    drain(ms)
    assert r1.done and r2.done
    assert r1.done_cycle == r2.done_cycle
    assert ms.stats.dram_reads == 1


def test_mshr_exhaustion_returns_none():
    ms = MemorySystem(1, {}, SimStats(1))
    reqs = [ms.core_load(0, 0x100000 + i * 64) for i in range(32)]
    assert all(r is not None for r in reqs)
    assert ms.core_load(0, 0x900000) is None
    drain(ms)
    assert ms.core_load(0, 0x900000) is not None


def test_distinct_lines_distinct_reads_and_inclusion():
    ms = MemorySystem(2, {}, SimStats(2))
    for core in range(2):
        for i in range(20):
            ms.core_load(core, paddr_of(core, i * 64))
    drain(ms)
    assert ms.stats.dram_reads == 40  # conservation: one fill per miss
    assert ms.check_inclusion()


def test_inclusive_eviction_back_invalidates_l1():
    cfg = MemConfig(llc_bytes_per_core=512)  # one 8-way set
    ms = MemorySystem(1, {}, SimStats(1), cfg)
    for i in range(8):
        run_until_done(ms, ms.core_load(0, i * 64))
    assert ms.l1[0].lookup(0, touch=False) is not None
    run_until_done(ms, ms.core_load(0, 8 * 64))
    assert ms.llc[0].lookup(0, touch=False) is None   # line 0 was LRU
    assert ms.l1[0].lookup(0, touch=False) is None    # back-invalidated
    assert ms.emc_cache.lookup(0, touch=False) is None
    assert ms.check_inclusion()


def test_prefetch_fill_flags_and_usefulness():
    ms = MemorySystem(1, {}, SimStats(1))
    ms.prefetch_issue(0, 0x2000)
    drain(ms)
    entry = ms.llc[0].lookup(0x2000, touch=False)
    assert entry.prefetch_fetched and not entry.touched
    assert ms.stats.pf_issued[0] == 1 and ms.stats.pf_useful[0] == 0
    req = ms.core_load(0, 0x2000)
    assert req.served_by == "LLC"
    assert ms.stats.pf_useful[0] == 1 and entry.touched


def test_late_prefetch_merge():
    ms = MemorySystem(1, {}, SimStats(1))
    ms.prefetch_issue(0, 0x3000)
    req = ms.core_load(0, 0x3000)  # demand catches the in-flight prefetch
    drain(ms)
    assert req.done
    assert ms.stats.pf_late[0] == 1
    assert ms.stats.dram_reads == 1


def test_runahead_fill_use_and_waste_feedback():
    cfg = MemConfig(llc_bytes_per_core=512)
    ms = MemorySystem(1, {}, SimStats(1), cfg)
    for i in range(8):
        run_until_done(ms, ms.core_load(0, i * 64, kind="RUNAHEAD",
                                        retired=100 + i))
    assert ms.stats.ra_fetched == 8 and ms.stats.ra_useful == 0
    req = ms.core_load(0, 7 * 64)  # demand touches the youngest runahead line
    assert req.served_by == "L1"   # runahead fill staged L1 too
    assert ms.stats.ra_useful == 1
    assert ("used", 7 * 64, 107) in ms.eviction_feedback
    run_until_done(ms, ms.core_load(0, 8 * 64))  # evicts untouched line 0
    assert ms.stats.ra_evicted_untouched == 1
    assert ("wasted", 0, 100) in ms.eviction_feedback


def test_emc_load_paths():
    ms = MemorySystem(1, {}, SimStats(1))
    req = ms.emc_load(0, 0x40, "EMC_DEP", bypass=True)
    done = run_until_done(ms, req)
    assert done == 2 + 104  # EMC-cache check, straight to DRAM, done at MC
    assert ms.stats.emc_bypasses == 1
    hit = ms.emc_load(0, 0x40, "EMC_DEP")  # fill also landed in the EMC cache
    assert hit.served_by == "EMC$" and hit.done_cycle == ms.cycle + 2
    assert ms.stats.emc_cache_hits == 1

    ms2 = MemorySystem(1, {}, SimStats(1))
    req2 = ms2.emc_load(0, 0x40, "EMC_DEP")
    done2 = run_until_done(ms2, req2)
    # 2 + 1 hop to slice + 18 (probe misses) + 1 hop back to MC + 104
    assert done2 == 2 + 1 + 18 + 1 + 104 == 126
    assert req2.llc_probed and not req2.llc_hit

    run_until_done(ms2, ms2.core_load(0, 0x2040))
    ms2.emc_cache.invalidate(0x2040)
    start = ms2.cycle
    req3 = ms2.emc_load(0, 0x2040, "EMC_DEP")
    assert req3.llc_hit and req3.served_by == "LLC"
    assert req3.done_cycle == start + 2 + 1 + 18 + 1


def test_next_event_fast_forward():
    ms = MemorySystem(1, {}, SimStats(1))
    ms.core_load(0, 0x40)
    assert ms.next_event() == 23  # MC arrival after probe and hops
    while ms.cycle < 24:
        ms.step()
    assert ms.next_event() == 127  # the pending fill
    assert ms.busy()
    drain(ms)
    assert ms.next_event() is None


# -- stress against the independent checker ---------------------------------

def test_dram_stress_smoke_checker_clean():
    checker = DramChecker()
    counts, end_cycle = run_dram_stress(20_000, seed=7, sink=checker)
    assert not checker.violations
    assert sum(counts.values()) == 20_000
    assert all(counts[k] > 0 for k in (LAT_HIT, LAT_CLOSED, LAT_CONFLICT))
    # every hit is one command, closed two, conflict three
    assert checker.commands == (counts[LAT_HIT] + 2 * counts[LAT_CLOSED]
                                + 3 * counts[LAT_CONFLICT])
    assert end_cycle > 0
