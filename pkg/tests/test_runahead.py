"""Runahead controller tests: buffer loop dispatch, the hybrid chain policy,
per-interval accounting, and the interval CSV surface."""

import csv
import io

import pytest

from memlat import runahead as ra
from memlat.chains import ChainCache
from memlat.core import NORMAL, RUNAHEAD_BUFFER, RUNAHEAD_TRADITIONAL, RS_SIZE
from memlat.trace import MicroOp, gen_pointer_chase

from test_core import TB, cache_has_line, digest_of, drive, mk


def run_to_stall(c, ms, limit=3000):
    """Advance until the first full-window stall event; head entry returned."""
    for _ in range(limit):
        evs = c.step()
        ms.step()
        for ev in evs:
            if ev[0] == "FullWindowStall":
                return ev[1]
    raise AssertionError("no full-window stall")


def stalled_core(extra=None, image=None):
    # cold blocker load, then enough independent fillers to fill the window
    tb = TB()
    tb.op("MOVE", dst=3, imm=0xB000)
    tb.op("LOAD", dst=4, srcs=(3,))
    tb.fillers(280, reg=11)
    if extra:
        extra(tb)
    c, ms, stats = mk(tb.trace(image=image))
    head = run_to_stall(c, ms)
    return c, ms, stats, head


def drive_hybrid(c, ms, cache, limit=120000):
    """Full-trace driver: hybrid-select at each stall, generation latency
    delays entry, buffer intervals loop their chain. Returns interval records
    of (selection, iterations, (misses, uops, cycles))."""
    records = []
    pending = None
    buf = None
    for _ in range(limit):
        evs = c.step()
        for ev in evs:
            if (ev[0] == "FullWindowStall" and c.mode == NORMAL
                    and pending is None and c.runahead_allowed(ev[1])):
                window = [e.op for e in c.rob]
                sel = ra.hybrid_select(window, ev[1].op.pc, cache)
                pending = (sel, c.cycle + sel.latency)
        if pending is not None and c.mode == NORMAL and c.cycle >= pending[1]:
            sel = pending[0]
            if c.full_window_stall() is not None:
                if sel.action == ra.USE_BUFFER:
                    buf = ra.begin_buffer(c, sel.chain)
                else:
                    c.enter_runahead(RUNAHEAD_TRADITIONAL)
                records.append([sel, 0, None])
            pending = None
        if c.mode != NORMAL and c.runahead_done():
            if buf is not None:
                records[-1][1] = buf.iteration
            c.exit_runahead()
            records[-1][2] = c.last_interval
            buf = None
        elif c.mode == RUNAHEAD_BUFFER:
            ra.runahead_buffer_step(buf, c)
        ms.step()
        if c.done:
            return records
    raise AssertionError("trace did not complete")


# -- buffer loop dispatch ----------------------------------------------------

def test_buffer_dispatches_four_wide_and_wraps():
    c, ms, stats, _ = stalled_core()
    chain = [MicroOp(0, 0x7000 + 8 * i, "IADD", 12 + i, (12 + i,), 1, None, None)
             for i in range(4)]
    buf = ra.begin_buffer(c, chain)
    events = []
    for _ in range(3):
        c.step()
        events += ra.runahead_buffer_step(buf, c)
        ms.step()
    assert c.ra_uops == 12
    assert buf.iteration == 3
    assert buf.cursor == 0
    assert events.count(("BufferIteration", 1)) == 1
    assert [ev[1] for ev in events] == [1, 2, 3]


def test_buffer_cursor_invariant_on_odd_chain():
    c, ms, _, _ = stalled_core()
    chain = [MicroOp(0, 0x7000 + 8 * i, "IADD", 12, (12,), 1, None, None)
             for i in range(3)]
    buf = ra.begin_buffer(c, chain)
    for _ in range(7):
        c.step()
        ra.runahead_buffer_step(buf, c)
        ms.step()
        assert 0 <= buf.cursor < len(buf.chain)
    assert c.ra_uops == 28
    assert buf.iteration == 10  # ceil(28 / 3) iterations touched


def test_buffer_dispatch_stops_when_reservation_stations_fill():
    c, ms, _, head = stalled_core()
    rs0 = c.rs_count
    # every chain uop sources the blocked head's destination, so nothing
    # issues and the stations fill at dispatch width
    chain = [MicroOp(0, 0x7100, "IADD", 12, (head.op.dst,), 1, None, None)]
    buf = ra.begin_buffer(c, chain)
    for _ in range(40):
        c.step()
        ra.runahead_buffer_step(buf, c)
        ms.step()
    assert c.ra_uops == RS_SIZE - rs0
    assert c.rs_count == RS_SIZE
    before = c.ra_uops
    c.step()
    assert ra.runahead_buffer_step(buf, c) == []
    assert c.ra_uops == before


def test_buffer_requires_buffer_mode():
    c, ms, _, _ = stalled_core()
    buf = ra.RunaheadBuffer(chain=(MicroOp(0, 0x7000, "IADD", 12, (12,), 1,
                                           None, None),))
    with pytest.raises(AssertionError):
        ra.runahead_buffer_step(buf, c)  # still NORMAL, never entered


def test_one_runahead_mode_at_a_time():
    c, ms, _, _ = stalled_core()
    c.enter_runahead(RUNAHEAD_TRADITIONAL)
    with pytest.raises(AssertionError):
        ra.begin_buffer(c, (MicroOp(0, 0x7000, "IADD", 12, (12,), 1,
                                    None, None),))


# -- hybrid selection --------------------------------------------------------

def _window_load(pc, srcs=(2,), seq=0):
    return MicroOp(seq, pc, "LOAD", 1, srcs, 0, 0, None)


def test_hybrid_cache_hit_uses_stored_chain_with_no_latency():
    cache = ChainCache()
    stored = (MicroOp(0, 0x9000, "LOAD", 1, (2,), 0, 0, None),)
    cache.put(0x9000, stored)
    # window would reject (no second instance); the hit must short-circuit
    sel = ra.hybrid_select([_window_load(0x9000)], 0x9000, cache)
    assert sel.action == ra.USE_BUFFER
    assert sel.chain == stored
    assert sel.latency == 0


def test_hybrid_without_matching_pc_falls_back_to_traditional():
    window = [_window_load(0x9000)]
    window += [MicroOp(i, 0x100 + 8 * i, "IADD", 3, (3,), 1, None, None)
               for i in range(1, 20)]
    sel = ra.hybrid_select(window, 0x9000, ChainCache())
    assert sel.action == ra.USE_TRADITIONAL
    assert sel.chain is None


def _serial_chain_window(depth):
    # head stalled load, `depth` serial producers of r2, then the repeat PC
    window = [_window_load(0x9000, seq=0)]
    for i in range(depth):
        window.append(MicroOp(1 + i, 0x200 + 8 * i, "IADD", 2, (2,), 1,
                              None, None))
    window.append(_window_load(0x9000, seq=1 + depth))
    return window


def test_hybrid_rejects_chain_over_capacity():
    sel = ra.hybrid_select(_serial_chain_window(40), 0x9000, ChainCache())
    assert sel.action == ra.USE_TRADITIONAL


def test_hybrid_accepts_chain_at_capacity_and_caches_it():
    cache = ChainCache()
    sel = ra.hybrid_select(_serial_chain_window(31), 0x9000, cache)
    assert sel.action == ra.USE_BUFFER
    assert len(sel.chain) == ra.BUFFER_CAPACITY
    assert sel.latency >= 1
    again = ra.hybrid_select(_serial_chain_window(31), 0x9000, cache)
    assert again.action == ra.USE_BUFFER
    assert again.latency == 0
    assert again.chain == sel.chain


# -- interval accounting -----------------------------------------------------

def test_interval_with_nothing_to_dispatch():
    # trace ends exactly when the window fills: runahead has nothing to run
    tb = TB()
    tb.op("MOVE", dst=3, imm=0xB000)
    tb.op("LOAD", dst=4, srcs=(3,))
    tb.fillers(255, reg=11)
    c, ms, stats = mk(tb.trace())
    drive(c, ms, runahead=True)
    misses, uops, cycles = ra.interval_stats(c)
    assert (misses, uops) == (0, 0)
    assert cycles > 0
    assert stats.intervals[0][1] == "traditional"


def test_interval_stats_requires_closed_interval():
    tb = TB()
    tb.op("IADD", dst=1, srcs=(1,), imm=1)
    c, ms, _ = mk(tb.trace())
    with pytest.raises(AssertionError):
        ra.interval_stats(c)


def test_buffer_loads_that_hit_in_cache_add_no_misses():
    warm = 0x2000

    def extra(tb):
        tb.op("LOAD", dst=5, srcs=(2,))  # placed before the blocker below

    tb = TB()
    tb.op("MOVE", dst=2, imm=warm)
    tb.op("LOAD", dst=5, srcs=(2,))
    tb.fillers(12, reg=11)               # let the warm line land in the L1
    tb.op("MOVE", dst=3, imm=0xB000)
    tb.op("LOAD", dst=4, srcs=(3,))
    tb.fillers(280, reg=11)
    c, ms, stats = mk(tb.trace(image={warm: 77}))
    run_to_stall(c, ms)
    chain = (MicroOp(0, 0x7000, "MOVE", 11, (), warm, None, None),
             MicroOp(1, 0x7008, "LOAD", 12, (11,), 0, 0, None))
    buf = ra.begin_buffer(c, chain)
    while not c.runahead_done():
        c.step()
        ra.runahead_buffer_step(buf, c)
        ms.step()
    c.exit_runahead()
    misses, uops, cycles = ra.interval_stats(c)
    assert misses == 0
    assert uops > 8
    assert buf.iteration >= 2
    assert stats.intervals[-1][1] == "buffer"


def test_buffer_chase_generates_fresh_miss_per_iteration():
    # out-of-LLC footprint; the extracted chain advances the address by ALU
    # ops, so every chain iteration past the pre-stall window touches a line
    # nothing has fetched yet
    trace = gen_pointer_chase(360, 1 << 23, 26, seed=3)
    base_c, base_ms, _ = mk(trace)
    drive(base_c, base_ms)

    c, ms, stats = mk(trace)
    fetched = []
    inner = ms.core_load

    def spy(core, paddr, kind="DEMAND", **kw):
        req = inner(core, paddr, kind=kind, **kw)
        if req is not None and kind == "RUNAHEAD" and req.llc_probed:
            fetched.append(req.addr)
        return req

    ms.core_load = spy
    cache = ChainCache()
    records = drive_hybrid(c, ms, cache)

    done = [r for r in records if r[2] is not None]
    assert done and all(r[0].action == ra.USE_BUFFER for r in done)
    total_misses = sum(r[2][0] for r in done)
    assert total_misses >= 2
    assert len(fetched) == total_misses
    assert len(set(fetched)) == len(fetched)  # one fresh line per iteration
    for sel, iters, (misses, uops, cycles) in done:
        assert misses <= iters
        assert uops <= 4 * cycles
    # transparency holds through buffer intervals
    assert digest_of(c, ms) == digest_of(base_c, base_ms)
    assert c.retired == base_c.retired == len(trace.ops)


def test_buffer_beats_traditional_on_uops_per_miss():
    # identical trace and stall; the policy modes differ. The loop body is
    # wider than the chain, so traditional runahead spends more uops for
    # each miss it generates.
    trace = gen_pointer_chase(360, 1 << 23, 26, seed=7)

    t_c, t_ms, t_stats = mk(trace)
    drive(t_c, t_ms, runahead=True)
    t_rows = [r for r in t_stats.intervals if r[4] > 0]
    assert t_rows, "traditional runahead generated no misses"

    b_c, b_ms, b_stats = mk(trace)
    drive_hybrid(b_c, b_ms, ChainCache())
    b_rows = [r for r in b_stats.intervals if r[4] > 0]
    assert b_rows, "buffer runahead generated no misses"

    t_upm = sum(r[3] for r in t_rows) / sum(r[4] for r in t_rows)
    b_upm = sum(r[3] for r in b_rows) / sum(r[4] for r in b_rows)
    assert b_upm < t_upm
    assert digest_of(b_c, b_ms) == digest_of(t_c, t_ms)


# -- CSV surface --------------------------------------------------------------

def test_interval_csv_round_trip(tmp_path):
    trace = gen_pointer_chase(120, 1 << 23, 26, seed=5)
    c, ms, stats = mk(trace)
    drive_hybrid(c, ms, ChainCache())
    assert stats.intervals

    text = ra.intervals_csv(stats)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == list(ra.INTERVAL_FIELDS)
    assert len(rows) == 1 + len(stats.intervals)
    for row, iv in zip(rows[1:], stats.intervals):
        assert row == [str(x) for x in iv]
    assert {row[1] for row in rows[1:]} <= {"buffer", "traditional"}

    path = tmp_path / "intervals.csv"
    ra.write_intervals_csv(stats, path)
    assert path.read_text() == text
    sink = io.StringIO()
    ra.write_intervals_csv(stats, sink)
    assert sink.getvalue() == text
