"""Cycle-level out-of-order core: 4-wide dispatch and retire, 256-entry ROB,
register renaming onto an unbounded physical file, reservation-station gate,
load/store queue with exact-word forwarding, full-window stall detection,
dependence-lineage tagging for miss classification, and the checkpoint
machinery for both runahead flavors.

The model is value-level: loads read a flat memory image so dependent
addresses are real data. Stores commit to the image at retirement only;
runahead stores live in a small store-forwarding cache that is flushed on
exit, which keeps architectural state identical whether runahead is on.
"""

from __future__ import annotations

import heapq
from collections import deque

from .chains import DependencePredictor
from .memhier import paddr_of
from .metrics import eff_latency_record
from .trace import effective_addr, exec_value

ROB_SIZE = 256
RS_SIZE = 92
WIDTH = 4
LOADS_PER_CYCLE = 2
POISON_WINDOW = 16     # taint propagation span, in dispatched uops
RA_RECENCY = 250       # runahead-enhancement recency bound, retired uops

FU_LAT = {"IADD": 1, "LOGIC": 1, "SHIFT": 1, "MOVE": 1, "SIGNEXT": 1,
          "BRANCH": 1, "OTHER": 1, "STORE": 1, "IMUL": 3, "FP": 4}

NORMAL = "NORMAL"
RUNAHEAD_TRADITIONAL = "RUNAHEAD_TRADITIONAL"
RUNAHEAD_BUFFER = "RUNAHEAD_BUFFER"

INDEPENDENT = "INDEPENDENT"
DEPENDENT = "DEPENDENT"


class PhysReg:
    __slots__ = ("value", "ready", "poison", "taint")

    def __init__(self, value=0, ready=False):
        self.value = value
        self.ready = ready
        self.poison = False
        self.taint = None  # seq of the LLC miss this value derives from


class RobEntry:
    __slots__ = ("op", "seq", "src_cprs", "dst_cpr", "pending", "completed",
                 "poisoned", "is_llc_miss", "issue_cycle", "complete_cycle",
                 "mem_req", "dependent", "addr", "value", "forwarded",
                 "is_buffer", "emc_value", "emc_cycle")

    def __init__(self, op, seq, src_cprs, dst_cpr, is_buffer=False):
        self.op = op
        self.seq = seq
        self.src_cprs = src_cprs
        self.dst_cpr = dst_cpr
        self.pending = 0
        self.completed = False
        self.poisoned = False
        self.is_llc_miss = False
        self.issue_cycle = None
        self.complete_cycle = None
        self.mem_req = None
        self.dependent = False
        self.addr = None
        self.value = None
        self.forwarded = False
        self.is_buffer = is_buffer
        self.emc_value = None  # dependent-miss value delivered by the EMC
        self.emc_cycle = None


class RunaheadCache:
    """512-byte 4-way store-forwarding cache, 8-byte lines, runahead only."""

    N_SETS = 16
    WAYS = 4

    def __init__(self):
        self.sets = [dict() for _ in range(self.N_SETS)]

    def read(self, addr):
        word = addr >> 3
        s = self.sets[word % self.N_SETS]
        if word in s:
            v = s.pop(word)
            s[word] = v
            return v
        return None

    def write(self, addr, value):
        word = addr >> 3
        s = self.sets[word % self.N_SETS]
        if word in s:
            del s[word]
        elif len(s) >= self.WAYS:
            s.pop(next(iter(s)))
        s[word] = value

    def flush(self):
        for s in self.sets:
            s.clear()


class Checkpoint:
    __slots__ = ("arch_values", "cursor", "retired")

    def __init__(self, arch_values, cursor, retired):
        self.arch_values = arch_values
        self.cursor = cursor
        self.retired = retired


class Core:
    def __init__(self, core_id, trace, mem, stats, enhancements=False):
        self.id = core_id
        self.trace = trace
        self.ops = trace.ops
        self.mem = mem
        self.image = mem.image
        self.stats = stats
        self.cs = stats.cores[core_id]
        self.enhancements = enhancements

        self.cycle = 0
        self.cursor = 0
        self.retired = 0
        self.rob: deque[RobEntry] = deque()
        self.prf: dict[int, PhysReg] = {}
        self._next_cpr = 0
        self.rat: dict[int, int] = {}
        self.arch_values = {r: 0 for r in range(trace.arch_reg_count)}
        for r in range(trace.arch_reg_count):
            self.rat[r] = self._fresh_cpr(0, ready=True)
        self.waiters: dict[int, list[RobEntry]] = {}
        self.ready: list = []        # heap of (seq, entry)
        self.completions: list = []  # heap of (cycle, seq, entry)
        self.waiting_mem: list[RobEntry] = []
        self.lsq: deque[RobEntry] = deque()
        self.lsq_stores = 0          # store entries in lsq; gates alias scans
        self.rs_count = 0

        self.mode = NORMAL
        self.checkpoint: Checkpoint | None = None
        self.rc = RunaheadCache()
        self.blocking_req = None
        self.last_reach = -1
        self.ra_enter_cycle = 0
        self.ra_uops = 0
        self.ra_misses = 0
        self.last_interval = None
        self._buffer_seq = 1 << 40  # synthetic seqs for buffer uops

        self._frozen: list = []
        self.dep_predictor = DependencePredictor()
        self.stall_log: list[tuple] = []
        self.llc_miss_log: list[tuple] = []
        self._stall_episode = False
        self.done = False
        self._done_emitted = False
        self.on_demand_miss = None  # EMC hook, set by the simulation driver

    # -- renaming ---------------------------------------------------------

    def _fresh_cpr(self, value=0, ready=False):
        c = self._next_cpr
        self._next_cpr += 1
        self.prf[c] = PhysReg(value, ready)
        return c

    def reg_view(self):
        """Speculative per-register view: arch reg -> (ready, value)."""
        out = {}
        for r, c in self.rat.items():
            p = self.prf[c]
            out[r] = (p.ready and not p.poison, p.value)
        return out

    def rob_ops(self):
        return [e.op for e in self.rob]

    # -- main clock -------------------------------------------------------

    def step(self, memory=None):
        events = []
        now = self.cycle
        self._complete_due(now)
        self._poll_memory(now)
        self._retire(now)
        self._detect_stall(now, events)
        self._issue(now)
        if self.mode != RUNAHEAD_BUFFER:
            self._dispatch(now)
        if (not self._done_emitted and self.mode == NORMAL
                and self.cursor >= len(self.ops) and not self.rob):
            self.done = True
            self._done_emitted = True
            events.append(("Done",))
        self.cycle += 1
        self.cs.cycles = self.cycle
        return events

    # -- completion -------------------------------------------------------

    def _complete_due(self, now):
        while self.completions and self.completions[0][0] <= now:
            _, _, e = heapq.heappop(self.completions)
            self._finish(e, now)

    def _poll_memory(self, now):
        still = []
        for e in self.waiting_mem:
            req = e.mem_req
            if e.issue_cycle + self.mem.cfg.l1_latency > now:
                # the local L1 probe bounds how fast any load can finish,
                # even one merged onto a line fetch that is about to land
                still.append(e)
                continue
            if e.emc_value is not None and e.emc_cycle <= now:
                self._finish_load(e, now, e.emc_value, via_emc=True)
            elif req.done and req.done_cycle <= now:
                raw = self.image.get(paddr_of(self.id, e.addr) & ~7, 0)
                self._finish_load(e, now, raw)
            else:
                still.append(e)
        self.waiting_mem = still

    def _finish_load(self, e, now, raw, via_emc=False):
        value = exec_value(e.op, 0, 0, loaded=raw)
        e.value = value
        taint = e.seq if e.is_llc_miss else self._propagated_taint(e)
        self._write_dst(e, value, taint=taint)
        e.completed = True
        e.complete_cycle = now
        if (not e.is_buffer and not e.forwarded and e.mem_req is not None
                and e.mem_req.kind == "DEMAND"
                and e.mem_req.served_by != "L1"):
            cls = "demand"
            if via_emc:
                cls = "dep_emc"
            elif e.dependent:
                cls = "dep_core"
            eff_latency_record(self.stats, self.id,
                               e.issue_cycle + self.mem.cfg.l1_latency, now,
                               cls=cls)

    def _finish(self, e, now):
        e.completed = True
        e.complete_cycle = now
        if e.poisoned:
            self._write_dst(e, 0, poison=True)
            return
        if e.op.is_load:
            assert e.forwarded, "memory loads complete through polling"
        self._write_dst(e, e.value, taint=self._propagated_taint(e))

    def _write_dst(self, e, value, poison=False, taint=None):
        if e.dst_cpr is None:
            return
        p = self.prf[e.dst_cpr]
        p.value = value if value is not None else 0
        p.ready = True
        p.poison = poison
        p.taint = taint
        for w in self.waiters.pop(e.dst_cpr, ()):
            w.pending -= 1
            if w.pending == 0:
                heapq.heappush(self.ready, (w.seq, w))

    def _propagated_taint(self, e):
        best = None
        for c in e.src_cprs:
            t = self.prf[c].taint
            if t is not None and e.seq - t <= POISON_WINDOW:
                best = t if best is None else max(best, t)
        return best

    def complete_from_emc(self, seq, value, cycle):
        """Dependent-miss value delivered by the memory controller. Rejected
        when an older co-resident store aliases the load's word."""
        for e in self.rob:
            if e.seq != seq:
                continue
            if e.completed or e.addr is None or e.mem_req is None:
                return False
            if self.lsq_stores:
                for s in self.lsq:
                    if s.seq >= e.seq:
                        break
                    if s.op.is_store and (s.addr is None
                                          or (s.addr & ~7) == (e.addr & ~7)):
                        return False
            e.emc_value = value
            e.emc_cycle = max(cycle, self.cycle)
            return True
        return False

    # -- retirement -------------------------------------------------------

    def _retire(self, now):
        if self.mode == RUNAHEAD_BUFFER:
            return
        n = 0
        while self.rob and n < WIDTH:
            e = self.rob[0]
            if self.mode == NORMAL:
                if not e.completed:
                    break
                self.rob.popleft()
                self._commit(e)
            else:
                if e.completed or e.poisoned:
                    self.rob.popleft()
                elif (e.op.is_load and e.mem_req is not None
                      and not e.mem_req.done):
                    # runahead never waits on a miss: poison and move on
                    e.poisoned = True
                    self._write_dst(e, 0, poison=True)
                    if e in self.waiting_mem:
                        self.waiting_mem.remove(e)
                    self.rob.popleft()
                else:
                    break
            n += 1

    def _commit(self, e):
        op = e.op
        if op.is_store:
            self.image[paddr_of(self.id, e.addr) & ~7] = e.value
        if op.dst is not None:
            self.arch_values[op.dst] = self.prf[e.dst_cpr].value
        if self.lsq and self.lsq[0] is e:
            self.lsq.popleft()
            if e.op.is_store:
                self.lsq_stores -= 1
        self.retired += 1
        self.cs.retired = self.retired
        if e.is_llc_miss:
            self.dep_predictor.train(op.pc, e.dependent)
            if e.dependent:
                self.cs.dependent_misses += 1

    # -- stall detection --------------------------------------------------

    def full_window_stall(self):
        if len(self.rob) < ROB_SIZE:
            return None
        head = self.rob[0]
        if (head.op.is_load and not head.completed and head.mem_req is not None
                and head.is_llc_miss and not head.poisoned):
            return head
        return None

    def _detect_stall(self, now, events):
        if self.mode != NORMAL:
            return
        head = self.full_window_stall()
        if head is None:
            self._stall_episode = False
            return
        self.cs.stall_cycles += 1
        if not self._stall_episode:
            self._stall_episode = True
            self.stall_log.append((now, head.seq, head.op.pc,
                                   bool(head.dependent)))
            events.append(("FullWindowStall", head))

    # -- issue ------------------------------------------------------------

    def _issue(self, now):
        issued = 0
        loads = 0
        put_back = []
        while self.ready and issued < WIDTH:
            seq, e = heapq.heappop(self.ready)
            if self.mode == RUNAHEAD_BUFFER and not e.is_buffer:
                self._frozen.append((seq, e))  # window frozen under the buffer
                continue
            if e.op.is_load:
                if loads >= LOADS_PER_CYCLE:
                    put_back.append((seq, e))
                    continue
                outcome = self._issue_load(e, now)
                if outcome == "blocked":
                    put_back.append((seq, e))
                    continue
                loads += 1
            else:
                self._issue_other(e, now)
            issued += 1
        for item in put_back:
            heapq.heappush(self.ready, item)

    def _src_vals(self, e):
        a = self.prf[e.src_cprs[0]].value if len(e.src_cprs) > 0 else 0
        b = self.prf[e.src_cprs[1]].value if len(e.src_cprs) > 1 else 0
        return a, b

    def _poisoned_src(self, e):
        return any(self.prf[c].poison for c in e.src_cprs)

    def _issue_other(self, e, now):
        op = e.op
        e.issue_cycle = now
        self.rs_count -= 1
        if self._poisoned_src(e):
            e.poisoned = True
            heapq.heappush(self.completions, (now + 1, e.seq, e))
            return
        a, b = self._src_vals(e)
        if op.is_store:
            e.addr = effective_addr(op, a, b)
            e.value = a
            if self.mode != NORMAL:
                self.rc.write(e.addr, a)
        elif op.dst is not None:
            e.value = exec_value(op, a, b)
        heapq.heappush(self.completions, (now + FU_LAT[op.opclass], e.seq, e))

    def _issue_load(self, e, now):
        op = e.op
        if self._poisoned_src(e):
            e.issue_cycle = now
            self.rs_count -= 1
            e.poisoned = True
            heapq.heappush(self.completions, (now + 1, e.seq, e))
            return "poisoned"
        a, b = self._src_vals(e)
        addr = effective_addr(op, a, b)
        if self.mode == NORMAL and not e.is_buffer:
            fwd = "wait"
            if self.lsq_stores:
                for s in reversed(self.lsq):
                    if s.seq >= e.seq or not s.op.is_store:
                        continue
                    if s.addr is None:
                        fwd = "blocked"  # older store address unknown
                        break
                    if (s.addr & ~7) == (addr & ~7):
                        fwd = s.value
                        break
            if fwd == "blocked":
                return "blocked"
            e.addr = addr
            e.issue_cycle = now
            self.rs_count -= 1
            e.dependent = self._address_tainted(e)
            if fwd != "wait":
                e.forwarded = True
                e.mem_req = None
                self._finish_load_forward(e, now, fwd)
                return "ok"
            return self._send_mem(e, now, "DEMAND")
        # runahead paths: store-forward from the runahead cache first
        e.addr = addr
        e.issue_cycle = now
        self.rs_count -= 1
        rc_val = self.rc.read(addr)
        if rc_val is not None:
            e.forwarded = True
            self._finish_load_forward(e, now, rc_val)
            return "ok"
        return self._send_mem(e, now, "RUNAHEAD")

    def _finish_load_forward(self, e, now, value):
        # forwarding completes next cycle; taint still propagates
        e.value = value
        heapq.heappush(self.completions, (now + 1, e.seq, e))

    def _send_mem(self, e, now, kind):
        req = self.mem.core_load(self.id, paddr_of(self.id, e.addr), kind,
                                 seq=e.seq, pc=e.op.pc, retired=self.retired)
        if req is None:
            # MSHR full: retry next cycle, reservation station kept
            self.rs_count += 1
            e.issue_cycle = None
            return "blocked"
        e.mem_req = req
        if req.llc_probed or req.done_cycle is None:
            # fresh LLC miss, or merged onto a line fetch already in flight;
            # either way the data comes from DRAM
            e.is_llc_miss = True
        if req.llc_probed:  # counted once per line fetch, merges excluded
            if kind == "DEMAND":
                self.cs.llc_misses += 1
                self.llc_miss_log.append((now, e.seq, e.op.pc))
                if self.on_demand_miss is not None:
                    self.on_demand_miss(self, e)
            else:
                self.ra_misses += 1
        self.waiting_mem.append(e)
        return "ok"

    def _address_tainted(self, e):
        for c in e.src_cprs:
            t = self.prf[c].taint
            if t is not None and e.seq - t <= POISON_WINDOW:
                return True
        return False

    # -- dispatch ---------------------------------------------------------

    def _dispatch(self, now):
        n = 0
        while (n < WIDTH and self.cursor < len(self.ops)
               and len(self.rob) < ROB_SIZE and self.rs_count < RS_SIZE):
            op = self.ops[self.cursor]
            self.cursor += 1
            e = self._rename(op, op.seq, self.rat)
            self.rob.append(e)
            if self.mode == NORMAL and (op.is_load or op.is_store):
                self.lsq.append(e)
                if op.is_store:
                    self.lsq_stores += 1
            n += 1
            if self.mode != NORMAL:
                self.ra_uops += 1

    def _rename(self, op, seq, rat, is_buffer=False):
        src_cprs = [rat[r] for r in op.srcs]
        dst_cpr = None
        if op.dst is not None:
            dst_cpr = self._fresh_cpr()
            rat[op.dst] = dst_cpr
        e = RobEntry(op, seq, src_cprs, dst_cpr, is_buffer)
        self.rs_count += 1
        pend = {c for c in src_cprs if not self.prf[c].ready}
        e.pending = len(pend)
        for c in pend:
            self.waiters.setdefault(c, []).append(e)
        if e.pending == 0:
            heapq.heappush(self.ready, (e.seq, e))
        return e

    def dispatch_buffer_uop(self, op, brat):
        """Runahead-buffer rename: same reservation stations, no ROB slot."""
        if self.rs_count >= RS_SIZE:
            return False
        for r in op.srcs:
            if r not in brat:
                brat[r] = self.rat[r]
        seq = self._buffer_seq
        self._buffer_seq += 1
        self._rename(op, seq, brat, is_buffer=True)
        self.ra_uops += 1
        return True

    # -- runahead entry and exit -------------------------------------------

    def runahead_allowed(self, head=None, enhanced=None):
        if enhanced is None:
            enhanced = self.enhancements
        if not enhanced:
            return True
        head = head or self.full_window_stall()
        if head is None or head.mem_req is None:
            return True
        if head.mem_req.issue_retired < self.retired - RA_RECENCY:
            return False
        return self.retired > self.last_reach

    def enter_runahead(self, kind):
        assert self.mode == NORMAL, "runahead re-entry"
        head = self.full_window_stall()
        assert head is not None, "no full-window stall to run ahead from"
        self.checkpoint = Checkpoint(dict(self.arch_values),
                                     self.cursor - len(self.rob),
                                     self.retired)
        self.mode = kind
        self.blocking_req = head.mem_req
        self.ra_enter_cycle = self.cycle
        self.ra_uops = 0
        self.ra_misses = 0
        self._stall_episode = False
        if kind == RUNAHEAD_TRADITIONAL:
            head.poisoned = True
            self._write_dst(head, 0, poison=True)
            if head in self.waiting_mem:
                self.waiting_mem.remove(head)
        # buffer mode freezes the window instead; the head completes normally

    def runahead_done(self):
        return (self.mode != NORMAL and self.blocking_req is not None
                and self.blocking_req.done
                and self.blocking_req.done_cycle <= self.cycle)

    def exit_runahead(self):
        assert self.mode != NORMAL
        mode = self.mode
        ck = self.checkpoint
        reach = self.cursor  # furthest trace point this interval fetched to
        if mode == RUNAHEAD_TRADITIONAL:
            self.rob.clear()
            self.lsq.clear()
            self.lsq_stores = 0
            self.ready = []
            self.completions = []
            self.waiting_mem = []
            self.waiters = {}
            self.rs_count = 0
            self.cursor = ck.cursor
            self.retired = ck.retired
            self.cs.retired = ck.retired
            self.arch_values = dict(ck.arch_values)
            self.rat = {r: self._fresh_cpr(v, ready=True)
                        for r, v in ck.arch_values.items()}
        else:
            # frozen window resumes; purge buffer uops from the machinery
            self.ready = [(s, e) for s, e in self.ready if not e.is_buffer]
            for item in self._frozen:
                self.ready.append(item)
            self._frozen = []
            heapq.heapify(self.ready)
            self.completions = [(c, s, e) for c, s, e in self.completions
                                if not e.is_buffer]
            heapq.heapify(self.completions)
            self.waiting_mem = [e for e in self.waiting_mem if not e.is_buffer]
            for c in list(self.waiters):
                kept = [e for e in self.waiters[c] if not e.is_buffer]
                if kept:
                    self.waiters[c] = kept
                else:
                    del self.waiters[c]
            self.rs_count = sum(1 for e in self.rob
                                if e.issue_cycle is None and not e.completed)
            reach = ck.cursor
        self.last_reach = max(self.last_reach, reach)
        cycles = self.cycle - self.ra_enter_cycle
        self.last_interval = (self.ra_misses, self.ra_uops, cycles)
        mode_tag = "buffer" if mode == RUNAHEAD_BUFFER else "traditional"
        self.stats.intervals.append((len(self.stats.intervals), mode_tag,
                                     cycles, self.ra_uops, self.ra_misses))
        self.mode = NORMAL
        self.checkpoint = None
        self.blocking_req = None
        self.rc.flush()


# -- module-level operation surface ----------------------------------------

def step(core: Core, memory=None):
    return core.step(memory)


def classify_miss(rob, miss: RobEntry) -> str:
    assert miss.is_llc_miss, "classification requires an LLC-missing load"
    return DEPENDENT if miss.dependent else INDEPENDENT


def enter_runahead(core: Core, kind: str):
    core.enter_runahead(kind)


def exit_runahead(core: Core):
    core.exit_runahead()


def runahead_allowed(core: Core, enhancements_on: bool | None = None) -> bool:
    return core.runahead_allowed(enhanced=enhancements_on)
