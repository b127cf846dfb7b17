"""Whole-machine driver.

Builds cores, memory, prefetchers and the controller chain engine from a
SimConfig, steps everything on one clock, and runs the per-mode policy
glue: runahead entry and exit at full-window stalls, dependent-chain
shipping on demand misses, continuous-runahead interval control, and
feedback-directed prefetcher throttling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import runahead as ra
from .chains import (ChainCache, PcMissTable, extract_forward,
                     extract_runahead_chain, mark_top_pc)
from .core import NORMAL, RUNAHEAD_BUFFER, RUNAHEAD_TRADITIONAL, Core
from .emc import (INTERVAL_FLOOR, PAGE, REJECTED, Emc, accept_chain,
                  begin_interval, close_interval, coordinate_throttle,
                  emc_step, select_runahead_core, tlb_install,
                  update_interval)
from .memhier import MemConfig, MemorySystem, paddr_of
from .metrics import SimStats, emit_csv, state_digest
from .prefetch import PREFETCHERS, GhbPrefetcher, fdp_adjust, make_prefetcher

MODES = ("baseline", "runahead", "runahead-buffer", "hybrid",
         "emc-dep", "ra-emc", "ra-emc-dep")
EMC_MODES = ("emc-dep", "ra-emc", "ra-emc-dep")
FDP_WINDOW = 10_000
STALL_LIMIT = 400_000  # cycles without any retirement before giving up


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    cores: int = 1
    mode: str = "baseline"
    prefetcher: str = "none"
    emc_policy: str = "ROUND_ROBIN"
    enhancements: bool = False
    max_instructions: int = 0          # 0 runs every trace to completion
    seed: int = 0
    stats_path: str | None = None
    mem_overrides: dict = field(default_factory=dict)

    def validate(self):
        if self.cores < 1:
            raise ConfigError("cores must be at least 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.prefetcher not in PREFETCHERS:
            raise ConfigError(f"unknown prefetcher {self.prefetcher!r}")
        if self.emc_policy not in ("ROUND_ROBIN", "IPC", "SCORE"):
            raise ConfigError(f"unknown emc policy {self.emc_policy!r}")
        probe = MemConfig()
        for k in self.mem_overrides:
            if not hasattr(probe, k):
                raise ConfigError(f"unknown memory override {k!r}")


@dataclass
class SimResult:
    config: SimConfig
    stats: SimStats
    cores: list
    emc: Emc | None
    cycles: int
    digest: str


def _mem_config(cfg: SimConfig) -> MemConfig:
    mc = MemConfig()
    for k, v in cfg.mem_overrides.items():
        setattr(mc, k, v)
    return mc


def _build_emc(cfg: SimConfig, mem, cores) -> Emc | None:
    if cfg.mode not in EMC_MODES:
        return None
    single = cfg.cores == 1
    if cfg.mode == "emc-dep":
        return Emc(mem, cores, dep_contexts=2, with_ra=False,
                   policy=cfg.emc_policy)
    if cfg.mode == "ra-emc":
        return Emc(mem, cores, dep_contexts=0, with_ra=True,
                   policy=cfg.emc_policy, fixed_interval=single)
    return Emc(mem, cores, dep_contexts=1, with_ra=True,
               policy=cfg.emc_policy, fixed_interval=single)


class _RunaheadState:
    def __init__(self):
        self.pending = None    # (selection, entry cycle)
        self.buf = None
        self.cache = ChainCache()


class _Driver:
    def __init__(self, cfg, mem, cores, emc):
        self.cfg = cfg
        self.mem = mem
        self.cores = cores
        self.emc = emc
        self.stats = mem.stats
        self.rstate = [_RunaheadState() for _ in cores]
        self.miss_tables = [PcMissTable() for _ in cores]
        self.current_mark = None   # (owner, marked pc) of the running chain
        self.pending_mark = None   # (owner, marked pc) awaiting extraction
        self._pf_snap = (0, 0)
        self._fdp_marks = [FDP_WINDOW] * len(cores)
        self._fdp_snaps = [(0, 0, 0)] * len(cores)
        self._core_runahead = cfg.mode in ("runahead", "runahead-buffer",
                                           "hybrid")
        self._track_stalls = emc is not None and emc.ra is not None
        if self._track_stalls:
            # ownerless bootstrap interval runs at the floor; the first
            # boundary installs the policy length
            emc.interval_len = INTERVAL_FLOOR
        if emc is not None and emc.dep:
            for c in cores:
                c.on_demand_miss = self._on_demand_miss

    # -- dependent-chain shipping ------------------------------------------

    def _on_demand_miss(self, core, entry):
        emc = self.emc
        if not any(not c.busy for c in emc.dep):
            return
        rob = list(core.rob)
        idx = next((k for k, en in enumerate(rob) if en is entry), None)
        if idx is None:
            return
        pred = core.dep_predictor
        if not any(en.op.is_load and pred.likely(en.op.pc)
                   for en in rob[idx + 1:]):
            return
        window = [en.op for en in rob]

        def producer_value(i):
            return rob[i].value if rob[i].completed else None

        chain = extract_forward(window, idx, producer_value,
                                core.arch_values.get, core_id=core.id)
        if not chain.uops or not any(u.opclass == "LOAD" for u in chain.uops):
            return
        accept_chain(self.emc, chain, pte=entry.addr // PAGE)

    # -- continuous-runahead interval control --------------------------------

    def _ghb_accuracy(self, default: float) -> float:
        issued = sum(self.stats.pf_issued)
        useful = sum(self.stats.pf_useful)
        d_iss = issued - self._pf_snap[0]
        d_use = useful - self._pf_snap[1]
        self._pf_snap = (issued, useful)
        if d_iss == 0:
            return default   # nothing contested, treat as a tie
        return d_use / d_iss

    def _interval_mpki(self, core_id: int) -> float:
        cs = self.stats.cores[core_id]
        r0, m0 = self.emc.snap[core_id]
        dr = cs.retired - r0
        if dr <= 0:
            return 0.0
        return 1000.0 * (cs.llc_misses - m0) / dr

    def _ra_boundary(self):
        emc = self.emc
        acc = close_interval(emc)
        update_interval(emc, acc)
        if any(isinstance(p, GhbPrefetcher) for p in self.mem.prefetchers):
            coordinate_throttle(emc, acc, self._ghb_accuracy(acc))
        scores = [max(t.entries.values(), default=0) for t in self.miss_tables]
        owner = select_runahead_core(emc, self.stats.cores, scores)
        mpki = self._interval_mpki(owner) if owner is not None else 0.0
        begin_interval(emc, owner, self.stats.cores)
        if owner is None:
            if emc.ra is not None and emc.ra.busy:
                emc.ra.release()
            self.current_mark = None
            self.pending_mark = None
            return
        pc = mark_top_pc(self.miss_tables[owner], mpki)
        # re-extraction from the owner's current window each interval pins
        # the chain's lead to the core; the old chain runs until the
        # replacement is accepted
        self.current_mark = None
        self.pending_mark = (owner, pc) if pc is not None else None
        if pc is None and emc.ra is not None and emc.ra.busy:
            emc.ra.release()

    def _try_extract_runahead(self):
        owner, pc = self.pending_mark
        core = self.cores[owner]
        rob = list(core.rob)
        if not any(en.op.pc == pc for en in rob):
            return
        window = [en.op for en in rob]

        def producer_value(i):
            return rob[i].value if rob[i].completed else None

        chain = extract_runahead_chain(window, pc, producer_value,
                                       core.arch_values.get, core_id=owner)
        if chain is None or not chain.uops:
            return
        if accept_chain(self.emc, chain) != REJECTED:
            self.current_mark = self.pending_mark
            self.pending_mark = None

    def _handle_emc_events(self, events):
        for ev in events:
            if ev[0] == "IntervalEnd":
                self._ra_boundary()
            elif ev[0] == "EmcAbort" and ev[1] == "EMC_RA":
                # the core answers the halt signal with the missing
                # translation; chain state is gone, so a fresh chain is
                # extracted from the core's current window
                tlb_install(self.emc, ev[2], ev[3])
                if self.pending_mark is None:
                    self.pending_mark = self.current_mark

    # -- core-side runahead policies ------------------------------------------

    def _core_policy(self, c, events):
        mode = self.cfg.mode
        for ev in events:
            if ev[0] != "FullWindowStall":
                continue
            entry = ev[1]
            if self._track_stalls and not entry.dependent:
                self.miss_tables[c.id].record_stall(entry.op.pc)
            if not self._core_runahead:
                continue
            if c.mode != NORMAL or not c.runahead_allowed(entry):
                continue
            if mode == "runahead":
                c.enter_runahead(RUNAHEAD_TRADITIONAL)
            else:
                st = self.rstate[c.id]
                if st.pending is None:
                    window = [e.op for e in c.rob]
                    sel = ra.hybrid_select(window, entry.op.pc, st.cache)
                    st.pending = (sel, c.cycle + sel.latency)
        if not self._core_runahead:
            return
        if mode in ("runahead-buffer", "hybrid"):
            st = self.rstate[c.id]
            if (st.pending is not None and c.mode == NORMAL
                    and c.cycle >= st.pending[1]):
                sel = st.pending[0]
                if c.full_window_stall() is not None:
                    if sel.action == ra.USE_BUFFER:
                        st.buf = ra.begin_buffer(c, sel.chain)
                    elif mode == "hybrid":
                        c.enter_runahead(RUNAHEAD_TRADITIONAL)
                    # pure buffer mode with no chain: the stall just holds
                st.pending = None
            if c.mode != NORMAL and c.runahead_done():
                c.exit_runahead()
                st.buf = None
            elif c.mode == RUNAHEAD_BUFFER:
                ra.runahead_buffer_step(st.buf, c)
        elif mode == "runahead":
            if c.mode != NORMAL and c.runahead_done():
                c.exit_runahead()

    # -- feedback-directed prefetching ------------------------------------------

    def _fdp_tick(self, i):
        pf = self.mem.prefetchers[i]
        if pf is None:
            return
        cs = self.stats.cores[i]
        if cs.retired < self._fdp_marks[i]:
            return
        self._fdp_marks[i] += FDP_WINDOW
        iss0, use0, late0 = self._fdp_snaps[i]
        iss = self.stats.pf_issued[i]
        use = self.stats.pf_useful[i]
        late = self.stats.pf_late[i]
        self._fdp_snaps[i] = (iss, use, late)
        if iss == iss0:
            return
        accuracy = (use - use0) / (iss - iss0)
        lateness = (late - late0) / max(1, use - use0)
        fdp_adjust(pf, accuracy, lateness)

    # -- main loop ------------------------------------------------------------

    def run(self) -> SimResult:
        cfg = self.cfg
        cores = self.cores
        mem = self.mem
        last_retired = -1
        last_progress_cycle = 0
        while True:
            if all(c.done for c in cores):
                break
            if cfg.max_instructions and all(
                    c.done or c.retired >= cfg.max_instructions for c in cores):
                break
            for c in cores:
                if c.done:
                    continue
                events = c.step()
                self._core_policy(c, events)
                self._fdp_tick(c.id)
            if self.emc is not None:
                # re-targeting is not latency critical; poll the owner's
                # window on a coarse cadence and let the old chain run
                # until the replacement is accepted
                if self.pending_mark is not None and (mem.cycle & 63) == 0:
                    self._try_extract_runahead()
                if (self.emc.owner is not None
                        and cores[self.emc.owner].done):
                    # a finished owner can never hit its progress target
                    self._ra_boundary()
                self._handle_emc_events(emc_step(self.emc))
            mem.step()
            total = sum(c.retired for c in cores)
            if total != last_retired:
                last_retired = total
                last_progress_cycle = mem.cycle
            elif mem.cycle - last_progress_cycle > STALL_LIMIT:
                raise RuntimeError(
                    f"no retirement progress for {STALL_LIMIT} cycles "
                    f"at cycle {mem.cycle}")
        self.stats.ring_control = mem.ring.control_msgs
        self.stats.ring_data = mem.ring.data_msgs
        digest = state_digest([c.retired for c in cores],
                              [c.arch_values for c in cores], mem.image)
        if cfg.stats_path:
            emit_csv(self.stats, cfg.stats_path, digest)
        return SimResult(cfg, self.stats, cores, self.emc, mem.cycle, digest)


def simulate(traces, cfg: SimConfig) -> SimResult:
    cfg.validate()
    if len(traces) != cfg.cores:
        raise ConfigError(
            f"config asks for {cfg.cores} cores but {len(traces)} traces given")
    stats = SimStats(cfg.cores)
    image = {}
    for i, t in enumerate(traces):
        for a, v in t.image.items():
            image[paddr_of(i, a) & ~7] = v
    prefetchers = [make_prefetcher(cfg.prefetcher) for _ in range(cfg.cores)]
    mem = MemorySystem(cfg.cores, image, stats, _mem_config(cfg),
                       prefetchers=prefetchers)
    cores = [Core(i, t, mem, stats, enhancements=cfg.enhancements)
             for i, t in enumerate(traces)]
    emc = _build_emc(cfg, mem, cores)
    return _Driver(cfg, mem, cores, emc).run()
