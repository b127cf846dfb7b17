"""Runahead interval control.

Traditional runahead reuses the core's own fetch path, so the machinery here
is what the core does not already own: the chain buffer that loops a slice of
uops through rename, the policy that picks between the two flavors at each
full-window stall, and the per-interval accounting that feeds the CSV output.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .chains import ChainCache, extract_backwards
from .core import WIDTH, RUNAHEAD_BUFFER, Core

BUFFER_CAPACITY = 32  # uops; chains longer than this fall back to traditional

USE_BUFFER = "USE_BUFFER"
USE_TRADITIONAL = "USE_TRADITIONAL"


@dataclass
class RunaheadBuffer:
    """A dependence chain treated as a loop while the core runs ahead."""

    chain: tuple
    cursor: int = 0
    iteration: int = 0
    brat: dict = field(default_factory=dict)

    def __post_init__(self):
        self.chain = tuple(self.chain)
        assert 1 <= len(self.chain) <= BUFFER_CAPACITY
        assert self.cursor < len(self.chain)


def begin_buffer(core: Core, chain) -> RunaheadBuffer:
    core.enter_runahead(RUNAHEAD_BUFFER)
    return RunaheadBuffer(chain=tuple(chain))


def runahead_buffer_step(buf: RunaheadBuffer, core: Core) -> list:
    """Feed up to one rename group of chain uops into the back-end.

    Call once per cycle after the core's pipeline step. The chain wraps to
    index 0 after its last op; an iteration is counted when its first op is
    dispatched. Dispatch stops early when the reservation stations fill.
    """
    assert core.mode == RUNAHEAD_BUFFER, "buffer step outside buffer mode"
    events = []
    for _ in range(WIDTH):
        op = buf.chain[buf.cursor]
        if not core.dispatch_buffer_uop(op, buf.brat):
            break
        if buf.cursor == 0:
            buf.iteration += 1
            events.append(("BufferIteration", buf.iteration))
        buf.cursor = (buf.cursor + 1) % len(buf.chain)
    return events


@dataclass(frozen=True)
class Selection:
    action: str            # USE_BUFFER or USE_TRADITIONAL
    chain: tuple | None    # uops in program order when action is USE_BUFFER
    latency: int           # front-end stall cycles before runahead may start


def hybrid_select(rob, stall_pc: int, cache: ChainCache) -> Selection:
    """Pick the runahead flavor for a full-window stall.

    rob is the in-flight uop window, stalled op first. A chain-cache hit
    reuses the stored chain with no generation latency. Otherwise the chain
    is generated by the backward walk; no second window op with the stall PC,
    or a walk that wants more than BUFFER_CAPACITY uops, falls back to
    traditional runahead. Freshly generated chains are cached.
    """
    cached = cache.get(stall_pc)
    if cached is not None:
        return Selection(USE_BUFFER, cached, 0)
    # walk one past capacity so an oversized chain is detectable
    walk = extract_backwards(rob, stall_pc, max_len=BUFFER_CAPACITY + 1)
    if not walk.found or len(walk.uops) > BUFFER_CAPACITY:
        return Selection(USE_TRADITIONAL, None, walk.latency)
    chain = tuple(walk.uops)
    cache.put(stall_pc, chain)
    return Selection(USE_BUFFER, chain, walk.latency)


def interval_stats(core: Core) -> tuple[int, int, int]:
    """(misses_generated, uops_executed, cycles) of the last closed interval."""
    assert core.last_interval is not None, "no runahead interval has closed"
    return core.last_interval


INTERVAL_FIELDS = ("interval_id", "mode", "cycles", "uops", "misses")


def write_intervals_csv(stats, dest) -> None:
    """Write one row per runahead interval; dest is a path or a text file."""
    if hasattr(dest, "write"):
        _write_rows(stats, dest)
    else:
        with open(dest, "w", newline="") as fh:
            _write_rows(stats, fh)


def intervals_csv(stats) -> str:
    buf = io.StringIO()
    _write_rows(stats, buf)
    return buf.getvalue()


def _write_rows(stats, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(INTERVAL_FIELDS)
    for row in stats.intervals:
        w.writerow(row)
