"""LLC prefetchers: stream, GHB global delta correlation, Markov, and the
markov+stream composite, throttled by feedback-directed degree adjustment.

train_and_issue() is called with line-aligned addresses on every demand LLC
miss, and with hit=True on demand hits to prefetched lines. Returned
addresses are prefetch candidates; the memory system dedupes against cache
and in-flight state.
"""

from __future__ import annotations

LINE = 64

MIN_DEGREE = 1
MAX_DEGREE = 32
ACC_HIGH = 0.75
ACC_LOW = 0.40


class StreamPrefetcher:
    """32 stream entries, +-line-multiple strides, prefetch distance 32."""

    N_STREAMS = 32
    DISTANCE = 32
    ALLOC_WINDOW = 8 * LINE  # max first-delta magnitude that trains a stream

    def __init__(self):
        self.streams: list[dict] = []
        self.degree = 4

    def train_and_issue(self, addr: int, pc=None, hit: bool = False) -> list[int]:
        s = self._match(addr)
        if s is None:
            self.streams.append({"start": addr, "last": addr,
                                 "stride": None, "next": None})
            del self.streams[:-self.N_STREAMS]
            return []
        delta = addr - s["last"]
        if delta == 0:
            return []
        if s["stride"] != delta:
            s["stride"] = delta
            s["next"] = None
        s["last"] = addr
        # stream confirmed: run ahead of the miss, inside the distance window
        stride = s["stride"]
        start = addr + stride
        if s["next"] is not None and (s["next"] - start) * stride > 0:
            start = s["next"]
        limit = addr + stride * self.DISTANCE
        out = []
        a = start
        while len(out) < self.degree and (limit - a) * stride >= 0:
            out.append(a)
            a += stride
        s["next"] = a
        return out

    def _match(self, addr: int) -> dict | None:
        for s in reversed(self.streams):
            d = addr - s["last"]
            if d % LINE:
                continue
            if s["stride"] is not None and d == s["stride"]:
                return s
            if abs(d) <= self.ALLOC_WINDOW:
                return s
        return None


class GhbPrefetcher:
    """Global history buffer with two-level delta-pair indexing (G/DC)."""

    BUF = 1024
    INDEX = 256

    def __init__(self):
        self.hist: list[int] = []
        self.base = 0  # global position of hist[0]
        self.index: list[tuple | None] = [None] * self.INDEX
        self.last: int | None = None
        self.prev_delta: int | None = None
        self.degree = 4

    @staticmethod
    def _slot(d1: int, d2: int) -> int:
        m = (1 << 64) - 1
        return (((d1 & m) * 2654435761 + (d2 & m) * 40503) & m) % GhbPrefetcher.INDEX

    def train_and_issue(self, addr: int, pc=None, hit: bool = False) -> list[int]:
        if hit:
            return []
        out: list[int] = []
        pos = self.base + len(self.hist)  # global position of this miss
        if self.last is not None:
            d = addr - self.last
            if self.prev_delta is not None:
                pair = (self.prev_delta, d)
                slot = self._slot(*pair)
                entry = self.index[slot]
                if entry is not None and entry[0] == pair and entry[1] >= self.base:
                    out = self._replay(entry[1], addr)
                self.index[slot] = (pair, pos)
            self.prev_delta = d
        self.last = addr
        self.hist.append(addr)
        if len(self.hist) > self.BUF:
            drop = len(self.hist) - self.BUF
            del self.hist[:drop]
            self.base += drop
        return out

    def _replay(self, from_pos: int, addr: int) -> list[int]:
        out = []
        a = addr
        i = from_pos - self.base
        while len(out) < self.degree and i + 1 < len(self.hist):
            a += self.hist[i + 1] - self.hist[i]
            out.append(a)
            i += 1
        return out


class MarkovPrefetcher:
    """Miss-successor correlation table, 4 successors per entry, LRU."""

    CAPACITY = 16384

    def __init__(self):
        self.table: dict[int, list[int]] = {}
        self.last: int | None = None
        self.degree = 4

    def train_and_issue(self, addr: int, pc=None, hit: bool = False) -> list[int]:
        if hit:
            return []
        if self.last is not None:
            succ = self.table.get(self.last)
            if succ is None:
                succ = []
                self._put(self.last, succ)
            else:
                self._touch(self.last)
            if addr in succ:
                succ.remove(addr)
            succ.insert(0, addr)
            del succ[4:]
        self.last = addr
        preds = self.table.get(addr)
        if preds is None:
            return []
        self._touch(addr)
        return preds[:min(4, self.degree)]

    def _put(self, key: int, val):
        if len(self.table) >= self.CAPACITY:
            self.table.pop(next(iter(self.table)))
        self.table[key] = val

    def _touch(self, key: int):
        self.table[key] = self.table.pop(key)


class CompositePrefetcher:
    """markov+stream: stream issues first, combined output capped at degree."""

    def __init__(self):
        self.stream = StreamPrefetcher()
        self.markov = MarkovPrefetcher()

    @property
    def degree(self):
        return self.stream.degree

    @degree.setter
    def degree(self, d):
        self.stream.degree = d
        self.markov.degree = d

    def train_and_issue(self, addr: int, pc=None, hit: bool = False) -> list[int]:
        out = list(self.stream.train_and_issue(addr, pc, hit=hit))
        for a in self.markov.train_and_issue(addr, pc, hit=hit):
            if len(out) >= self.degree:
                break
            if a not in out:
                out.append(a)
        return out[:self.degree]


def train_and_issue(pf, miss_addr: int, pc=None, hit: bool = False) -> list[int]:
    return pf.train_and_issue(miss_addr, pc, hit=hit)


def fdp_adjust(pf, accuracy: float, lateness: float = 0.0,
               pollution: float = 0.0) -> int:
    """Accuracy-driven degree throttling; lateness/pollution reported only."""
    d = pf.degree
    if accuracy >= ACC_HIGH:
        d = min(MAX_DEGREE, d * 2)
    elif accuracy < ACC_LOW:
        d = max(MIN_DEGREE, d // 2)
    pf.degree = d
    return d


def make_prefetcher(name: str):
    if name in (None, "none", ""):
        return None
    if name == "stream":
        return StreamPrefetcher()
    if name == "ghb":
        return GhbPrefetcher()
    if name == "markov+stream":
        return CompositePrefetcher()
    raise ValueError(f"unknown prefetcher: {name!r}")


PREFETCHERS = ("none", "stream", "ghb", "markov+stream")
