"""Micro-op trace format, validation, value semantics, and synthetic workload generators.

A trace is the resolved correct path of a program: one micro-op per line, plus a
flat memory image (``#mem`` directives) so loads return real data values. The
simulator is value-level; dependent addresses are actual loaded data.

Line format (UTF-8, one op per line, ``-`` for absent fields, ``#`` comments):

    seq pc opclass dst src0 src1 imm vaddr taken
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

MASK64 = (1 << 64) - 1
LINE_BYTES = 64

OPCLASSES = (
    "IADD", "IMUL", "LOGIC", "SHIFT", "MOVE", "SIGNEXT",
    "LOAD", "STORE", "BRANCH", "FP", "OTHER",
)
MEM_OPS = ("LOAD", "STORE")


class TraceError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class MicroOp:
    seq: int
    pc: int
    opclass: str
    dst: int | None = None
    srcs: tuple[int, ...] = ()
    imm: int | None = None
    mem_vaddr: int | None = None
    taken: bool | None = None
    # plain fields, not properties: these sit on the hottest model paths
    is_load: bool = field(init=False, compare=False, repr=False)
    is_store: bool = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "is_load", self.opclass == "LOAD")
        object.__setattr__(self, "is_store", self.opclass == "STORE")

    def validate(self):
        if self.opclass not in OPCLASSES:
            raise TraceError(f"seq {self.seq}: unknown opclass {self.opclass!r}")
        if len(self.srcs) > 2:
            raise TraceError(f"seq {self.seq}: more than 2 source registers")
        if (self.opclass in MEM_OPS) != (self.mem_vaddr is not None):
            raise TraceError(f"seq {self.seq}: mem_vaddr presence must match LOAD/STORE")
        if (self.opclass == "BRANCH") != (self.taken is not None):
            raise TraceError(f"seq {self.seq}: taken presence must match BRANCH")
        if self.opclass in ("BRANCH", "STORE"):
            if self.dst is not None:
                raise TraceError(f"seq {self.seq}: {self.opclass} must not have a dst")
        elif self.dst is None:
            raise TraceError(f"seq {self.seq}: {self.opclass} requires a dst")


@dataclass
class Trace:
    ops: list[MicroOp] = field(default_factory=list)
    arch_reg_count: int = 16
    page_size: int = 4096
    image: dict[int, int] = field(default_factory=dict)

    def validate(self):
        last_seq = -1
        for op in self.ops:
            op.validate()
            if op.seq <= last_seq:
                raise TraceError(f"seq {op.seq}: not strictly increasing")
            last_seq = op.seq
            for r in op.srcs + ((op.dst,) if op.dst is not None else ()):
                if not (0 <= r < self.arch_reg_count):
                    raise TraceError(f"seq {op.seq}: register {r} out of range")

    def read_mem(self, addr):
        return self.image.get(addr & ~7, 0)


# ---------------------------------------------------------------------------
# value semantics shared by the core pipeline, the EMC, and test interpreters

def exec_value(op: MicroOp, a: int, b: int, loaded: int | None = None) -> int:
    """Destination value of op given source values a, b (absent sources read 0)."""
    imm = op.imm or 0
    k = op.opclass
    if k == "LOAD":
        assert loaded is not None
        return loaded & MASK64
    if k == "IMUL":
        m = b if len(op.srcs) > 1 else (imm if op.imm is not None else 1)
        return (a * m) & MASK64
    if k == "LOGIC":
        v = a
        if len(op.srcs) > 1:
            v &= b
        if op.imm is not None:
            v &= imm
        return v & MASK64
    if k == "SHIFT":
        amt = (b if len(op.srcs) > 1 else imm) & 63
        return (a << amt) & MASK64
    if k == "MOVE":
        return (a if op.srcs else imm) & MASK64
    if k == "SIGNEXT":
        lo = a & 0xFFFFFFFF
        return (lo | (MASK64 ^ 0xFFFFFFFF if lo & 0x80000000 else 0)) & MASK64
    # IADD, FP, OTHER
    return (a + b + imm) & MASK64


def effective_addr(op: MicroOp, a: int, b: int) -> int:
    """LOAD: src0+src1+imm. STORE: src1+imm (src0 is the data register)."""
    imm = op.imm or 0
    if op.opclass == "STORE":
        return (b + imm) & MASK64
    return (a + b + imm) & MASK64


def branch_taken(op: MicroOp, a: int) -> bool:
    if op.srcs:
        return a != 0
    return bool(op.taken)


# ---------------------------------------------------------------------------
# file format

def _fmt_field(v, hexa=False):
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "1" if v else "0"
    return f"{v:#x}" if hexa else str(v)


def _op_line(op: MicroOp) -> str:
    src0 = op.srcs[0] if len(op.srcs) > 0 else None
    src1 = op.srcs[1] if len(op.srcs) > 1 else None
    return " ".join((
        str(op.seq),
        f"{op.pc:#x}",
        op.opclass,
        _fmt_field(op.dst),
        _fmt_field(src0),
        _fmt_field(src1),
        _fmt_field(op.imm, hexa=True),
        _fmt_field(op.mem_vaddr, hexa=True),
        _fmt_field(op.taken),
    ))


def store_trace(trace: Trace, path) -> None:
    trace.validate()
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"#arch_regs {trace.arch_reg_count}\n")
        f.write(f"#page_size {trace.page_size}\n")
        for addr in sorted(trace.image):
            f.write(f"#mem {addr:#x} {trace.image[addr]:#x}\n")
        for op in trace.ops:
            f.write(_op_line(op) + "\n")


def _parse_int(tok, lineno, what):
    if tok == "-":
        return None
    try:
        return int(tok, 0)
    except ValueError:
        raise TraceError(f"line {lineno}: bad {what} {tok!r}") from None


def load_trace(path) -> Trace:
    trace = Trace()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                # structured directives; any other comment is ignored
                if parts and parts[0] == "arch_regs":
                    trace.arch_reg_count = int(parts[1], 0)
                elif parts and parts[0] == "page_size":
                    trace.page_size = int(parts[1], 0)
                elif parts and parts[0] == "mem":
                    trace.image[int(parts[1], 0)] = int(parts[2], 0)
                continue
            toks = line.split()
            if len(toks) != 9:
                raise TraceError(f"line {lineno}: expected 9 fields, got {len(toks)}")
            seq = _parse_int(toks[0], lineno, "seq")
            pc = _parse_int(toks[1], lineno, "pc")
            opclass = toks[2]
            dst = _parse_int(toks[3], lineno, "dst")
            src0 = _parse_int(toks[4], lineno, "src0")
            src1 = _parse_int(toks[5], lineno, "src1")
            imm = _parse_int(toks[6], lineno, "imm")
            vaddr = _parse_int(toks[7], lineno, "vaddr")
            taken_tok = toks[8]
            taken = None if taken_tok == "-" else taken_tok == "1"
            srcs = tuple(s for s in (src0, src1) if s is not None)
            if src0 is None and src1 is not None:
                raise TraceError(f"line {lineno}: src1 without src0")
            op = MicroOp(seq, pc, opclass, dst, srcs, imm, vaddr, taken)
            try:
                op.validate()
            except TraceError as e:
                raise TraceError(f"line {lineno}: {e}") from None
            trace.ops.append(op)
    trace.validate()
    return trace


# ---------------------------------------------------------------------------
# synthetic workload generators (pure functions of their arguments)

def _next_pow2(n):
    p = 1
    while p < n:
        p <<= 1
    return p


class _Emitter:
    def __init__(self):
        self.ops = []
        self.seq = 0

    def emit(self, pc, opclass, dst=None, srcs=(), imm=None, vaddr=None, taken=None):
        self.ops.append(MicroOp(self.seq, pc, opclass, dst, tuple(srcs), imm, vaddr, taken))
        self.seq += 1


def gen_stream(lines: int, stride: int) -> Trace:
    """Loads at a, a+stride, a+2*stride, ... to exercise stream prefetching."""
    if stride % 8 != 0:
        raise TraceError("stride must be a multiple of 8")
    base = 0x100000
    em = _Emitter()
    em.emit(0x400000, "MOVE", dst=0, imm=base)
    for k in range(lines):
        em.emit(0x400010, "LOAD", dst=1, srcs=(0,), vaddr=base + k * stride)
        em.emit(0x400018, "IADD", dst=0, srcs=(0,), imm=stride)
    return Trace(ops=em.ops)


def gen_pointer_chase(n_nodes: int, footprint: int, chain_gap: int, seed: int) -> Trace:
    """Independent-miss loop: root load addresses follow a seeded permutation
    computed by ALU ops, so no root load depends on another load. Each iteration
    advances a ring offset across the footprint, root-loads it, then issues a
    dependent same-line load, plus chain_gap filler ALU ops."""
    if footprint < LINE_BYTES:
        raise TraceError("footprint smaller than one cache line")
    if n_nodes < 1:
        raise TraceError("n_nodes must be >= 1")
    rng = random.Random(seed)
    fp = _next_pow2(footprint)
    # odd line stride: generates the full line ring of the footprint without
    # zeroing the channel and bank bits of the address
    stride = LINE_BYTES * (rng.randrange(max(1, fp // (2 * LINE_BYTES))) * 2 + 1)
    mask = fp - 1
    base = 0x1000000

    em = _Emitter()
    em.emit(0x400000, "MOVE", dst=9, imm=base)
    em.emit(0x400008, "MOVE", dst=7, imm=stride)
    em.emit(0x400010, "MOVE", dst=6, imm=mask)
    em.emit(0x400018, "MOVE", dst=8, imm=0)
    em.emit(0x400020, "MOVE", dst=14, imm=mask)

    image = {}
    off = 0
    body_pc = 0x400100
    for _ in range(n_nodes):
        off = (off + stride) & mask
        root = base + off
        image[root] = root  # dependent load shadows the ring one footprint up
        em.emit(body_pc + 0x00, "IADD", dst=8, srcs=(8, 7))
        em.emit(body_pc + 0x08, "LOGIC", dst=8, srcs=(8, 6))
        em.emit(body_pc + 0x10, "MOVE", dst=5, srcs=(8,))
        em.emit(body_pc + 0x18, "LOGIC", dst=5, srcs=(5, 14))
        em.emit(body_pc + 0x20, "LOAD", dst=1, srcs=(5, 9), vaddr=root)
        em.emit(body_pc + 0x28, "MOVE", dst=2, srcs=(1,))
        em.emit(body_pc + 0x30, "IADD", dst=3, srcs=(2,), imm=footprint)
        em.emit(body_pc + 0x38, "LOAD", dst=4, srcs=(3,), vaddr=root + footprint)
        for g in range(chain_gap):
            em.emit(body_pc + 0x40 + 8 * g, "IADD", dst=10 + (g % 4), srcs=(10 + (g % 4),), imm=1)
    return Trace(ops=em.ops, image=image)


def gen_linked_list(n_nodes: int, node_stride: int, seed: int) -> Trace:
    """Walks a randomized singly linked list twice; every load's address is the
    value loaded by the previous op (dependent misses)."""
    if n_nodes < 2:
        raise TraceError("n_nodes must be >= 2")
    if node_stride < 8:
        raise TraceError("node_stride < 8")
    rng = random.Random(seed)
    base = 0x2000000
    order = list(range(n_nodes))
    rng.shuffle(order)
    addrs = [base + i * node_stride for i in order]
    image = {}
    for i, a in enumerate(addrs):
        image[a] = addrs[(i + 1) % n_nodes]

    em = _Emitter()
    em.emit(0x500000, "MOVE", dst=1, imm=addrs[0])
    cur = 0
    for _ in range(2 * n_nodes):
        em.emit(0x500010, "LOAD", dst=1, srcs=(1,), vaddr=addrs[cur])
        cur = (cur + 1) % n_nodes
    return Trace(ops=em.ops, image=image)
