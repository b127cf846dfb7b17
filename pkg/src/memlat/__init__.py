"""Trace-driven cycle-level simulator of latency-reduction mechanisms:
runahead execution with filtered dependence chains, dependent-miss
acceleration at the memory controller, and stream/GHB/Markov prefetching."""

__version__ = "0.1.0"
