"""Bandwidth-denominated cost model of the shared DRAM.

Banks are controlled either by the CPU's memory controller or by their local
PIM units; control switches by explicit handover, billed per rank. CPU
accesses are interleaved across a part's devices and billed in whole cache
lines; PIM accesses are device-local and billed in 8 B bursts per unit, with
concurrent units overlapping perfectly (the cost of a parallel step is the
slowest unit's cost).

The simulation driver sequences work itself, so this module only needs a
scalar clock plus per-bank "held by PIM until" marks: a CPU access that
lands inside a PIM-held window stalls to the window's end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import ProtocolError
from .geometry import Geometry

CPU = "cpu"
PIM = "pim"


@dataclass
class AccessStats:
    accesses: int = 0
    bytes_billed: int = 0
    useful_bytes: int = 0
    busy_time: float = 0.0
    stall_time: float = 0.0


@dataclass
class BankState:
    channel: int
    rank: int
    bank: int
    controller: str = CPU
    pim_hold_until: float = 0.0

    @property
    def rank_key(self):
        return (self.channel, self.rank)


class Event(NamedTuple):
    start: float
    end: float
    actor: str
    label: str


class SimClock:
    def __init__(self):
        self.now = 0.0

    def advance_to(self, t: float) -> None:
        if t > self.now:
            self.now = t


class MemorySystem:
    def __init__(self, geometry: Geometry, track_events: bool = True):
        self.geometry = geometry
        self.clock = SimClock()
        self.banks: dict[tuple[int, int, int], BankState] = {}
        self.stats = {CPU: AccessStats(), PIM: AccessStats()}
        self.handovers = 0
        self.control_messages = 0
        self.events: list[Event] | None = [] if track_events else None

    def bank(self, channel: int, rank: int, bank: int) -> BankState:
        g = self.geometry
        if not (0 <= channel < g.channels and 0 <= rank < g.ranks_per_channel
                and 0 <= bank < g.banks_per_device):
            raise ProtocolError("bank (%d,%d,%d) outside the geometry" % (channel, rank, bank))
        key = (channel, rank, bank)
        st = self.banks.get(key)
        if st is None:
            st = self.banks[key] = BankState(channel, rank, bank)
        return st

    def _record(self, start: float, end: float, actor: str, label: str) -> None:
        if self.events is not None:
            self.events.append(Event(start, end, actor, label))
        self.clock.advance_to(end)

    # --- CPU side ---

    def cpu_access_lines(self, lines: int, useful_bytes: int = 0, banks=(),
                         at: float | None = None, label: str = "cpu") -> tuple[float, float]:
        """Interleaved access billed as ``lines`` whole cache lines."""
        at = self.clock.now if at is None else at
        if lines == 0:
            return (at, at)
        start = at
        for b in banks:
            st = self.bank(*b)
            if st.controller != CPU:
                raise ProtocolError("bank %s is under PIM control" % (b,))
            start = max(start, st.pim_hold_until)
        billed = lines * self.geometry.cache_line_bytes
        dur = billed / self.geometry.cpu_bandwidth
        s = self.stats[CPU]
        s.accesses += 1
        s.bytes_billed += billed
        s.useful_bytes += useful_bytes
        s.busy_time += dur
        s.stall_time += start - at
        self._record(start, start + dur, CPU, label)
        return (start, start + dur)

    def cpu_transfer(self, nbytes: int, useful_bytes: int | None = None, banks=(),
                     at: float | None = None, label: str = "cpu") -> tuple[float, float]:
        """Bulk CPU-bus transfer of ``nbytes`` (rounded up to cache lines)."""
        lines = math.ceil(nbytes / self.geometry.cache_line_bytes)
        useful = nbytes if useful_bytes is None else useful_bytes
        return self.cpu_access_lines(lines, useful, banks, at, label)

    def cpu_message(self, at: float | None = None, label: str = "msg") -> tuple[float, float]:
        """One control message (launch or poll): a single-line round trip."""
        self.control_messages += 1
        return self.cpu_access_lines(1, 0, (), at, label)

    # --- PIM side ---

    def pim_access(self, unit_bytes, useful_bytes: int = 0, banks=(),
                   at: float | None = None, label: str = "pim") -> tuple[float, float]:
        """Device-local streaming by one or more units in parallel.

        ``unit_bytes`` is a byte count or a sequence of per-unit byte counts;
        each is rounded up to 8 B bursts and the step lasts as long as the
        busiest unit.
        """
        at = self.clock.now if at is None else at
        if isinstance(unit_bytes, (int, float)):
            unit_bytes = [unit_bytes]
        for b in banks:
            st = self.bank(*b)
            if st.controller != PIM:
                raise ProtocolError("bank %s accessed by PIM while CPU-controlled" % (b,))
        g = self.geometry.interleave_granularity
        billed = [math.ceil(n / g) * g for n in unit_bytes]
        total = sum(billed)
        if total == 0:
            return (at, at)
        dur = max(billed) / self.geometry.pim_unit_bandwidth
        s = self.stats[PIM]
        s.accesses += 1
        s.bytes_billed += total
        s.useful_bytes += useful_bytes
        s.busy_time += dur
        self._record(at, at + dur, PIM, label)
        return (at, at + dur)

    def bill(self, actor: str, duration: float, bytes_billed: int = 0,
             useful_bytes: int = 0, at: float | None = None,
             label: str = "work") -> tuple[float, float]:
        """Record a closed-form cost (duration computed by the caller)."""
        at = self.clock.now if at is None else at
        s = self.stats[actor]
        s.accesses += 1
        s.bytes_billed += bytes_billed
        s.useful_bytes += useful_bytes
        s.busy_time += duration
        self._record(at, at + duration, actor, label)
        return (at, at + duration)

    # --- control transfer ---

    def handover(self, banks, to: str, at: float | None = None) -> tuple[float, float]:
        """Switch bank control; costs one latency per distinct rank."""
        if to not in (CPU, PIM):
            raise ProtocolError("handover target must be %r or %r" % (CPU, PIM))
        at = self.clock.now if at is None else at
        states = [self.bank(*b) for b in banks]
        ranks = {st.rank_key for st in states}
        dur = self.geometry.handover_latency * len(ranks)
        end = at + dur
        for st in states:
            st.controller = to
            if to == CPU:
                st.pim_hold_until = max(st.pim_hold_until, end)
        if ranks:
            self.handovers += len(ranks)
            self._record(at, end, PIM if to == PIM else CPU, "handover->%s" % to)
        return (at, end)
