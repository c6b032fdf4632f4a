"""Memory-system geometry and cost parameters.

Defaults model a 4-channel DDR5 system with 4 ranks per channel, 8 devices
(chips) per rank, 8 banks per device, and one PIM unit per (device, bank).
Costs are bandwidth-denominated: latency-class parameters (tCL and friends)
may be recorded in the ``timing`` mapping for documentation but do not enter
the cost model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import PimHtapError

# Fixed by the DIMM protocol: one 64-bit beat per device per burst cycle, so
# consecutive 8 B chunks of a part's row land on consecutive devices.
INTERLEAVE_GRANULARITY = 8


@dataclass(frozen=True)
class Geometry:
    channels: int = 4
    ranks_per_channel: int = 4
    devices_per_rank: int = 8
    banks_per_device: int = 8
    interleave_granularity: int = INTERLEAVE_GRANULARITY
    cache_line_bytes: int = 64
    cpu_bandwidth: float = 25.6e9        # bytes/s per channel (bdw_CPU)
    pim_unit_bandwidth: float = 1.0e9    # bytes/s between one unit's WRAM and its bank
    handover_latency: float = 0.2e-6     # seconds per rank per bank-control switch
    wram_capacity: int = 65536           # bytes of scratchpad per PIM unit
    wram_data_budget: int = 32768        # bytes of scratchpad usable for operand data
    compute_rate: float = 8.0e9          # column elements/s per unit once data is in WRAM
    timing: tuple = ()                   # (name, value) pairs, documentation only

    def __post_init__(self):
        for name in ("channels", "ranks_per_channel", "devices_per_rank",
                     "banks_per_device", "cache_line_bytes", "wram_capacity",
                     "wram_data_budget"):
            if getattr(self, name) < 1:
                raise PimHtapError("geometry: %s must be >= 1" % name)
        if self.interleave_granularity != INTERLEAVE_GRANULARITY:
            raise PimHtapError(
                "geometry: interleave granularity is fixed at %d B by the DIMM "
                "protocol" % INTERLEAVE_GRANULARITY)
        if self.cache_line_bytes % self.interleave_granularity:
            raise PimHtapError("geometry: cache line must be a multiple of the "
                               "interleave granularity")
        if self.wram_data_budget > self.wram_capacity // 2:
            # Half the scratchpad is reserved for code, stacks, and results.
            raise PimHtapError("geometry: wram_data_budget exceeds half the WRAM")
        for name in ("cpu_bandwidth", "pim_unit_bandwidth", "compute_rate"):
            if getattr(self, name) <= 0:
                raise PimHtapError("geometry: %s must be positive" % name)
        if self.handover_latency < 0:
            raise PimHtapError("geometry: handover_latency must be >= 0")
        object.__setattr__(self, "timing", tuple(tuple(t) for t in self.timing))

    @property
    def units_per_rank(self) -> int:
        """PIM units in one rank: one per (device, bank)."""
        return self.devices_per_rank * self.banks_per_device

    @property
    def total_units(self) -> int:
        return self.channels * self.ranks_per_channel * self.units_per_rank

    @property
    def pim_rank_bandwidth(self) -> float:
        """Aggregate PIM bandwidth of one rank (bdw_PIM for rank-local work)."""
        return self.units_per_rank * self.pim_unit_bandwidth

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "ranks_per_channel": self.ranks_per_channel,
            "devices_per_rank": self.devices_per_rank,
            "banks_per_device": self.banks_per_device,
            "interleave_granularity": self.interleave_granularity,
            "cache_line_bytes": self.cache_line_bytes,
            "cpu_bandwidth": self.cpu_bandwidth,
            "pim_unit_bandwidth": self.pim_unit_bandwidth,
            "handover_latency": self.handover_latency,
            "wram_capacity": self.wram_capacity,
            "wram_data_budget": self.wram_data_budget,
            "compute_rate": self.compute_rate,
            "timing": [list(t) for t in self.timing],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Geometry":
        kwargs = dict(doc)
        if "timing" in kwargs:
            kwargs["timing"] = tuple(tuple(t) for t in kwargs["timing"])
        return cls(**kwargs)


def load_geometry(path) -> Geometry:
    with open(path) as f:
        return Geometry.from_dict(json.load(f))


def save_geometry(path, geometry: Geometry) -> None:
    with open(path, "w") as f:
        json.dump(geometry.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
