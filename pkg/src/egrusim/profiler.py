"""Stage-level cost accounting.

Counters are collected per PE and summed at barriers. A :class:`CostModel`
turns them into modeled time (counter x rate, summed per stage) and energy
(chip power x time). Nothing here is measured; report fields say so.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_FLOOR, Decimal

STAGES = (
    "input_matmul",
    "recurrent_matmul",
    "pointwise",
    "broadcast",
    "offchip_read",
    "host_io",
)
COUNTER_FIELDS = ("mac_count", "bytes_read", "bytes_written", "packet_count")
REPORT_VERSION = 1
QUANTIZATION_TICKS = 10
TICK_SNAP = Decimal("1e-12")


@dataclass
class Counter:
    mac_count: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    packet_count: int = 0

    def add(self, mac_count=0, bytes_read=0, bytes_written=0, packet_count=0):
        if min(mac_count, bytes_read, bytes_written, packet_count) < 0:
            raise ValueError("counter increments must be non-negative")
        self.mac_count += int(mac_count)
        self.bytes_read += int(bytes_read)
        self.bytes_written += int(bytes_written)
        self.packet_count += int(packet_count)


@dataclass
class StageCounters:
    stages: dict = field(default_factory=lambda: {s: Counter() for s in STAGES})

    def __getitem__(self, stage: str) -> Counter:
        return self.stages[stage]

    def add(self, stage: str, **counts):
        self.stages[stage].add(**counts)

    def merge(self, other: "StageCounters") -> "StageCounters":
        for s in STAGES:
            self.stages[s].add(**asdict(other.stages[s]))
        return self

    def copy(self) -> "StageCounters":
        return StageCounters().merge(self)

    def as_dict(self) -> dict:
        return {s: asdict(c) for s, c in self.stages.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "StageCounters":
        out = cls()
        for s, c in d.items():
            out.add(s, **c)
        return out


@dataclass(frozen=True)
class StageRates:
    sec_per_mac: float = 0.0
    sec_per_byte: float = 0.0
    sec_per_packet: float = 0.0

    def __post_init__(self):
        if min(self.sec_per_mac, self.sec_per_byte, self.sec_per_packet) < 0:
            raise ValueError("rates must be >= 0")

    def time(self, c: Counter) -> float:
        return (
            c.mac_count * self.sec_per_mac
            + (c.bytes_read + c.bytes_written) * self.sec_per_byte
            + c.packet_count * self.sec_per_packet
        )


CHIP_POWER_W = 0.39


def default_rates() -> dict:
    # Calibration inputs, not measurements. Counters are summed over PEs, so
    # these are chip-aggregate rates. The row kernel streams its CSR slice and
    # keeps the sum in a register; the event-driven kernel does a scattered
    # read-modify-write per MAC; pointwise ops include exp/tanh in software;
    # a NoC packet is a single register write for the core.
    return {
        "input_matmul": StageRates(sec_per_mac=2e-9, sec_per_byte=0.5e-9),
        "recurrent_matmul": StageRates(sec_per_mac=40e-9, sec_per_byte=6.7e-9),
        "pointwise": StageRates(sec_per_mac=20e-9, sec_per_byte=1.7e-9),
        "broadcast": StageRates(sec_per_packet=5e-9),
        "offchip_read": StageRates(sec_per_byte=0.25e-9),
        "host_io": StageRates(sec_per_byte=1e-9, sec_per_packet=1e-6),
    }


@dataclass(frozen=True)
class CostModel:
    rates: dict = field(default_factory=default_rates)
    static_power_w: float = CHIP_POWER_W
    timer_resolution_s: float = 1e-6

    def __post_init__(self):
        if self.static_power_w < 0:
            raise ValueError("power must be >= 0")
        missing = set(STAGES) - set(self.rates)
        if missing:
            raise ValueError(f"missing rates for stages {sorted(missing)}")


def energy(power_w: float, time_s: float) -> float:
    if power_w < 0 or time_s < 0:
        raise ValueError("power and time must be >= 0")
    return power_w * time_s


def quantize_to_timer(t: float, resolution_s: float = 1e-6) -> int:
    """Whole ticks of a 1 MHz down-counter elapsed in ``t`` seconds."""
    if t < 0:
        raise ValueError("time must be >= 0")
    # decimal arithmetic on the shortest repr so 0.17025 s is 170250 ticks, not 170249
    ticks = Decimal(repr(float(t))) / Decimal(repr(float(resolution_s)))
    nearest = ticks.to_integral_value()
    # float products such as 170250 * 1e-6 land an ulp short of a whole tick
    if abs(ticks - nearest) <= TICK_SNAP * max(1, nearest):
        return int(nearest)
    return int(ticks.to_integral_value(rounding=ROUND_FLOOR))


@dataclass
class ProfileReport:
    stage_times_s: dict
    stage_ticks: dict
    total_time_s: float
    power_w: float
    energy_j: float
    batch_size: int
    time_per_item_s: float
    energy_per_item_j: float
    counters: dict
    quantized_stages: list
    power_source: str = "modeled"
    measured_energy_j: float | None = None

    def ranked_stages(self) -> list[str]:
        return sorted(STAGES, key=lambda s: -self.stage_times_s[s])

    def to_json(self) -> str:
        doc = {"format": "egrusim-profile", "version": REPORT_VERSION, **asdict(self)}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ProfileReport":
        doc = json.loads(text)
        if doc.pop("format", None) != "egrusim-profile" or doc.pop("version", None) != REPORT_VERSION:
            raise ValueError("not an egrusim profile report of a supported version")
        return cls(**doc)

    def format_table(self) -> str:
        lines = [f"{'stage':<18}{'MACs':>14}{'bytes':>14}{'packets':>11}{'time_ms':>12}{'share':>8}"]
        for s in STAGES:
            c = self.counters[s]
            t = self.stage_times_s[s]
            share = t / self.total_time_s if self.total_time_s else 0.0
            lines.append(
                f"{s:<18}{c['mac_count']:>14,}{c['bytes_read'] + c['bytes_written']:>14,}"
                f"{c['packet_count']:>11,}{t * 1e3:>12.4f}{share:>8.1%}"
            )
        lines.append(f"total time      {self.total_time_s * 1e3:.4f} ms ({self.power_source})")
        lines.append(f"power           {self.power_w:.4g} W")
        lines.append(f"energy          {self.energy_j:.6g} J")
        if self.measured_energy_j is not None:
            lines.append(f"measured energy {self.measured_energy_j:.6g} J")
        lines.append(f"batch size      {self.batch_size}")
        lines.append(f"per item        {self.time_per_item_s * 1e3:.4f} ms, {self.energy_per_item_j:.6g} J")
        if self.quantized_stages:
            lines.append("below 10 timer ticks: " + ", ".join(self.quantized_stages))
        return "\n".join(lines)


def build_report(
    counters: StageCounters,
    model: CostModel | None = None,
    batch_size: int = 1,
    power_w: float | None = None,
    measured_energy_j: float | None = None,
) -> ProfileReport:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    model = model or CostModel()
    power = model.static_power_w if power_w is None else power_w
    times = {s: model.rates[s].time(counters[s]) for s in STAGES}
    total = math.fsum(times.values())
    ticks = {s: quantize_to_timer(t, model.timer_resolution_s) for s, t in times.items()}
    e = energy(power, total)
    return ProfileReport(
        stage_times_s=times,
        stage_ticks=ticks,
        total_time_s=total,
        power_w=power,
        energy_j=e,
        batch_size=batch_size,
        time_per_item_s=total / batch_size,
        energy_per_item_j=e / batch_size,
        counters=counters.as_dict(),
        quantized_stages=[s for s in STAGES if times[s] > 0 and ticks[s] < QUANTIZATION_TICKS],
        measured_energy_j=measured_energy_j,
    )
