"""Functional simulation of EGRU layers split across processing elements.

Each layer's units are cut into contiguous blocks, one per PE. A PE holds
the input-matrix rows of its units and the recurrent-matrix columns that
feed them (all presynaptic rows), plus bias/threshold/state slices. Every
timestep runs in lockstep:

1. each PE projects the layer input and the previous step's assembled
   events to get its update and reset gates, then gates its *own* last
   events with its reset gate;
2. barrier: gated fragments are broadcast and concatenated;
3. each PE computes the candidate and new state and emits events;
4. barrier: event fragments are broadcast and concatenated; the result is
   the recurrent input of the next step and the input of the next layer.

Because blocks are contiguous and concatenation follows PE rank, assembled
event vectors are sorted without a sort, and every destination accumulates
its inputs in ascending presynaptic order regardless of the PE count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .egru import (
    GATES,
    EgruLayerParams,
    candidate_from_gated,
    compute_gates,
    emit_events,
    gate_events,
    input_projections,
    state_update,
)
from .profiler import StageCounters
from .sparse import (
    ELEMENT_BYTES,
    FLOAT,
    DimensionError,
    EventVector,
    OpCounter,
    csr_col_slice,
    csr_row_slice,
    csr_storage_bytes,
    event_macs,
)

log = logging.getLogger(__name__)

# b_u, b_r, b_z, theta, c, u, r, z per owned unit, plus an outgoing event slot
VARIABLE_BYTES_PER_UNIT = 8 * ELEMENT_BYTES + 2 * ELEMENT_BYTES
# 2 sigmoids, tanh, 3 gate sums, 3-op state update, threshold compare/reset
POINTWISE_OPS_PER_UNIT = 10
EVENT_BYTES = 2 * ELEMENT_BYTES


class BudgetExceeded(Exception):
    def __init__(self, pe: int, needed: int, available: int, layer_id: int = 0):
        self.pe, self.needed, self.available, self.layer_id = pe, needed, available, layer_id
        super().__init__(
            f"layer {layer_id} PE {pe} needs {needed} bytes of data memory, {available} available"
        )


@dataclass(frozen=True)
class PeBudget:
    sram_total: int = 131072
    instruction_reserved: int = 32768
    data_available: int = 98304

    def __post_init__(self):
        if self.instruction_reserved + self.data_available > self.sram_total:
            raise ValueError("instruction + data reservations exceed SRAM")

    @classmethod
    def unlimited(cls) -> "PeBudget":
        big = 1 << 62
        return cls(sram_total=2 * big, instruction_reserved=0, data_available=big)

    @classmethod
    def with_data_kb(cls, kb: float) -> "PeBudget":
        data = int(round(kb * 1024))
        return cls(sram_total=max(131072, data + 32768), data_available=data)


@dataclass(frozen=True, eq=False)
class PeSlice:
    rank: int
    start: int
    stop: int
    params: EgruLayerParams
    weight_bytes: int
    variable_bytes: int

    @property
    def footprint(self) -> int:
        return self.weight_bytes + self.variable_bytes


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    layer_id: int
    n_units: int
    n_pes: int
    ranges: list
    footprints: list
    weight_bytes: list
    slices: list = field(repr=False)
    budget: PeBudget = field(default_factory=PeBudget)


def block_ranges(n_units: int, n_pes: int) -> list[tuple[int, int]]:
    """Contiguous blocks of ``ceil(n_units / n_pes)`` units; trailing PEs may be empty."""
    if n_pes < 1:
        raise ValueError("n_pes must be >= 1")
    size = -(-n_units // n_pes)
    return [(min(p * size, n_units), min((p + 1) * size, n_units)) for p in range(n_pes)]


def slice_params(p: EgruLayerParams, start: int, stop: int) -> EgruLayerParams:
    return EgruLayerParams(
        n_in=p.n_in,
        n_units=stop - start,
        n_presyn=p.n_presyn,
        **{f"W_{g}_x": csr_row_slice(getattr(p, f"W_{g}_x"), start, stop) for g in GATES},
        **{f"W_{g}_y": csr_col_slice(getattr(p, f"W_{g}_y"), start, stop) for g in GATES},
        **{f"b_{g}": getattr(p, f"b_{g}")[start:stop] for g in GATES},
        theta=p.theta[start:stop],
        lambda_sg=p.lambda_sg,
        epsilon_sg=p.epsilon_sg,
    )


def plan_partition(
    n_units: int,
    n_pes: int,
    params: EgruLayerParams,
    budget: PeBudget | None = None,
    layer_id: int = 0,
) -> PartitionPlan:
    """Split a layer over ``n_pes`` PEs and check each PE's data memory.

    Raises :class:`BudgetExceeded` for the first PE that does not fit.
    """
    budget = budget or PeBudget()
    if params.n_units != n_units or params.n_presyn != n_units:
        raise DimensionError("params do not describe a whole layer of n_units")
    slices, footprints, weights = [], [], []
    for rank, (start, stop) in enumerate(block_ranges(n_units, n_pes)):
        local = slice_params(params, start, stop)
        w = sum(csr_storage_bytes(m) for m in local.weight_matrices())
        v = VARIABLE_BYTES_PER_UNIT * (stop - start)
        if w + v > budget.data_available:
            raise BudgetExceeded(rank, w + v, budget.data_available, layer_id)
        slices.append(PeSlice(rank, start, stop, local, w, v))
        footprints.append(w + v)
        weights.append(w)
    return PartitionPlan(
        layer_id=layer_id,
        n_units=n_units,
        n_pes=n_pes,
        ranges=[(s.start, s.stop) for s in slices],
        footprints=footprints,
        weight_bytes=weights,
        slices=slices,
        budget=budget,
    )


def split_pes(total_pes: int, unit_counts: list[int]) -> list[int]:
    """Share ``total_pes`` among layers in proportion to their units (largest remainder)."""
    if total_pes < len(unit_counts):
        raise ValueError(f"need at least one PE per layer, got {total_pes} for {len(unit_counts)}")
    quotas = [total_pes * n / sum(unit_counts) for n in unit_counts]
    counts = [max(1, int(q)) for q in quotas]
    by_remainder = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - int(quotas[i])), i))
    i = 0
    while sum(counts) < total_pes:
        counts[by_remainder[i % len(counts)]] += 1
        i += 1
    while sum(counts) > total_pes:
        j = max((k for k in range(len(counts)) if counts[k] > 1), key=lambda k: counts[k] - quotas[k])
        counts[j] -= 1
    return counts


def plan_stack(layers: list[EgruLayerParams], pes, budget: PeBudget | None = None) -> list[PartitionPlan]:
    """Plans for a layer stack. ``pes`` is a total to share out or one count per layer."""
    if isinstance(pes, int):
        pes = split_pes(pes, [p.n_units for p in layers])
    if len(pes) != len(layers):
        raise ValueError("need one PE count per layer")
    return [plan_partition(p.n_units, n, p, budget, layer_id=i) for i, (p, n) in enumerate(zip(layers, pes))]


def broadcast_and_assemble(fragments: list[EventVector], ranges: list[tuple[int, int]], dim: int) -> EventVector:
    """Concatenate per-PE fragments in rank order into one global event vector."""
    if len(fragments) != len(ranges):
        raise ValueError("one fragment per PE required")
    for rank, (frag, (start, stop)) in enumerate(zip(fragments, ranges)):
        if frag.dim != dim:
            raise DimensionError(f"fragment from PE {rank} has dim {frag.dim}, expected {dim}")
        if len(frag) and (int(frag.indices[0]) < start or int(frag.indices[-1]) >= stop):
            raise ValueError(f"PE {rank} sent an event outside its units [{start}, {stop})")
    if not fragments:
        return EventVector.empty(dim)
    return EventVector(
        dim,
        np.concatenate([f.indices for f in fragments]),
        np.concatenate([f.values for f in fragments]),
    )


def split_events(y: EventVector, ranges: list[tuple[int, int]]) -> list[EventVector]:
    bounds = np.searchsorted(y.indices, [s for s, _ in ranges] + [ranges[-1][1]])
    return [
        EventVector(y.dim, y.indices[bounds[i] : bounds[i + 1]], y.values[bounds[i] : bounds[i + 1]])
        for i in range(len(ranges))
    ]


class PeMailbox:
    """One slot per source PE per (timestep, phase); a step completes when all are filled."""

    def __init__(self, n_pes: int):
        self.n_pes = n_pes
        self._slots: dict = {}

    def post(self, src: int, step: int, phase: str, fragment: EventVector):
        slots = self._slots.setdefault((step, phase), [None] * self.n_pes)
        if slots[src] is not None:
            raise RuntimeError(f"PE {src} already posted for step {step} phase {phase}")
        slots[src] = fragment

    def complete(self, step: int, phase: str) -> bool:
        slots = self._slots.get((step, phase))
        return slots is not None and all(s is not None for s in slots)

    def collect(self, step: int, phase: str) -> list[EventVector]:
        if not self.complete(step, phase):
            raise RuntimeError(f"barrier not reached for step {step} phase {phase}")
        return self._slots.pop((step, phase))


def count_recurrent_macs(plan: PartitionPlan, params: EgruLayerParams, y: EventVector) -> int:
    """MACs of the three recurrent projections for active set ``y``, summed over PEs."""
    if y.dim != params.n_units or plan.n_units != params.n_units:
        raise DimensionError("plan, params and events disagree on layer size")
    return sum(event_macs(m, y) for s in plan.slices for m in s.params.recurrent_matrices())


@dataclass
class SimConfig:
    header_packets_per_pe: int = 1
    route_to_next_layer: bool = True
    workers: int | None = None


class _PeState:
    __slots__ = ("c", "wx_z", "u", "r")

    def __init__(self, k: int):
        self.c = np.zeros(k, dtype=FLOAT)


class Simulator:
    """Lockstep multi-PE execution of an EGRU stack with cost counters.

    State persists across :meth:`step` calls until :meth:`reset`.
    """

    def __init__(self, plans: list[PartitionPlan], layers: list[EgruLayerParams], config: SimConfig | None = None):
        if len(plans) != len(layers):
            raise ValueError("one plan per layer required")
        for i in range(1, len(layers)):
            if layers[i].n_in != layers[i - 1].n_units:
                raise DimensionError(f"layer {i} expects {layers[i].n_in} inputs, layer {i - 1} has {layers[i - 1].n_units} units")
        for plan, p in zip(plans, layers):
            if plan.n_units != p.n_units:
                raise DimensionError("plan does not match layer")
        self.plans = plans
        self.layers = layers
        self.config = config or SimConfig()
        self.counters = StageCounters()
        self.event_log: list[tuple] = []
        self.log_events = False
        self._pool = ThreadPoolExecutor(self.config.workers) if self.config.workers else None
        self.reset()

    @classmethod
    def build(cls, layers, pes=1, budget: PeBudget | None = None, config: SimConfig | None = None):
        """Plan and construct; ``pes`` as for :func:`plan_stack` (default one PE per layer, unlimited memory)."""
        if pes == 1:
            pes = [1] * len(layers)
            budget = budget or PeBudget.unlimited()
        return cls(plan_stack(layers, pes, budget), layers, config)

    def reset(self):
        self.t = 0
        self.pe_state = [[_PeState(s.stop - s.start) for s in plan.slices] for plan in self.plans]
        self.y_prev = [EventVector.empty(p.n_units) for p in self.layers]

    def close(self):
        if self._pool:
            self._pool.shutdown()

    def _map(self, fn, items):
        if self._pool:
            return list(self._pool.map(fn, items))
        return [fn(i) for i in items]

    def _log(self, *entry):
        if self.log_events:
            self.event_log.append(entry)

    def step(self, x) -> list[EventVector]:
        """Advance one timestep; returns the assembled output of every layer."""
        x = np.asarray(x, dtype=FLOAT)
        t = self.t
        outputs = []
        for l, (plan, p) in enumerate(zip(self.plans, self.layers)):
            if l == 0:
                if x.shape != (p.n_in,):
                    raise DimensionError(f"input has shape {x.shape}, first layer expects ({p.n_in},)")
                n_feeders = len(plan.slices)
                self.counters.add("offchip_read", bytes_read=ELEMENT_BYTES * p.n_in * n_feeders)
            y_prev = self.y_prev[l]
            own_prev = split_events(y_prev, plan.ranges)
            mailbox = PeMailbox(plan.n_pes)
            states = self.pe_state[l]

            def phase_gates(pe: PeSlice, x=x, l=l, y_prev=y_prev, own_prev=own_prev, states=states, mailbox=mailbox):
                self._log("compute", t, l, "gates", pe.rank)
                st = states[pe.rank]
                c = StageCounters()
                ic, rc = OpCounter(), OpCounter()
                wx_u, wx_r, st.wx_z = input_projections(pe.params, x, ic)
                st.u, st.r = compute_gates(pe.params, wx_u, wx_r, y_prev, rc)
                k = pe.stop - pe.start
                in_bytes = sum(csr_storage_bytes(m) for m in pe.params.input_matrices())
                c.add("input_matmul", mac_count=ic.macs, bytes_read=in_bytes + ELEMENT_BYTES * ic.macs,
                      bytes_written=3 * ELEMENT_BYTES * k)
                c.add("recurrent_matmul", **_recurrent_traffic(rc.macs, 2 * len(y_prev)))
                own = own_prev[pe.rank]
                gated = gate_events(st.r, own, offset=pe.start)
                c.add("pointwise", mac_count=len(own), bytes_read=ELEMENT_BYTES * 2 * len(own),
                      bytes_written=EVENT_BYTES * len(gated))
                mailbox.post(pe.rank, t, "gated", gated)
                return c

            for c in self._map(phase_gates, plan.slices):
                self.counters.merge(c)
            gated_frags = mailbox.collect(t, "gated")
            self._log("barrier", t, l, "gated")
            gated_all = broadcast_and_assemble(gated_frags, plan.ranges, p.n_units)
            self._charge_broadcast(gated_frags, plan.n_pes - 1, plan.n_pes)

            def phase_update(pe: PeSlice, states=states, gated_all=gated_all, mailbox=mailbox, l=l, dim=p.n_units):
                self._log("compute", t, l, "update", pe.rank)
                st = states[pe.rank]
                c = StageCounters()
                rc = OpCounter()
                z = candidate_from_gated(pe.params, st.wx_z, gated_all, rc)
                c_pre = state_update(st.u, z, st.c)
                y_frag, st.c, _ = emit_events(c_pre, pe.params.theta, offset=pe.start, dim=dim)
                c.add("recurrent_matmul", **_recurrent_traffic(rc.macs, len(gated_all)))
                k = pe.stop - pe.start
                c.add("pointwise", mac_count=POINTWISE_OPS_PER_UNIT * k, bytes_read=8 * ELEMENT_BYTES * k,
                      bytes_written=ELEMENT_BYTES * k + EVENT_BYTES * len(y_frag))
                mailbox.post(pe.rank, t, "y", y_frag)
                return c

            for c in self._map(phase_update, plan.slices):
                self.counters.merge(c)
            frags = mailbox.collect(t, "y")
            self._log("barrier", t, l, "y")
            y = broadcast_and_assemble(frags, plan.ranges, p.n_units)
            downstream = 0
            if l + 1 < len(self.plans) and self.config.route_to_next_layer:
                downstream = self.plans[l + 1].n_pes
            self._charge_broadcast(frags, plan.n_pes - 1 + downstream, plan.n_pes)
            self.y_prev[l] = y
            outputs.append(y)
            x = y.to_dense()
        self.counters.add("host_io", bytes_written=EVENT_BYTES * len(outputs[-1]), packet_count=1)
        self.t += 1
        return outputs

    def _charge_broadcast(self, frags, n_dest: int, n_src: int):
        n_events = sum(len(f) for f in frags)
        packets = n_events * n_dest + self.config.header_packets_per_pe * n_src
        self.counters.add("broadcast", packet_count=packets, bytes_written=EVENT_BYTES * n_events * n_dest)


def _recurrent_traffic(macs: int, active_rows: int) -> dict:
    # per MAC: weight + column index + accumulator read, accumulator write; per row: two extents
    return dict(
        mac_count=macs,
        bytes_read=3 * ELEMENT_BYTES * macs + 2 * ELEMENT_BYTES * active_rows,
        bytes_written=ELEMENT_BYTES * macs,
    )


@dataclass
class SequenceResult:
    outputs: list
    layer_outputs: list
    counters: StageCounters
    event_log: list


def run_sequence(plans, layers, inputs, config: SimConfig | None = None, log_events: bool = False) -> SequenceResult:
    """Run a fresh stack over ``inputs``; outputs are the last layer's events per step."""
    sim = Simulator(plans, layers, config)
    sim.log_events = log_events
    try:
        per_step = [sim.step(x) for x in inputs]
    finally:
        sim.close()
    return SequenceResult([o[-1] for o in per_step], per_step, sim.counters, sim.event_log)
