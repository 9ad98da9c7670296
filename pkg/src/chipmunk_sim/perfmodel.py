"""
Cycle, time, power and energy model over array schedules.

Cycle costs per phase (``n`` = units per tile):

    load                bytes / bytes_per_load_cycle + reload_event_overhead
                        (max over tiles when loading in parallel, sum otherwise)
    x_broadcast         blocks * broadcast_cycles_per_block
    gate_block_compute  n per block (all tiles of the phase in parallel)
    row_reduce          n * reduce_cycles_per_element * hops
    elementwise         elementwise_stage_cycles
    h_redistribute      n * max(1, hops)
    dense_output        n + n * reduce_cycles_per_element * hops + elementwise_stage_cycles

plus ``stream_out`` output elements (one per cycle) when ``include_io``.
Initial programming of resident layers is excluded from per-frame time.

``overlap_load`` hides a reload behind the compute cycles since the previous
reload. ``pipeline_reduce`` (experimental) overlaps the row reduction of gates
i, f, c with the next gate's two block computes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .modelio import NetworkModel, QuantizedModel
from .systolic import PHASE_KINDS, SchedulePhase


@dataclass(frozen=True)
class OperatingPoint:
    """Voltage/frequency point. ``tile_power`` drives array power; ``chip_power``
    is the single-chip peak used for efficiency figures (defaults to tile_power)."""

    name: str
    voltage: float
    freq: float
    tile_power: float
    chip_power: float | None = None

    def __post_init__(self):
        if self.freq < 0:
            raise ValueError("frequency must be non-negative")
        if self.tile_power <= 0:
            raise ValueError("power must be positive")

    @property
    def peak_chip_power(self) -> float:
        return self.chip_power if self.chip_power is not None else self.tile_power


OPERATING_POINTS = {
    "1.24V": OperatingPoint("1.24V", 1.24, 168e6, 24.45e-3, chip_power=29.03e-3),
    "0.75V": OperatingPoint("0.75V", 0.75, 20e6, 2.21e-3, chip_power=1.24e-3),
}


def operating_point(name: str) -> OperatingPoint:
    try:
        return OPERATING_POINTS[name]
    except KeyError:
        raise ValueError(f"unknown operating point {name!r}; known: {sorted(OPERATING_POINTS)}") from None


@dataclass(frozen=True)
class CycleParams:
    bytes_per_load_cycle: float = 1.0
    parallel_tile_load: bool = True
    reduce_cycles_per_element: int = 2
    elementwise_stage_cycles: int = 4
    reload_event_overhead: int = 1000
    broadcast_cycles_per_block: int = 96
    n_lstm: int = 96
    include_io: bool = True
    overlap_load: bool = False
    pipeline_reduce: bool = False  # experimental

    def __post_init__(self):
        for k, v in asdict(self).items():
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.bytes_per_load_cycle <= 0:
            raise ValueError("bytes_per_load_cycle must be > 0")

    def with_overrides(self, overrides: dict) -> "CycleParams":
        """Apply ``{"name": "value"}`` string overrides (CLI ``--cycle-param``)."""
        fields = asdict(self)
        typed = {}
        for k, v in overrides.items():
            if k not in fields:
                raise ValueError(f"unknown cycle parameter {k!r}")
            cur = fields[k]
            if isinstance(cur, bool):
                if str(v).lower() not in ("1", "0", "true", "false", "on", "off", "yes", "no"):
                    raise ValueError(f"{k} expects a boolean, got {v!r}")
                typed[k] = str(v).lower() in ("1", "true", "on", "yes")
            else:
                typed[k] = type(cur)(float(v)) if isinstance(cur, int) else float(v)
        return replace(self, **typed)


# ---------------------------------------------------------------------------
# op counting
# ---------------------------------------------------------------------------

# per hidden unit: 4 bias adds, 3 peephole mul+add, 5 activations,
# cell update (2 mul + 1 add), hidden update (1 mul)
ELEMENTWISE_OPS_PER_UNIT = 4 + 3 * 2 + 5 + 3 + 1


@dataclass(frozen=True)
class OpCount:
    mac_ops: int
    elementwise_ops: int
    weights: int

    @property
    def total(self) -> int:
        return self.mac_ops + self.elementwise_ops


def _model_dims(model):
    if isinstance(model, QuantizedModel):
        return [(q.n_x, q.n_h) for q in model.layers], (
            (model.dense.n_y, model.dense.n_h) if model.dense is not None else None
        )
    if isinstance(model, NetworkModel):
        return model.dims, ((model.dense.n_y, model.dense.n_h) if model.dense is not None else None)
    if model is None:
        return [], None
    # plain [(n_x, n_h), ...]
    return list(model), None


def op_count(model) -> OpCount:
    """Operations per frame, one MAC counted as two operations."""
    dims, dense = _model_dims(model)
    mac = ew = weights = 0
    for nx, nh in dims:
        mac += 2 * 4 * nh * (nx + nh)
        ew += ELEMENTWISE_OPS_PER_UNIT * nh
        weights += 4 * nh * (nx + nh) + 3 * nh + 4 * nh
    if dense is not None:
        ny, nh = dense
        mac += 2 * ny * nh
        ew += ny
        weights += ny * nh
    return OpCount(mac, ew, weights)


def peak_performance(op: OperatingPoint, n_macs: int = 96) -> float:
    """Peak Gop/s."""
    return 2 * n_macs * op.freq / 1e9


def efficiency(op: OperatingPoint, n_macs: int = 96) -> float:
    """Peak Gop/s per mW of single-chip power."""
    return peak_performance(op, n_macs) / (op.peak_chip_power * 1e3)


# ---------------------------------------------------------------------------
# cycles
# ---------------------------------------------------------------------------


def phase_cycles(ph: SchedulePhase, params: CycleParams) -> float:
    n = params.n_lstm
    k = ph.kind
    if k == "load":
        if not ph.load_bytes:
            return 0.0
        per = [b / params.bytes_per_load_cycle for b in ph.load_bytes]
        return (max(per) if params.parallel_tile_load else sum(per)) + params.reload_event_overhead
    if k == "x_broadcast":
        return ph.blocks * params.broadcast_cycles_per_block
    if k == "gate_block_compute":
        return n * max(1, ph.blocks)
    if k == "row_reduce":
        return n * params.reduce_cycles_per_element * ph.hops
    if k == "elementwise":
        return params.elementwise_stage_cycles
    if k == "h_redistribute":
        return n * max(1, ph.hops)
    if k == "dense_output":
        return n + n * params.reduce_cycles_per_element * ph.hops + params.elementwise_stage_cycles
    raise ValueError(f"unknown phase kind {k!r}")


@dataclass
class CycleBreakdown:
    by_kind: dict
    io: float = 0.0
    initial: float = 0.0
    load_events: int = 0

    @property
    def total(self) -> float:
        return sum(self.by_kind.values()) + self.io

    @property
    def load_fraction(self) -> float:
        return self.by_kind.get("load", 0.0) / self.total if self.total else 0.0


def simulate_cycles(schedule: list[SchedulePhase], params: CycleParams = CycleParams()) -> CycleBreakdown:
    """Per-frame cycles by phase kind. Phases run back to back (barrier discipline)."""
    by_kind = {k: 0.0 for k in PHASE_KINDS}
    io = initial = 0.0
    events = 0
    since_load = 0.0  # compute cycles available to hide the next load under
    for ph in schedule:
        c = phase_cycles(ph, params)
        if ph.initial:
            initial += c
            continue
        if ph.kind == "load":
            events += 1
            if params.overlap_load:
                hidden = min(c, since_load)
                c -= hidden
            since_load = 0.0
        else:
            if params.pipeline_reduce and ph.kind == "row_reduce" and ph.gate != "o":
                c -= min(c, 2 * params.n_lstm)
            since_load += c
        by_kind[ph.kind] += c
        if params.include_io:
            io += ph.stream_out
    return CycleBreakdown(by_kind, io, initial, events)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    cycles_by_phase: dict
    cycles_total: float
    exec_time_s: float
    frame_period_s: float
    ops_per_frame: int
    weights: int
    n_tiles: int
    peak_power_w: float
    avg_power_w: float
    energy_j: float
    gops: float
    gops_per_mw: float
    deadline_met: bool
    operating_point: str
    freq_hz: float
    load_fraction: float
    notes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report(
    cycles: CycleBreakdown,
    op: OperatingPoint,
    n_tiles: int,
    frame_period: float = 10e-3,
    ops: OpCount | None = None,
) -> RunReport:
    """Time/power/energy for one frame.

    Average power assumes perfect duty cycling over ``frame_period``; a frame
    that overruns the period keeps the array busy, so average equals peak.
    """
    if op.freq <= 0:
        raise ValueError("report needs a positive frequency")
    total = cycles.total
    t = total / op.freq
    peak = n_tiles * op.tile_power
    met = t <= frame_period
    avg = peak * t / frame_period if met else peak
    n_ops = ops.total if ops is not None else 0
    gops = n_ops / t / 1e9 if t > 0 else 0.0
    notes = []
    if op.chip_power is not None and op.chip_power != op.tile_power:
        notes.append(
            f"array power uses {op.tile_power * 1e3:.2f} mW/tile; single-chip peak is "
            f"{op.chip_power * 1e3:.2f} mW at this operating point"
        )
    return RunReport(
        cycles_by_phase={k: v for k, v in cycles.by_kind.items() if v} | ({"io": cycles.io} if cycles.io else {}),
        cycles_total=total,
        exec_time_s=t,
        frame_period_s=frame_period,
        ops_per_frame=n_ops,
        weights=ops.weights if ops is not None else 0,
        n_tiles=n_tiles,
        peak_power_w=peak,
        avg_power_w=avg,
        energy_j=peak * t,
        gops=gops,
        gops_per_mw=gops / (peak * 1e3) if peak else 0.0,
        deadline_met=met,
        operating_point=op.name,
        freq_hz=op.freq,
        load_fraction=cycles.load_fraction,
        notes=notes,
    )


def average_power(peak_power: float, exec_time: float, frame_period: float = 10e-3) -> float:
    return peak_power * exec_time / frame_period
