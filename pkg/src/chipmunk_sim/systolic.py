"""
Mapping an LSTM network onto a grid of tiles, and the executor that runs it.

Grid position (a, b) of a pass holds weight block (r, c): output rows
r*n..r*n+n-1 and input columns c*n..c*n+n-1 of both W_x and W_h. Input
blocks are broadcast down grid columns; partial sums travel left to right
along grid rows at 16 bits and are merged with saturating adds in ascending
block-column order; the right-most tile of each row owns the cell state and
runs the element-wise stages. Its hidden-state slice is then redistributed
to the grid column that consumes it as an h-block.

A layer that does not fit one sub-array is split into passes over
(row chunk, column chunk); partial sums of earlier column chunks are carried
between passes, so every geometry accumulates in the same order and
produces the same bits as ``lstm_ref.lstm_step_quant``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .lstm_ref import GATES
from .modelio import (
    NetworkModel,
    QuantizedModel,
    padded,
    quantize_model,
    stream_size,
    write_dense_stream,
    write_weight_stream,
)
from .tile import Tile, TileConfig, TileError

PHASE_KINDS = (
    "load",
    "x_broadcast",
    "gate_block_compute",
    "row_reduce",
    "elementwise",
    "h_redistribute",
    "dense_output",
)


@dataclass(frozen=True)
class ArrayGeometry:
    rows: int
    cols: int
    subarrays: int = 1
    n_lstm: int = 96

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.subarrays < 1:
            raise ValueError(f"geometry needs at least one tile, got {self}")

    @property
    def n_tiles(self) -> int:
        return self.rows * self.cols * self.subarrays

    @classmethod
    def parse(cls, text: str, n_lstm: int = 96) -> "ArrayGeometry":
        """``RxC`` or ``RxCxS`` (S sub-arrays of R x C tiles)."""
        parts = text.lower().split("x")
        try:
            nums = [int(p) for p in parts]
        except ValueError:
            raise ValueError(f"bad geometry {text!r}, expected RxC or RxCxS") from None
        if len(nums) not in (2, 3):
            raise ValueError(f"bad geometry {text!r}, expected RxC or RxCxS")
        return cls(*nums, n_lstm=n_lstm)

    def __str__(self):
        s = f"{self.rows}x{self.cols}"
        return s + (f"x{self.subarrays}" if self.subarrays > 1 else "")


@dataclass(frozen=True)
class Pass:
    """One weight-resident configuration of a sub-array for part of a layer."""

    row_chunk: int
    col_chunk: int
    tiles: tuple  # (((a, b), (r, c)), ...) in row-major grid order
    carry_in: bool
    carry_out: bool

    @property
    def final(self) -> bool:
        return not self.carry_out

    def rows(self) -> dict:
        """grid row -> [(b, r, c)] sorted by column."""
        out: dict[int, list] = {}
        for (a, b), (r, c) in self.tiles:
            out.setdefault(a, []).append((b, r, c))
        for v in out.values():
            v.sort()
        return out

    @property
    def max_row_tiles(self) -> int:
        return max(len(v) for v in self.rows().values())


@dataclass
class LayerMapping:
    index: int
    kind: str  # "lstm" or "dense"
    subarray: int
    n_in: int
    n_out: int
    row_blocks: int
    col_blocks: int
    x_blocks: int
    resident: bool
    passes: list[Pass]
    grid_cols: tuple[int, ...] = ()  # grid columns used (dense: only the right-most)

    @property
    def reconfigured(self) -> bool:
        return not self.resident

    def owned_blocks(self) -> list[tuple[int, int]]:
        return [rc for p in self.passes for _, rc in p.tiles]


@dataclass
class ArrayMapping:
    geometry: ArrayGeometry
    layers: list[LayerMapping]
    dense: LayerMapping | None = None
    dense_clobbers: tuple = ()  # (layer index, grid pos) restored after the dense pass
    notes: list[str] = field(default_factory=list)

    @property
    def resident(self) -> bool:
        return all(m.resident for m in self.layers) and (self.dense is None or self.dense.resident)

    @property
    def dense_reload(self) -> bool:
        return self.dense is not None and not self.dense.resident


def _passes(rb: int, cb: int, rows: int, cols: int, grid_col0: int = 0) -> list[Pass]:
    n_rc, n_cc = -(-rb // rows), -(-cb // cols)
    out = []
    for rc in range(n_rc):
        for cc in range(n_cc):
            tiles = []
            for a in range(rows):
                r = rc * rows + a
                if r >= rb:
                    break
                for b in range(cols):
                    c = cc * cols + b
                    if c >= cb:
                        break
                    tiles.append(((a, grid_col0 + b), (r, c)))
            out.append(Pass(rc, cc, tuple(tiles), carry_in=cc > 0, carry_out=cc < n_cc - 1))
    return out


def _dims(model) -> tuple[list[tuple[int, int]], int | None]:
    if isinstance(model, QuantizedModel):
        dims = [(q.n_x, q.n_h) for q in model.layers]
        return dims, (model.dense.n_y if model.dense is not None else None)
    if isinstance(model, NetworkModel):
        return model.dims, (model.dense.n_y if model.dense is not None else None)
    raise TypeError(f"cannot partition {type(model).__name__}")


def partition(model, geom: ArrayGeometry) -> ArrayMapping:
    """Assign padded weight blocks to tiles.

    With at least as many sub-arrays as layers, layer k gets sub-array k and
    stays resident when it fits. Otherwise layers share sub-arrays round-robin
    and are reloaded every frame; a layer larger than a sub-array is split
    into passes.
    """
    dims, n_y = _dims(model)
    n = geom.n_lstm
    R, C, S = geom.rows, geom.cols, geom.subarrays
    exclusive = len(dims) <= S
    layers = []
    notes = []
    for k, (nx, nh) in enumerate(dims):
        rb = padded(nh, n) // n
        xb = padded(nx, n) // n
        cb = max(xb, rb)
        fits = rb <= R and cb <= C
        resident = exclusive and fits
        if not fits:
            notes.append(f"layer {k}: {rb}x{cb} blocks exceed a {R}x{C} sub-array, reconfiguring")
        passes = _passes(rb, cb, R, C)
        used = tuple(range(min(cb, C)))
        layers.append(
            LayerMapping(k, "lstm", k % S if not exclusive else k, nx, nh, rb, cb, xb, resident, passes, used)
        )

    dense = None
    clobbers = ()
    if n_y is not None:
        nh = dims[-1][1]
        rb, cb = padded(n_y, n) // n, padded(nh, n) // n
        sub = layers[-1].subarray
        col = C - 1
        passes = _passes(rb, cb, R, 1, grid_col0=col)
        occupied = {
            (pos, m.index)
            for m in layers
            if m.resident and m.subarray == sub
            for pos, _ in m.passes[0].tiles
        }
        clobbers = tuple(sorted({(k, pos) for pos, k in occupied if pos[1] == col}))
        # each tile's SRAM holds one LSTM block set; a dense block needs free tiles
        resident = len(passes) == 1 and not clobbers and all(m.resident for m in layers)
        dense = LayerMapping(len(dims), "dense", sub, nh, n_y, rb, cb, cb, resident, passes, (col,))
        if not resident:
            notes.append("dense layer exceeds right-most column capacity, reloaded every frame")
    return ArrayMapping(geom, layers, dense, clobbers, notes)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SchedulePhase:
    kind: str
    layer: int
    pass_index: int = 0
    gate: str | None = None
    block_kind: str | None = None
    hops: int = 0
    blocks: int = 0
    n_tiles: int = 0
    load_bytes: tuple = ()  # bytes per tile, load phases only
    initial: bool = False
    restore: bool = False
    dense: bool = False
    stream_out: int = 0  # output elements streamed off-array after this phase

    def to_dict(self) -> dict:
        d = asdict(self)
        d["load_bytes"] = list(self.load_bytes)
        return {k: v for k, v in d.items() if v not in (None, False, 0, [])} | {"kind": self.kind}


def _load_bytes(m: LayerMapping, p: Pass, n: int) -> tuple:
    out = []
    for _, (r, c) in p.tiles:
        if m.kind == "dense":
            out.append(stream_size(n, dense=True))
        else:
            vec = c == m.col_blocks - 1
            b = stream_size(n, vectors=vec)
            if vec and not m.resident:
                b += n  # cell-state restore into the reducing tile
            out.append(b)
    return tuple(out)


def _reduce_hops(p: Pass) -> int:
    return (p.max_row_tiles - 1) + int(p.carry_in) + int(p.carry_out)


def build_schedule(mapping: ArrayMapping) -> list[SchedulePhase]:
    """Initial programming phases (``initial=True``) followed by one frame."""
    n = mapping.geometry.n_lstm
    init: list[SchedulePhase] = []
    frame: list[SchedulePhase] = []
    for m in mapping.layers + ([mapping.dense] if mapping.dense is not None else []):
        if m.resident:
            p = m.passes[0]
            init.append(
                SchedulePhase("load", m.index, 0, n_tiles=len(p.tiles), load_bytes=_load_bytes(m, p, n),
                              initial=True, dense=m.kind == "dense")
            )

    for m in mapping.layers:
        for k, p in enumerate(m.passes):
            if not m.resident:
                frame.append(SchedulePhase("load", m.index, k, n_tiles=len(p.tiles), load_bytes=_load_bytes(m, p, n)))
            frame.append(SchedulePhase("x_broadcast", m.index, k, blocks=1 if m.resident else 2, n_tiles=len(p.tiles)))
            hops = _reduce_hops(p)
            for g in GATES:
                for kind in ("x", "h"):
                    frame.append(SchedulePhase("gate_block_compute", m.index, k, gate=g, block_kind=kind,
                                               blocks=1, n_tiles=len(p.tiles)))
                if hops:
                    frame.append(SchedulePhase("row_reduce", m.index, k, gate=g, hops=hops, n_tiles=len(p.tiles)))
                if p.final:
                    frame.append(SchedulePhase("elementwise", m.index, k, gate=g, n_tiles=len(p.rows())))
        frame.append(SchedulePhase("h_redistribute", m.index, len(m.passes) - 1, hops=len(m.grid_cols) - 1,
                                   n_tiles=len(m.passes[-1].tiles)))

    d = mapping.dense
    if d is not None:
        for k, p in enumerate(d.passes):
            if not d.resident:
                frame.append(SchedulePhase("load", d.index, k, n_tiles=len(p.tiles),
                                           load_bytes=_load_bytes(d, p, n), dense=True))
            frame.append(SchedulePhase("x_broadcast", d.index, k, blocks=1, n_tiles=len(p.tiles), dense=True))
            frame.append(SchedulePhase("dense_output", d.index, k, hops=_reduce_hops(p), blocks=1,
                                       n_tiles=len(p.tiles), dense=True))
        if mapping.dense_clobbers:
            by_layer: dict[int, int] = {}
            for li, _pos in mapping.dense_clobbers:
                by_layer[li] = by_layer.get(li, 0) + 1
            for li, cnt in sorted(by_layer.items()):
                frame.append(SchedulePhase("load", li, 0, n_tiles=cnt, restore=True,
                                           load_bytes=(stream_size(n),) * cnt))
    if frame:
        n_out = mapping.dense.n_out if d is not None else mapping.layers[-1].n_out
        last = len(frame) - 1
        # restore loads trail the output; attach streaming to the last compute phase
        while frame[last].kind == "load" and last > 0:
            last -= 1
        ph = frame[last]
        frame[last] = SchedulePhase(**{**ph.__dict__, "stream_out": n_out})
    return init + frame


def frame_phases(schedule: list[SchedulePhase]) -> list[SchedulePhase]:
    return [p for p in schedule if not p.initial]


# ---------------------------------------------------------------------------
# executor
# ---------------------------------------------------------------------------


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("CHIPMUNK_SIM_THREADS", "1")))
    except ValueError:
        return 1


class SystolicArray:
    """Functional executor: runs a schedule phase by phase over a tile grid.

    All tiles finish phase k before phase k+1 begins. Within a phase tiles
    are independent, so ``threads > 1`` evaluates them on a worker pool
    without changing results.
    """

    def __init__(self, mapping: ArrayMapping, qmodel: QuantizedModel, config: TileConfig | None = None,
                 threads: int | None = None, records: dict | None = None):
        g = mapping.geometry
        self.mapping = mapping
        self.qmodel = qmodel
        self.config = config or TileConfig(n_lstm=g.n_lstm, formats=qmodel.formats)
        if self.config.n_lstm != g.n_lstm or qmodel.block != g.n_lstm:
            raise ValueError("tile size, geometry n_lstm and quantization block must agree")
        self.n = g.n_lstm
        self.tiles = [[[Tile(self.config) for _ in range(g.cols)] for _ in range(g.rows)]
                      for _ in range(g.subarrays)]
        self.schedule = build_schedule(mapping)
        self.threads = threads if threads is not None else _default_threads()
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        self.records = records if records is not None else self._build_records()
        self.programmed = False
        self.reset_state()

    def _build_records(self) -> dict:
        rec = {}
        for m in self.mapping.layers:
            q = self.qmodel.layers[m.index]
            for r, c in m.owned_blocks():
                rec[(m.index, r, c)] = write_weight_stream(q, (r, c))
        d = self.mapping.dense
        if d is not None:
            for r, c in d.owned_blocks():
                rec[(d.index, r, c)] = write_dense_stream(self.qmodel.dense, (r, c))
        return rec

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- state --------------------------------------------------------------

    def reset_state(self):
        for sub in self.tiles:
            for row in sub:
                for t in row:
                    t.reset_state()
        self.h_prev = [np.zeros(q.nh_pad, np.int8) for q in self.qmodel.layers]
        self.h_new = [np.zeros(q.nh_pad, np.int8) for q in self.qmodel.layers]
        self.c_state = [np.zeros(q.nh_pad, np.int8) for q in self.qmodel.layers]
        self.y = None
        self._carry: dict = {}
        self._inputs: dict = {}

    def program(self):
        """Initial weight load of resident layers."""
        for ph in self.schedule:
            if ph.initial:
                self._run_phase(ph)
        self.programmed = True

    # -- helpers --------------------------------------------------------------

    def _layer(self, idx: int) -> LayerMapping:
        if self.mapping.dense is not None and idx == self.mapping.dense.index:
            return self.mapping.dense
        return self.mapping.layers[idx]

    def _tile(self, m: LayerMapping, pos) -> Tile:
        a, b = pos
        return self.tiles[m.subarray][a][b]

    def _map(self, fn, items):
        items = list(items)
        if self._pool is None or len(items) < 2:
            for it in items:
                fn(it)
        else:
            list(self._pool.map(fn, items))

    def _block(self, vec: np.ndarray, c: int) -> np.ndarray:
        n = self.n
        if (c + 1) * n <= len(vec):
            return vec[c * n:(c + 1) * n]
        return np.zeros(n, np.int8)

    # -- phases ---------------------------------------------------------------

    def _run_phase(self, ph: SchedulePhase):
        m = self._layer(ph.layer)
        if ph.kind == "load" and ph.restore:
            for li, pos in self.mapping.dense_clobbers:
                lm = self.mapping.layers[li]
                (_, (r, c)), = [t for t in lm.passes[0].tiles if t[0] == pos]
                self._tile(lm, pos).load_weights(self.records[(li, r, c)])
            return
        p = m.passes[ph.pass_index]
        getattr(self, f"_ph_{ph.kind}")(ph, m, p)

    def _ph_load(self, ph, m, p):
        def load(item):
            pos, (r, c) = item
            t = self._tile(m, pos)
            t.load_weights(self.records[(m.index, r, c)])
            if m.kind == "lstm" and p.final and c == m.col_blocks - 1 and not m.resident:
                t.c = self._block(self.c_state[m.index], r).copy()
        self._map(load, p.tiles)

    def _ph_x_broadcast(self, ph, m, p):
        vec = self._inputs[m.index]
        for pos, (r, c) in p.tiles:
            t = self._tile(m, pos)
            t.write_x(self._block(vec, c))
            if ph.blocks > 1:
                t.write_h(self._block(self.h_prev[m.index], c))

    def _ph_gate_block_compute(self, ph, m, p):
        def run(item):
            pos, _ = item
            t = self._tile(m, pos)
            if ph.block_kind == "x":
                t.begin_gate(ph.gate)
            t.run_gate_block(ph.gate, ph.block_kind)
        self._map(run, p.tiles)

    def _reduce(self, m, p, gate):
        for _a, row in p.rows().items():
            s = None
            r = row[0][1]
            key = (m.index, r, gate)
            if p.carry_in:
                s = self._carry.pop(key)
            for b, _r, _c in row:
                t = self.tiles[m.subarray][_a][b]
                if s is not None:
                    t.add_partial(s)
                s = t.acc
            if p.carry_out:
                self._carry[key] = s.copy()

    def _ph_row_reduce(self, ph, m, p):
        self._reduce(m, p, ph.gate)

    def _ph_elementwise(self, ph, m, p):
        for a, row in p.rows().items():
            b, r, _c = row[-1]
            t = self.tiles[m.subarray][a][b]
            t.elementwise_phase(ph.gate)
            if ph.gate == "o":
                sl = slice(r * self.n, (r + 1) * self.n)
                self.h_new[m.index][sl] = t.h_out
                self.c_state[m.index][sl] = t.c

    def _ph_h_redistribute(self, ph, m, p):
        k = m.index
        self.h_prev[k] = self.h_new[k].copy()
        if k + 1 < len(self.mapping.layers):
            self._inputs[k + 1] = self.h_prev[k]
        if m.resident:
            for pos, (r, c) in p.tiles:
                self._tile(m, pos).write_h(self._block(self.h_prev[k], c))

    def _ph_dense_output(self, ph, m, p):
        for pos, _ in p.tiles:
            t = self._tile(m, pos)
            t.begin_gate("y")
            t.run_gate_block("y", "x")
        self._reduce(m, p, "y")
        if p.final:
            if self.y is None:
                self.y = np.zeros(self.qmodel.dense.ny_pad, np.int8)
            for a, row in p.rows().items():
                b, r, _c = row[-1]
                t = self.tiles[m.subarray][a][b]
                t.elementwise_phase("y")
                self.y[r * self.n:(r + 1) * self.n] = t.y

    # -- frames -----------------------------------------------------------------

    def _pad_input(self, x) -> np.ndarray:
        q0 = self.qmodel.layers[0]
        x = np.asarray(x)
        if x.dtype != np.int8:
            raise TypeError("array_step expects raw int8 input; quantize floats first")
        if len(x) == q0.nx_pad:
            return x
        if len(x) == q0.n_x:
            out = np.zeros(q0.nx_pad, np.int8)
            out[: q0.n_x] = x
            return out
        raise ValueError(f"input has length {len(x)}, expected {q0.n_x} or {q0.nx_pad}")

    def step(self, x):
        """One frame. Returns (h of the last layer, padded; y or None)."""
        if not self.programmed:
            self.program()
        self._inputs = {0: self._pad_input(x)}
        if self.mapping.dense is not None:
            self._inputs[self.mapping.dense.index] = None
        self.y = None
        for ph in self.schedule:
            if ph.initial:
                continue
            if ph.dense and ph.kind == "x_broadcast":
                self._inputs[ph.layer] = self.h_prev[-1]
            self._run_phase(ph)
        if self._carry:
            raise TileError(f"dangling partial sums: {sorted(self._carry)}")
        h = self.h_prev[-1].copy()
        return h, (None if self.y is None else self.y.copy())

    def run(self, frames):
        hs, ys = [], []
        for x in frames:
            h, y = self.step(x)
            hs.append(h)
            ys.append(y)
        return hs, ys


def array_step(array: SystolicArray, mapping: ArrayMapping, x_t):
    if array.mapping is not mapping:
        raise ValueError("array was built for a different mapping")
    return array.step(x_t)


def build_array(model, geom: ArrayGeometry, formats=None, threads: int | None = None) -> SystolicArray:
    """Quantize (if needed), partition and program an array for ``model``."""
    if isinstance(model, NetworkModel):
        kw = {"block": geom.n_lstm}
        if formats is not None:
            kw["formats"] = formats
        model = quantize_model(model, **kw)
    mapping = partition(model, geom)
    arr = SystolicArray(mapping, model, threads=threads)
    arr.program()
    return arr
