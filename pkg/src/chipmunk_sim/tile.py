"""
Functional model of one accelerator tile.

A tile holds ``n_lstm`` LSTM units. Each unit owns a slice of weight SRAM, a
16-bit MAC accumulator and i/f/o/c registers. The x and h vectors sit in a
shared register bank and are broadcast one element per cycle during a
``run_gate_block``. Element-wise stages (bias, peephole, LUT activation, cell
and hidden updates) run per unit after a gate's accumulation.

Per frame the sequencer enforces: gate i, f, c, o, each as
``begin_gate`` -> ``run_gate_block``... -> ``elementwise_phase``.
Tiles that only contribute partial sums (not in the last grid column) skip
the element-wise stages.

The tile also counts cycles for the operations it performs, so a single-tile
frame can be cross-checked against the schedule cost model.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from itertools import chain, repeat

import numpy as np

from . import _kernels
from .fxp import DEFAULT_FORMATS, Formats, LutPair, rescale_array, sat_array
from .lstm_ref import GATES
from .modelio import HEADER_SIZE, StreamFormatError, StreamHeader, stream_size

STAGES = GATES  # element-wise stage order within a frame
_GATE_INDEX = {g: k for k, g in enumerate(GATES)}
_PEEP_INDEX = {"i": 0, "f": 1, "o": 2}


class TileError(RuntimeError):
    pass


class LoadError(TileError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"weight load failed at byte {position}: {message}")


class UninitializedWeightsError(TileError):
    pass


class SequencerError(TileError):
    pass


class CapacityError(TileError):
    pass


@dataclass(frozen=True)
class TileConfig:
    n_lstm: int = 96
    formats: Formats = DEFAULT_FORMATS
    sram_bytes: int = 81_700
    sram_banks: int = 12
    elementwise_stage_cycles: int = 4
    fifo_depth: int = 2

    def __post_init__(self):
        if self.n_lstm < 1 or self.n_lstm > 255:
            raise ValueError("n_lstm must be in [1, 255]")
        if self.weight_bytes > self.sram_bytes:
            raise ValueError(
                f"{self.weight_bytes} weight bytes do not fit {self.sram_bytes} bytes of SRAM"
            )

    @property
    def weight_bytes(self) -> int:
        """SRAM needed for one block set: 4 gates x (Wx + Wh) plus bias and peephole slices."""
        return stream_size(self.n_lstm) - HEADER_SIZE

    @property
    def bank_bytes(self) -> int:
        return self.sram_bytes // self.sram_banks

    @property
    def units_per_bank(self) -> int:
        return -(-self.n_lstm // self.sram_banks)


# ---------------------------------------------------------------------------
# ready/valid stream port
# ---------------------------------------------------------------------------


def _pattern(p):
    """Per-cycle flag iterator; finite patterns stay asserted once exhausted."""
    if p is None:
        return repeat(True)
    if callable(p):
        return (bool(p(t)) for t in range(1 << 62))
    return chain((bool(b) for b in p), repeat(True))


@dataclass
class StreamPort:
    """8-bit stream with ready/valid handshake and a small elastic FIFO.

    A byte moves across an interface on a cycle where the sender asserts valid
    and the receiver asserts ready. Both decisions use the FIFO occupancy at
    the start of the cycle.
    """

    depth: int = 2
    fifo: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("FIFO depth must be >= 1")

    def run(self, data: bytes, valid=None, ready=None, max_cycles: int | None = None):
        """Move ``data`` from a producer through the FIFO to a consumer.

        ``valid`` is the producer's per-cycle willingness, ``ready`` the
        consumer's. Returns ``(received bytes, cycles)``.
        """
        vit, rit = _pattern(valid), _pattern(ready)
        limit = max_cycles if max_cycles is not None else 64 * (len(data) + 16) + 10_000
        out = bytearray()
        sent = 0
        cycles = 0
        self.fifo.clear()
        while len(out) < len(data):
            if cycles >= limit:
                raise TileError(f"stream stalled for {cycles} cycles")
            v, r = next(vit), next(rit)
            in_ready = len(self.fifo) < self.depth
            out_valid = len(self.fifo) > 0
            pop = out_valid and r
            push = v and in_ready and sent < len(data)
            if pop:
                out.append(self.fifo.popleft())
            if push:
                self.fifo.append(data[sent])
                sent += 1
            cycles += 1
        return bytes(out), cycles


# ---------------------------------------------------------------------------
# tile
# ---------------------------------------------------------------------------


class Tile:
    def __init__(self, config: TileConfig = TileConfig()):
        self.config = config
        n = config.n_lstm
        self.n = n
        self.luts = LutPair.for_formats(config.formats)
        self.header: StreamHeader | None = None
        self.wx = np.zeros((4, n, n), np.int8)
        self.wh = np.zeros((4, n, n), np.int8)
        self.wy = np.zeros((n, n), np.int8)
        self.bias = np.zeros((4, n), np.int8)
        self.peep = np.zeros((3, n), np.int8)
        self.cycles = 0
        self.load_port = StreamPort(config.fifo_depth)
        self.reset_state()

    # -- state ------------------------------------------------------------

    def reset_state(self):
        """Frame-0 condition: all registers and the accumulator cleared."""
        n = self.n
        self.i = np.zeros(n, np.int8)
        self.f = np.zeros(n, np.int8)
        self.o = np.zeros(n, np.int8)
        self.c = np.zeros(n, np.int8)
        self.h_out = np.zeros(n, np.int8)
        self.y = np.zeros(n, np.int8)
        self.x_regs = np.zeros(n, np.int8)
        self.h_regs = np.zeros(n, np.int8)
        self.acc = np.zeros(n, np.int32)
        self.acc_gate: str | None = None
        self._next_stage = 0

    @property
    def loaded(self) -> bool:
        return self.header is not None

    @property
    def is_dense(self) -> bool:
        return self.header is not None and self.header.is_dense

    # -- weight loading -----------------------------------------------------

    def load_weights(self, data: bytes, valid=None, ready=None) -> int:
        """Consume one tile record from the load stream. Returns cycles spent.

        Without stall patterns the stream moves one byte per cycle.
        """
        data = bytes(data)
        if valid is not None or ready is not None:
            data, cycles = self.load_port.run(data, valid, ready)
        else:
            cycles = len(data)
        if not data:
            raise LoadError("empty stream", 0)
        try:
            hdr = StreamHeader.unpack(data)
        except StreamFormatError as exc:
            raise LoadError(str(exc), exc.position) from None
        fm = self.config.formats
        if hdr.n != self.n:
            raise LoadError(f"record is for {hdr.n}-unit tiles, this tile has {self.n}", 6)
        if (hdr.weight_frac, hdr.state_frac, hdr.acc_frac) != (
            fm.weight.frac_bits, fm.state.frac_bits, fm.acc.frac_bits
        ):
            raise LoadError("record formats differ from tile formats", 13)
        size = hdr.record_size
        if len(data) < size:
            raise LoadError(f"stream underrun, expected {size} bytes", len(data))
        if len(data) > size:
            raise LoadError(f"stream overrun, record ends at {size}", size)

        n = self.n
        body = np.frombuffer(data, np.int8, offset=HEADER_SIZE)
        if hdr.is_dense:
            self.wy = body.reshape(n, n).copy()
        else:
            mats = body[: 8 * n * n].reshape(4, 2, n, n)
            self.wx = np.ascontiguousarray(mats[:, 0])
            self.wh = np.ascontiguousarray(mats[:, 1])
            if hdr.has_vectors:
                vec = body[8 * n * n:]
                self.bias = vec[: 4 * n].reshape(4, n).copy()
                self.peep = vec[4 * n:].reshape(3, n).copy()
            else:
                self.bias = np.zeros((4, n), np.int8)
                self.peep = np.zeros((3, n), np.int8)
        self.header = hdr
        self.cycles += cycles
        return cycles

    def readback(self) -> bytes:
        """Serialise SRAM contents back into the record that produced them."""
        if self.header is None:
            raise UninitializedWeightsError("no weights loaded")
        if self.header.is_dense:
            return self.header.pack() + self.wy.tobytes()
        parts = [self.header.pack()]
        for g in range(4):
            parts += [self.wx[g].tobytes(), self.wh[g].tobytes()]
        if self.header.has_vectors:
            parts += [self.bias.tobytes(), self.peep.tobytes()]
        return b"".join(parts)

    # -- register bank --------------------------------------------------------

    def _vec(self, v) -> np.ndarray:
        v = np.ascontiguousarray(v, dtype=np.int8)
        if v.shape != (self.n,):
            raise ValueError(f"vector has shape {v.shape}, expected ({self.n},)")
        return v

    def write_x(self, block):
        self.x_regs = self._vec(block).copy()
        self.cycles += self.n

    def write_h(self, block):
        self.h_regs = self._vec(block).copy()
        self.cycles += self.n

    # -- MAC -----------------------------------------------------------------

    def begin_gate(self, gate: str):
        if gate not in _GATE_INDEX and gate != "y":
            raise ValueError(f"unknown gate {gate!r}")
        self.acc[:] = 0
        self.acc_gate = gate

    def run_gate_block(self, gate: str, block_kind: str, vec_block=None):
        """Accumulate W[gate, kind] @ vec into the unit accumulators, one column per cycle.

        ``vec_block`` defaults to the x or h register bank.
        """
        if not self.loaded:
            raise UninitializedWeightsError("run_gate_block before load_weights")
        if self.acc_gate != gate:
            raise SequencerError(f"accumulator holds gate {self.acc_gate!r}, not {gate!r}")
        if gate == "y":
            if not self.is_dense or block_kind != "x":
                raise SequencerError("dense block requires a dense record and the x bank")
            w = self.wy
        else:
            if self.is_dense:
                raise SequencerError("tile holds a dense record")
            bank = {"x": self.wx, "h": self.wh}.get(block_kind)
            if bank is None:
                raise ValueError(f"block_kind must be 'x' or 'h', got {block_kind!r}")
            w = bank[_GATE_INDEX[gate]]
        if vec_block is None:
            vec = self.x_regs if block_kind == "x" else self.h_regs
        else:
            vec = self._vec(vec_block)
        acc = self.config.formats.acc
        _kernels.block_mac(self.acc, w, vec, acc.min_raw, acc.max_raw)
        self.cycles += self.n

    def add_partial(self, incoming):
        """acc = sat(incoming + acc): merge a 16-bit partial sum from the left neighbour."""
        inc = np.ascontiguousarray(incoming, dtype=np.int32)
        if inc.shape != (self.n,):
            raise ValueError("partial sum has wrong length")
        acc = self.config.formats.acc
        _kernels.sat_add(self.acc, inc, acc.min_raw, acc.max_raw)
        self.cycles += 2 * self.n

    def export_acc(self) -> np.ndarray:
        return self.acc.copy()

    # -- element-wise stages ----------------------------------------------------

    def elementwise_phase(self, stage: str):
        """Per-unit scalar work after a gate's accumulation.

        i, f: bias + peephole(c_{t-1}) -> sigmoid into the i/f register
        c:    bias -> tanh, then c = f*c + i*tanh(..)
        o:    bias + peephole(c_t) -> sigmoid, then h = o*tanh(c)
        y:    dense output, sigmoid of the accumulator
        """
        if self.acc_gate != stage:
            raise SequencerError(f"stage {stage!r} but accumulator holds {self.acc_gate!r}")
        fm = self.config.formats
        pre_shift = fm.acc.frac_bits - fm.state.frac_bits
        prod_shift = fm.product_fmt.frac_bits - fm.state.frac_bits
        if stage == "y":
            if not self.is_dense:
                raise SequencerError("dense stage on an LSTM record")
            self.y = self.luts.sigmoid.apply_array(rescale_array(self.acc, pre_shift, fm.state))
            self.cycles += self.config.elementwise_stage_cycles
            return
        expected = STAGES[self._next_stage]
        if stage != expected:
            raise SequencerError(f"stage {stage!r} out of order, expected {expected!r}")
        if not self.header.has_vectors:
            raise SequencerError("element-wise stage on a tile without bias/peephole vectors")

        g = _GATE_INDEX[stage]
        acc = self.acc.astype(np.int64) + (self.bias[g].astype(np.int64) << fm.bias_shift)
        acc = sat_array(acc, fm.acc)
        if stage in _PEEP_INDEX:
            # c holds c_{t-1} for i/f and the freshly updated c_t for o
            acc = sat_array(acc + self.peep[_PEEP_INDEX[stage]].astype(np.int64) * self.c, fm.acc)
        self.acc[:] = acc
        pre = rescale_array(acc, pre_shift, fm.state)
        if stage == "i":
            self.i = self.luts.sigmoid.apply_array(pre)
        elif stage == "f":
            self.f = self.luts.sigmoid.apply_array(pre)
        elif stage == "c":
            cand = self.luts.tanh.apply_array(pre).astype(np.int64)
            fc = rescale_array(self.f.astype(np.int64) * self.c, prod_shift, fm.state)
            ig = rescale_array(self.i.astype(np.int64) * cand, prod_shift, fm.state)
            self.c = sat_array(fc.astype(np.int64) + ig, fm.state).astype(np.int8)
        else:
            self.o = self.luts.sigmoid.apply_array(pre)
            tc = self.luts.tanh.apply_array(self.c).astype(np.int64)
            self.h_out = rescale_array(self.o.astype(np.int64) * tc, prod_shift, fm.state)
        self._next_stage = (self._next_stage + 1) % len(STAGES)
        self.cycles += self.config.elementwise_stage_cycles

    # -- whole frame on a single tile ---------------------------------------------

    def tile_step(self, x) -> np.ndarray:
        """One LSTM frame for a layer that fits this tile (N_x, N_h <= n_lstm)."""
        if not self.loaded:
            raise UninitializedWeightsError("tile_step before load_weights")
        hdr = self.header
        if hdr.is_dense or hdr.n_x > self.n or hdr.n_h > self.n or (hdr.block_row, hdr.block_col) != (0, 0):
            raise CapacityError(
                f"layer {hdr.n_x}->{hdr.n_h} exceeds one {self.n}-unit tile; use a systolic mapping"
            )
        self.write_x(x)
        for g in GATES:
            self.begin_gate(g)
            self.run_gate_block(g, "x")
            self.run_gate_block(g, "h")
            self.elementwise_phase(g)
        h = self.h_out.copy()
        h[hdr.n_h:] = 0  # padded units are masked
        self.write_h(h)
        return h
