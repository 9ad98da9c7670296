"""
Golden LSTM references.

``lstm_step_float`` is the plain double-precision cell with peepholes.
``lstm_step_quant`` is the bit-exact fixed-point model every hardware path
(single tile, systolic grid, reconfiguring single tile) must reproduce.

Accumulation order of the quantized model (``BlockOrder``): inputs are cut
into column blocks of ``block`` elements. Column block ``k`` owns x-block
``k`` and h-block ``k``; its partial sum starts at zero and runs over the
x-block columns then the h-block columns, ascending, saturating after every
product. Partials are then combined with saturating adds in ascending ``k``.
Bias, then peephole, are added on the accumulator before one rescale into
the LUT. ``scheme="sequential"`` instead runs one chain over every x column
then every h column; both agree whenever nothing saturates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .fxp import DEFAULT_FORMATS, Formats, LutPair, rescale_array, sat_array

if TYPE_CHECKING:
    from .modelio import QuantizedDense, QuantizedLayer

GATES = ("i", "f", "c", "o")
PEEPHOLE_GATES = ("i", "f", "o")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class LstmLayerParams:
    """Float weights of one layer. Matrices are (N_h, N_x) / (N_h, N_h)."""

    W_x: dict  # gate -> (N_h, N_x)
    W_h: dict  # gate -> (N_h, N_h)
    w_c: dict  # "i", "f", "o" -> (N_h,)
    b: dict  # gate -> (N_h,)

    def __post_init__(self):
        self.W_x = {g: np.asarray(self.W_x[g], dtype=np.float64) for g in GATES}
        self.W_h = {g: np.asarray(self.W_h[g], dtype=np.float64) for g in GATES}
        self.w_c = {g: np.asarray(self.w_c[g], dtype=np.float64) for g in PEEPHOLE_GATES}
        self.b = {g: np.asarray(self.b[g], dtype=np.float64) for g in GATES}
        n_h, n_x = self.W_x["i"].shape
        if n_h < 1 or n_x < 1:
            raise ValueError("layer dimensions must be positive")
        for g in GATES:
            if self.W_x[g].shape != (n_h, n_x):
                raise ValueError(f"W_x{g} has shape {self.W_x[g].shape}, expected {(n_h, n_x)}")
            if self.W_h[g].shape != (n_h, n_h):
                raise ValueError(f"W_h{g} has shape {self.W_h[g].shape}, expected {(n_h, n_h)}")
            if self.b[g].shape != (n_h,):
                raise ValueError(f"b_{g} has shape {self.b[g].shape}, expected {(n_h,)}")
        for g in PEEPHOLE_GATES:
            if self.w_c[g].shape != (n_h,):
                raise ValueError(f"w_c{g} has shape {self.w_c[g].shape}, expected {(n_h,)}")

    @property
    def n_x(self) -> int:
        return self.W_x["i"].shape[1]

    @property
    def n_h(self) -> int:
        return self.W_x["i"].shape[0]

    @classmethod
    def zeros(cls, n_x: int, n_h: int) -> "LstmLayerParams":
        return cls(
            W_x={g: np.zeros((n_h, n_x)) for g in GATES},
            W_h={g: np.zeros((n_h, n_h)) for g in GATES},
            w_c={g: np.zeros(n_h) for g in PEEPHOLE_GATES},
            b={g: np.zeros(n_h) for g in GATES},
        )

    @classmethod
    def random(cls, n_x: int, n_h: int, rng: np.random.Generator, scale: float = 1.0):
        u = lambda *shape: rng.uniform(-scale, scale, size=shape)  # noqa: E731
        return cls(
            W_x={g: u(n_h, n_x) for g in GATES},
            W_h={g: u(n_h, n_h) for g in GATES},
            w_c={g: u(n_h) for g in PEEPHOLE_GATES},
            b={g: u(n_h) for g in GATES},
        )


@dataclass
class DenseParams:
    W_hy: np.ndarray

    def __post_init__(self):
        self.W_hy = np.asarray(self.W_hy, dtype=np.float64)
        if self.W_hy.ndim != 2 or self.W_hy.shape[0] < 1:
            raise ValueError(f"W_hy must be (N_y, N_h) with N_y >= 1, got {self.W_hy.shape}")

    @property
    def n_y(self) -> int:
        return self.W_hy.shape[0]

    @property
    def n_h(self) -> int:
        return self.W_hy.shape[1]


@dataclass
class LstmState:
    """Cell and hidden state. Float arrays, or raw int8 arrays in the quantized path."""

    c: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        if len(self.c) != len(self.h):
            raise ValueError("c and h must have equal length")

    @classmethod
    def zeros(cls, n: int, quantized: bool = False) -> "LstmState":
        dtype = np.int8 if quantized else np.float64
        return cls(np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype))

    def copy(self) -> "LstmState":
        return LstmState(self.c.copy(), self.h.copy())


# ---------------------------------------------------------------------------
# double precision
# ---------------------------------------------------------------------------


def lstm_step_float(params: LstmLayerParams, x, state: LstmState):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.n_x,):
        raise ValueError(f"x has shape {x.shape}, expected ({params.n_x},)")
    if state.c.shape != (params.n_h,) or state.h.shape != (params.n_h,):
        raise ValueError("state length does not match N_h")
    c_prev, h_prev = state.c, state.h
    W, U, p, b = params.W_x, params.W_h, params.w_c, params.b

    i = _sigmoid(W["i"] @ x + U["i"] @ h_prev + p["i"] * c_prev + b["i"])
    f = _sigmoid(W["f"] @ x + U["f"] @ h_prev + p["f"] * c_prev + b["f"])
    c = f * c_prev + i * np.tanh(W["c"] @ x + U["c"] @ h_prev + b["c"])
    # output gate peeks at the new cell state
    o = _sigmoid(W["o"] @ x + U["o"] @ h_prev + p["o"] * c + b["o"])
    h = o * np.tanh(c)
    return h, LstmState(c, h)


def dense_output_float(params: DenseParams, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (params.n_h,):
        raise ValueError(f"h has shape {h.shape}, expected ({params.n_h},)")
    return _sigmoid(params.W_hy @ h)


# ---------------------------------------------------------------------------
# fixed point golden model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockOrder:
    block: int = 96
    scheme: str = "column_partials"

    def __post_init__(self):
        if self.block < 1:
            raise ValueError("block must be positive")
        if self.scheme not in ("column_partials", "sequential"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


CANONICAL_ORDER = BlockOrder()


def _chain(acc: np.ndarray, w: np.ndarray, v: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Saturating accumulation over the columns of ``w``, ascending."""
    acc = acc.astype(np.int64)
    for j in range(w.shape[1]):
        vj = int(v[j])
        if vj:
            acc = np.clip(acc + w[:, j].astype(np.int64) * vj, lo, hi)
    return acc


def matvec_acc(blocks_x, x, blocks_h, h, order: BlockOrder, formats: Formats) -> np.ndarray:
    """Accumulator value of W_x x + W_h h under ``order``.

    ``blocks_h``/``h`` may be None (dense layer: input only).
    """
    lo, hi = formats.acc.min_raw, formats.acc.max_raw
    rows = blocks_x.shape[0]
    if order.scheme == "sequential":
        acc = _chain(np.zeros(rows, np.int64), blocks_x, x, lo, hi)
        if blocks_h is not None:
            acc = _chain(acc, blocks_h, h, lo, hi)
        return acc
    n = order.block
    nbx = blocks_x.shape[1] // n
    nbh = 0 if blocks_h is None else blocks_h.shape[1] // n
    total = None
    for k in range(max(nbx, nbh)):
        p = np.zeros(rows, np.int64)
        sl = slice(k * n, (k + 1) * n)
        if k < nbx:
            p = _chain(p, blocks_x[:, sl], x[sl], lo, hi)
        if k < nbh:
            p = _chain(p, blocks_h[:, sl], h[sl], lo, hi)
        total = p if total is None else np.clip(total + p, lo, hi)
    return total


def _check_padded(vec, length: int, what: str):
    if len(vec) != length:
        raise ValueError(f"{what} has length {len(vec)}, expected padded length {length}")


def lstm_step_quant(
    qlayer: "QuantizedLayer",
    x,
    state: LstmState,
    order: BlockOrder = CANONICAL_ORDER,
    luts: LutPair | None = None,
    trace: dict | None = None,
):
    """One fixed-point LSTM step. ``x`` and the state must be padded raw int8 arrays.

    Returns ``(h, new_state)``; if ``trace`` is a dict it receives the per-gate
    accumulators and activations.
    """
    fm = qlayer.formats
    if order.block != qlayer.block:
        raise ValueError(f"order block {order.block} != layer block {qlayer.block}")
    _check_padded(x, qlayer.nx_pad, "x")
    _check_padded(state.c, qlayer.nh_pad, "c")
    _check_padded(state.h, qlayer.nh_pad, "h")
    luts = luts or LutPair.for_formats(fm)
    x = np.asarray(x, dtype=np.int64)
    c_prev = np.asarray(state.c, dtype=np.int64)
    h_prev = np.asarray(state.h, dtype=np.int64)
    pre_shift = fm.acc.frac_bits - fm.state.frac_bits
    prod_shift = fm.product_fmt.frac_bits - fm.state.frac_bits

    def gate_acc(g: int) -> np.ndarray:
        acc = matvec_acc(qlayer.wx[g], x, qlayer.wh[g], h_prev, order, fm)
        return sat_array(acc + (qlayer.bias[g].astype(np.int64) << fm.bias_shift), fm.acc)

    def peep(acc, k: int, c) -> np.ndarray:
        return sat_array(acc + qlayer.peep[k].astype(np.int64) * c, fm.acc)

    acc_i = peep(gate_acc(0), 0, c_prev)
    i = luts.sigmoid.apply_array(rescale_array(acc_i, pre_shift, fm.state))
    acc_f = peep(gate_acc(1), 1, c_prev)
    f = luts.sigmoid.apply_array(rescale_array(acc_f, pre_shift, fm.state))
    acc_c = gate_acc(2)
    g = luts.tanh.apply_array(rescale_array(acc_c, pre_shift, fm.state))

    fc = rescale_array(f.astype(np.int64) * c_prev, prod_shift, fm.state).astype(np.int64)
    ig = rescale_array(i.astype(np.int64) * g, prod_shift, fm.state).astype(np.int64)
    c = sat_array(fc + ig, fm.state).astype(np.int8)

    acc_o = peep(gate_acc(3), 2, c.astype(np.int64))
    o = luts.sigmoid.apply_array(rescale_array(acc_o, pre_shift, fm.state))
    tc = luts.tanh.apply_array(c)
    h = rescale_array(o.astype(np.int64) * tc, prod_shift, fm.state)

    if trace is not None:
        trace.update(
            acc_i=acc_i.astype(np.int32), acc_f=acc_f.astype(np.int32),
            acc_c=acc_c.astype(np.int32), acc_o=acc_o.astype(np.int32),
            i=i, f=f, g=g, c=c, o=o, h=h,
        )
    return h, LstmState(c, h.copy())


def dense_output_quant(
    qdense: "QuantizedDense",
    h,
    order: BlockOrder = CANONICAL_ORDER,
    luts: LutPair | None = None,
) -> np.ndarray:
    fm = qdense.formats
    _check_padded(h, qdense.nh_pad, "h")
    luts = luts or LutPair.for_formats(fm)
    acc = matvec_acc(qdense.w, np.asarray(h, np.int64), None, None, order, fm)
    pre = rescale_array(acc, fm.acc.frac_bits - fm.state.frac_bits, fm.state)
    return luts.sigmoid.apply_array(pre)


def run_quant_sequence(qmodel, frames, order: BlockOrder = CANONICAL_ORDER):
    """Golden multi-layer run over raw padded input frames.

    Returns (list of per-frame h of the last layer, list of per-frame y or None).
    """
    states = [LstmState.zeros(q.nh_pad, quantized=True) for q in qmodel.layers]
    hs, ys = [], []
    for x in frames:
        v = x
        for k, q in enumerate(qmodel.layers):
            v, states[k] = lstm_step_quant(q, v, states[k], order)
        hs.append(v)
        ys.append(None if qmodel.dense is None else dense_output_quant(qmodel.dense, v, order))
    return hs, ys
