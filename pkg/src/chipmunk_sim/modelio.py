"""
Network descriptors, float -> fixed-point quantization and the tile weight stream.

Network file (``.chmk.json``)::

    {"format": "chmk-network", "version": 1, "name": "...",
     "layers": [{"n_x": 123, "n_h": 421,
                 "tensors": {"W_xi": {"shape": [421, 123], "dtype": "<f4",
                                      "data": "<base64>"}, ...}}],
     "dense": {"n_y": 62, "tensors": {"W_hy": {...}}} or null}

Layer tensors: ``W_x{i,f,c,o}``, ``W_h{i,f,c,o}``, ``w_c{i,f,o}``, ``b_{i,f,c,o}``.
Arrays are row-major little-endian floats.

Weight stream (``.chmk.bin``), one record per tile::

    off  size  field
    0    4     magic "CHMK"
    4    1     version (0x01)
    5    1     flags: bit0 bias+peephole vectors present, bit1 dense block
    6    1     n (block edge, units per tile)
    7    1     block row
    8    1     block column
    9    2     layer N_x (u16 LE)
    11   2     layer N_h (u16 LE)
    13   1     weight frac bits << 4 | state frac bits
    14   1     accumulator frac bits
    15   1     gate order, 2 bits per slot from LSB (0xE4 = i, f, c, o)
    16   ...   LSTM: for gate in i,f,c,o: Wx block (n*n), Wh block (n*n), row-major int8
               then [4*n biases, 3*n peepholes] when bit0 is set
               dense: one n*n block of W_hy

A layer file is the concatenation of its tile records in (row, col) order.
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .fxp import DEFAULT_FORMATS, Formats, FxFormat, quantize_array
from .lstm_ref import GATES, PEEPHOLE_GATES, DenseParams, LstmLayerParams

MAGIC = b"CHMK"
VERSION = 1
HEADER = struct.Struct("<4sBBBBBHHBBB")
HEADER_SIZE = HEADER.size  # 16
FLAG_VECTORS = 0x01
FLAG_DENSE = 0x02
GATE_ORDER_CODE = 0xE4
DEFAULT_BLOCK = 96


class SchemaError(ValueError):
    """Malformed network descriptor. ``field`` names the offending location."""

    def __init__(self, message: str, field: str = "", line: int | None = None):
        self.field = field
        self.line = line
        where = field or "document"
        if line is not None:
            where = f"line {line}: {where}"
        super().__init__(f"{where}: {message}")


class StreamFormatError(ValueError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"byte {position}: {message}")


# ---------------------------------------------------------------------------
# network model
# ---------------------------------------------------------------------------


@dataclass
class NetworkModel:
    layers: list[LstmLayerParams]
    dense: DenseParams | None = None
    name: str = "network"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one LSTM layer")
        for k in range(1, len(self.layers)):
            if self.layers[k].n_x != self.layers[k - 1].n_h:
                raise ValueError(
                    f"layer {k} has N_x={self.layers[k].n_x} but layer {k - 1} "
                    f"produces N_h={self.layers[k - 1].n_h}"
                )
        if self.dense is not None and self.dense.n_h != self.layers[-1].n_h:
            raise ValueError(
                f"dense layer expects N_h={self.dense.n_h}, last LSTM layer has {self.layers[-1].n_h}"
            )

    @property
    def n_in(self) -> int:
        return self.layers[0].n_x

    @property
    def n_out(self) -> int:
        return self.dense.n_y if self.dense is not None else self.layers[-1].n_h

    @property
    def dims(self) -> list[tuple[int, int]]:
        return [(p.n_x, p.n_h) for p in self.layers]


def random_network(
    dims: list[tuple[int, int]],
    seed: int = 0,
    n_y: int | None = None,
    scale: float = 1.0,
    name: str = "random",
) -> NetworkModel:
    """Seeded network with weights uniform in [-scale, scale]."""
    rng = np.random.default_rng(seed)
    layers = [LstmLayerParams.random(nx, nh, rng, scale) for nx, nh in dims]
    dense = None
    if n_y:
        dense = DenseParams(rng.uniform(-scale, scale, size=(n_y, dims[-1][1])))
    return NetworkModel(layers, dense, name=name, metadata={"seed": seed})


CTC_NAME = "ctc-3l-421h-uni"


def ctc_3l_421h_uni(seed: int = 0, scale: float = 0.1) -> NetworkModel:
    """3 unidirectional layers of 421 units over 123 MFCC inputs, random weights."""
    return random_network([(123, 421), (421, 421), (421, 421)], seed=seed, scale=scale, name=CTC_NAME)


# ---------------------------------------------------------------------------
# JSON descriptor
# ---------------------------------------------------------------------------

_FLOAT_DTYPES = ("<f8", "<f4")


def _encode(arr: np.ndarray, dtype: str) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.dtype(dtype))
    return {
        "shape": list(arr.shape),
        "dtype": dtype,
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode(obj, where: str, shape: tuple) -> np.ndarray:
    if not isinstance(obj, dict):
        raise SchemaError("expected an object with shape/dtype/data", where)
    for key in ("shape", "dtype", "data"):
        if key not in obj:
            raise SchemaError(f"missing '{key}'", where)
    if list(obj["shape"]) != list(shape):
        raise SchemaError(f"shape {obj['shape']} does not match expected {list(shape)}", where + ".shape")
    if obj["dtype"] not in _FLOAT_DTYPES:
        raise SchemaError(f"dtype must be one of {_FLOAT_DTYPES}", where + ".dtype")
    try:
        raw = base64.b64decode(obj["data"], validate=True)
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"invalid base64 ({exc})", where + ".data") from None
    dt = np.dtype(obj["dtype"])
    expected = int(np.prod(shape)) * dt.itemsize
    if len(raw) != expected:
        raise SchemaError(f"payload has {len(raw)} bytes, expected {expected}", where + ".data")
    arr = np.frombuffer(raw, dtype=dt).astype(np.float64).reshape(shape)
    if not np.isfinite(arr).all():
        raise SchemaError("non-finite values", where + ".data")
    return arr


def _positive_int(obj: dict, key: str, where: str) -> int:
    v = obj.get(key)
    if not isinstance(v, int) or isinstance(v, bool) or v < 1:
        raise SchemaError(f"'{key}' must be a positive integer", f"{where}.{key}")
    if v > 0xFFFF:
        raise SchemaError(f"'{key}' exceeds 65535", f"{where}.{key}")
    return v


def network_to_dict(model: NetworkModel, dtype: str = "<f8") -> dict:
    layers = []
    for p in model.layers:
        t = {}
        for g in GATES:
            t[f"W_x{g}"] = _encode(p.W_x[g], dtype)
        for g in GATES:
            t[f"W_h{g}"] = _encode(p.W_h[g], dtype)
        for g in PEEPHOLE_GATES:
            t[f"w_c{g}"] = _encode(p.w_c[g], dtype)
        for g in GATES:
            t[f"b_{g}"] = _encode(p.b[g], dtype)
        layers.append({"n_x": p.n_x, "n_h": p.n_h, "tensors": t})
    dense = None
    if model.dense is not None:
        dense = {"n_y": model.dense.n_y, "tensors": {"W_hy": _encode(model.dense.W_hy, dtype)}}
    return {
        "format": "chmk-network",
        "version": 1,
        "name": model.name,
        "metadata": model.metadata,
        "layers": layers,
        "dense": dense,
    }


def dump_network(model: NetworkModel, dtype: str = "<f8") -> str:
    return json.dumps(network_to_dict(model, dtype), indent=1)


def parse_network(text: str) -> NetworkModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(exc.msg, "document", line=exc.lineno) from None
    if not isinstance(doc, dict):
        raise SchemaError("top level must be an object")
    if doc.get("format") != "chmk-network":
        raise SchemaError("must be 'chmk-network'", "format")
    if doc.get("version") != 1:
        raise SchemaError("unsupported version", "version")
    layers_doc = doc.get("layers")
    if not isinstance(layers_doc, list) or not layers_doc:
        raise SchemaError("must be a non-empty list", "layers")

    layers = []
    for k, ld in enumerate(layers_doc):
        where = f"layers[{k}]"
        if not isinstance(ld, dict):
            raise SchemaError("expected an object", where)
        n_x = _positive_int(ld, "n_x", where)
        n_h = _positive_int(ld, "n_h", where)
        if k > 0 and n_x != layers[-1].n_h:
            raise SchemaError(
                f"N_x={n_x} does not match previous layer N_h={layers[-1].n_h}", f"{where}.n_x"
            )
        t = ld.get("tensors")
        if not isinstance(t, dict):
            raise SchemaError("missing tensors object", f"{where}.tensors")

        def get(name, shape):
            if name not in t:
                raise SchemaError("missing tensor", f"{where}.tensors.{name}")
            return _decode(t[name], f"{where}.tensors.{name}", shape)

        layers.append(
            LstmLayerParams(
                W_x={g: get(f"W_x{g}", (n_h, n_x)) for g in GATES},
                W_h={g: get(f"W_h{g}", (n_h, n_h)) for g in GATES},
                w_c={g: get(f"w_c{g}", (n_h,)) for g in PEEPHOLE_GATES},
                b={g: get(f"b_{g}", (n_h,)) for g in GATES},
            )
        )

    dense = None
    dd = doc.get("dense")
    if dd is not None:
        if not isinstance(dd, dict):
            raise SchemaError("expected an object or null", "dense")
        n_y = _positive_int(dd, "n_y", "dense")
        t = dd.get("tensors")
        if not isinstance(t, dict) or "W_hy" not in t:
            raise SchemaError("missing tensor", "dense.tensors.W_hy")
        dense = DenseParams(_decode(t["W_hy"], "dense.tensors.W_hy", (n_y, layers[-1].n_h)))

    meta = doc.get("metadata") or {}
    return NetworkModel(layers, dense, name=str(doc.get("name", "network")), metadata=dict(meta))


def load_network(path) -> NetworkModel:
    with open(path, encoding="utf-8") as fh:
        return parse_network(fh.read())


def save_network(model: NetworkModel, path, dtype: str = "<f8"):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_network(model, dtype))


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------


def padded(n: int, block: int) -> int:
    return -(-n // block) * block


@dataclass
class QuantizedLayer:
    """Raw int8 tensors of one layer, zero-padded to block multiples.

    ``wx``: (4, nh_pad, nx_pad), ``wh``: (4, nh_pad, nh_pad), ``bias``: (4, nh_pad),
    ``peep``: (3, nh_pad); gate axis ordered i, f, c, o (peepholes i, f, o).
    """

    n_x: int
    n_h: int
    wx: np.ndarray
    wh: np.ndarray
    bias: np.ndarray
    peep: np.ndarray
    formats: Formats = DEFAULT_FORMATS
    block: int = DEFAULT_BLOCK
    saturations: int = 0

    @property
    def nx_pad(self) -> int:
        return self.wx.shape[2]

    @property
    def nh_pad(self) -> int:
        return self.wh.shape[1]

    @property
    def row_blocks(self) -> int:
        return self.nh_pad // self.block

    @property
    def x_blocks(self) -> int:
        return self.nx_pad // self.block

    @property
    def col_blocks(self) -> int:
        return max(self.x_blocks, self.row_blocks)


@dataclass
class QuantizedDense:
    n_h: int
    n_y: int
    w: np.ndarray  # (ny_pad, nh_pad)
    formats: Formats = DEFAULT_FORMATS
    block: int = DEFAULT_BLOCK
    saturations: int = 0

    @property
    def nh_pad(self) -> int:
        return self.w.shape[1]

    @property
    def ny_pad(self) -> int:
        return self.w.shape[0]

    @property
    def row_blocks(self) -> int:
        return self.ny_pad // self.block

    @property
    def col_blocks(self) -> int:
        return self.nh_pad // self.block


@dataclass
class QuantizedModel:
    layers: list[QuantizedLayer]
    dense: QuantizedDense | None
    formats: Formats
    block: int
    name: str = "network"

    @property
    def saturations(self) -> int:
        n = sum(q.saturations for q in self.layers)
        return n + (self.dense.saturations if self.dense is not None else 0)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_x

    @property
    def nx_pad(self) -> int:
        return self.layers[0].nx_pad

    @property
    def n_out(self) -> int:
        return self.dense.n_y if self.dense is not None else self.layers[-1].n_h


def _q_padded(a: np.ndarray, shape: tuple, fmt: FxFormat) -> tuple[np.ndarray, int]:
    raw, n_sat = quantize_array(a, fmt)
    out = np.zeros(shape, dtype=np.int8)
    out[tuple(slice(0, s) for s in raw.shape)] = raw
    return out, n_sat


def quantize_layer(p: LstmLayerParams, formats: Formats = DEFAULT_FORMATS, block: int = DEFAULT_BLOCK):
    nx_pad, nh_pad = padded(p.n_x, block), padded(p.n_h, block)
    wf = formats.weight
    n_sat = 0
    wx = np.zeros((4, nh_pad, nx_pad), np.int8)
    wh = np.zeros((4, nh_pad, nh_pad), np.int8)
    bias = np.zeros((4, nh_pad), np.int8)
    peep = np.zeros((3, nh_pad), np.int8)
    for k, g in enumerate(GATES):
        wx[k], s1 = _q_padded(p.W_x[g], (nh_pad, nx_pad), wf)
        wh[k], s2 = _q_padded(p.W_h[g], (nh_pad, nh_pad), wf)
        bias[k], s3 = _q_padded(p.b[g], (nh_pad,), wf)
        n_sat += s1 + s2 + s3
    for k, g in enumerate(PEEPHOLE_GATES):
        peep[k], s = _q_padded(p.w_c[g], (nh_pad,), wf)
        n_sat += s
    return QuantizedLayer(p.n_x, p.n_h, wx, wh, bias, peep, formats, block, n_sat)


def quantize_model(
    model: NetworkModel, formats: Formats = DEFAULT_FORMATS, block: int = DEFAULT_BLOCK
) -> QuantizedModel:
    layers = [quantize_layer(p, formats, block) for p in model.layers]
    qd = None
    if model.dense is not None:
        d = model.dense
        w, n_sat = _q_padded(d.W_hy, (padded(d.n_y, block), padded(d.n_h, block)), formats.weight)
        qd = QuantizedDense(d.n_h, d.n_y, w, formats, block, n_sat)
    return QuantizedModel(layers, qd, formats, block, model.name)


def quantize_input(x, qmodel: QuantizedModel) -> np.ndarray:
    """Quantize one float input frame into a padded raw vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (qmodel.n_in,):
        raise ValueError(f"input frame has shape {x.shape}, expected ({qmodel.n_in},)")
    raw, _ = quantize_array(x, qmodel.formats.state)
    out = np.zeros(qmodel.nx_pad, np.int8)
    out[: qmodel.n_in] = raw
    return out


# ---------------------------------------------------------------------------
# weight stream
# ---------------------------------------------------------------------------


def stream_size(n: int, vectors: bool = True, dense: bool = False) -> int:
    """Exact byte count of one tile record."""
    if dense:
        return HEADER_SIZE + n * n
    return HEADER_SIZE + 8 * n * n + (7 * n if vectors else 0)


@dataclass(frozen=True)
class StreamHeader:
    flags: int
    n: int
    block_row: int
    block_col: int
    n_x: int
    n_h: int
    weight_frac: int
    state_frac: int
    acc_frac: int
    gate_order: int = GATE_ORDER_CODE
    version: int = VERSION

    @property
    def has_vectors(self) -> bool:
        return bool(self.flags & FLAG_VECTORS)

    @property
    def is_dense(self) -> bool:
        return bool(self.flags & FLAG_DENSE)

    @property
    def record_size(self) -> int:
        return stream_size(self.n, self.has_vectors, self.is_dense)

    def pack(self) -> bytes:
        return HEADER.pack(
            MAGIC, self.version, self.flags, self.n, self.block_row, self.block_col,
            self.n_x, self.n_h, (self.weight_frac << 4) | self.state_frac,
            self.acc_frac, self.gate_order,
        )

    @classmethod
    def unpack(cls, data: bytes, offset: int = 0) -> "StreamHeader":
        if len(data) - offset < HEADER_SIZE:
            raise StreamFormatError("truncated header", offset + max(0, len(data) - offset))
        magic, ver, flags, n, br, bc, n_x, n_h, fr, acc, order = HEADER.unpack_from(data, offset)
        if magic != MAGIC:
            raise StreamFormatError(f"bad magic {magic!r}", offset)
        if ver != VERSION:
            raise StreamFormatError(f"unsupported version {ver}", offset + 4)
        if flags & ~(FLAG_VECTORS | FLAG_DENSE):
            raise StreamFormatError(f"unknown flag bits 0x{flags:02x}", offset + 5)
        if n == 0:
            raise StreamFormatError("block edge is zero", offset + 6)
        if order != GATE_ORDER_CODE:
            raise StreamFormatError(f"unsupported gate order 0x{order:02x}", offset + 15)
        return cls(flags, n, br, bc, n_x, n_h, fr >> 4, fr & 0x0F, acc, order, ver)


def write_weight_stream(qlayer: QuantizedLayer, tile_coords: tuple[int, int], vectors: bool | None = None) -> bytes:
    """Tile record for block (row, col) of ``qlayer``.

    ``vectors`` defaults to True only for the last column block, which performs
    the element-wise stages.
    """
    r, c = tile_coords
    n = qlayer.block
    if not (0 <= r < qlayer.row_blocks and 0 <= c < qlayer.col_blocks):
        raise ValueError(f"block {tile_coords} outside {qlayer.row_blocks}x{qlayer.col_blocks}")
    if vectors is None:
        vectors = c == qlayer.col_blocks - 1
    fm = qlayer.formats
    hdr = StreamHeader(
        FLAG_VECTORS if vectors else 0, n, r, c, qlayer.n_x, qlayer.n_h,
        fm.weight.frac_bits, fm.state.frac_bits, fm.acc.frac_bits,
    )
    rs = slice(r * n, (r + 1) * n)
    cs = slice(c * n, (c + 1) * n)
    parts = [hdr.pack()]
    zero = np.zeros((n, n), np.int8)
    for g in range(4):
        parts.append((qlayer.wx[g, rs, cs] if c < qlayer.x_blocks else zero).tobytes())
        parts.append((qlayer.wh[g, rs, cs] if c < qlayer.row_blocks else zero).tobytes())
    if vectors:
        parts.append(np.ascontiguousarray(qlayer.bias[:, rs]).tobytes())
        parts.append(np.ascontiguousarray(qlayer.peep[:, rs]).tobytes())
    return b"".join(parts)


def write_dense_stream(qdense: QuantizedDense, tile_coords: tuple[int, int]) -> bytes:
    r, c = tile_coords
    n = qdense.block
    if not (0 <= r < qdense.row_blocks and 0 <= c < qdense.col_blocks):
        raise ValueError(f"block {tile_coords} outside {qdense.row_blocks}x{qdense.col_blocks}")
    fm = qdense.formats
    hdr = StreamHeader(
        FLAG_DENSE, n, r, c, qdense.n_h, qdense.n_y,
        fm.weight.frac_bits, fm.state.frac_bits, fm.acc.frac_bits,
    )
    blk = qdense.w[r * n:(r + 1) * n, c * n:(c + 1) * n]
    return hdr.pack() + np.ascontiguousarray(blk).tobytes()


def write_layer_file(qlayer: QuantizedLayer) -> bytes:
    return b"".join(
        write_weight_stream(qlayer, (r, c))
        for r in range(qlayer.row_blocks)
        for c in range(qlayer.col_blocks)
    )


def split_records(data: bytes) -> list[tuple[StreamHeader, bytes]]:
    """Split a concatenated layer file into (header, record bytes) pairs."""
    out = []
    pos = 0
    while pos < len(data):
        hdr = StreamHeader.unpack(data, pos)
        end = pos + hdr.record_size
        if end > len(data):
            raise StreamFormatError("record truncated", len(data))
        out.append((hdr, data[pos:end]))
        pos = end
    return out


def read_layer_file(data: bytes, formats: Formats | None = None) -> QuantizedLayer:
    """Rebuild a QuantizedLayer from a concatenated layer file."""
    records = split_records(data)
    if not records:
        raise StreamFormatError("empty layer file", 0)
    h0 = records[0][0]
    n = h0.n
    fm = formats or Formats.with_state_frac(h0.state_frac, h0.weight_frac)
    nx_pad, nh_pad = padded(h0.n_x, n), padded(h0.n_h, n)
    rb, cb = nh_pad // n, max(nx_pad, nh_pad) // n
    wx = np.zeros((4, nh_pad, cb * n), np.int8)
    wh = np.zeros((4, nh_pad, cb * n), np.int8)
    bias = np.zeros((4, nh_pad), np.int8)
    peep = np.zeros((3, nh_pad), np.int8)
    seen = set()
    pos = 0
    for hdr, rec in records:
        if hdr.is_dense or (hdr.n, hdr.n_x, hdr.n_h) != (n, h0.n_x, h0.n_h):
            raise StreamFormatError("record does not belong to this layer", pos)
        r, c = hdr.block_row, hdr.block_col
        if r >= rb or c >= cb or (r, c) in seen:
            raise StreamFormatError(f"unexpected block ({r}, {c})", pos + 7)
        seen.add((r, c))
        body = np.frombuffer(rec, np.int8, offset=HEADER_SIZE)
        mats = body[: 8 * n * n].reshape(4, 2, n, n)
        wx[:, r * n:(r + 1) * n, c * n:(c + 1) * n] = mats[:, 0]
        wh[:, r * n:(r + 1) * n, c * n:(c + 1) * n] = mats[:, 1]
        if hdr.has_vectors:
            vec = body[8 * n * n:]
            bias[:, r * n:(r + 1) * n] = vec[: 4 * n].reshape(4, n)
            peep[:, r * n:(r + 1) * n] = vec[4 * n:].reshape(3, n)
        pos += len(rec)
    if len(seen) != rb * cb:
        raise StreamFormatError(f"layer file holds {len(seen)} of {rb * cb} blocks", len(data))
    return QuantizedLayer(
        h0.n_x, h0.n_h, np.ascontiguousarray(wx[:, :, :nx_pad]),
        np.ascontiguousarray(wh[:, :, :nh_pad]), bias, peep, fm, n,
    )
