import base64
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chipmunk_sim.lstm_ref import LstmLayerParams
from chipmunk_sim.modelio import (
    CTC_NAME,
    HEADER_SIZE,
    NetworkModel,
    SchemaError,
    StreamFormatError,
    StreamHeader,
    ctc_3l_421h_uni,
    dump_network,
    network_to_dict,
    parse_network,
    quantize_input,
    quantize_layer,
    quantize_model,
    random_network,
    read_layer_file,
    split_records,
    stream_size,
    write_dense_stream,
    write_layer_file,
    write_weight_stream,
)


@pytest.fixture(scope="module")
def small_net():
    return random_network([(13, 100), (100, 7)], seed=5, n_y=4, scale=0.6)


# -- JSON descriptor ---------------------------------------------------------


def test_json_roundtrip_f8_exact(small_net):
    back = parse_network(dump_network(small_net))
    assert back.dims == small_net.dims
    for a, b in zip(back.layers, small_net.layers):
        for g in "ifco":
            np.testing.assert_array_equal(a.W_x[g], b.W_x[g])
            np.testing.assert_array_equal(a.b[g], b.b[g])
    np.testing.assert_array_equal(back.dense.W_hy, small_net.dense.W_hy)


def test_json_roundtrip_f4(small_net):
    back = parse_network(dump_network(small_net, "<f4"))
    np.testing.assert_allclose(back.layers[1].W_h["c"], small_net.layers[1].W_h["c"], rtol=1e-6)


def _doc(net):
    return network_to_dict(net)


@pytest.mark.parametrize(
    "mutate,field",
    [
        (lambda d: d["layers"][0]["tensors"].pop("W_hf"), "layers[0].tensors.W_hf"),
        (lambda d: d["layers"][1]["tensors"]["b_o"].update(shape=[3]), "layers[1].tensors.b_o.shape"),
        (lambda d: d["layers"][1].update(n_x=99), "layers[1].n_x"),
        (lambda d: d["layers"][0].update(n_h=-1), "layers[0].n_h"),
        (lambda d: d["layers"][0]["tensors"]["w_ci"].update(data="@@@"), "layers[0].tensors.w_ci.data"),
        (lambda d: d["layers"][0]["tensors"]["w_ci"].update(dtype="<i4"), "layers[0].tensors.w_ci.dtype"),
        (lambda d: d["dense"]["tensors"].pop("W_hy"), "dense.tensors.W_hy"),
        (lambda d: d.update(format="onnx"), "format"),
        (lambda d: d.update(layers=[]), "layers"),
    ],
)
def test_schema_errors_name_field(small_net, mutate, field):
    d = _doc(small_net)
    mutate(d)
    with pytest.raises(SchemaError) as ei:
        parse_network(json.dumps(d))
    assert ei.value.field == field
    assert field in str(ei.value)


def test_schema_error_reports_line():
    with pytest.raises(SchemaError) as ei:
        parse_network('{\n "format": "chmk-network",\n "version": 1,\n oops\n}')
    assert ei.value.line == 4


def test_nonfinite_rejected(small_net):
    d = _doc(small_net)
    t = d["layers"][0]["tensors"]["b_i"]
    t["data"] = base64.b64encode(np.full(100, np.inf).tobytes()).decode()
    with pytest.raises(SchemaError, match="non-finite"):
        parse_network(json.dumps(d))


def test_model_dimension_chain():
    with pytest.raises(ValueError):
        NetworkModel([LstmLayerParams.zeros(3, 4), LstmLayerParams.zeros(5, 2)])


def test_ctc_topology():
    m = ctc_3l_421h_uni()
    assert m.name == CTC_NAME
    assert m.dims == [(123, 421), (421, 421), (421, 421)]
    assert m.dense is None
    assert np.abs(m.layers[0].W_x["i"]).max() <= 0.1
    # seeded and deterministic
    np.testing.assert_array_equal(m.layers[2].W_h["o"], ctc_3l_421h_uni().layers[2].W_h["o"])


# -- quantization ------------------------------------------------------------


def test_quantize_saturation_count():
    p = LstmLayerParams.zeros(4, 3)
    p.W_x["i"][0, :] = [2.0, -2.5, 1.0, 1.984375]  # Q1.6 range is [-2, 1.984375]
    p.b["o"][:] = [3.0, 0.0, -3.0]
    p.w_c["f"][1] = -2.0
    q = quantize_layer(p)
    assert q.saturations == 4
    assert q.wx[0, 0, :4].tolist() == [127, -128, 64, 127]
    assert q.peep[1, 1] == -128
    assert q.wx.shape == (4, 96, 96) and q.wh.shape == (4, 96, 96)


def test_quantize_model_padding(small_net):
    q = quantize_model(small_net)
    assert [l.nx_pad for l in q.layers] == [96, 192]
    assert [l.nh_pad for l in q.layers] == [192, 96]
    assert (q.dense.ny_pad, q.dense.nh_pad) == (96, 96)
    assert not q.layers[0].wx[:, 100:, :].any() and not q.layers[0].wx[:, :, 13:].any()
    with pytest.raises(ValueError):
        quantize_input(np.zeros(12), q)
    x = quantize_input(np.full(13, 0.5), q)
    assert x.shape == (96,) and x[:13].tolist() == [16] * 13 and not x[13:].any()


# -- weight stream -----------------------------------------------------------


def test_record_sizes():
    assert stream_size(96, True) == 74416
    assert stream_size(96, False) == 73744
    assert stream_size(96, dense=True) == HEADER_SIZE + 9216


def test_golden_header_bytes():
    q = quantize_layer(LstmLayerParams.zeros(123, 421))
    rec = write_weight_stream(q, (2, 4))
    assert rec[:16] == bytes.fromhex("43484d4b" "01" "01" "60" "02" "04" "7b00" "a501" "65" "0b" "e4")
    rec = write_weight_stream(q, (2, 1))
    assert rec[5] == 0x00 and len(rec) == 73744


def test_layer_file_roundtrip(small_net):
    q = quantize_model(small_net)
    for ql in q.layers:
        data = write_layer_file(ql)
        recs = split_records(data)
        assert [(h.block_row, h.block_col) for h, _ in recs] == [
            (r, c) for r in range(ql.row_blocks) for c in range(ql.col_blocks)
        ]
        assert all(h.has_vectors == (h.block_col == ql.col_blocks - 1) for h, _ in recs)
        back = read_layer_file(data)
        for name in ("wx", "wh", "bias", "peep"):
            np.testing.assert_array_equal(getattr(back, name), getattr(ql, name))
        assert (back.n_x, back.n_h) == (ql.n_x, ql.n_h)


def test_dense_stream(small_net):
    q = quantize_model(small_net)
    rec = write_dense_stream(q.dense, (0, 0))
    hdr = StreamHeader.unpack(rec)
    assert hdr.is_dense and not hdr.has_vectors and len(rec) == hdr.record_size
    np.testing.assert_array_equal(np.frombuffer(rec[16:], np.int8).reshape(96, 96), q.dense.w)


@pytest.mark.parametrize(
    "offset,value,position",
    [(0, ord("X"), 0), (4, 2, 4), (5, 0x80, 5), (6, 0, 6), (15, 0x1B, 15)],
)
def test_header_corruption_positions(offset, value, position):
    rec = bytearray(write_weight_stream(quantize_layer(LstmLayerParams.zeros(5, 5)), (0, 0)))
    rec[offset] = value
    with pytest.raises(StreamFormatError) as ei:
        StreamHeader.unpack(bytes(rec))
    assert ei.value.position == position


def test_truncated_and_incomplete_files(small_net):
    data = write_layer_file(quantize_model(small_net).layers[0])
    with pytest.raises(StreamFormatError) as ei:
        split_records(data[:-10])
    assert ei.value.position == len(data) - 10
    one = split_records(data)[0][1]
    with pytest.raises(StreamFormatError, match="blocks"):
        read_layer_file(one)
    with pytest.raises(StreamFormatError):
        read_layer_file(one + one)


@settings(max_examples=300)
@given(st.binary(min_size=0, max_size=40))
def test_fuzzed_headers_fail_cleanly(blob):
    try:
        hdr = StreamHeader.unpack(blob)
    except StreamFormatError as exc:
        assert 0 <= exc.position <= max(len(blob), 16)
    else:
        assert hdr.pack() == blob[:16]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 15), st.integers(0, 255))
def test_fuzzed_valid_header_bytes(offset, value):
    rec = bytearray(write_weight_stream(quantize_layer(LstmLayerParams.zeros(5, 5)), (0, 0)))
    rec[offset] = value
    try:
        recs = split_records(bytes(rec))
    except StreamFormatError:
        return
    assert sum(len(r) for _, r in recs) == len(rec)
