"""Command-line driver.

Exit codes: 0 success, 1 verification mismatch, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import _kernels
from .fxp import Formats, dequantize_array
from .lstm_ref import LstmState, dense_output_float, lstm_step_float, lstm_step_quant, dense_output_quant
from .modelio import (
    CTC_NAME,
    SchemaError,
    StreamFormatError,
    ctc_3l_421h_uni,
    load_network,
    quantize_input,
    quantize_model,
    random_network,
    read_layer_file,
    save_network,
    split_records,
    write_dense_stream,
    write_layer_file,
)
from .perfmodel import (
    CycleParams,
    OperatingPoint,
    op_count,
    operating_point,
    report,
    simulate_cycles,
)
from .systolic import ArrayGeometry, SystolicArray, build_schedule, partition

log = logging.getLogger("chipmunk_sim")

EXIT_OK, EXIT_MISMATCH, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------


def _network(arg: str, seed: int):
    if arg.lower() == CTC_NAME:
        return ctc_3l_421h_uni(seed=seed)
    path = Path(arg)
    if not path.exists():
        raise InputError(f"network file not found: {arg}")
    return load_network(path)


def _op_point(arg: str) -> OperatingPoint:
    """Named point, or ``custom:FREQ_MHZ:TILE_MW``."""
    if arg.startswith("custom:"):
        try:
            _, f, p = arg.split(":")
            return OperatingPoint("custom", float("nan"), float(f) * 1e6, float(p) * 1e-3)
        except ValueError:
            raise InputError(f"bad custom operating point {arg!r}, expected custom:FREQ_MHZ:TILE_MW") from None
    try:
        return operating_point(arg)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _frames(arg: str, n_in: int, seed: int) -> np.ndarray:
    """Integer count of seeded random frames, or a .npy / .json file of T x N_x floats."""
    if arg.isdigit():
        rng = np.random.default_rng(seed)
        return rng.uniform(-1.0, 1.0, size=(int(arg), n_in))
    path = Path(arg)
    if not path.exists():
        raise InputError(f"frames file not found: {arg}")
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        arr = np.asarray(json.loads(path.read_text()), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != n_in:
        raise InputError(f"frames must be T x {n_in}, got shape {arr.shape}")
    return arr.astype(np.float64)


def _cycle_params(pairs: list[str], overlap: str) -> CycleParams:
    ov = {}
    for kv in pairs or []:
        if "=" not in kv:
            raise InputError(f"--cycle-param expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        ov[k.strip()] = v.strip()
    ov["overlap_load"] = "on" if overlap == "on" else "off"
    try:
        return CycleParams().with_overrides(ov)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _formats(args) -> Formats:
    try:
        return Formats.with_state_frac(args.state_frac, args.weight_frac)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _geometry(arg: str, n_lstm: int) -> ArrayGeometry:
    try:
        return ArrayGeometry.parse(arg, n_lstm)
    except (ValueError, TypeError) as exc:
        raise InputError(str(exc)) from None


def _config_label(geom: ArrayGeometry) -> str:
    if geom.n_tiles == 1:
        return "single"
    if geom.subarrays > 1:
        return f"systolic {geom.subarrays}x{geom.rows}x{geom.cols}"
    return f"systolic {geom.rows}x{geom.cols}"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.topology == CTC_NAME:
        model = ctc_3l_421h_uni(seed=args.seed, scale=args.scale)
    else:
        try:
            sizes = [int(s) for s in args.topology.split(",")]
        except ValueError:
            raise InputError("--topology is a comma list N_x,N_h1,N_h2,... or " + CTC_NAME) from None
        if len(sizes) < 2:
            raise InputError("--topology needs at least N_x,N_h")
        dims = list(zip(sizes[:-1], sizes[1:]))
        model = random_network(dims, seed=args.seed, n_y=args.n_y, scale=args.scale)
    save_network(model, args.out, dtype=args.dtype)
    print(f"wrote {args.out}: {len(model.layers)} layers, dims {model.dims}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    model = _network(args.network, args.seed)
    q = quantize_model(model, _formats(args), args.n_lstm)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.network).name.removesuffix(".json").removesuffix(".chmk")
    files = []
    for k, ql in enumerate(q.layers):
        p = out / f"{stem}.layer{k}.chmk.bin"
        p.write_bytes(write_layer_file(ql))
        files.append({"path": str(p), "bytes": p.stat().st_size, "saturations": ql.saturations})
    if q.dense is not None:
        d = q.dense
        p = out / f"{stem}.dense.chmk.bin"
        p.write_bytes(b"".join(
            write_dense_stream(d, (r, c)) for r in range(d.row_blocks) for c in range(d.col_blocks)
        ))
        files.append({"path": str(p), "bytes": p.stat().st_size, "saturations": d.saturations})
    print(json.dumps({"network": model.name, "saturations": q.saturations, "files": files}, indent=2))
    return EXIT_OK


def _summary(label: str, geom, op, rep) -> str:
    rows = [
        ("Configuration", f"{label} ({geom.n_tiles} tiles)"),
        ("Operating point", f"{op.name} ({op.freq / 1e6:g} MHz)"),
        ("Execution time", f"{rep.exec_time_s * 1e3:.2f} ms ({rep.cycles_total:.0f} cycles)"),
        ("Peak power", f"{rep.peak_power_w * 1e3:.2f} mW"),
        ("Average power", f"{rep.avg_power_w * 1e3:.2f} mW" if rep.deadline_met else "-"),
        (f"Deadline ({rep.frame_period_s * 1e3:g} ms)", "met" if rep.deadline_met else "missed"),
        ("Reload share", f"{rep.load_fraction * 100:.1f}%"),
    ]
    w = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{w}}  {v}" for k, v in rows)


def cmd_run(args) -> int:
    model = _network(args.network, args.seed)
    geom = _geometry(args.geometry, args.n_lstm)
    op = _op_point(args.op_point)
    params = _cycle_params(args.cycle_param, args.overlap_load)
    params = CycleParams(**{**params.__dict__, "n_lstm": geom.n_lstm})
    q = quantize_model(model, _formats(args), geom.n_lstm)
    mapping = partition(q, geom)
    schedule = build_schedule(mapping)
    cycles = simulate_cycles(schedule, params)
    rep = report(cycles, op, geom.n_tiles, args.frame_period_ms * 1e-3, op_count(q))
    rep.notes.extend(mapping.notes)

    outputs = []
    if args.frames != "0":
        frames = _frames(args.frames, model.n_in, args.seed)
        with SystolicArray(mapping, q) as arr:
            for x in frames:
                h, y = arr.step(quantize_input(x, q))
                out = y[: q.n_out] if y is not None else h[: q.n_out]
                outputs.append(out)
    kinds: dict[str, int] = {}
    for ph in schedule:
        kinds[ph.kind] = kinds.get(ph.kind, 0) + (0 if ph.initial else 1)
    rep.extra = {
        "network": model.name,
        "geometry": str(geom),
        "configuration": _config_label(geom),
        "resident": mapping.resident,
        "dense_reload": mapping.dense_reload,
        "phases_per_frame": kinds,
        "initial_load_cycles": cycles.initial,
        "saturations": q.saturations,
        "frames": len(outputs),
        "kernel_backend": _kernels.BACKEND,
        "cycle_params": params.__dict__,
    }
    if outputs:
        stacked = np.stack(outputs).astype(np.int8)
        rep.extra["output_checksum"] = int(np.sum(stacked.astype(np.int64) * (1 + np.arange(stacked.size).reshape(stacked.shape) % 251)))
        if args.output:
            vals = dequantize_array(stacked, q.formats.state)
            if args.output.endswith(".npy"):
                np.save(args.output, vals)
            else:
                Path(args.output).write_text(json.dumps(vals.tolist()))
    if args.report:
        Path(args.report).write_text(rep.to_json() + "\n")
    print(_summary(_config_label(geom), geom, op, rep))
    return EXIT_OK


def _golden_layers(q, frames_raw):
    """Per-frame list of per-layer h plus y, from the golden model."""
    states = [LstmState.zeros(ql.nh_pad, quantized=True) for ql in q.layers]
    out = []
    for x in frames_raw:
        v, per = x, []
        for k, ql in enumerate(q.layers):
            v, states[k] = lstm_step_quant(ql, v, states[k])
            per.append(v)
        y = dense_output_quant(q.dense, v) if q.dense is not None else None
        out.append((per, y))
    return out


def _float_outputs(model, frames):
    states = [LstmState.zeros(p.n_h) for p in model.layers]
    out = []
    for x in frames:
        v = x
        for k, p in enumerate(model.layers):
            v, states[k] = lstm_step_float(p, v, states[k])
        out.append(dense_output_float(model.dense, v) if model.dense is not None else v)
    return out


def cmd_verify(args) -> int:
    model = _network(args.network, args.seed)
    geom = _geometry(args.geometry, args.n_lstm)
    q = quantize_model(model, _formats(args), geom.n_lstm)
    mapping = partition(q, geom)
    records = None
    if args.weights:
        if len(args.weights) != len(q.layers):
            raise InputError(f"--weights needs {len(q.layers)} layer files, got {len(args.weights)}")
        arr0 = SystolicArray(mapping, q)
        records = dict(arr0.records)
        for k, path in enumerate(args.weights):
            data = Path(path).read_bytes()
            ql = read_layer_file(data, q.formats)
            if (ql.n_x, ql.n_h) != (q.layers[k].n_x, q.layers[k].n_h):
                raise InputError(f"{path}: layer dims {(ql.n_x, ql.n_h)} do not match network layer {k}")
            for hdr, rec in split_records(data):
                records[(k, hdr.block_row, hdr.block_col)] = rec
        arr0.close()

    frames = _frames(args.frames, model.n_in, args.seed)
    raw = [quantize_input(x, q) for x in frames]
    golden = _golden_layers(q, raw)
    mismatch = None
    outs = []
    with SystolicArray(mapping, q, records=records) as arr:
        for t, x in enumerate(raw):
            h, y = arr.step(x)
            per, yg = golden[t]
            for k in range(len(q.layers)):
                diff = np.flatnonzero(arr.h_prev[k] != per[k])
                if diff.size and mismatch is None:
                    u = int(diff[0])
                    mismatch = (t, f"layer {k}", u, int(arr.h_prev[k][u]), int(per[k][u]))
            if yg is not None:
                diff = np.flatnonzero(y != yg)
                if diff.size and mismatch is None:
                    u = int(diff[0])
                    mismatch = (t, "dense", u, int(y[u]), int(yg[u]))
            outs.append(y[: q.n_out] if y is not None else h[: q.n_out])

    ref = _float_outputs(model, frames)
    max_err = max(
        float(np.max(np.abs(dequantize_array(o, q.formats.state) - r))) for o, r in zip(outs, ref)
    )
    print(f"geometry {geom}, {len(raw)} frames, kernel backend {_kernels.BACKEND}")
    print(f"max |quantized - float| on outputs: {max_err:.6f}")
    if mismatch is not None:
        t, where, u, got, want = mismatch
        print(f"FAIL: first mismatch at frame {t}, {where}, unit {u}: simulated {got}, golden {want}")
        return EXIT_MISMATCH
    print("PASS: bit-exact against the quantized golden model")
    return EXIT_OK


def cmd_table(args) -> int:
    """Execution time and power of the three reference configurations."""
    model = _network(args.network, args.seed)
    params = _cycle_params(args.cycle_param, args.overlap_load)
    rows = []
    for arg in ("5x5x3", "5x5", "1x1"):
        geom = ArrayGeometry.parse(arg)
        cyc = simulate_cycles(build_schedule(partition(model, geom)), params)
        reps = [report(cyc, operating_point(p), geom.n_tiles, args.frame_period_ms * 1e-3) for p in ("1.24V", "0.75V")]
        rows.append((_config_label(geom), reps))
    print(f"{'':16}{'configuration':<20}{'PERF @1.24V':>14}{'EFF @0.75V':>14}")
    for title, attr, scale, unit in (
        ("Execution time", "exec_time_s", 1e3, "ms"),
        ("Peak power", "peak_power_w", 1e3, "mW"),
        ("Average power", "avg_power_w", 1e3, "mW"),
    ):
        for k, (label, reps) in enumerate(rows):
            cells = []
            for r in reps:
                if attr == "avg_power_w" and not r.deadline_met:
                    cells.append("-")
                else:
                    cells.append(f"{getattr(r, attr) * scale:.2f} {unit}")
            print(f"{title if k == 0 else '':16}{label:<20}{cells[0]:>14}{cells[1]:>14}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chipmunk-sim", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--network", default=CTC_NAME,
                       help=f"network .chmk.json file, or '{CTC_NAME}' for the built-in topology")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--n-lstm", type=int, default=96)
        p.add_argument("--state-frac", type=int, default=5)
        p.add_argument("--weight-frac", type=int, default=6)

    def perf(p):
        p.add_argument("--frame-period-ms", type=float, default=10.0)
        p.add_argument("--cycle-param", action="append", default=[], metavar="K=V")
        p.add_argument("--overlap-load", choices=("on", "off"), default="off")

    p = sub.add_parser("generate", help="write a seeded random network descriptor")
    p.add_argument("--topology", default=CTC_NAME, help=f"N_x,N_h1,N_h2,... or {CTC_NAME}")
    p.add_argument("--n-y", type=int, default=None)
    p.add_argument("--scale", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("<f8", "<f4"), default="<f4")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("quantize", help="quantize a network into per-layer weight streams")
    common(p)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("run", help="simulate a network on a tile geometry and report time/power")
    common(p)
    perf(p)
    p.add_argument("--geometry", default="1x1", help="RxC or RxCxS")
    p.add_argument("--op-point", default="1.24V", help="1.24V, 0.75V or custom:FREQ_MHZ:TILE_MW")
    p.add_argument("--frames", default="1", help="random frame count or .npy/.json file")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--output", help="write output frames (.npy or .json)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="check the array simulation against the golden model")
    common(p)
    p.add_argument("--geometry", default="1x1")
    p.add_argument("--frames", default="3")
    p.add_argument("--weights", nargs="+", help="per-layer .chmk.bin files to load instead of quantizing")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("table", help="execution time and power of the reference configurations")
    common(p)
    perf(p)
    p.set_defaults(func=cmd_table)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, SchemaError, StreamFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
