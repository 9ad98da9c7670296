import json

import pytest

from chipmunk_sim.modelio import ctc_3l_421h_uni, random_network
from chipmunk_sim.perfmodel import (
    OPERATING_POINTS,
    CycleBreakdown,
    CycleParams,
    OperatingPoint,
    average_power,
    efficiency,
    op_count,
    operating_point,
    peak_performance,
    phase_cycles,
    report,
    simulate_cycles,
)
from chipmunk_sim.systolic import ArrayGeometry, SchedulePhase, build_schedule, partition

P = CycleParams()


@pytest.mark.parametrize(
    "phase,cycles",
    [
        (SchedulePhase("load", 0, load_bytes=(74416, 73744)), 74416 + 1000),
        (SchedulePhase("load", 0), 0),
        (SchedulePhase("x_broadcast", 0, blocks=2), 192),
        (SchedulePhase("gate_block_compute", 0, blocks=1), 96),
        (SchedulePhase("row_reduce", 0, hops=4), 768),
        (SchedulePhase("elementwise", 0), 4),
        (SchedulePhase("h_redistribute", 0, hops=0), 96),
        (SchedulePhase("h_redistribute", 0, hops=4), 384),
        (SchedulePhase("dense_output", 0, hops=1), 96 + 192 + 4),
    ],
)
def test_phase_cycles(phase, cycles):
    assert phase_cycles(phase, P) == cycles


def test_serial_load():
    ph = SchedulePhase("load", 0, load_bytes=(100, 200))
    assert phase_cycles(ph, CycleParams(parallel_tile_load=False, bytes_per_load_cycle=2)) == 150 + 1000


def test_unknown_phase():
    with pytest.raises(ValueError):
        phase_cycles(SchedulePhase("teleport", 0), P)


def test_op_count_ctc():
    oc = op_count(ctc_3l_421h_uni())
    assert oc.mac_ops == 2 * 4 * 421 * (123 + 421) + 2 * 2 * 4 * 421 * 842 == 7_503_904
    assert oc.weights == 3_760_793
    assert op_count([(123, 421), (421, 421), (421, 421)]) == oc


def test_op_count_dense():
    oc = op_count(random_network([(3, 4)], n_y=2))
    assert oc.weights == 4 * 4 * 7 + 7 * 4 + 8
    assert oc.mac_ops == 2 * 4 * 4 * 7 + 2 * 8


def test_peak_and_efficiency():
    assert peak_performance(operating_point("1.24V")) == pytest.approx(32.256)
    assert peak_performance(operating_point("0.75V")) == pytest.approx(3.84)
    assert efficiency(operating_point("0.75V")) == pytest.approx(3.84 / 1.24)


def test_operating_points():
    assert set(OPERATING_POINTS) == {"1.24V", "0.75V"}
    with pytest.raises(ValueError):
        operating_point("2V")
    with pytest.raises(ValueError):
        OperatingPoint("x", 1.0, 1e6, 0.0)


def test_overrides():
    p = P.with_overrides({"include_io": "off", "reload_event_overhead": "0", "bytes_per_load_cycle": "4"})
    assert p.include_io is False and p.reload_event_overhead == 0 and p.bytes_per_load_cycle == 4.0
    with pytest.raises(ValueError):
        P.with_overrides({"warp": "9"})
    with pytest.raises(ValueError):
        P.with_overrides({"include_io": "maybe"})
    with pytest.raises(ValueError):
        CycleParams(reduce_cycles_per_element=-1)


def test_report_duty_cycle():
    cyc = CycleBreakdown({"gate_block_compute": 168_000.0})
    r = report(cyc, operating_point("1.24V"), 25)
    assert r.exec_time_s == pytest.approx(1e-3)
    assert r.peak_power_w == pytest.approx(25 * 24.45e-3)
    assert r.avg_power_w == pytest.approx(r.peak_power_w / 10)
    assert r.energy_j == pytest.approx(r.peak_power_w * 1e-3)
    assert r.deadline_met
    slow = report(CycleBreakdown({"load": 2e6}), operating_point("1.24V"), 1)
    assert not slow.deadline_met and slow.avg_power_w == slow.peak_power_w
    assert average_power(0.61125, 1.59e-3) == pytest.approx(0.09718875)


def test_report_json_deterministic():
    m = ctc_3l_421h_uni()
    sched = build_schedule(partition(m, ArrayGeometry(5, 5)))
    a = report(simulate_cycles(sched), operating_point("1.24V"), 25, ops=op_count(m)).to_json()
    b = report(simulate_cycles(sched), operating_point("1.24V"), 25, ops=op_count(m)).to_json()
    assert a == b
    d = json.loads(a)
    for key in ("cycles_total", "exec_time_s", "peak_power_w", "avg_power_w", "energy_j", "gops", "gops_per_mw"):
        assert key in d


def test_initial_load_excluded_and_io_included():
    m = random_network([(50, 60)])
    sched = build_schedule(partition(m, ArrayGeometry(1, 1)))
    with_io = simulate_cycles(sched)
    no_io = simulate_cycles(sched, CycleParams(include_io=False))
    assert with_io.total - no_io.total == 60
    assert with_io.initial == 74416 + 1000
    assert with_io.by_kind["load"] == 0


def test_ctc_cycle_regression():
    # frozen outputs of the documented default parameters
    m = ctc_3l_421h_uni()
    tot = {g: simulate_cycles(build_schedule(partition(m, ArrayGeometry.parse(g)))).total for g in ("1x1", "5x5", "5x5x3")}
    assert tot == {"1x1": 5_782_429, "5x5": 240_253, "5x5x3": 13_429}


def test_overlap_load_hides_behind_compute():
    m = ctc_3l_421h_uni()
    sched = build_schedule(partition(m, ArrayGeometry(5, 5)))
    base = simulate_cycles(sched)
    ov = simulate_cycles(sched, CycleParams(overlap_load=True))
    assert ov.total < base.total
    compute = base.total - base.by_kind["load"]
    assert ov.total >= compute


def test_pipeline_reduce_is_opt_in():
    sched = build_schedule(partition(ctc_3l_421h_uni(), ArrayGeometry(5, 5, 3)))
    base = simulate_cycles(sched)
    piped = simulate_cycles(sched, CycleParams(pipeline_reduce=True))
    # 3 layers x 3 gates, each reduce of 768 cycles hides 192
    assert base.by_kind["row_reduce"] - piped.by_kind["row_reduce"] == 9 * 192
