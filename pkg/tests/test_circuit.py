import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import conduction_oracle as oracle

from jicgsim.circuit import (FF_NETLIST, NO_FORCING, RESET_STATE, FlipFlop, ForcedState,
                             NandGate, Trace, eval_nand, make_flipflop, make_register,
                             read_trace_csv, run_trace, settle)


def gate(n):
    return NandGate("T", tuple(f"i{k}" for k in range(n)), "o",
                    tuple(f"N{k}" for k in range(n)), tuple(f"P{k}" for k in range(n)))


@pytest.mark.parametrize("n", [2, 3])
def test_nand_matches_oracle_all_pair_subsets(n):
    g = gate(n)
    pairs = [("N", k) for k in range(n)] + [("P", k) for k in range(n)]
    for inputs in itertools.product((0, 1), repeat=n):
        for r in range(len(pairs) + 1):
            for subset in itertools.combinations(pairs, r):
                lit = {(ch, k, side) for ch, k in subset for side in "ab"}
                forced = ForcedState({f"N{k}" for ch, k in subset if ch == "N"},
                                     {f"P{k}" for ch, k in subset if ch == "P"})
                assert eval_nand(g, inputs, forced) == oracle(n, inputs, lit)


@pytest.mark.parametrize("n", [2, 3])
def test_half_open_devices_change_nothing(n):
    devices = [(ch, k, s) for ch in "NP" for k in range(n) for s in "ab"]
    for inputs in itertools.product((0, 1), repeat=n):
        clean = oracle(n, inputs, set())
        for r in range(len(devices) + 1):
            for lit in itertools.combinations(devices, r):
                lit = set(lit)
                if any({(ch, k, "a"), (ch, k, "b")} <= lit for ch, k, _ in lit):
                    continue
                assert oracle(n, inputs, lit) == clean


def test_nand_examples():
    g = gate(2)
    assert eval_nand(g, (0, 0)) == 1
    assert eval_nand(g, (1, 1)) == 0
    assert eval_nand(g, (0, 0), ForcedState({"N0", "N1"})) == 0
    assert eval_nand(g, (0, 0), ForcedState({"N0"})) == 1
    assert eval_nand(g, (1, 1), ForcedState(set(), {"P0"})) == 0
    with pytest.raises(ValueError):
        eval_nand(g, (1,))
    with pytest.raises(ValueError):
        ForcedState({"A"}, {"A"})


# -- flip-flop ------------------------------------------------------------------

FF = make_flipflop()


def hold(q):
    nets, ok = settle(FF, {"d": q, "clk": 0})
    nets, ok = settle(FF, {"d": q, "clk": 1}, state=nets)
    nets, ok = settle(FF, {"d": q, "clk": 0}, state=nets)
    assert ok and nets["q"] == q
    return nets


def shoot(state, nmos=(), pmos=(), d=None):
    d = state["q"] if d is None else d
    forced = ForcedState(set(nmos), set(pmos))
    nets, ok = settle(FF, {"d": d, "clk": 0}, forced, state)
    nets, ok2 = settle(FF, {"d": d, "clk": 0}, NO_FORCING, nets)
    return nets, ok and ok2


def test_netlist_shape():
    arity = [len(g.inputs) for g in FF.gates]
    assert sorted(arity) == [2, 2, 2, 2, 3, 3]
    assert [g.gate_id for g in FF.gates] == [f"G{i}" for i in range(1, 7)]
    assert len(FF_NETLIST) == 6


def test_reset_state_is_fixed_point():
    nets, ok = settle(FF, {"d": 0, "clk": 0}, state=RESET_STATE)
    assert ok and {k: nets[k] for k in RESET_STATE} == RESET_STATE


def test_positive_edge_capture_and_hold():
    for q0, d in itertools.product((0, 1), repeat=2):
        s = hold(q0)
        low, _ = settle(FF, {"d": d, "clk": 0}, state=s)
        assert low["q"] == q0
        high, _ = settle(FF, {"d": d, "clk": 1}, state=low)
        assert high["q"] == d
        for d2 in (0, 1):
            again, _ = settle(FF, {"d": d2, "clk": 1}, state=high)
            assert again["q"] == d


def _single_gate_routes(q0):
    routes = set()
    for g in FF.gates:
        for r in range(1, len(g.nmos_pairs) + 1):
            for subset in itertools.combinations(g.nmos_pairs, r):
                nets, ok = shoot(hold(q0), nmos=subset)
                if ok and nets["q"] != q0:
                    routes.add(g.gate_id)
    return routes


def test_bit_set_routes_are_g2_g6():
    assert _single_gate_routes(0) == {"G2", "G6"}


def test_bit_reset_routes_are_g1_g5():
    assert _single_gate_routes(1) == {"G1", "G5"}


def test_pmos_forcing_never_flips():
    pmos = [p for g in FF.gates for p in g.pmos_pairs]
    for q0 in (0, 1):
        for r in (1, 2):
            for subset in itertools.combinations(pmos, r):
                nets, ok = shoot(hold(q0), pmos=subset)
                assert ok and nets["q"] == q0


@pytest.mark.parametrize("q0,route_gates", [(0, ("G2", "G6")), (1, ("G1", "G5"))])
def test_every_flip_touches_a_route_gate(q0, route_gates):
    # exhaustive over all NMOS subsets; combinations spanning distant gates
    # (e.g. G2 clock pair with G4 data pair) can flip too, but always via a route gate
    pairs = [p for g in FF.gates for p in g.nmos_pairs]
    start = hold(q0)
    for mask in range(1, 1 << len(pairs)):
        subset = [p for i, p in enumerate(pairs) if mask >> i & 1]
        nets, ok = shoot(start, nmos=subset)
        if ok and nets["q"] != q0:
            assert any(p.startswith(route_gates) for p in subset), subset


def test_ring_oscillator_reported_unstable():
    ring = FlipFlop("ring", (NandGate("R", ("x", "x"), "x", ("a", "b"), ("c", "e")),))
    _, ok = settle(ring, {"d": 0, "clk": 0}, state={"x": 0})
    assert not ok


# -- register -------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.data())
def test_shift_identity(n, data):
    reg = make_register(n)
    cycles = 2 * n + 6
    bits = data.draw(st.lists(st.integers(0, 1), min_size=cycles, max_size=cycles))
    out = run_trace(reg, 4, bits, n_cycles=cycles).cycle_outputs()
    for k in range(n - 1, cycles):
        assert out[k] == bits[k - (n - 1)]


def test_no_shot_trace_constant_zero():
    tr = run_trace(make_register(4), 2, 0)
    assert set(tr.q_out) == {0}
    assert set(tr.laser) == {0.0}


def _window(reg, period, phase=0.25, dur=50.0):
    t0 = (reg.n_stages + 1 + phase) * period
    return t0, t0 + dur


@pytest.mark.parametrize("bit,pairs", [(0, ("G2/N0", "G2/N1")), (1, ("G1/N0", "G1/N1"))])
def test_attacked_last_stage_shows_flip_until_next_edge(bit, pairs):
    reg = make_register(3)
    period = 500.0
    t0, t1 = _window(reg, period)
    forced = ForcedState({f"ff002/{p}" for p in pairs}, active_window=(t0, t1))
    tr = run_trace(reg, 2, bit, forced, n_cycles=10, laser_power=0.4)
    ref = run_trace(reg, 2, bit, ForcedState(active_window=(t0, t1)), n_cycles=10)
    assert tr.time_ns == ref.time_ns
    wrong = [t for t, a, b in zip(tr.time_ns, tr.q_out, ref.q_out) if a != b]
    edge = (reg.n_stages + 1) * period + period / 2
    assert wrong and wrong[0] == t0 and max(wrong) < edge
    assert all(q == 1 - bit for t, q in zip(tr.time_ns, tr.q_out) if t0 <= t < edge)
    assert max(tr.laser) == 0.4


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=64, max_size=64),
       st.sampled_from([("G2/N0", "G2/N1"), ("G6/N0",), ("G1/N0", "G1/N1"), ("G5/N0",)]))
def test_transient_then_clean_shifting(bits, pairs):
    reg = make_register(3)
    t0, t1 = _window(reg, 100.0, dur=1000.0)
    forced = ForcedState({f"ff002/{p}" for p in pairs}, active_window=(t0, t1))
    n = len(bits)
    out = run_trace(reg, 10, bits, forced, n_cycles=n).cycle_outputs()
    first_clean = int(t1 // 100.0) + 1
    for k in range(first_clean, n):
        assert out[k] == bits[k - 2]


def test_trace_validation():
    reg = make_register(2)
    with pytest.raises(ValueError):
        run_trace(reg, 3, 0)
    with pytest.raises(ValueError):
        run_trace(reg, 2, 0, n_cycles=3)
    with pytest.raises(ValueError):
        run_trace(reg, 2, [0, 1], n_cycles=4)
    with pytest.raises(ValueError):
        run_trace(reg, 2, 2)
    with pytest.raises(ValueError):
        make_register(0)
    assert len(run_trace(reg, 3, 0, allow_any_clock=True)) == 8


def test_trace_csv_round_trip(tmp_path):
    reg = make_register(2)
    forced = ForcedState({"ff001/G6/N0"}, active_window=(1125.0, 1175.0))
    tr = run_trace(reg, 2, 0, forced, n_cycles=6, laser_power=0.35)
    tr.to_csv(tmp_path / "t.csv")
    head = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert head == "time_ns,laser,clk,d_in,q_out"
    back = read_trace_csv(tmp_path / "t.csv")
    assert back.time_ns == tr.time_ns and back.q_out == tr.q_out and back.laser == tr.laser
    assert isinstance(back, Trace)
