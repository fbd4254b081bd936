"""Gate-level model of the JICG flip-flop and shift register.

Each NAND input drives one duplicated NMOS pair in the series pull-down
chain and one duplicated PMOS pair in the parallel pull-up network. A laser
shot is represented by a :class:`ForcedState`: pairs listed there conduct
regardless of their gate input while the shot is active.

Flip-flop topology (classic 6-NAND positive-edge D flip-flop)::

    G1  n3 = NAND(clk, n4, n2)      3-input
    G2  n2 = NAND(n1, clk)
    G3  n1 = NAND(n4, n2)
    G4  n4 = NAND(n3, d)
    G5  q  = NAND(qb, n2)
    G6  qb = NAND(q, n3, rst_n)     3-input, rst_n tied high

With the clock low the flip-flop holds. Pulling G2 or G6 low stores a 1,
pulling G1 or G5 low stores a 0 (``tests/test_circuit.py`` re-derives this
by enumerating every forced subset).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

from .layout import FF_GATES, ff_name

X = None
"""Floating output: neither network conducts."""

STANDARD_CLOCKS_MHZ = (2, 4, 7, 10, 20)

FF_NETLIST = (
    ("G1", ("clk", "n4", "n2"), "n3"),
    ("G2", ("n1", "clk"), "n2"),
    ("G3", ("n4", "n2"), "n1"),
    ("G4", ("n3", "d"), "n4"),
    ("G5", ("qb", "n2"), "q"),
    ("G6", ("q", "n3", "rst_n"), "qb"),
)

# settled hold state with q = 0, d = 0, clk = 0
RESET_STATE = {"n1": 0, "n2": 1, "n3": 1, "n4": 1, "q": 0, "qb": 1}


@dataclass(frozen=True)
class NandGate:
    gate_id: str
    inputs: tuple[str, ...]
    output: str
    nmos_pairs: tuple[str, ...]
    pmos_pairs: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.inputs) == len(self.nmos_pairs) == len(self.pmos_pairs)):
            raise ValueError(f"gate {self.gate_id}: one NMOS and one PMOS pair per input")


@dataclass(frozen=True)
class ForcedState:
    open_nmos_pairs: frozenset = frozenset()
    open_pmos_pairs: frozenset = frozenset()
    active_window: tuple[float, float] = (0.0, math.inf)

    def __post_init__(self):
        object.__setattr__(self, "open_nmos_pairs", frozenset(self.open_nmos_pairs))
        object.__setattr__(self, "open_pmos_pairs", frozenset(self.open_pmos_pairs))
        if self.open_nmos_pairs & self.open_pmos_pairs:
            raise ValueError("a pair cannot be both NMOS and PMOS")

    def __bool__(self):
        return bool(self.open_nmos_pairs or self.open_pmos_pairs)

    def active(self, t: float) -> bool:
        return self.active_window[0] <= t < self.active_window[1]


NO_FORCING = ForcedState()


def _nand(values, nmos_pairs, pmos_pairs, open_n, open_p):
    pull_down = all(v == 1 or p in open_n for v, p in zip(values, nmos_pairs))
    if pull_down:
        return 0
    if any(v == 0 or p in open_p for v, p in zip(values, pmos_pairs)):
        return 1
    return X


def eval_nand(gate: NandGate, input_values: Sequence[int], forced: ForcedState | None = None):
    """Output of a JICG NAND under laser forcing: 0, 1 or ``X`` (floating).

    Contention (both networks conducting) resolves to 0.
    """
    if len(input_values) != len(gate.inputs):
        raise ValueError(f"{gate.gate_id} takes {len(gate.inputs)} inputs, got {len(input_values)}")
    forced = forced or NO_FORCING
    return _nand(input_values, gate.nmos_pairs, gate.pmos_pairs,
                 forced.open_nmos_pairs, forced.open_pmos_pairs)


@dataclass(frozen=True)
class FlipFlop:
    name: str
    gates: tuple[NandGate, ...]
    d_in: str = "d"
    clk: str = "clk"
    q_out: str = "q"

    def gate(self, label: str) -> NandGate:
        for g in self.gates:
            if g.gate_id.endswith(label):
                return g
        raise KeyError(label)


def make_flipflop(prefix: str = "") -> FlipFlop:
    """Flip-flop whose pair ids match ``build_flipflop_layout`` with ``prefix``."""
    gates = []
    for gid, inputs, output in FF_NETLIST:
        gates.append(NandGate(
            gate_id=prefix + gid, inputs=inputs, output=output,
            nmos_pairs=tuple(f"{prefix}{gid}/N{k}" for k in range(len(inputs))),
            pmos_pairs=tuple(f"{prefix}{gid}/P{k}" for k in range(len(inputs))),
        ))
    assert tuple(g[0] for g in FF_NETLIST) == FF_GATES
    return FlipFlop(prefix.rstrip("/") or "ff", tuple(gates))


def settle(ff: FlipFlop, pinned: dict, forced: ForcedState | None = None,
           state: dict | None = None) -> tuple[dict, bool]:
    """Evaluate the cross-coupled gates to a fixed point.

    ``pinned`` supplies ``d`` and ``clk`` (``rst_n`` defaults to 1). Gates are
    updated in label order, each seeing the newest values. Returns the net
    assignment and whether a fixed point was reached within ``8 * len(gates)``
    sweeps; on failure the last sweep's values are returned.
    """
    nets = dict(RESET_STATE if state is None else state)
    nets["rst_n"] = 1
    nets.update(pinned)
    forced = forced or NO_FORCING
    open_n, open_p = forced.open_nmos_pairs, forced.open_pmos_pairs
    for _ in range(8 * len(ff.gates)):
        changed = False
        for g in ff.gates:
            out = _nand([nets[i] for i in g.inputs], g.nmos_pairs, g.pmos_pairs, open_n, open_p)
            if out is not X and out != nets[g.output]:
                nets[g.output] = out
                changed = True
        if not changed:
            return nets, True
    return nets, False


@dataclass(frozen=True)
class ShiftRegister:
    stages: tuple[FlipFlop, ...]

    @property
    def n_stages(self) -> int:
        return len(self.stages)


def make_register(n_stages: int) -> ShiftRegister:
    if n_stages < 1:
        raise ValueError("a register needs at least one stage")
    return ShiftRegister(tuple(make_flipflop(ff_name(i) + "/") for i in range(n_stages)))


@dataclass
class Trace:
    time_ns: list[float] = field(default_factory=list)
    laser: list[float] = field(default_factory=list)
    clk: list[int] = field(default_factory=list)
    d_in: list[int] = field(default_factory=list)
    q_out: list[int] = field(default_factory=list)
    unstable: bool = False
    period_ns: float = 0.0

    def __len__(self):
        return len(self.time_ns)

    def cycle_outputs(self) -> list[int]:
        """q_out at the end of each clock cycle (last sample before the next cycle)."""
        out: dict[int, int] = {}
        for t, q in zip(self.time_ns, self.q_out):
            out[int(t // self.period_ns + 1e-9)] = q
        return [out[k] for k in sorted(out)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_ns", "laser", "clk", "d_in", "q_out"])
            for row in zip(self.time_ns, self.laser, self.clk, self.d_in, self.q_out):
                w.writerow([f"{row[0]:.3f}", f"{row[1]:.4f}", *row[2:]])


def read_trace_csv(path) -> Trace:
    tr = Trace()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            tr.time_ns.append(float(row["time_ns"]))
            tr.laser.append(float(row["laser"]))
            tr.clk.append(int(row["clk"]))
            tr.d_in.append(int(row["d_in"]))
            tr.q_out.append(int(row["q_out"]))
    return tr


def min_cycles(reg: ShiftRegister) -> int:
    return 2 * reg.n_stages


def run_trace(reg: ShiftRegister, clock_freq: float, input_bits, forced: ForcedState | None = None,
              n_cycles: int | None = None, *, laser_power: float = 0.0,
              allow_any_clock: bool = False) -> Trace:
    """Clock ``reg`` for ``n_cycles`` and record laser, clk, d_in and q_out.

    Cycle ``k`` spans ``[kT, (k+1)T)``: clock low for the first half, rising
    edge at ``kT + T/2``. ``input_bits`` is a constant bit or one bit per
    cycle, applied at the start of the cycle. The register settles once per
    half clock and at both boundaries of the forcing window; ``forced``
    applies to every settle inside its window.
    """
    if clock_freq not in STANDARD_CLOCKS_MHZ and not allow_any_clock:
        raise ValueError(f"clock {clock_freq} MHz not in {STANDARD_CLOCKS_MHZ}")
    if clock_freq <= 0:
        raise ValueError("clock frequency must be positive")
    n_cycles = min_cycles(reg) if n_cycles is None else n_cycles
    if n_cycles < min_cycles(reg):
        raise ValueError(f"{n_cycles} cycles cannot flush a {reg.n_stages}-stage register")
    if isinstance(input_bits, int):
        bits = [input_bits] * n_cycles
    else:
        bits = list(input_bits)
        if len(bits) < n_cycles:
            raise ValueError("input pattern shorter than n_cycles")
    if any(b not in (0, 1) for b in bits[:n_cycles]):
        raise ValueError("input bits must be 0 or 1")
    period = 1000.0 / clock_freq
    half = period / 2
    end = n_cycles * period

    events = {k * half for k in range(2 * n_cycles)}
    if forced is not None:
        # window boundaries are events even without forced pairs, so a
        # reference run shares the time axis of the attacked run
        events.update(t for t in forced.active_window if 0 <= t < end)
    states = [dict(RESET_STATE) for _ in reg.stages]
    trace = Trace(period_ns=period)
    for t in sorted(events):
        cycle = int(t // period)
        clk = 0 if (t - cycle * period) < half else 1
        d = bits[cycle]
        lit = forced is not None and forced.active(t)
        now = forced if lit else NO_FORCING
        # snapshot first so every stage samples its predecessor's old value
        prev_q = [s["q"] for s in states]
        for i, ff in enumerate(reg.stages):
            di = d if i == 0 else prev_q[i - 1]
            states[i], ok = settle(ff, {"d": di, "clk": clk}, now, states[i])
            trace.unstable |= not ok
        for _ in range(reg.n_stages + 1):
            moved = False
            for i, ff in enumerate(reg.stages):
                di = d if i == 0 else states[i - 1]["q"]
                if states[i]["d"] == di:
                    continue
                states[i], ok = settle(ff, {"d": di, "clk": clk}, now, states[i])
                trace.unstable |= not ok
                moved = True
            if not moved:
                break
        trace.time_ns.append(t)
        trace.laser.append(laser_power if lit else 0.0)
        trace.clk.append(clk)
        trace.d_in.append(d)
        trace.q_out.append(states[-1]["q"])
    return trace
