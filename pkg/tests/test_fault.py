import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jicgsim.beam import BeamShot, mean_intensity_over, objective
from jicgsim.calibration import DEFAULT_CONSTRAINTS, CalibrationError, calibrate
from jicgsim.campaign import ShotParams
from jicgsim.circuit import Trace
from jicgsim.fault import (FaultClassification as C, FaultThresholds, classify, effective_pairs,
                           opened_sites, shot_forced_state)
from jicgsim.layout import NMOS, ff_name, place_filler_over_site


def trace(q, d=0, unstable=False):
    n = len(q)
    return Trace(list(range(n)), [0.0] * n, [k % 2 for k in range(n)], [d] * n, list(q),
                 unstable, 2.0)


def test_classify_cases():
    ref0 = trace([0] * 8)
    assert classify(ref0, trace([0] * 8), ref0) is C.NONE
    assert classify(ref0, trace([0, 0, 0, 1, 1, 0, 0, 0]), ref0) is C.BIT_SET
    ref1 = trace([1] * 8, d=1)
    assert classify(ref1, trace([1, 1, 0, 0, 1, 1, 1, 1], d=1), ref1) is C.BIT_RESET
    stuck = trace([0, 0, 1, 1, 1, 1, 1, 1])
    assert classify(ref0, stuck, ref0) is C.STUCK_AT
    assert classify(ref0, stuck, stuck) is C.PERMANENT
    assert classify(ref0, trace([0] * 8, unstable=True), ref0) is C.UNSTABLE
    with pytest.raises(ValueError):
        classify(ref0, trace([0] * 8, d=1), ref0)
    with pytest.raises(ValueError):
        classify(ref0, trace([0] * 7), ref0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=4, max_size=30))
def test_classify_pure_and_none_on_identity(q):
    t = trace(q)
    assert classify(t, trace(q), t) is C.NONE
    other = trace([1 - v for v in q])
    assert classify(t, other, t) == classify(t, other, t)


def test_thresholds_validation():
    with pytest.raises(ValueError):
        FaultThresholds(2e-3, 1e-3)
    with pytest.raises(ValueError):
        FaultThresholds(0, 1e-3)
    th = FaultThresholds.from_nmos(1e-3)
    assert th.i_crit_pmos == 2e-3
    assert FaultThresholds.from_dict({"i_crit_nmos": 1e-3, "i_crit_pmos": 2e-3}) == th


def test_effective_pairs(bench):
    lay = bench.layout
    a, b = lay.pairs()["ff007/G2/N0"]
    assert effective_pairs({a.id, b.id}, lay).open_nmos_pairs == {"ff007/G2/N0"}
    assert not effective_pairs({a.id}, lay)
    assert not effective_pairs(set(), lay)
    p, q = lay.pairs()["ff007/G2/P0"]
    fs = effective_pairs({p.id, q.id, a.id}, lay, (5.0, 7.0))
    assert fs.open_pmos_pairs == {"ff007/G2/P0"} and not fs.open_nmos_pairs
    assert fs.active_window == (5.0, 7.0)


def _mid(lay, *pids):
    cs = [s.gate_region.center for pid in pids for s in lay.pairs()[pid]]
    return tuple(np.mean(cs, axis=0))


def _shot(center, mag=20, power=0.35, spot="measured"):
    return BeamShot(objective(mag), center, power, spot_model=spot)


def test_opened_sites_examples(bench, thresholds):
    lay = bench.layout
    g6 = lay.pairs()["ff007/G6/N0"]
    opened = opened_sites(_shot(_mid(lay, "ff007/G6/N0")), lay, thresholds)
    assert {s.id for s in g6} <= opened
    g2 = ("ff007/G2/N0", "ff007/G2/N1")
    opened = opened_sites(_shot(_mid(lay, *g2)), lay, thresholds)
    assert {s.id for p in g2 for s in lay.pairs()[p]} <= opened
    for mag in (50, 100):
        for pid in ("ff007/G6/N0", "ff007/G2/N0"):
            opened = opened_sites(_shot(_mid(lay, pid), mag, 1.0), lay, thresholds)
            assert len(opened & {s.id for s in lay.pairs()[pid]}) <= 1
    assert opened_sites(_shot((600.0, 10.0), power=0.0), lay, thresholds) == frozenset()


def test_duration_does_not_open_more(bench, thresholds):
    lay = bench.layout
    c = _mid(lay, "ff007/G6/N0")
    short = BeamShot(objective(20), c, 0.3, duration=50)
    long = BeamShot(objective(20), c, 0.3, duration=1000)
    assert opened_sites(short, lay, thresholds) == opened_sites(long, lay, thresholds)
    assert shot_forced_state(long, lay, thresholds).active_window == (0.0, 1000.0)


def _params(bit=0, mag=20, power=0.35):
    return ShotParams(objective=mag, power=power, input_bit=bit)


def _outcome(bench, thresholds, center, params):
    shot = BeamShot(objective(params.objective), center, params.power,
                    spot_model=params.spot_model)
    return bench.outcome(shot_forced_state(shot, bench.layout, thresholds), params)


centers = st.tuples(st.floats(574.0, 656.0), st.floats(0.0, 20.0))


@settings(max_examples=40, deadline=None)
@given(centers, st.floats(0.3, 1.0), st.floats(0.3, 1.0), st.integers(0, 1))
def test_monotone_in_power(bench, thresholds, c, p1, p2, bit):
    lo, hi = sorted((p1, p2))
    f_lo = shot_forced_state(_shot(c, power=lo), bench.layout, thresholds)
    f_hi = shot_forced_state(_shot(c, power=hi), bench.layout, thresholds)
    assert f_lo.open_nmos_pairs <= f_hi.open_nmos_pairs
    assert f_lo.open_pmos_pairs <= f_hi.open_pmos_pairs
    if _outcome(bench, thresholds, c, _params(bit, power=lo)) is not C.NONE:
        assert _outcome(bench, thresholds, c, _params(bit, power=hi)) is not C.NONE


@settings(max_examples=40, deadline=None)
@given(centers, st.sampled_from([50, 100]), st.integers(0, 1))
def test_small_spots_blocked(bench, thresholds, c, mag, bit):
    shot = _shot(c, mag, 1.0)
    assert not shot_forced_state(shot, bench.layout, thresholds)
    assert _outcome(bench, thresholds, c, _params(bit, mag, 1.0)) is C.NONE


@settings(max_examples=30, deadline=None)
@given(centers, st.floats(0.3, 1.0), st.integers(0, 1))
def test_no_damage_classes(bench, thresholds, c, p, bit):
    assert _outcome(bench, thresholds, c, _params(bit, power=p)) in (C.NONE, C.BIT_SET,
                                                                    C.BIT_RESET)


def test_occlusion_blocks_at_any_power(bench, thresholds):
    lay = bench.layout
    for g in ("G2", "G6"):
        for pid, (a, _) in lay.pairs().items():
            if pid.startswith(f"ff007/{g}/N"):
                lay = place_filler_over_site(lay, a.id)
    c = _mid(lay, "ff007/G2/N0", "ff007/G2/N1")
    for p in (0.35, 0.6, 1.0):
        forced = shot_forced_state(_shot(c, power=p), lay, thresholds)
        assert not any(x.startswith(("ff007/G2/N", "ff007/G6/N")) for x in forced.open_nmos_pairs)


# -- calibration ----------------------------------------------------------------

def _dense_max(lay, pids, mag, power, step=0.25, reach=4.0):
    """Best route strength over a dense grid of centers around the pairs' midpoint."""
    mx, my = _mid(lay, *pids)
    best = 0.0
    for dx, dy in itertools.product(np.arange(-reach, reach + 1e-9, step), repeat=2):
        shot = BeamShot(objective(mag), (mx + dx, my + dy), power)
        s = min(min(t.coupling * mean_intensity_over(shot, t.gate_region, lay)
                    for t in lay.pairs()[pid]) for pid in pids)
        best = max(best, s)
    return best


def test_calibration_between_dense_bounds(bench, calibration):
    lay = bench.layout
    i = calibration.thresholds.i_crit_nmos
    lo, hi = calibration.interval
    assert lo < i <= hi
    # no NMOS pair of the target flip-flop reachable with 5x at full power
    nmos = [p for p, m in lay.pairs().items()
            if p.startswith(ff_name(bench.target_ff)) and m[0].channel == NMOS]
    five = max(_dense_max(lay, [p], 5, 1.0, step=1.0, reach=6.0) for p in nmos)
    assert five < i
    # bit-set routes at 35 %: G6 needs one pair, G2 two
    set_route = max(_dense_max(lay, ["ff007/G6/N0"], 20, 0.35),
                    _dense_max(lay, ["ff007/G2/N0", "ff007/G2/N1"], 20, 0.35))
    assert set_route >= i
    # nothing at 30 %
    for route in (["ff007/G6/N0"], ["ff007/G2/N0", "ff007/G2/N1"], ["ff007/G5/N0"],
                  ["ff007/G1/N0", "ff007/G1/N1"]):
        assert _dense_max(lay, route, 20, 0.30) < i
    assert all(m > 0 for m in calibration.margins.values())


def test_calibration_report_json(calibration):
    import json
    doc = json.loads(calibration.to_json())
    assert set(doc["margins"]) == {c.name for c in DEFAULT_CONSTRAINTS}
    assert doc["feasible_interval"]["lower_exclusive"] < doc["thresholds"]["i_crit_nmos"]


def test_calibration_datasheet_fails_on_c1(bench):
    with pytest.raises(CalibrationError) as err:
        calibrate(bench, spot_model="datasheet")
    assert err.value.constraint == "C1"


def test_calibration_needs_constraints(bench):
    with pytest.raises(ValueError):
        calibrate(bench, constraints=[])


def test_fault_module_reexports_calibrate(bench, calibration):
    from jicgsim import fault
    got = fault.calibrate(bench, constraints=DEFAULT_CONSTRAINTS[:1])
    assert got.thresholds.i_crit_nmos > 0
