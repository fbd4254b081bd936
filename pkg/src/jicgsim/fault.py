"""From a laser shot to forced transistor pairs, and from traces to fault classes.

A transistor opens when the coupled mean intensity over its gate region
reaches the critical intensity of its channel type. Pulse duration does not
enter the opening condition; it only sets how long the pairs stay forced.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass

from .beam import BeamShot, mean_intensity_over
from .circuit import ForcedState, Trace
from .layout import NMOS, CellLayout

PMOS_TO_NMOS_RATIO = 2.0
"""i_crit_pmos / i_crit_nmos used when only the NMOS threshold is calibrated."""

NEGLIGIBLE_RADII = 6.0
"""Sites farther than this many waists from the beam axis are skipped."""


class FaultClassification(str, enum.Enum):
    NONE = "none"
    BIT_SET = "bit_set"
    BIT_RESET = "bit_reset"
    STUCK_AT = "stuck_at"
    PERMANENT = "permanent"
    UNSTABLE = "unstable"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class FaultThresholds:
    i_crit_nmos: float
    i_crit_pmos: float

    def __post_init__(self):
        if not 0 < self.i_crit_nmos < self.i_crit_pmos:
            raise ValueError("need 0 < i_crit_nmos < i_crit_pmos")

    @classmethod
    def from_nmos(cls, i_crit_nmos: float, ratio: float = PMOS_TO_NMOS_RATIO) -> "FaultThresholds":
        return cls(i_crit_nmos, ratio * i_crit_nmos)

    def for_channel(self, channel: str) -> float:
        return self.i_crit_nmos if channel == NMOS else self.i_crit_pmos

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "FaultThresholds":
        return cls(float(doc["i_crit_nmos"]), float(doc["i_crit_pmos"]))


def opened_sites(shot: BeamShot, layout: CellLayout, thresholds: FaultThresholds) -> frozenset:
    if shot.power_fraction == 0:
        return frozenset()
    cx, cy = shot.center
    reach = NEGLIGIBLE_RADII * shot.waist
    opened = set()
    for s in layout.sites:
        r = s.gate_region
        dx = max(r.x0 - cx, 0.0, cx - r.x1)
        dy = max(r.y0 - cy, 0.0, cy - r.y1)
        if dx * dx + dy * dy > reach * reach:
            continue
        if s.coupling * mean_intensity_over(shot, r, layout) >= thresholds.for_channel(s.channel):
            opened.add(s.id)
    return frozenset(opened)


def effective_pairs(opened, layout: CellLayout, window=(0.0, float("inf"))) -> ForcedState:
    """Pairs whose two transistors are both open; one open twin is blocked."""
    opened = set(opened)
    nmos, pmos = set(), set()
    for pid, members in layout.pairs().items():
        if all(m.id in opened for m in members):
            (nmos if members[0].channel == NMOS else pmos).add(pid)
    return ForcedState(frozenset(nmos), frozenset(pmos), tuple(window))


def shot_forced_state(shot: BeamShot, layout: CellLayout, thresholds: FaultThresholds) -> ForcedState:
    return effective_pairs(opened_sites(shot, layout, thresholds), layout, shot.window)


def classify(reference: Trace, observed: Trace, post_reset: Trace) -> FaultClassification:
    """Compare an attacked run with the fault-free run of the same stimulus.

    Transient deviations are labelled by direction: 0 -> 1 is bit-set,
    1 -> 0 bit-reset. A deviation still present at the end of the run is
    stuck-at if the post-reset run is correct, permanent otherwise.
    """
    for tr in (observed, post_reset):
        if (tr.time_ns != reference.time_ns or tr.clk != reference.clk
                or tr.d_in != reference.d_in):
            raise ValueError("traces do not share time axis and stimulus")
    if observed.unstable:
        return FaultClassification.UNSTABLE
    diffs = [i for i, (a, b) in enumerate(zip(reference.q_out, observed.q_out)) if a != b]
    if not diffs:
        return FaultClassification.NONE
    if diffs[-1] == len(reference) - 1:
        if post_reset.q_out != reference.q_out or post_reset.unstable:
            return FaultClassification.PERMANENT
        return FaultClassification.STUCK_AT
    first = diffs[0]
    if observed.q_out[first] == 1:
        return FaultClassification.BIT_SET
    return FaultClassification.BIT_RESET


def calibrate(bench, *args, **kwargs):
    """Fit ``FaultThresholds`` to the attack constraints; see :mod:`jicgsim.calibration`."""
    from .calibration import calibrate as _calibrate

    return _calibrate(bench, *args, **kwargs)
