"""Fit the NMOS critical intensity to the observed attack outcomes.

Every constraint bounds ``i_crit_nmos``: a fault that must be achievable
gives an upper bound (the largest threshold at which some grid point still
produces it), a fault or pair opening that must not happen gives an
exclusive lower bound. The returned threshold is the midpoint of the
feasible interval, re-verified by scanning.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .campaign import AttackBench, ScanGrid, ShotParams, scan
from .fault import PMOS_TO_NMOS_RATIO, FaultClassification, FaultThresholds

ACHIEVE = "achieve"
NO_FAULT = "no_fault"
NO_PAIR = "no_pair"

LINEAR_PROBES = 64


@dataclass(frozen=True)
class Constraint:
    name: str
    kind: str
    objective: int
    power: float
    input_bits: tuple[int, ...] = (0, 1)
    classification: str | None = None
    description: str = ""

    def __post_init__(self):
        if self.kind not in (ACHIEVE, NO_FAULT, NO_PAIR):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == ACHIEVE and self.classification is None:
            raise ValueError("an achieve constraint needs a classification")


DEFAULT_CONSTRAINTS = (
    Constraint("C1", ACHIEVE, 20, 0.35, (0,), FaultClassification.BIT_SET.value,
               "20x, 35 %: bit-set achievable"),
    Constraint("C2", ACHIEVE, 20, 0.45, (1,), FaultClassification.BIT_RESET.value,
               "20x, 45 %: bit-reset achievable"),
    Constraint("C3", NO_PAIR, 5, 1.0, description="5x, 100 %: no effective pair"),
    Constraint("C4a", NO_PAIR, 50, 1.0, description="50x, 100 %: no effective pair"),
    Constraint("C4b", NO_PAIR, 100, 1.0, description="100x, 100 %: no effective pair"),
    Constraint("C5", NO_FAULT, 20, 0.30, description="20x, 30 %: no fault"),
)


class CalibrationError(RuntimeError):
    def __init__(self, constraint: str, message: str):
        super().__init__(f"{constraint}: {message}")
        self.constraint = constraint


@dataclass
class Calibration:
    thresholds: FaultThresholds
    interval: tuple[float, float]
    """Feasible ``(lower, upper]`` range of ``i_crit_nmos``."""
    bounds: dict[str, float]
    margins: dict[str, float]
    spot_model: str
    constraints: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"thresholds": asdict(self.thresholds),
                "feasible_interval": {"lower_exclusive": self.interval[0],
                                      "upper_inclusive": self.interval[1]},
                "bounds": self.bounds, "margins": self.margins,
                "spot_model": self.spot_model, "constraints": self.constraints}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _params(c: Constraint, bit: int, base: ShotParams, spot_model: str) -> ShotParams:
    return replace(base, objective=c.objective, power=c.power, input_bit=bit,
                   spot_model=spot_model)


def _largest_passing(values: np.ndarray, ok) -> float:
    """Largest value in ascending ``values`` for which ``ok`` holds, else 0.

    The top values are probed one by one; below that ``ok`` is taken to be
    monotone (true for small thresholds) and bisected.
    """
    hi = len(values) - 1
    for _ in range(min(LINEAR_PROBES, len(values))):
        if ok(values[hi]):
            return float(values[hi])
        hi -= 1
    if hi < 0 or not ok(values[0]):
        return 0.0
    lo = 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(values[mid]):
            lo = mid
        else:
            hi = mid
    return float(values[lo])


def _faults(bench, grid, params, i, ratio):
    return scan(bench, grid, params, FaultThresholds.from_nmos(i, ratio)).faults()


def _bound(bench, grid, c: Constraint, base, spot_model, ratio) -> float:
    best = 0.0
    for bit in c.input_bits:
        params = _params(c, bit, base, spot_model)
        _, strength = bench.pair_strength(grid, params, ratio)
        if c.kind == NO_PAIR:
            best = max(best, float(strength.max(initial=0.0)))
            continue
        values = np.unique(strength[strength > 0])
        if c.kind == ACHIEVE:
            ok = lambda v: c.classification in _faults(bench, grid, params, v, ratio)
        else:
            ok = lambda v: bool(_faults(bench, grid, params, v, ratio))
        # a value at or below the current best cannot raise it
        best = max(best, _largest_passing(values[values > best], ok) if values.size else 0.0)
    return best


def calibrate(bench: AttackBench, constraints=DEFAULT_CONSTRAINTS, *, spot_model: str = "measured",
              grid: ScanGrid | None = None, base: ShotParams = ShotParams(),
              pmos_ratio: float = PMOS_TO_NMOS_RATIO) -> Calibration:
    constraints = tuple(constraints)
    if not constraints:
        raise ValueError("calibration needs at least one constraint")
    grid = grid or bench.default_grid()
    lower = [c for c in constraints if c.kind != ACHIEVE]
    upper = [c for c in constraints if c.kind == ACHIEVE]

    bounds: dict[str, float] = {}
    for c in lower:
        bounds[c.name] = _bound(bench, grid, c, base, spot_model, pmos_ratio)
    lo = max((bounds[c.name] for c in lower), default=0.0)
    binding = max(lower, key=lambda c: bounds[c.name]).name if lower else None

    for c in upper:
        # cheap screen: no pair strength above ``lo`` means the fault is unreachable
        ceiling = max(float(bench.pair_strength(grid, _params(c, b, base, spot_model),
                                                pmos_ratio)[1].max(initial=0.0))
                      for b in c.input_bits)
        if ceiling <= lo:
            bounds[c.name] = ceiling
            raise CalibrationError(c.name, f"{c.description or c.name} unreachable: the strongest "
                                   f"pair reaches {ceiling:.4g} W/um^2, {binding} requires "
                                   f"i_crit_nmos > {lo:.4g}")
        bounds[c.name] = _bound(bench, grid, c, base, spot_model, pmos_ratio)
    hi = min((bounds[c.name] for c in upper), default=None)
    if hi is None:
        hi = 2 * lo if lo > 0 else 1.0
    if hi <= lo:
        worst = min(upper, key=lambda c: bounds[c.name])
        raise CalibrationError(worst.name, f"{worst.description or worst.name} needs "
                               f"i_crit_nmos <= {hi:.4g} but {binding} needs > {lo:.4g}")

    i_crit = (lo + hi) / 2
    thresholds = FaultThresholds.from_nmos(i_crit, pmos_ratio)
    margins = {}
    report = []
    for c in constraints:
        margin = (bounds[c.name] - i_crit) / i_crit if c.kind == ACHIEVE else \
            (i_crit - bounds[c.name]) / i_crit
        margins[c.name] = margin
        _verify(bench, grid, c, base, spot_model, thresholds)
        report.append({**asdict(c), "bound": bounds[c.name], "margin": margin})
    return Calibration(thresholds, (lo, hi), bounds, margins, spot_model, report)


def _verify(bench, grid, c, base, spot_model, thresholds):
    ratio = thresholds.i_crit_pmos / thresholds.i_crit_nmos
    for bit in c.input_bits:
        params = _params(c, bit, base, spot_model)
        if c.kind == NO_PAIR:
            _, strength = bench.pair_strength(grid, params, ratio)
            ok = not (strength >= thresholds.i_crit_nmos).any()
        else:
            faults = scan(bench, grid, params, thresholds).faults()
            ok = c.classification in faults if c.kind == ACHIEVE else not faults
        if not ok:
            raise CalibrationError(c.name, f"{c.description or c.name} violated at "
                                   f"i_crit_nmos = {thresholds.i_crit_nmos:.4g}")
