"""Laser scanning, escalation and sensitivity-map aggregation.

A scan fires one shot per grid point over a target flip-flop. Opening a
transistor depends linearly on shot power, so the per-watt mean intensity of
every nearby site is computed once per (grid, objective, spot model) and
reused across the whole power/duration ladder. Points that force the same
set of pairs share one circuit simulation.
"""
from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .beam import DEFAULT_SOURCE, BeamSource, objective, unit_site_intensity, waist_from_d80
from .circuit import ForcedState, ShiftRegister, Trace, make_register, run_trace
from .fault import NEGLIGIBLE_RADII, FaultClassification, FaultThresholds, classify
from .layout import NMOS, CellLayout, Rect, build_register_layout, ff_layout_of, ff_name

NONE = FaultClassification.NONE
DEFAULT_N_FF = 8
DEFAULT_MARGIN = 2.0


@dataclass(frozen=True)
class ScanGrid:
    first_point: tuple[float, float]
    last_point: tuple[float, float]
    step: float = 0.5

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("scan step must be positive")
        if self.last_point[0] < self.first_point[0] or self.last_point[1] < self.first_point[1]:
            raise ValueError("last point must not precede the first point")

    @classmethod
    def around(cls, rect: Rect, margin: float = DEFAULT_MARGIN, step: float = 0.5) -> "ScanGrid":
        return cls((rect.x0 - margin, rect.y0 - margin), (rect.x1 + margin, rect.y1 + margin), step)

    def _axis(self, lo: float, hi: float) -> np.ndarray:
        n = int(math.floor((hi - lo) / self.step + 1e-9)) + 1
        return lo + self.step * np.arange(n)

    @property
    def xs(self) -> np.ndarray:
        return self._axis(self.first_point[0], self.last_point[0])

    @property
    def ys(self) -> np.ndarray:
        return self._axis(self.first_point[1], self.last_point[1])

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.ys), len(self.xs)

    def points(self) -> np.ndarray:
        """Row-major (y outer, x inner) array of shape ``(ny * nx, 2)``."""
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def rect(self) -> Rect:
        (x0, y0), (x1, y1) = self.first_point, self.last_point
        pad = self.step / 2
        return Rect(x0 - pad, y0 - pad, x1 + pad, y1 + pad)


@dataclass(frozen=True)
class ShotParams:
    objective: int = 20
    spot_model: str = "measured"
    power: float = 0.35
    duration_ns: float = 50.0
    clock_mhz: float = 2
    input_bit: int = 0
    fire_phase: float = 0.25
    """Fire time within the shot cycle as a fraction of the period (0.25: middle of clock-low)."""

    def __post_init__(self):
        objective(self.objective)
        if not 0 <= self.power <= 1:
            raise ValueError("power must lie in [0, 1]")
        if self.input_bit not in (0, 1):
            raise ValueError("input bit must be 0 or 1")
        if not 0 <= self.fire_phase < 1:
            raise ValueError("fire_phase must lie in [0, 1)")

    @property
    def waist(self) -> float:
        return waist_from_d80(objective(self.objective).d80(self.spot_model))


@dataclass(frozen=True)
class EscalationLadder:
    power_steps: tuple[float, ...] = tuple(round(0.10 + 0.05 * k, 2) for k in range(19))
    duration_steps: tuple[float, ...] = (50.0, 100.0, 500.0, 1000.0)
    objective_order: tuple[int, ...] = (5, 20, 50, 100)

    def __post_init__(self):
        for name in ("power_steps", "duration_steps"):
            steps = getattr(self, name)
            if not steps or any(b <= a for a, b in zip(steps, steps[1:])):
                raise ValueError(f"{name} must be non-empty and strictly ascending")
        if not self.objective_order:
            raise ValueError("objective_order must be non-empty")
        for m in self.objective_order:
            objective(m)


class AttackBench:
    """A register netlist, its layout, and the flip-flop under attack."""

    def __init__(self, n_ff: int = DEFAULT_N_FF, target_ff: int | None = None,
                 layout: CellLayout | None = None, register: ShiftRegister | None = None,
                 source: BeamSource = DEFAULT_SOURCE, allow_any_clock: bool = False):
        self.register = register if register is not None else make_register(n_ff)
        self.layout = (layout if layout is not None
                       else build_register_layout(self.register.n_stages))
        self.target_ff = self.register.n_stages - 1 if target_ff is None else target_ff
        if not 0 <= self.target_ff < self.register.n_stages:
            raise ValueError(f"target flip-flop {self.target_ff} out of range")
        self.source = source
        self.allow_any_clock = allow_any_clock
        self._intensity: dict = {}
        self._outcomes: dict = {}
        self._references: dict = {}

    @property
    def target_bounds(self) -> Rect:
        return ff_layout_of(self.layout, self.target_ff).bounds

    def default_grid(self, margin: float = DEFAULT_MARGIN, step: float = 0.5) -> ScanGrid:
        return ScanGrid.around(self.target_bounds, margin, step)

    def with_layout(self, layout: CellLayout) -> "AttackBench":
        return AttackBench(layout=layout, register=self.register, target_ff=self.target_ff,
                           source=self.source, allow_any_clock=self.allow_any_clock)

    def clear_cache(self) -> None:
        self._outcomes.clear()
        self._references.clear()

    # -- timing -----------------------------------------------------------

    @property
    def shot_cycle(self) -> int:
        return self.register.n_stages + 1

    def period(self, params: ShotParams) -> float:
        return 1000.0 / params.clock_mhz

    def window(self, params: ShotParams) -> tuple[float, float]:
        t0 = (self.shot_cycle + params.fire_phase) * self.period(params)
        return t0, t0 + params.duration_ns

    def n_cycles(self, params: ShotParams) -> int:
        t1 = self.window(params)[1]
        n = math.ceil(t1 / self.period(params)) + self.register.n_stages + 2
        return max(n, 2 * self.register.n_stages)

    # -- simulation -------------------------------------------------------

    def _sim_key(self, params: ShotParams):
        return (params.clock_mhz, params.input_bit, params.duration_ns, params.fire_phase)

    def traces(self, forced: ForcedState, params: ShotParams) -> tuple[Trace, Trace, Trace]:
        """Reference, attacked and post-reset traces for one forced state."""
        window = self.window(params)
        forced = replace(forced, active_window=window)
        key = self._sim_key(params)
        if key not in self._references:
            self._references[key] = self._run(ForcedState(active_window=window), params, 0.0)
        reference = self._references[key]
        observed = self._run(forced, params, params.power)
        # the model has no damage mechanism: a device reset restores the
        # initial state, so the post-reset run is the fault-free run
        return reference, observed, reference

    def _run(self, forced, params, laser):
        return run_trace(self.register, params.clock_mhz, params.input_bit, forced,
                         self.n_cycles(params), laser_power=laser,
                         allow_any_clock=self.allow_any_clock)

    def outcome(self, forced: ForcedState, params: ShotParams) -> FaultClassification:
        key = (self._sim_key(params), forced.open_nmos_pairs, forced.open_pmos_pairs)
        if key not in self._outcomes:
            if not forced:
                self._outcomes[key] = NONE
            else:
                self._outcomes[key] = classify(*self.traces(forced, params))
        return self._outcomes[key]

    # -- geometry ---------------------------------------------------------

    def site_intensity(self, grid: ScanGrid, params: ShotParams):
        """``(site_ids, per-watt mean intensity matrix)`` for sites within reach of the grid."""
        key = (grid, params.objective, params.spot_model)
        if key not in self._intensity:
            w = params.waist
            reach = grid.rect().expand(NEGLIGIBLE_RADII * w)
            ids = [s.id for s in self.layout.sites if reach.intersects(s.gate_region)]
            matrix = unit_site_intensity(self.layout, ids, grid.points(), w)
            self._intensity[key] = (ids, matrix)
        return self._intensity[key]

    def pair_strength(self, grid: ScanGrid, params: ShotParams, pmos_ratio: float):
        """Pair opening strength in NMOS-threshold units for each grid point.

        A pair is forced at threshold ``i`` iff its strength is ``>= i``. PMOS
        strengths are divided by ``pmos_ratio`` so one threshold covers both.
        """
        ids, matrix = self.site_intensity(grid, params)
        col = {sid: j for j, sid in enumerate(ids)}
        power = params.power * self.source.p_max
        pair_ids, strengths = [], []
        for pid, (a, b) in self.layout.pairs().items():
            if a.id not in col or b.id not in col:
                continue
            s = np.minimum(a.coupling * matrix[:, col[a.id]], b.coupling * matrix[:, col[b.id]])
            s = s * power
            if a.channel != NMOS:
                s = s / pmos_ratio
            pair_ids.append(pid)
            strengths.append(s)
        if not strengths:
            return [], np.zeros((len(matrix), 0))
        return pair_ids, np.column_stack(strengths)


@dataclass
class SensitivityMap:
    xs: np.ndarray
    ys: np.ndarray
    classes: np.ndarray
    """``(ny, nx)`` array of classification strings."""
    metadata: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return self.classes.size == 0

    @property
    def step(self) -> float:
        if len(self.xs) > 1:
            return float(self.xs[1] - self.xs[0])
        return float(self.metadata.get("step", 0.5))

    def counts(self) -> dict[str, int]:
        return dict(sorted(Counter(self.classes.ravel().tolist()).items()))

    def faults(self) -> dict[str, int]:
        return {k: v for k, v in self.counts().items() if k != NONE.value}

    def has_fault(self) -> bool:
        return bool(self.faults())

    def dominant(self) -> str | None:
        f = self.faults()
        return max(sorted(f), key=f.get) if f else None

    def cells(self, classification: str | None = None):
        """Yield ``(x, y, classification)`` row by row."""
        for iy, y in enumerate(self.ys):
            for ix, x in enumerate(self.xs):
                c = self.classes[iy, ix]
                if classification is None or c == classification:
                    yield float(x), float(y), str(c)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("x_um,y_um,classification\n")
            for x, y, c in self.cells():
                fh.write(f"{x:.3f},{y:.3f},{c}\n")

    def to_ppm(self, path) -> None:
        write_ppm(self, path)


def empty_map(metadata: dict) -> SensitivityMap:
    return SensitivityMap(np.zeros(0), np.zeros(0), np.zeros((0, 0), dtype=object), metadata)


def scan(bench: AttackBench, grid: ScanGrid, params: ShotParams, thresholds: FaultThresholds,
         jobs: int = 1) -> SensitivityMap:
    """Fire one shot per grid point and classify what the register output shows."""
    metadata = {"objective": params.objective, "spot_model": params.spot_model,
                "power": params.power, "duration_ns": params.duration_ns,
                "clock_mhz": params.clock_mhz, "input_bit": params.input_bit,
                "fire_phase": params.fire_phase, "target_ff": bench.target_ff,
                "step": grid.step, "i_crit_nmos": thresholds.i_crit_nmos,
                "i_crit_pmos": thresholds.i_crit_pmos}
    if not grid.rect().intersects(bench.layout.bounds):
        warnings.warn("scan grid lies outside the layout; returning an empty map")
        return empty_map({**metadata, "warning": "grid outside layout"})
    ny, nx = grid.shape
    if params.power == 0:
        return SensitivityMap(grid.xs, grid.ys, np.full((ny, nx), NONE.value, dtype=object),
                              metadata)
    ratio = thresholds.i_crit_pmos / thresholds.i_crit_nmos
    pair_ids, strength = bench.pair_strength(grid, params, ratio)
    forced_mask = strength >= thresholds.i_crit_nmos
    rows, inverse = _distinct_rows(forced_mask)
    pairs = bench.layout.pairs()
    states = []
    for row in rows:
        chosen = [pair_ids[j] for j in np.flatnonzero(row)]
        nmos = frozenset(p for p in chosen if pairs[p][0].channel == NMOS)
        states.append(ForcedState(nmos, frozenset(chosen) - nmos, bench.window(params)))
    labels = _outcomes(bench, states, params, jobs)
    classes = np.array([labels[k].value for k in inverse], dtype=object).reshape(ny, nx)
    return SensitivityMap(grid.xs, grid.ys, classes, metadata)


def _distinct_rows(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Like ``np.unique(mask, axis=0, return_inverse=True)``, tuned for mostly-empty rows."""
    inverse = np.zeros(len(mask), dtype=np.intp)
    hit = np.flatnonzero(mask.any(axis=1))
    rows = [np.zeros(mask.shape[1], dtype=bool)]
    if hit.size:
        packed = np.ascontiguousarray(np.packbits(mask[hit], axis=1))
        keys = packed.view(np.dtype((np.void, packed.shape[1]))).ravel()
        _, first, inv = np.unique(keys, return_index=True, return_inverse=True)
        rows.extend(mask[hit[first]])
        inverse[hit] = np.asarray(inv).ravel() + 1
    return np.array(rows), inverse


def _outcomes(bench, states, params, jobs):
    if jobs <= 1 or len(states) < 2:
        return [bench.outcome(s, params) for s in states]
    todo = [s for s in states if s]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        results = pool.map(_outcome_job, [(bench.register, bench.allow_any_clock, bench.target_ff,
                                           s, params) for s in todo])
        done = dict(zip(todo, results))
    return [done.get(s, NONE) for s in states]


def _outcome_job(args):
    register, allow, target, forced, params = args
    worker = AttackBench(register=register, target_ff=target, allow_any_clock=allow)
    return worker.outcome(forced, params)


# -- escalation ---------------------------------------------------------------


@dataclass
class ObjectiveOutcome:
    objective: int
    success: bool
    classification: str | None = None
    onset_power: float | None = None
    onset_duration: float | None = None
    repeat_confirmed: bool | None = None
    max_power: float | None = None
    max_duration: float | None = None
    max_classification: str | None = None
    trail: list[dict] = field(default_factory=list)
    success_map: SensitivityMap | None = field(default=None, repr=False)
    max_map: SensitivityMap | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("success_map", "max_map")}
        if self.success_map is not None:
            d["success_map_counts"] = self.success_map.counts()
        if self.max_map is not None:
            d["max_map_counts"] = self.max_map.counts()
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ObjectiveOutcome":
        names = {f.name for f in fields(cls)} - {"success_map", "max_map"}
        return cls(**{k: v for k, v in doc.items() if k in names})


@dataclass
class CampaignResult:
    input_bit: int
    outcomes: list[ObjectiveOutcome]
    base_params: ShotParams
    target_ff: int

    @property
    def first_success(self) -> int | None:
        for o in self.outcomes:
            if o.success:
                return o.objective
        return None

    def outcome_for(self, magnification: int) -> ObjectiveOutcome:
        for o in self.outcomes:
            if o.objective == magnification:
                return o
        raise KeyError(magnification)

    def to_dict(self) -> dict:
        return {"input_bit": self.input_bit, "target_ff": self.target_ff,
                "first_success": self.first_success, "base_params": asdict(self.base_params),
                "outcomes": [o.to_dict() for o in self.outcomes]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "CampaignResult":
        return cls(int(doc["input_bit"]), [ObjectiveOutcome.from_dict(o) for o in doc["outcomes"]],
                   ShotParams(**doc["base_params"]), int(doc["target_ff"]))


def escalate(bench: AttackBench, grid: ScanGrid, ladder: EscalationLadder,
             thresholds: FaultThresholds, base: ShotParams = ShotParams(),
             stop_at_first_success: bool = False, jobs: int = 1) -> CampaignResult:
    """Climb power, then pulse duration, for each objective in turn.

    On the first faulty scan of an objective the same shot is repeated and
    must reproduce the identical map. A final scan at maximum power and
    duration records the upper end of the working range.
    """
    outcomes = []
    for mag in ladder.objective_order:
        outcome = ObjectiveOutcome(mag, False)
        for duration in ladder.duration_steps:
            for power in ladder.power_steps:
                params = replace(base, objective=mag, power=power, duration_ns=duration)
                m = scan(bench, grid, params, thresholds, jobs)
                outcome.trail.append({"power": power, "duration_ns": duration,
                                      "faults": m.faults()})
                if not m.has_fault():
                    continue
                bench.clear_cache()
                again = scan(bench, grid, params, thresholds, jobs)
                outcome.success = True
                outcome.classification = m.dominant()
                outcome.onset_power, outcome.onset_duration = power, duration
                outcome.repeat_confirmed = bool(np.array_equal(again.classes, m.classes))
                outcome.success_map = m
                top = replace(params, power=ladder.power_steps[-1],
                              duration_ns=ladder.duration_steps[-1])
                top_map = scan(bench, grid, top, thresholds, jobs)
                outcome.max_power, outcome.max_duration = top.power, top.duration_ns
                outcome.max_classification = top_map.dominant()
                outcome.max_map = top_map
                break
            if outcome.success:
                break
        outcomes.append(outcome)
        if outcome.success and stop_at_first_success:
            break
    return CampaignResult(base.input_bit, outcomes, base, bench.target_ff)


# -- aggregation --------------------------------------------------------------


@dataclass
class SensitiveRegion:
    classification: str
    bbox: Rect
    centroid: tuple[float, float]
    gate_ids: list[str]
    n_points: int

    @property
    def gate_labels(self) -> list[str]:
        return sorted(g.rsplit("/", 1)[-1] for g in self.gate_ids)

    def to_dict(self) -> dict:
        return {"classification": self.classification, "bbox": self.bbox.to_list(),
                "centroid": list(self.centroid), "gate_ids": self.gate_ids,
                "n_points": self.n_points}


def sensitive_areas(smap: SensitivityMap, layout: CellLayout) -> list[SensitiveRegion]:
    """4-connected components of each fault class, with the gates they overlap."""
    if smap.empty:
        raise ValueError("sensitivity map is empty")
    half = smap.step / 2
    gates = layout.gate_regions()
    regions = []
    for cls in sorted(set(smap.classes.ravel().tolist()) - {NONE.value}):
        labels, n = ndimage.label(smap.classes == cls)
        for k in range(1, n + 1):
            iy, ix = np.nonzero(labels == k)
            px, py = smap.xs[ix], smap.ys[iy]
            bbox = Rect(px.min() - half, py.min() - half, px.max() + half, py.max() + half)
            hit = sorted(g for g, r in gates.items() if r.intersects(bbox))
            regions.append(SensitiveRegion(cls, bbox, (float(px.mean()), float(py.mean())),
                                           hit, int(len(ix))))
    return regions


@dataclass
class ReportRow:
    register_input: str
    power_percent: str
    pulse_ns: str
    objective: str
    outcome: str


@dataclass
class Report:
    rows: list[ReportRow]

    def to_dict(self) -> dict:
        return {"columns": ["register_input", "power_percent", "pulse_ns", "objective", "outcome"],
                "rows": [asdict(r) for r in self.rows]}

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("register_input,power_percent,pulse_ns,objective,outcome\n")
            for r in self.rows:
                fh.write(f"{r.register_input},{r.power_percent},{r.pulse_ns},{r.objective},"
                         f"{r.outcome}\n")

    def to_text(self) -> str:
        head = ("Register input", "Power, %", "Pulse, ns", "Objective", "Successful attack")
        body = [(r.register_input, r.power_percent, r.pulse_ns, r.objective, r.outcome)
                for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        return "\n".join(fmt.format(*row) for row in (head, *body)) + "\n"


def _pct(p: float) -> str:
    return f"{round(p * 100):d}"


def _span(lo, hi, fmt=str) -> str:
    return fmt(lo) if lo == hi else f"{fmt(lo)}-{fmt(hi)}"


def summarize(results: list[CampaignResult]) -> Report:
    """Table with one row per objective, split by input where outcomes differ."""
    if not results:
        return Report([])
    by_obj: dict[int, list[tuple[int, ObjectiveOutcome]]] = {}
    for res in results:
        for o in res.outcomes:
            by_obj.setdefault(o.objective, []).append((res.input_bit, o))
    rows = []
    for mag in sorted(by_obj, reverse=True):
        entries = sorted(by_obj[mag], key=lambda e: e[0])
        failed = [(b, o) for b, o in entries if not o.success]
        if failed:
            bits = " or ".join(f"'{b}'" for b in sorted({b for b, _ in failed}))
            powers = [t["power"] for _, o in failed for t in o.trail]
            durs = [t["duration_ns"] for _, o in failed for t in o.trail]
            rows.append(ReportRow(bits, _span(min(powers), max(powers), _pct),
                                  _span(min(durs), max(durs), lambda d: f"{d:g}"),
                                  f"{mag}x", "no"))
        for b, o in entries:
            if not o.success:
                continue
            hi_p = o.max_power if o.max_classification == o.classification else o.onset_power
            hi_d = o.max_duration if o.max_classification == o.classification else o.onset_duration
            rows.append(ReportRow(f"'{b}'", _span(o.onset_power, hi_p, _pct),
                                  _span(o.onset_duration, hi_d, lambda d: f"{d:g}"),
                                  f"{mag}x", o.classification.replace("_", "-")))
    return Report(rows)


# -- exports ------------------------------------------------------------------

PPM_COLORS = {
    "none": (255, 255, 255),
    "bit_set": (220, 30, 30),
    "bit_reset": (240, 200, 0),
    "stuck_at": (40, 80, 220),
    "permanent": (0, 0, 0),
    "unstable": (200, 0, 200),
}


def write_ppm(smap: SensitivityMap, path) -> None:
    """Plain (P3) pixmap, one pixel per grid cell, highest y in the first row."""
    ny, nx = smap.classes.shape
    lines = ["P3", "# jicgsim sensitivity map", f"{nx} {ny}", "255"]
    for iy in range(ny - 1, -1, -1):
        lines.append(" ".join("%d %d %d" % PPM_COLORS[c] for c in smap.classes[iy]))
    Path(path).write_text("\n".join(lines) + "\n")


def map_to_dict(smap: SensitivityMap) -> dict:
    return {"metadata": smap.metadata, "xs": smap.xs.tolist(), "ys": smap.ys.tolist(),
            "classes": smap.classes.tolist()}


def map_from_dict(doc: dict) -> SensitivityMap:
    classes = np.array(doc["classes"], dtype=object)
    if classes.ndim != 2:
        classes = classes.reshape(len(doc["ys"]), len(doc["xs"]))
    return SensitivityMap(np.array(doc["xs"], dtype=float), np.array(doc["ys"], dtype=float),
                          classes, doc.get("metadata", {}))


def target_gate_regions(bench: AttackBench) -> dict[str, Rect]:
    prefix = ff_name(bench.target_ff) + "/"
    return {g[len(prefix):]: r for g, r in bench.layout.gate_regions().items()
            if g.startswith(prefix)}
