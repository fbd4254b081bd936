"""Geometry of JICG cells.

All coordinates are micrometers. A layout is a flat list of transistor gate
sites plus opaque metal fillers; composite cells additionally record where
their sub-cells were placed so that site counts can be traced back to the
children.

Site ids follow ``<gate_id>/<channel><position><side>``, e.g. ``G2/N0a``;
the pair id drops the side suffix (``G2/N0``). Register layouts prefix every
id with the flip-flop name (``ff003/G2/N0a``).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

D_DR = 9.0
"""Center distance of the two transistors of a duplicated pair."""

SITE_SIZE = 1.0
ROW_PITCH = 1.5
"""Vertical pitch between the stacked pairs of one NAND gate."""

INVERTER_ROW_GAP = 2.5
"""Default vertical center distance of an inverter's NMOS and PMOS rows."""

FF_WIDTH = 82.0
FF_HEIGHT = 20.0
FF_GATES = ("G1", "G2", "G3", "G4", "G5", "G6")
FF_GATE_INPUTS = {"G1": 3, "G2": 2, "G3": 2, "G4": 2, "G5": 2, "G6": 3}
FF_GATE_CENTERS = (7.0, 20.5, 34.0, 48.0, 61.5, 75.0)
"""Gate x-centers: evenly spread over 82 um, rounded onto the 0.5 um scan lattice."""

RESET_ROUTE_COUPLING = 0.35 / 0.45
"""NMOS coupling of the G1/G5 pull-downs relative to the other gates.

Bit-reset needs roughly 45 % power where bit-set needs 35 %. The model
carries this as a lower photocurrent coupling of the two gates that realise
bit-reset; see ``DEFAULT_NMOS_COUPLING``.
"""

DEFAULT_NMOS_COUPLING = {"G1": RESET_ROUTE_COUPLING, "G5": RESET_ROUTE_COUPLING}

REGISTER_COLUMNS = 16

NMOS = "NMOS"
PMOS = "PMOS"


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate rectangle {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)

    def translate(self, dx: float, dy: float) -> "Rect":
        return Rect(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    def contains_rect(self, other: "Rect", tol: float = 1e-9) -> bool:
        return (other.x0 >= self.x0 - tol and other.y0 >= self.y0 - tol
                and other.x1 <= self.x1 + tol and other.y1 <= self.y1 + tol)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def intersects(self, other: "Rect") -> bool:
        """Closed-set intersection test (touching edges count)."""
        return not (other.x1 < self.x0 or other.x0 > self.x1
                    or other.y1 < self.y0 or other.y0 > self.y1)

    def overlaps_interior(self, other: "Rect") -> bool:
        return not (other.x1 <= self.x0 or other.x0 >= self.x1
                    or other.y1 <= self.y0 or other.y0 >= self.y1)

    def expand(self, margin: float) -> "Rect":
        return Rect(self.x0 - margin, self.y0 - margin, self.x1 + margin, self.y1 + margin)

    @staticmethod
    def bounding(rects: Iterable["Rect"]) -> "Rect":
        rects = list(rects)
        return Rect(min(r.x0 for r in rects), min(r.y0 for r in rects),
                    max(r.x1 for r in rects), max(r.y1 for r in rects))

    def to_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class TransistorSite:
    id: str
    gate_region: Rect
    channel: str
    pair_id: str
    gate_id: str
    coupling: float = 1.0

    def __post_init__(self):
        if self.channel not in (NMOS, PMOS):
            raise ValueError(f"unknown channel {self.channel!r}")
        if self.coupling < 0:
            raise ValueError("coupling must be non-negative")

    def translate(self, dx: float, dy: float) -> "TransistorSite":
        return replace(self, gate_region=self.gate_region.translate(dx, dy))

    def renamed(self, prefix: str) -> "TransistorSite":
        return replace(self, id=prefix + self.id, pair_id=prefix + self.pair_id,
                       gate_id=prefix + self.gate_id)


@dataclass(frozen=True)
class Placement:
    """Where a sub-cell landed inside a composite layout."""
    name: str
    cell: str
    offset: tuple[float, float]
    bounds: Rect
    site_ids: tuple[str, ...]


@dataclass(frozen=True)
class FillerSpec:
    filler_size: tuple[float, float] = (2.0, 2.0)
    gap: float = 1.2
    layer_label: str = "Metal3"

    def __post_init__(self):
        if self.gap <= 0 or min(self.filler_size) <= 0:
            raise ValueError("filler size and gap must be positive")


@dataclass(frozen=True)
class CellLayout:
    bounds: Rect
    sites: tuple[TransistorSite, ...]
    fillers: tuple[Rect, ...] = ()
    children: tuple[Placement, ...] = ()
    cell: str = "cell"
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {s.id: s for s in self.sites})
        if len(self._index) != len(self.sites):
            raise ValueError("duplicate site ids")
        for s in self.sites:
            if not self.bounds.contains_rect(s.gate_region):
                raise ValueError(f"site {s.id} lies outside the cell bounds")

    def site(self, site_id: str) -> TransistorSite:
        try:
            return self._index[site_id]
        except KeyError:
            raise KeyError(f"no site {site_id!r} in layout") from None

    def pairs(self) -> dict[str, tuple[TransistorSite, TransistorSite]]:
        grouped: dict[str, list[TransistorSite]] = {}
        for s in self.sites:
            grouped.setdefault(s.pair_id, []).append(s)
        return {pid: tuple(v) for pid, v in grouped.items()}

    def gate_regions(self) -> dict[str, Rect]:
        grouped: dict[str, list[Rect]] = {}
        for s in self.sites:
            grouped.setdefault(s.gate_id, []).append(s.gate_region)
        return {gid: Rect.bounding(rs) for gid, rs in grouped.items()}

    def translate(self, dx: float, dy: float) -> "CellLayout":
        return CellLayout(
            bounds=self.bounds.translate(dx, dy),
            sites=tuple(s.translate(dx, dy) for s in self.sites),
            fillers=tuple(f.translate(dx, dy) for f in self.fillers),
            children=tuple(replace(c, offset=(c.offset[0] + dx, c.offset[1] + dy),
                                   bounds=c.bounds.translate(dx, dy)) for c in self.children),
            cell=self.cell,
        )

    def with_fillers(self, fillers: Iterable[Rect]) -> "CellLayout":
        return replace(self, fillers=self.fillers + tuple(fillers))

    def occlusion_fraction(self, site_id: str, pitch: float = 0.1) -> float:
        """Fraction of the site's gate region hidden under fillers."""
        xs, ys = sample_grid(self.site(site_id).gate_region, pitch)
        return float(np.mean(occluded(self.fillers, xs, ys)))

    def validate(self) -> None:
        """Check the pair and overlap invariants, raising ``ValueError``."""
        for pid, members in self.pairs().items():
            if len(members) != 2:
                raise ValueError(f"pair {pid} has {len(members)} sites")
            a, b = members
            if a.channel != b.channel:
                raise ValueError(f"pair {pid} mixes channel types")
            if abs(pair_distance(a, b) - D_DR) > 1e-9:
                raise ValueError(f"pair {pid} is {pair_distance(a, b)} um apart")
        regions = sorted(((s.gate_region.x0, s.gate_region, s.id) for s in self.sites),
                         key=lambda t: t[0])
        for i, (_, r, sid) in enumerate(regions):
            for x0, other, oid in regions[i + 1:]:
                if x0 >= r.x1:
                    break
                if r.overlaps_interior(other):
                    raise ValueError(f"sites {sid} and {oid} overlap")


def pair_distance(a: TransistorSite, b: TransistorSite) -> float:
    (ax, ay), (bx, by) = a.gate_region.center, b.gate_region.center
    return math.hypot(ax - bx, ay - by)


def sample_grid(region: Rect, pitch: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint sample coordinates covering ``region`` at roughly ``pitch``."""
    nx = max(1, math.ceil(region.width / pitch - 1e-9))
    ny = max(1, math.ceil(region.height / pitch - 1e-9))
    xs = region.x0 + (np.arange(nx) + 0.5) * (region.width / nx)
    ys = region.y0 + (np.arange(ny) + 0.5) * (region.height / ny)
    gx, gy = np.meshgrid(xs, ys)
    return gx.ravel(), gy.ravel()


def occluded(fillers: Iterable[Rect], xs, ys) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    mask = np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
    for f in fillers:
        mask |= (xs >= f.x0) & (xs <= f.x1) & (ys >= f.y0) & (ys <= f.y1)
    return mask


def _square(x: float, y: float) -> Rect:
    return Rect(x, y, x + SITE_SIZE, y + SITE_SIZE)


def build_inverter_layout(origin=(0.0, 0.0), *, gate_id: str = "INV", position: int = 0,
                          row_gap: float = INVERTER_ROW_GAP, nmos_coupling: float = 1.0,
                          pmos_coupling: float = 1.0) -> CellLayout:
    """One JICG inverter: an NMOS pair on the lower row, a PMOS pair above it.

    ``row_gap`` is the vertical center distance between the two rows; NAND
    gates use it to nest their inverters inside each other.
    """
    if row_gap < SITE_SIZE:
        raise ValueError("row_gap too small, rows would overlap")
    ox, oy = origin
    sites = []
    for channel, dy, kappa in ((NMOS, 0.0, nmos_coupling), (PMOS, row_gap, pmos_coupling)):
        pair = f"{gate_id}/{channel[0]}{position}"
        for side, dx in (("a", 0.0), ("b", D_DR)):
            sites.append(TransistorSite(f"{pair}{side}", _square(ox + dx, oy + dy), channel,
                                        pair, gate_id, kappa))
    bounds = Rect(ox, oy, ox + D_DR + SITE_SIZE, oy + row_gap + SITE_SIZE)
    return CellLayout(bounds, tuple(sites), cell="inverter")


def nand_size(n_inputs: int) -> tuple[float, float]:
    height = 2 * (SITE_SIZE / 2 + ROW_PITCH * (n_inputs - 1)) + INVERTER_ROW_GAP
    return D_DR + SITE_SIZE, height


def build_nand_layout(n_inputs: int, origin=(0.0, 0.0), *, gate_id: str = "NAND",
                      nmos_coupling: float = 1.0) -> CellLayout:
    """NAND gate from ``n_inputs`` nested inverter columns.

    Input ``k`` owns pairs ``N<k>`` and ``P<k>``. Input 0 sits innermost, so
    its NMOS row is the top NMOS row and its PMOS row the bottom PMOS row.
    """
    if n_inputs not in (2, 3):
        raise ValueError(f"n_inputs must be 2 or 3, got {n_inputs}")
    ox, oy = origin
    width, height = nand_size(n_inputs)
    sites: list[TransistorSite] = []
    children = []
    for k in range(n_inputs):
        depth = n_inputs - 1 - k
        inv_origin = (ox, oy + ROW_PITCH * depth)
        inv = build_inverter_layout(inv_origin, gate_id=gate_id, position=k,
                                    row_gap=INVERTER_ROW_GAP + 2 * ROW_PITCH * k,
                                    nmos_coupling=nmos_coupling)
        sites.extend(inv.sites)
        children.append(Placement(f"{gate_id}.inv{k}", "inverter", inv_origin, inv.bounds,
                                  tuple(s.id for s in inv.sites)))
    return CellLayout(Rect(ox, oy, ox + width, oy + height), tuple(sites),
                      children=tuple(children), cell=f"nand{n_inputs}")


def build_flipflop_layout(origin=(0.0, 0.0), *, nmos_coupling: dict[str, float] | None = None
                          ) -> CellLayout:
    """82 x 20 um JICG D flip-flop: gates G1..G6 in a row, left to right.

    Each gate is vertically centered on the cell; NMOS rows lie in the lower
    half, PMOS rows in the upper half.
    """
    couplings = DEFAULT_NMOS_COUPLING if nmos_coupling is None else nmos_coupling
    ox, oy = origin
    sites: list[TransistorSite] = []
    children = []
    for i, gid in enumerate(FF_GATES):
        n = FF_GATE_INPUTS[gid]
        width, height = nand_size(n)
        gorigin = (ox + FF_GATE_CENTERS[i] - width / 2, oy + (FF_HEIGHT - height) / 2)
        gate = build_nand_layout(n, gorigin, gate_id=gid, nmos_coupling=couplings.get(gid, 1.0))
        sites.extend(gate.sites)
        children.append(Placement(gid, gate.cell, gorigin, gate.bounds,
                                  tuple(s.id for s in gate.sites)))
    return CellLayout(Rect(ox, oy, ox + FF_WIDTH, oy + FF_HEIGHT), tuple(sites),
                      children=tuple(children), cell="flipflop")


def ff_name(index: int) -> str:
    return f"ff{index:03d}"


def ff_offset(index: int) -> tuple[float, float]:
    row, col = divmod(index, REGISTER_COLUMNS)
    return col * FF_WIDTH, row * FF_HEIGHT


def build_register_layout(n_ff: int, *, nmos_coupling: dict[str, float] | None = None
                          ) -> CellLayout:
    """``n_ff`` flip-flops tiled in rows of 16, stage 0 at the lower left."""
    if n_ff < 1:
        raise ValueError("n_ff must be at least 1")
    ff = build_flipflop_layout(nmos_coupling=nmos_coupling)
    sites: list[TransistorSite] = []
    children = []
    for i in range(n_ff):
        dx, dy = ff_offset(i)
        prefix = ff_name(i) + "/"
        placed = tuple(s.translate(dx, dy).renamed(prefix) for s in ff.sites)
        sites.extend(placed)
        children.append(Placement(ff_name(i), "flipflop", (dx, dy), ff.bounds.translate(dx, dy),
                                  tuple(s.id for s in placed)))
    bounds = Rect.bounding(c.bounds for c in children)
    return CellLayout(bounds, tuple(sites), children=tuple(children), cell="register")


def generate_fillers(layout: CellLayout, spec: FillerSpec) -> CellLayout:
    """Cover ``layout.bounds`` with a centered regular grid of filler squares."""
    fw, fh = spec.filler_size
    b = layout.bounds

    def axis(lo, length, size):
        n = max(0, math.floor((length + spec.gap) / (size + spec.gap) + 1e-12))
        if n == 0:
            return []
        used = n * size + (n - 1) * spec.gap
        start = lo + (length - used) / 2
        return [start + k * (size + spec.gap) for k in range(n)]

    fillers = [Rect(x, y, x + fw, y + fh)
               for y in axis(b.y0, b.height, fh) for x in axis(b.x0, b.width, fw)]
    return layout.with_fillers(fillers)


def place_filler_over_site(layout: CellLayout, site_id: str) -> CellLayout:
    return layout.with_fillers([layout.site(site_id).gate_region])


def with_coupling_jitter(layout: CellLayout, seed: int, amplitude: float = 0.1) -> CellLayout:
    """Scale every site coupling by an independent factor in [1-a, 1+a]."""
    if amplitude == 0:
        return layout
    rng = np.random.default_rng(seed)
    factors = rng.uniform(1 - amplitude, 1 + amplitude, size=len(layout.sites))
    sites = tuple(replace(s, coupling=s.coupling * float(f)) for s, f in zip(layout.sites, factors))
    return replace(layout, sites=sites)


def ff_layout_of(layout: CellLayout, ff_index: int) -> Placement:
    name = ff_name(ff_index)
    for c in layout.children:
        if c.name == name:
            return c
    raise KeyError(f"layout has no flip-flop {name}")


# -- JSON -------------------------------------------------------------------

SCHEMA_VERSION = 1


def layout_to_dict(layout: CellLayout) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "units": "um",
        "cell": layout.cell,
        "bounds": layout.bounds.to_list(),
        "sites": [{"id": s.id, "gate_region": s.gate_region.to_list(), "channel": s.channel,
                   "pair_id": s.pair_id, "gate_id": s.gate_id, "coupling": s.coupling}
                  for s in layout.sites],
        "fillers": [f.to_list() for f in layout.fillers],
        "children": [{"name": c.name, "cell": c.cell, "offset": list(c.offset),
                      "bounds": c.bounds.to_list(), "site_ids": list(c.site_ids)}
                     for c in layout.children],
    }


def layout_from_dict(doc: dict) -> CellLayout:
    if doc.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported layout schema {doc.get('schema')!r}")
    return CellLayout(
        bounds=Rect(*doc["bounds"]),
        sites=tuple(TransistorSite(s["id"], Rect(*s["gate_region"]), s["channel"], s["pair_id"],
                                   s["gate_id"], s.get("coupling", 1.0)) for s in doc["sites"]),
        fillers=tuple(Rect(*f) for f in doc.get("fillers", [])),
        children=tuple(Placement(c["name"], c["cell"], tuple(c["offset"]), Rect(*c["bounds"]),
                                 tuple(c["site_ids"])) for c in doc.get("children", [])),
        cell=doc.get("cell", "cell"),
    )


def save_layout(layout: CellLayout, path) -> None:
    Path(path).write_text(json.dumps(layout_to_dict(layout), indent=1) + "\n")


def load_layout(path) -> CellLayout:
    return layout_from_dict(json.loads(Path(path).read_text()))
