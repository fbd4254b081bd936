"""Gaussian laser spot model.

Spot sizes are quoted as 80 %-energy diameters (d80). For a TEM00 profile
the encircled energy inside radius r is ``1 - exp(-2 r^2 / w^2)``, hence
``w = (d80 / 2) / sqrt(ln(5) / 2)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .layout import CellLayout, Rect, occluded, sample_grid

SAMPLING_PITCH = 0.1
SPOT_MODELS = ("measured", "datasheet")
MIN_PULSE_NS = 2.0

_D80_FACTOR = math.sqrt(math.log(5.0) / 2.0)


@dataclass(frozen=True)
class Objective:
    magnification: int
    d80_datasheet: float
    d80_measured: float

    def d80(self, spot_model: str = "measured") -> float:
        if spot_model == "measured":
            return self.d80_measured
        if spot_model == "datasheet":
            return self.d80_datasheet
        raise ValueError(f"unknown spot model {spot_model!r}")


OBJECTIVES = {
    100: Objective(100, 1.00, 1.45),
    50: Objective(50, 1.50, 3.20),
    20: Objective(20, 4.00, 11.00),
    5: Objective(5, 15.00, 45.00),
}


def objective(magnification: int) -> Objective:
    try:
        return OBJECTIVES[int(magnification)]
    except (KeyError, ValueError):
        raise ValueError(f"no {magnification}x objective (have {sorted(OBJECTIVES)})") from None


def objectives_json() -> str:
    return json.dumps({"objectives": [asdict(o) for o in OBJECTIVES.values()]}, indent=1)


@dataclass(frozen=True)
class BeamSource:
    wavelength_nm: float = 808.0
    p_max: float = 0.848

    def __post_init__(self):
        if self.p_max <= 0:
            raise ValueError("p_max must be positive")


DEFAULT_SOURCE = BeamSource()


@dataclass(frozen=True)
class BeamShot:
    objective: Objective
    center: tuple[float, float]
    power_fraction: float
    duration: float = 50.0
    fire_time: float = 0.0
    spot_model: str = "measured"
    source: BeamSource = field(default=DEFAULT_SOURCE)

    def __post_init__(self):
        if not 0.0 <= self.power_fraction <= 1.0:
            raise ValueError("power_fraction must lie in [0, 1]")
        if self.duration < MIN_PULSE_NS:
            raise ValueError(f"pulse duration below the {MIN_PULSE_NS} ns source limit")
        self.objective.d80(self.spot_model)

    @property
    def d80(self) -> float:
        return self.objective.d80(self.spot_model)

    @property
    def waist(self) -> float:
        return waist_from_d80(self.d80)

    @property
    def power(self) -> float:
        return self.power_fraction * self.source.p_max

    @property
    def window(self) -> tuple[float, float]:
        return self.fire_time, self.fire_time + self.duration


def waist_from_d80(d80: float) -> float:
    if d80 <= 0:
        raise ValueError("d80 must be positive")
    return (d80 / 2.0) / _D80_FACTOR


def gaussian(power: float, waist: float, r2):
    """Intensity in W/um^2 at squared radius ``r2``."""
    return (2.0 * power / (math.pi * waist ** 2)) * np.exp(-2.0 * np.asarray(r2) / waist ** 2)


def peak_intensity(shot: BeamShot) -> float:
    return float(gaussian(shot.power, shot.waist, 0.0))


def intensity_at(shot: BeamShot, p, layout: CellLayout | None = None) -> float:
    x, y = p
    if layout is not None and occluded(layout.fillers, x, y):
        return 0.0
    cx, cy = shot.center
    return float(gaussian(shot.power, shot.waist, (x - cx) ** 2 + (y - cy) ** 2))


def energy_within(shot: BeamShot, radius: float) -> float:
    if radius < 0:
        raise ValueError("radius must be non-negative")
    return 1.0 - math.exp(-2.0 * radius ** 2 / shot.waist ** 2)


def mean_intensity_over(shot: BeamShot, region: Rect, layout: CellLayout | None = None,
                        pitch: float = SAMPLING_PITCH) -> float:
    xs, ys = sample_grid(region, pitch)
    cx, cy = shot.center
    values = gaussian(shot.power, shot.waist, (xs - cx) ** 2 + (ys - cy) ** 2)
    if layout is not None and layout.fillers:
        values = np.where(occluded(layout.fillers, xs, ys), 0.0, values)
    return float(values.mean())


def unit_site_intensity(layout: CellLayout, site_ids, centers: np.ndarray, waist: float,
                        pitch: float = SAMPLING_PITCH, chunk: int = 4096) -> np.ndarray:
    """Mean intensity per watt of every site for every beam center.

    Returns an array of shape ``(len(centers), len(site_ids))``. Multiplying
    by the shot power gives ``mean_intensity_over`` for each pair.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    out = np.empty((len(centers), len(site_ids)))
    for j, sid in enumerate(site_ids):
        xs, ys = sample_grid(layout.site(sid).gate_region, pitch)
        visible = ~occluded(layout.fillers, xs, ys)
        xs, ys = xs[visible], ys[visible]
        n_total = visible.size
        if xs.size == 0:
            out[:, j] = 0.0
            continue
        for lo in range(0, len(centers), chunk):
            c = centers[lo:lo + chunk]
            r2 = (xs[None, :] - c[:, :1]) ** 2 + (ys[None, :] - c[:, 1:]) ** 2
            out[lo:lo + chunk, j] = gaussian(1.0, waist, r2).sum(axis=1) / n_total
    return out
