"""Laser fault-injection simulator for radiation-hardened JICG flip-flops and shift registers."""
from .beam import BeamShot, BeamSource, energy_within, intensity_at, objective, waist_from_d80
from .calibration import Calibration, CalibrationError, calibrate
from .campaign import (AttackBench, EscalationLadder, ScanGrid, SensitivityMap, ShotParams,
                       escalate, scan, sensitive_areas, summarize)
from .circuit import ForcedState, eval_nand, make_register, run_trace
from .fault import FaultClassification, FaultThresholds, classify, effective_pairs, opened_sites
from .layout import (CellLayout, Rect, TransistorSite, build_flipflop_layout,
                     build_register_layout, load_layout, save_layout)

__version__ = "0.1.0"
