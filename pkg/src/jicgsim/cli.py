"""``jicgsim`` command line: build layouts, calibrate, scan, escalate, trace, report.

Settings come from built-in defaults, then an optional JSON config file, then
flags. Exit status: 0 success, 2 usage error, 3 calibration failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import plotting
from .beam import SPOT_MODELS, BeamShot, BeamSource, objective
from .calibration import CalibrationError, calibrate
from .campaign import (AttackBench, CampaignResult, EscalationLadder, ScanGrid, ShotParams,
                       escalate, map_to_dict, scan, sensitive_areas, summarize,
                       target_gate_regions)
from .circuit import ForcedState, make_register, run_trace
from .fault import FaultThresholds, shot_forced_state
from .layout import (FillerSpec, build_flipflop_layout, build_inverter_layout, build_nand_layout,
                     build_register_layout, generate_fillers, load_layout, place_filler_over_site,
                     save_layout, with_coupling_jitter)

log = logging.getLogger("jicgsim")

EXIT_OK, EXIT_USAGE, EXIT_CALIBRATION, EXIT_IO = 0, 2, 3, 4
SEED_ENV = "JICGSIM_SEED"

DEFAULT_CONFIG = {
    "layout": {"builder": "register", "n_ff": 8, "path": None, "fillers": None,
               "filler_sites": []},
    "source": {"wavelength_nm": 808.0, "p_max": 0.848},
    "objective": 20,
    "spot_model": "measured",
    "thresholds": "calibrate",
    "pmos_ratio": 2.0,
    "clock_mhz": 2,
    "input_bit": 0,
    "input_bits": [0, 1],
    "power": 0.35,
    "duration_ns": 50.0,
    "fire_phase": 0.25,
    "target_ff": None,
    "shot_center": None,
    "grid": {"margin": 2.0, "step": 0.5, "first_point": None, "last_point": None},
    # pulse ladder tops out at 1000 ns: the "1 um" upper pulse bound is read as 1 us
    "ladder": {"power_steps": [round(0.10 + 0.05 * k, 2) for k in range(19)],
               "duration_steps": [50.0, 100.0, 500.0, 1000.0],
               "objective_order": [5, 20, 50, 100]},
    "kappa_seed": None,
    "kappa_amplitude": 0.1,
    "output_dir": "out",
}
BUILDERS = ("register", "flipflop", "nand2", "nand3", "inverter")
# fields that may legitimately be null
NULLABLE = {"target_ff", "shot_center", "kappa_seed", "layout.path", "layout.fillers",
            "grid.first_point", "grid.last_point"}


class UsageError(Exception):
    pass


# -- configuration ------------------------------------------------------------


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        name = where + key
        if key not in base:
            raise UsageError(f"unknown config field {name!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, name + ".")
        else:
            out[key] = value
    return out


def _set_dotted(cfg: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = cfg
    for p in parents:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config field {dotted!r}")
        node = node[p]
    if leaf not in node:
        raise UsageError(f"unknown config field {dotted!r}")
    node[leaf] = value


def _check_required(cfg: dict, where: str = "") -> None:
    for key, value in cfg.items():
        name = where + key
        if isinstance(value, dict):
            _check_required(value, name + ".")
        elif value is None and name not in NULLABLE:
            raise UsageError(f"config field {name!r} is missing")


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        cfg = _merge(cfg, doc)
    flags = {"objective": "objective", "spot_model": "spot_model", "power": "power",
             "duration": "duration_ns", "clock": "clock_mhz", "input_bit": "input_bit",
             "target_ff": "target_ff", "thresholds": "thresholds", "output_dir": "output_dir",
             "n_ff": "layout.n_ff", "builder": "layout.builder", "layout": "layout.path",
             "seed": "kappa_seed"}
    for attr, field_name in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            _set_dotted(cfg, field_name, value)
    if getattr(args, "shot", None) is not None:
        cfg["shot_center"] = list(args.shot)
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_dotted(cfg, key, value)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            cfg["kappa_seed"] = int(env)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    _check_required(cfg)
    lay = cfg["layout"]
    if lay["path"] is None and lay["builder"] not in BUILDERS:
        raise UsageError(f"unknown layout builder {lay['builder']!r}; choose from {BUILDERS}")
    if lay["path"] is not None and not Path(lay["path"]).is_file():
        raise OSError(f"layout file {lay['path']} does not exist")
    if cfg["spot_model"] not in SPOT_MODELS:
        raise UsageError(f"spot_model must be one of {SPOT_MODELS}")
    if cfg["input_bit"] not in (0, 1) or any(b not in (0, 1) for b in cfg["input_bits"]):
        raise UsageError("input bits must be 0 or 1")
    th = cfg["thresholds"]
    if isinstance(th, str) and th != "calibrate" and not Path(th).is_file():
        raise OSError(f"thresholds file {th} does not exist")
    if cfg["shot_center"] is not None and len(cfg["shot_center"]) != 2:
        raise UsageError("shot_center needs two coordinates")
    try:
        objective(cfg["objective"])
        ShotParams(**_shot_fields(cfg))
        BeamSource(**cfg["source"])
        _ladder(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _shot_fields(cfg: dict) -> dict:
    return {"objective": cfg["objective"], "spot_model": cfg["spot_model"],
            "power": cfg["power"], "duration_ns": cfg["duration_ns"],
            "clock_mhz": cfg["clock_mhz"], "input_bit": cfg["input_bit"],
            "fire_phase": cfg["fire_phase"]}


def _ladder(cfg: dict) -> EscalationLadder:
    return EscalationLadder(**{k: tuple(v) for k, v in cfg["ladder"].items() if v is not None})


# -- builders -----------------------------------------------------------------


def build_layout(cfg: dict):
    lay = cfg["layout"]
    if lay["path"] is not None:
        layout = load_layout(lay["path"])
    else:
        builder = lay["builder"]
        if builder == "register":
            layout = build_register_layout(int(lay["n_ff"]))
        elif builder == "flipflop":
            layout = build_flipflop_layout()
        elif builder == "inverter":
            layout = build_inverter_layout()
        else:
            layout = build_nand_layout(int(builder[-1]))
    if lay["fillers"] is not None:
        spec = lay["fillers"]
        layout = generate_fillers(layout, FillerSpec(
            tuple(spec.get("filler_size", (2.0, 2.0))), spec.get("gap", 1.2),
            spec.get("layer_label", "Metal3")))
    for sid in lay["filler_sites"]:
        try:
            layout = place_filler_over_site(layout, sid)
        except KeyError as exc:
            raise UsageError(f"filler site {sid!r} not in layout") from exc
    if cfg["kappa_seed"] is not None:
        layout = with_coupling_jitter(layout, int(cfg["kappa_seed"]), cfg["kappa_amplitude"])
    return layout


def build_bench(cfg: dict) -> AttackBench:
    layout = build_layout(cfg)
    n_ff = sum(1 for c in layout.children if c.cell == "flipflop")
    if layout.cell != "register" or n_ff == 0:
        raise UsageError("campaign commands need a register layout")
    try:
        return AttackBench(layout=layout, register=make_register(n_ff),
                           target_ff=cfg["target_ff"], source=BeamSource(**cfg["source"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def build_grid(cfg: dict, bench: AttackBench) -> ScanGrid:
    g = cfg["grid"]
    if g["first_point"] is not None and g["last_point"] is not None:
        return ScanGrid(tuple(g["first_point"]), tuple(g["last_point"]), g["step"])
    return bench.default_grid(g["margin"], g["step"])


def resolve_thresholds(cfg: dict, bench: AttackBench, grid: ScanGrid) -> FaultThresholds:
    th = cfg["thresholds"]
    if th == "calibrate":
        log.info("calibrating thresholds")
        return calibrate(bench, spot_model=cfg["spot_model"], grid=grid,
                         pmos_ratio=cfg["pmos_ratio"]).thresholds
    if isinstance(th, str):
        th = json.loads(Path(th).read_text())
    try:
        return FaultThresholds.from_dict(th.get("thresholds", th))
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise UsageError(f"bad thresholds: {exc}") from exc


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1) + "\n")


def _write_map(out: Path, stem: str, smap, bench: AttackBench) -> None:
    smap.to_csv(out / f"{stem}.csv")
    smap.to_ppm(out / f"{stem}.ppm")
    regions = sensitive_areas(smap, bench.layout) if smap.has_fault() else []
    _write_json(out / f"{stem}.json", {**map_to_dict(smap),
                                       "regions": [r.to_dict() for r in regions]})
    plotting.plot_sensitivity_map(smap, out / f"{stem}.png", target_gate_regions(bench))


# -- commands -----------------------------------------------------------------


def cmd_build_layout(cfg: dict) -> int:
    layout = build_layout(cfg)
    out = _outdir(cfg)
    save_layout(layout, out / "layout.json")
    plotting.plot_layout(layout, out / "layout.png")
    print(f"wrote {out / 'layout.json'}: {layout.cell}, {len(layout.sites)} sites, "
          f"{layout.bounds.width:g} x {layout.bounds.height:g} um")
    return EXIT_OK


def cmd_calibrate(cfg: dict) -> int:
    bench = build_bench(cfg)
    grid = build_grid(cfg, bench)
    result = calibrate(bench, spot_model=cfg["spot_model"], grid=grid,
                       pmos_ratio=cfg["pmos_ratio"])
    out = _outdir(cfg)
    (out / "thresholds.json").write_text(result.to_json() + "\n")
    th = result.thresholds
    print(f"i_crit_nmos = {th.i_crit_nmos:.6g} W/um^2, i_crit_pmos = {th.i_crit_pmos:.6g} W/um^2")
    print("margins: " + ", ".join(f"{k} {v:+.1%}" for k, v in result.margins.items()))
    return EXIT_OK


def cmd_scan(cfg: dict, jobs: int) -> int:
    bench = build_bench(cfg)
    grid = build_grid(cfg, bench)
    thresholds = resolve_thresholds(cfg, bench, grid)
    smap = scan(bench, grid, ShotParams(**_shot_fields(cfg)), thresholds, jobs)
    out = _outdir(cfg)
    _write_map(out, "map", smap, bench)
    print("map cells: " + ", ".join(f"{k} {v}" for k, v in sorted(smap.counts().items())))
    return EXIT_OK


def _campaign(cfg: dict, jobs: int, out: Path) -> list[CampaignResult]:
    bench = build_bench(cfg)
    grid = build_grid(cfg, bench)
    thresholds = resolve_thresholds(cfg, bench, grid)
    ladder = _ladder(cfg)
    results = []
    for bit in cfg["input_bits"]:
        base = ShotParams(**{**_shot_fields(cfg), "input_bit": bit})
        res = escalate(bench, grid, ladder, thresholds, base, jobs=jobs)
        results.append(res)
        for o in res.outcomes:
            if o.success_map is not None:
                _write_map(out, f"map_in{bit}_{o.objective}x", o.success_map, bench)
    _write_json(out / "campaign.json", {"thresholds": asdict(thresholds),
                                        "results": [r.to_dict() for r in results]})
    return results


def cmd_escalate(cfg: dict, jobs: int) -> int:
    out = _outdir(cfg)
    for res in _campaign(cfg, jobs, out):
        for o in res.outcomes:
            state = (f"{o.classification} from {o.onset_power:.2f} power, {o.onset_duration:g} ns"
                     if o.success else "no fault")
            print(f"input '{res.input_bit}' {o.objective:>3}x: {state}")
    return EXIT_OK


def cmd_trace(cfg: dict) -> int:
    bench = build_bench(cfg)
    params = ShotParams(**_shot_fields(cfg))
    window = bench.window(params)
    laser = 0.0
    if cfg["shot_center"] is None:
        forced = ForcedState(active_window=window)
    else:
        grid = build_grid(cfg, bench)
        thresholds = resolve_thresholds(cfg, bench, grid)
        shot = BeamShot(objective(params.objective), tuple(cfg["shot_center"]), params.power,
                        params.duration_ns, window[0], params.spot_model, bench.source)
        forced = shot_forced_state(shot, bench.layout, thresholds)
        laser = params.power
    trace = run_trace(bench.register, params.clock_mhz, params.input_bit, forced,
                      bench.n_cycles(params), laser_power=laser)
    out = _outdir(cfg)
    trace.to_csv(out / "trace.csv")
    title = "no shot" if cfg["shot_center"] is None else \
        f"shot at ({cfg['shot_center'][0]:g}, {cfg['shot_center'][1]:g}) um"
    plotting.plot_trace(trace, out / "trace.png", title)
    print(f"wrote {out / 'trace.csv'}: {len(trace)} samples, "
          f"q_out per cycle {''.join(map(str, trace.cycle_outputs()))}, "
          f"q_out high in {sum(trace.q_out)} samples")
    return EXIT_OK


def cmd_report(cfg: dict, jobs: int, campaign: str | None) -> int:
    out = _outdir(cfg)
    if campaign:
        doc = json.loads(Path(campaign).read_text())
        try:
            results = [CampaignResult.from_dict(r) for r in doc["results"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"bad campaign file: {exc}") from exc
    else:
        results = _campaign(cfg, jobs, out)
    report = summarize(results)
    report.to_csv(out / "report.csv")
    (out / "report.txt").write_text(report.to_text())
    _write_json(out / "report.json", report.to_dict())
    plotting.plot_spot_sizes(out / "spot_sizes.png")
    print(report.to_text(), end="")
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def _pair(text: str) -> tuple[float, float]:
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected X,Y") from exc
    return x, y


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="JSON config file")
    common.add_argument("-o", "--output-dir", help="directory for output files")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, dotted keys, JSON values")
    common.add_argument("--builder", help=f"layout builder: {', '.join(BUILDERS)}")
    common.add_argument("--n-ff", type=int, help="flip-flops in the register layout")
    common.add_argument("--layout", help="load the layout from this JSON file")
    common.add_argument("--seed", type=int, help=f"coupling-jitter seed ({SEED_ENV} wins)")
    common.add_argument("-v", "--verbose", action="store_true")

    shot = argparse.ArgumentParser(add_help=False)
    shot.add_argument("--objective", type=int, help="5, 20, 50 or 100")
    shot.add_argument("--spot-model", help="measured or datasheet")
    shot.add_argument("--power", type=float, help="fraction of maximum laser power")
    shot.add_argument("--duration", type=float, help="pulse duration, ns")
    shot.add_argument("--clock", type=float, help="clock frequency, MHz")
    shot.add_argument("--input-bit", type=int, help="constant register input")
    shot.add_argument("--target-ff", type=int, help="index of the attacked flip-flop")
    shot.add_argument("--thresholds", help="thresholds JSON file or 'calibrate'")

    jobs = argparse.ArgumentParser(add_help=False)
    jobs.add_argument("--jobs", type=int, default=1, help="worker processes for scans")

    parser = argparse.ArgumentParser(prog="jicgsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("build-layout", parents=[common], help="write a layout JSON")
    sub.add_parser("calibrate", parents=[common, shot], help="fit critical intensities")
    sub.add_parser("scan", parents=[common, shot, jobs], help="one sensitivity map")
    sub.add_parser("escalate", parents=[common, shot, jobs], help="full escalation campaign")
    p = sub.add_parser("trace", parents=[common, shot], help="register waveform")
    p.add_argument("--shot", type=_pair, metavar="X,Y", help="fire one shot at this point")
    p = sub.add_parser("report", parents=[common, shot, jobs], help="campaign summary table")
    p.add_argument("--campaign", help="campaign.json from a previous escalate run")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    jobs = getattr(args, "jobs", 1)
    try:
        if jobs < 1:
            raise UsageError("--jobs must be at least 1")
        cfg = load_config(args)
        if args.command == "build-layout":
            return cmd_build_layout(cfg)
        if args.command == "calibrate":
            return cmd_calibrate(cfg)
        if args.command == "scan":
            return cmd_scan(cfg, jobs)
        if args.command == "escalate":
            return cmd_escalate(cfg, jobs)
        if args.command == "trace":
            return cmd_trace(cfg)
        return cmd_report(cfg, jobs, args.campaign)
    except UsageError as exc:
        print(f"jicgsim: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CalibrationError as exc:
        print(f"jicgsim: calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except ValueError as exc:
        print(f"jicgsim: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"jicgsim: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
