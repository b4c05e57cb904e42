"""Command line entry point.

Commands:
    gen-fixture   write the built-in calibration scan paths
    fit-meltpool  fit melt-pool constants from single-track measurements
    schedule      feedforward power schedule for a scan path
    simulate      replay fixed powers and report predicted melt areas
    tune-f        sweep the thermal heat factor against an area source

Exit codes: 0 success, 2 configuration problem, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import report, snapshot
from .calibration import (CalibrationContext, VirtualMachine, file_measure,
                          sweep_f, write_areas_csv, write_tuning_csv)
from .config import ConfigError, RunConfig, load_config, parse_grid_spec
from .controller import (read_schedule_csv, run_feedforward,
                         simulate_schedule, write_layer_power_csv,
                         write_schedule_csv)
from .fixtures import (FULL_PYRAMID, REDUCED_PYRAMID, overhang_slab_lines,
                       pyramid_bulk_window, stepped_pyramid_lines, write_lines)
from .materials import MATERIALS
from .meltpool import (MeltPoolDomainError, fit_coefficients,
                       generate_sweep_design, load_measurements_csv,
                       make_synthetic_records, write_measurements_csv)
from .scanpath import ScanPathError, load_build
from .thermal import BuildThermalModel, SimulationError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--material", choices=sorted(MATERIALS))
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meltctl",
        description="Vector-level feedforward laser power scheduling for "
                    "powder bed fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixture", help="write built-in scan fixtures")
    _add_common(p)
    p.add_argument("--reduced", action="store_true",
                   help="test-scale pyramid instead of full size")
    p.set_defaults(func=cmd_gen_fixture)

    p = sub.add_parser("fit-meltpool", help="fit melt-pool constants")
    _add_common(p)
    p.add_argument("--measurements", help="single-track measurement CSV")
    p.add_argument("--synthetic", action="store_true",
                   help="generate the standard sweep from preset constants")
    p.add_argument("--noise", type=float, default=0.0,
                   help="multiplicative noise sigma for --synthetic")
    p.add_argument("--source", help="use only records from this source")
    p.set_defaults(func=cmd_fit_meltpool)

    p = sub.add_parser("schedule", help="feedforward power schedule")
    _add_common(p)
    p.add_argument("--scanpath", help="scan path file")
    p.add_argument("--snapshots", action="store_true",
                   help="dump a field snapshot after each layer")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="replay fixed powers")
    _add_common(p)
    p.add_argument("--scanpath", help="scan path file")
    p.add_argument("--powers", help="schedule CSV with powers to replay")
    p.add_argument("--power", type=float,
                   help="constant power for every mark vector")
    p.add_argument("--snapshots", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("tune-f", help="sweep the thermal heat factor")
    _add_common(p)
    p.add_argument("--f-grid", dest="f_grid",
                   help="start:step:end or comma list of candidates")
    p.add_argument("--f-true", dest="f_true", type=float,
                   help="hidden factor for the built-in virtual machine")
    p.add_argument("--areas", help="measured-areas CSV instead of the "
                                   "virtual machine")
    p.add_argument("--scale", choices=["full", "reduced"],
                   help="pyramid fixture scale")
    p.set_defaults(func=cmd_tune_f)
    return parser


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, name)


def _new_model(cfg: RunConfig, grid) -> BuildThermalModel:
    model = BuildThermalModel(grid, cfg.mat, cfg.beam, cfg.thermal)
    if cfg.grid.substrate_layers:
        model.seed_substrate(cfg.grid.substrate_layers)
    return model


def _vectors_by_id(layers) -> dict:
    return {v.id: v for layer in layers for v in layer.vectors}


def _require_scanpath(cfg: RunConfig, args) -> str:
    path = getattr(args, "scanpath", None) or cfg.scanpath
    if not path:
        raise ConfigError("no scan path given (--scanpath or [run] scanpath)")
    if not os.path.exists(path):
        raise ConfigError(f"scan path file not found: {path}")
    return path


def _snapshot_hook(cfg: RunConfig, layers, model, enabled: bool):
    """Per-layer callback writing post-dwell snapshots and summary rows."""
    rows: list = []

    def hook(pos: int, _total: int) -> None:
        k = layers[pos - 1].layer_index
        rows.append((k, model.stack[k].copy()))
        if enabled:
            snapshot.write_snapshot(
                _out(cfg, f"layer_{k:04d}.bin"), model.stack,
                cfg.grid.hatch, cfg.grid.hatch, cfg.grid.layer_thickness, k)

    return hook, rows


# ---------------------------------------------------------------------------
# commands

def cmd_gen_fixture(cfg: RunConfig, args) -> int:
    scale = "reduced" if args.reduced else cfg.fixture["pyramid_scale"]
    params = REDUCED_PYRAMID if scale == "reduced" else FULL_PYRAMID
    hatch_mm = cfg.grid.hatch * 1e3
    layer_mm = cfg.grid.layer_thickness * 1e3
    pyramid = stepped_pyramid_lines(
        widths_mm=params["widths_mm"],
        vectors_per_width=params["vectors_per_width"],
        hatch_mm=hatch_mm, speed_mm_s=cfg.fixture["speed_mm_s"],
        layer_thickness_mm=layer_mm,
        jump_ms=cfg.fixture["jump_ms"])
    slab = overhang_slab_lines(
        n_lines=cfg.fixture["overhang_lines"], hatch_mm=hatch_mm,
        speed_mm_s=cfg.fixture["speed_mm_s"], layer_thickness_mm=layer_mm,
        jump_ms=cfg.fixture["jump_ms"])
    write_lines(_out(cfg, "pyramid.scan"), pyramid)
    write_lines(_out(cfg, "overhang.scan"), slab)
    print(f"wrote {_out(cfg, 'pyramid.scan')} "
          f"({3 * params['vectors_per_width']} vectors, scan it with "
          f"[grid] substrate_layers = {params['substrate_layers']})")
    print(f"wrote {_out(cfg, 'overhang.scan')} "
          f"({2 * cfg.fixture['overhang_lines']} vectors, substrate_layers = 0)")
    return 0


def cmd_fit_meltpool(cfg: RunConfig, args) -> int:
    if args.synthetic:
        design = generate_sweep_design()
        records = make_synthetic_records(design, cfg.coeffs, cfg.mat,
                                         repeats=2, noise=args.noise,
                                         seed=cfg.seed)
        write_measurements_csv(_out(cfg, "measurements.csv"), records)
    elif args.measurements:
        records = load_measurements_csv(args.measurements)
    else:
        raise ConfigError("need --measurements FILE or --synthetic")

    coeffs, r2w, r2l = fit_coefficients(records, cfg.mat, source=args.source)
    cw, cl = coeffs.to_paper_units()
    with open(_out(cfg, "fit_constants.csv"), "w") as fh:
        fh.write("# meltctl-csv 1\n")
        fh.write("c_width,c_length,r2_width,r2_length,n_records\n")
        fh.write(f"{cw:.9g},{cl:.9g},{r2w:.9g},{r2l:.9g},{len(records)}\n")

    resid_w = np.array([r.width - coeffs.c_width
                        * np.sqrt(r.power / ((cfg.mat.melting_temp - r.t_sub)
                                             * r.speed))
                        for r in records]) * 1e6
    resid_l = np.array([r.length - coeffs.c_length * r.power
                        / (cfg.mat.melting_temp - r.t_sub)
                        for r in records]) * 1e6
    with open(_out(cfg, "fit_report.txt"), "w") as fh:
        fh.write(f"records: {len(records)}\n")
        fh.write(f"c_width:  {cw:.4f} (R^2 = {r2w:.6f})\n")
        fh.write(f"c_length: {cl:.4f} (R^2 = {r2l:.6f})\n")
        for name, resid in (("width", resid_w), ("length", resid_l)):
            q = np.percentile(np.abs(resid), [50, 90, 99])
            fh.write(f"{name} |residual| um: p50 {q[0]:.3f}  "
                     f"p90 {q[1]:.3f}  p99 {q[2]:.3f}\n")
    report.fit_figure(_out(cfg, "fit_scatter.png"), records, coeffs, cfg.mat)
    print(f"fit c_width={cw:.2f} c_length={cl:.2f} "
          f"(R^2 {r2w:.4f}/{r2l:.4f}) from {len(records)} records")
    return 0


def cmd_schedule(cfg: RunConfig, args) -> int:
    path = _require_scanpath(cfg, args)
    layers, grid = load_build(path, cfg.grid)
    model = _new_model(cfg, grid)
    hook, rows = _snapshot_hook(cfg, layers, model, args.snapshots)
    sched = run_feedforward(layers, model, cfg.coeffs, cfg.control,
                            cfg.dwell_time, on_layer=hook)
    write_schedule_csv(_out(cfg, "schedule.csv"), sched, _vectors_by_id(layers))
    write_layer_power_csv(_out(cfg, "layer_power.csv"), sched)
    write_areas_csv(_out(cfg, "areas.csv"), sched)
    snapshot.write_summary_csv(_out(cfg, "layer_summary.csv"), rows)
    report.power_trace_figure(_out(cfg, "power_trace.png"), sched)
    report.area_trace_figure(_out(cfg, "area_trace.png"), sched,
                             target=cfg.control.area_target)
    n_clamped = sum(e.clamped for e in sched.entries)
    print(f"scheduled {len(sched)} vectors over {len(layers)} layers; "
          f"power mean {sched.powers.mean():.1f} W "
          f"[{sched.powers.min():.1f}, {sched.powers.max():.1f}], "
          f"{n_clamped} clamped")
    return 0


def cmd_simulate(cfg: RunConfig, args) -> int:
    path = _require_scanpath(cfg, args)
    layers, grid = load_build(path, cfg.grid)
    if args.powers:
        powers = {e.vector_id: e.power
                  for e in read_schedule_csv(args.powers).entries}
    elif args.power is not None:
        if args.power < 0:
            raise ConfigError("--power must be >= 0")
        powers = {v.id: args.power for layer in layers
                  for v in layer.vectors if v.is_mark}
    else:
        raise ConfigError("need --powers FILE or --power W")
    model = _new_model(cfg, grid)
    hook, rows = _snapshot_hook(cfg, layers, model, args.snapshots)
    sim = simulate_schedule(layers, model, powers, cfg.coeffs,
                            cfg.dwell_time, on_layer=hook)
    write_schedule_csv(_out(cfg, "sim_schedule.csv"), sim,
                       _vectors_by_id(layers))
    write_areas_csv(_out(cfg, "sim_areas.csv"), sim)
    snapshot.write_summary_csv(_out(cfg, "layer_summary.csv"), rows)
    report.area_trace_figure(_out(cfg, "sim_area_trace.png"), sim,
                             target=cfg.control.area_target)
    print(f"simulated {len(sim)} vectors; "
          f"area mean {sim.areas.mean() * 1e6:.5f} mm^2, "
          f"spread {sim.areas.std() * 1e6:.5f} mm^2")
    return 0


def cmd_tune_f(cfg: RunConfig, args) -> int:
    scale = args.scale or cfg.fixture["pyramid_scale"]
    params = REDUCED_PYRAMID if scale == "reduced" else FULL_PYRAMID
    hatch_mm = cfg.grid.hatch * 1e3
    lines = stepped_pyramid_lines(
        widths_mm=params["widths_mm"],
        vectors_per_width=params["vectors_per_width"],
        hatch_mm=hatch_mm, speed_mm_s=cfg.fixture["speed_mm_s"],
        layer_thickness_mm=cfg.grid.layer_thickness * 1e3,
        jump_ms=cfg.fixture["jump_ms"])
    scan_path = _out(cfg, "pyramid.scan")
    write_lines(scan_path, lines)
    grid_cfg = replace(cfg.grid, substrate_layers=params["substrate_layers"])
    layers, grid = load_build(scan_path, grid_cfg)

    nominal = cfg.fixture["nominal_W"] or params["power_nominal_W"]
    ctx = CalibrationContext(
        layers=layers, grid=grid, mat=cfg.mat, beam=cfg.beam,
        coeffs=cfg.coeffs, control=cfg.control, thermal=cfg.thermal,
        dwell_time=cfg.dwell_time,
        substrate_layers=params["substrate_layers"],
        bulk_window=pyramid_bulk_window(params["vectors_per_width"], hatch_mm),
        power_nominal=nominal)

    if args.areas:
        measure = file_measure(args.areas)
    elif args.f_true is not None:
        measure = VirtualMachine(ctx, args.f_true)
    else:
        raise ConfigError("need --f-true X (virtual machine) or --areas FILE")

    grid_values = parse_grid_spec(args.f_grid or cfg.fixture["f_grid"])
    best, runs = sweep_f(ctx, grid_values, measure)
    write_tuning_csv(_out(cfg, "tune_report.csv"), runs)
    report.epsilon_figure(_out(cfg, "epsilon.png"), runs)
    print(f"best f = {best.f:g} with area target "
          f"{best.area_target * 1e6:.6f} mm^2 (epsilon {best.epsilon:.6g}) "
          f"over {len(runs)} candidates")
    return 0


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, material=args.material,
                          out_dir=args.out_dir, seed=args.seed,
                          threads=args.threads,
                          scanpath=getattr(args, "scanpath", None))
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "resolved_config.ini"), "w") as fh:
            fh.write(cfg.echo_ini())
        return args.func(cfg, args)
    except (ConfigError, ScanPathError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, MeltPoolDomainError, ValueError,
            ArithmeticError, KeyError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
