"""Run configuration: one INI file resolving every knob of a run.

Unset keys fall back to the selected material's process presets, so a
config can be as short as a material name.  Each command echoes the fully
resolved configuration back out so a run can be reproduced from its output
directory alone.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass

from .materials import (MATERIALS, PROCESS_PRESETS, BeamParams, MaterialProps,
                        get_material)
from .meltpool import MeltPoolCoefficients
from .controller import ControlConfig
from .scanpath import GridConfig
from .thermal import ThermalConfig, stable_timestep


class ConfigError(Exception):
    """Bad or inconsistent run configuration."""


def _ini_value(v) -> str:
    """Scalar -> INI text that load_config parses back to the same value."""
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return repr(v)


def _scaled(value: float, scale: float) -> str:
    """Text t with float(t) * scale == value exactly.

    Keys like hatch_um are stored in SI but echoed in display units; a
    plain repr of value/scale can land one ulp off after the reload
    multiplies the scale back in, so nudge the quotient until the round
    trip is exact.
    """
    q = value / scale
    for cand in (q, math.nextafter(q, math.inf), math.nextafter(q, -math.inf)):
        if float(repr(cand)) * scale == value:
            return repr(cand)
    return repr(q)


@dataclass
class RunConfig:
    material_name: str
    mat: MaterialProps
    beam: BeamParams
    coeffs: MeltPoolCoefficients
    control: ControlConfig
    grid: GridConfig
    thermal: ThermalConfig
    dwell_time: float
    fixture: dict
    seed: int
    threads: int
    out_dir: str
    scanpath: str | None

    def echo_ini(self) -> str:
        """Resolved-config text capturing every value actually in effect."""
        cp = configparser.ConfigParser()
        cp["material"] = {"name": self.material_name}
        for f in dataclasses.fields(self.mat):
            if f.name != "name":
                cp["material"][f.name] = repr(getattr(self.mat, f.name))
        cp["beam"] = {
            "spot_um": _scaled(self.beam.spot_size, 1e-6),
            "heat_factor": repr(self.beam.heat_factor),
            "rx_um": _scaled(self.beam.r_x, 1e-6),
            "ry_um": _scaled(self.beam.r_y, 1e-6),
            "rz_um": _scaled(self.beam.r_z, 1e-6),
        }
        cp["coefficients"] = {
            "c_width": _scaled(self.coeffs.c_width, 1e-6),
            "c_length": _scaled(self.coeffs.c_length, 1e-6),
        }
        cp["control"] = {
            "area_target_mm2": _scaled(self.control.area_target, 1e-6),
            "power_min_w": repr(self.control.power_min),
            "power_max_w": repr(self.control.power_max),
            "power_nominal_w": repr(self.control.power_nominal),
            "rel_tol": repr(self.control.rel_tol),
        }
        cp["grid"] = {
            "hatch_um": _scaled(self.grid.hatch, 1e-6),
            "layer_um": _scaled(self.grid.layer_thickness, 1e-6),
            "margin_cells": repr(self.grid.margin_cells),
            "substrate_layers": repr(self.grid.substrate_layers),
            "skywrite_ms": _scaled(self.grid.skywrite_time, 1e-3),
        }
        cp["thermal"] = {
            "dt_s": repr(self.thermal.dt),
            "window_layers": repr(self.thermal.window_layers),
            "top_boundary": self.thermal.top_boundary,
            "bottom_boundary": self.thermal.bottom_boundary,
            "source_truncation": repr(self.thermal.source_truncation),
            "half_rule_absolute": repr(self.thermal.half_rule_absolute),
        }
        cp["dwell"] = {
            "time_s": repr(self.dwell_time),
            "h_w_m2k": _ini_value(self.thermal.dwell_h),
            "blur_mode": self.thermal.blur_mode,
        }
        cp["fixture"] = {k: _ini_value(v) for k, v in sorted(self.fixture.items())}
        cp["run"] = {
            "seed": repr(self.seed),
            "threads": repr(self.threads),
            "out_dir": self.out_dir,
            "scanpath": self.scanpath or "",
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _get(cp, section, key, cast, default):
    if not cp.has_section(section) or key not in cp[section]:
        return default
    raw = cp[section][key].strip()
    if raw == "":
        return default
    try:
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def load_config(path: str | None = None, *, material: str | None = None,
                out_dir: str | None = None, seed: int | None = None,
                threads: int | None = None,
                scanpath: str | None = None) -> RunConfig:
    """Read ``path`` (optional) and apply command-line overrides."""
    cp = configparser.ConfigParser()
    if path is not None:
        read = cp.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")

    name = material or _get(cp, "material", "name", str, "IN718")
    if name not in MATERIALS:
        raise ConfigError(f"unknown material {name!r}; "
                          f"choose from {sorted(MATERIALS)}")
    preset = PROCESS_PRESETS[name]
    try:
        mat = get_material(name)
        overrides = {}
        if cp.has_section("material"):
            for f in dataclasses.fields(MaterialProps):
                if f.name != "name" and f.name in cp["material"]:
                    overrides[f.name] = float(cp["material"][f.name])
        if overrides:
            mat = dataclasses.replace(mat, **overrides)

        spot = _get(cp, "beam", "spot_um", float, 78.0) * 1e-6
        heat_factor = _get(cp, "beam", "heat_factor", float,
                           preset["heat_factor"])
        r_kw = {}
        for axis in ("x", "y", "z"):
            r = _get(cp, "beam", f"r{axis}_um", float, None)
            if r is not None:
                r_kw[f"r_{axis}"] = r * 1e-6
        beam = BeamParams(spot_size=spot, heat_factor=heat_factor, **r_kw)

        coeffs = MeltPoolCoefficients.from_paper_units(
            _get(cp, "coefficients", "c_width", float, preset["c_width"]),
            _get(cp, "coefficients", "c_length", float, preset["c_length"]))

        control = ControlConfig(
            area_target=_get(cp, "control", "area_target_mm2", float,
                             preset["area_target_mm2"]) * 1e-6,
            power_min=_get(cp, "control", "power_min_w", float, 0.0),
            power_max=_get(cp, "control", "power_max_w", float, 500.0),
            power_nominal=_get(cp, "control", "power_nominal_w", float,
                               preset["power_nominal_W"]),
            rel_tol=_get(cp, "control", "rel_tol", float, 1e-10))

        hatch = _get(cp, "grid", "hatch_um", float, 90.0) * 1e-6
        layer_um = _get(cp, "grid", "layer_um", float, 40.0) * 1e-6
        safety = _get(cp, "thermal", "stability_safety", float, 0.5)
        if not 0 < safety <= 1:
            raise ConfigError("stability_safety must be in (0, 1]")
        dt = _get(cp, "thermal", "dt_s", float, None)
        if dt is None:
            dt = stable_timestep(mat, hatch, hatch, layer_um, safety)

        grid = GridConfig(
            dt=dt, hatch=hatch, layer_thickness=layer_um,
            skywrite_time=_get(cp, "grid", "skywrite_ms", float, 1.8) * 1e-3,
            margin_cells=_get(cp, "grid", "margin_cells", int, 3),
            substrate_layers=_get(cp, "grid", "substrate_layers", int, 0))

        threads_eff = threads if threads is not None \
            else _get(cp, "run", "threads", int, 1)
        if threads_eff < 1:
            raise ConfigError("threads must be >= 1")
        thermal = ThermalConfig(
            dt=dt,
            window_layers=_get(cp, "thermal", "window_layers", int, 30),
            top_boundary=_get(cp, "thermal", "top_boundary", str, "convection"),
            bottom_boundary=_get(cp, "thermal", "bottom_boundary", str, "auto"),
            source_truncation=_get(cp, "thermal", "source_truncation",
                                   float, 4.0),
            half_rule_absolute=_get(cp, "thermal", "half_rule_absolute",
                                    bool, False),
            dwell_h=_get(cp, "dwell", "h_w_m2k", float, None),
            dwell_threads=threads_eff,
            blur_mode=_get(cp, "dwell", "blur_mode", str, "nearest"))

        fixture = {
            "pyramid_scale": _get(cp, "fixture", "pyramid_scale", str, "full"),
            "speed_mm_s": _get(cp, "fixture", "speed_mm_s", float,
                               preset["speed_mm_s"]),
            "jump_ms": _get(cp, "fixture", "jump_ms", float, 1.8),
            "overhang_lines": _get(cp, "fixture", "overhang_lines", int, 10),
            "f_grid": _get(cp, "fixture", "f_grid", str, "1.0:0.5:5.0"),
            # tuning nominal; empty = the pyramid scale preset's value
            "nominal_W": _get(cp, "fixture", "nominal_W", float, None),
        }
        if fixture["pyramid_scale"] not in ("full", "reduced"):
            raise ConfigError("pyramid_scale must be full or reduced")

        return RunConfig(
            material_name=name, mat=mat, beam=beam, coeffs=coeffs,
            control=control, grid=grid, thermal=thermal,
            dwell_time=_get(cp, "dwell", "time_s", float, 10.0),
            fixture=fixture,
            seed=seed if seed is not None else _get(cp, "run", "seed", int, 0),
            threads=threads_eff,
            out_dir=out_dir or _get(cp, "run", "out_dir", str, "out"),
            scanpath=scanpath or _get(cp, "run", "scanpath", str, None))
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_grid_spec(spec: str) -> list[float]:
    """Parse 'start:step:end' (inclusive) or a comma list into floats."""
    spec = spec.strip()
    try:
        if ":" in spec:
            start, step, end = (float(s) for s in spec.split(":"))
            if step <= 0 or end < start:
                raise ValueError
            out = []
            v = start
            while v <= end + 1e-12 * max(abs(end), 1.0):
                out.append(round(v, 12))
                v += step
            return out
        return [float(s) for s in spec.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse grid spec {spec!r}") from None
