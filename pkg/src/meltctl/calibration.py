"""Thermal-model tuning: pick the heat factor f by scanning a calibration
fixture, replaying its schedule against a reference area source, and
minimizing the scatter of the resulting melt areas.

For each candidate f the area target is first re-tuned so the bulk of the
fixture runs at nominal power; scatter is measured with the normalized
error ||A - mean(A)||_2 / mean(A).  Physical measurements are modeled by a
"virtual machine": the same pipeline run at a hidden true heat factor.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .controller import (ControlConfig, PowerSchedule, run_feedforward,
                         simulate_schedule, solve_power_from_coeffs)
from .materials import BeamParams, MaterialProps
from .meltpool import (MIN_SUPERHEAT, MeltPoolCoefficients, area,
                       area_coefficients)
from .scanpath import LayerScan, VoxelGrid
from .thermal import BuildThermalModel, ThermalConfig


def normalized_error(areas) -> float:
    """Scatter of areas around their mean: ||A - mean||_2 / mean."""
    a = np.asarray(areas, dtype=float)
    if a.size == 0:
        raise ValueError("no areas to score")
    if np.any(a <= 0):
        raise ValueError("areas must be positive")
    mean = a.mean()
    return float(np.linalg.norm(a - mean) / mean)


@dataclass
class TuningRun:
    f: float
    area_target: float        # m^2
    areas: np.ndarray         # measured, m^2, mark vectors in scan order
    epsilon: float
    schedule: PowerSchedule | None = None


@dataclass
class CalibrationContext:
    """Everything one fixture run needs, with f left as the free knob."""

    layers: list[LayerScan]
    grid: VoxelGrid
    mat: MaterialProps
    beam: BeamParams           # heat_factor here is replaced per candidate
    coeffs: MeltPoolCoefficients
    control: ControlConfig
    thermal: ThermalConfig
    dwell_time: float
    substrate_layers: int = 0
    bulk_window: tuple[float, float] | None = None   # x range, m
    power_nominal: float | None = None

    def make_model(self, f: float) -> BuildThermalModel:
        model = BuildThermalModel(self.grid, self.mat,
                                  replace(self.beam, heat_factor=f),
                                  self.thermal)
        if self.substrate_layers:
            model.seed_substrate(self.substrate_layers)
        return model

    def run(self, f: float, area_target: float) -> PowerSchedule:
        cfg = replace(self.control, area_target=area_target)
        return run_feedforward(self.layers, self.make_model(f), self.coeffs,
                               cfg, self.dwell_time)

    def bulk_ids(self) -> set[int]:
        """Mark vectors whose x midpoint lies in the bulk window."""
        if self.bulk_window is None:
            raise ValueError("no bulk window configured")
        lo, hi = self.bulk_window
        ids = set()
        for layer in self.layers:
            for v in layer.vectors:
                if v.is_mark and lo < 0.5 * (v.start.x + v.end.x) < hi:
                    ids.add(v.id)
        if not ids:
            raise ValueError("bulk window contains no vectors")
        return ids


def tune_target(ctx: CalibrationContext, f: float,
                p_nominal: float | None = None,
                rel_tol: float = 1e-3, max_rounds: int = 8) -> float:
    """Area target at which mean power over the bulk window equals nominal.

    Alternates full runs with an inner 1D solve: within a run the logged
    subsurface temperatures fix each bulk vector's power-vs-target curve,
    and mean power is strictly increasing in the target, so the inner root
    is cheap; re-running updates the temperatures until self-consistent.
    On a quiet fixture (e.g. a single vector on the plate) the initial
    guess is already exact and one run suffices.
    """
    if p_nominal is None:
        p_nominal = ctx.power_nominal
    if p_nominal is None:
        raise ValueError("no nominal power given")
    if not ctx.control.power_min < p_nominal < ctx.control.power_max:
        raise ValueError("nominal power outside the laser bounds")
    bulk = ctx.bulk_ids()
    speeds = {v.id: v.speed for layer in ctx.layers for v in layer.vectors}
    target = area(p_nominal, np.mean([speeds[i] for i in bulk]),
                  ctx.mat.baseplate_temp, ctx.coeffs, ctx.mat)

    for _ in range(max_rounds):
        sched = ctx.run(f, target)
        picks = [e for e in sched.entries if e.vector_id in bulk]
        mean_p = float(np.mean([e.power for e in picks]))
        if abs(mean_p - p_nominal) <= rel_tol * p_nominal:
            return target

        # Inner solve on the logged temperatures.  Entries whose substrate
        # was already molten hold the lower power bound no matter the
        # target, so they enter the mean as constants.
        cfg = ctx.control
        floor = ctx.mat.melting_temp - MIN_SUPERHEAT
        ab = [area_coefficients(speeds[e.vector_id], e.t_sub, ctx.coeffs,
                                ctx.mat) if e.t_sub < floor else None
              for e in picks]

        def mean_power(tgt: float) -> float:
            return float(np.mean([
                cfg.power_min if pair is None
                else solve_power_from_coeffs(pair[0], pair[1], tgt, cfg)[0]
                for pair in ab]))

        lo, hi = target, target
        for _ in range(200):
            if mean_power(lo) <= p_nominal:
                break
            lo *= 0.5
        else:
            raise ValueError("nominal power unreachable from below")
        for _ in range(200):
            if mean_power(hi) >= p_nominal:
                break
            hi *= 2.0
        else:
            raise ValueError("nominal power unreachable within power bounds")
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if mean_power(mid) < p_nominal:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-12 * hi:
                break
        target = 0.5 * (lo + hi)
    return target


def evaluate_f(ctx: CalibrationContext, f: float, measure,
               p_nominal: float | None = None) -> TuningRun:
    """Tune the target for this f, run the fixture, score the measured
    areas.  ``measure`` maps the schedule to per-vector areas (m^2)."""
    if f <= 0:
        raise ValueError("heat factor must be positive")
    target = tune_target(ctx, f, p_nominal)
    sched = ctx.run(f, target)
    areas = np.asarray(measure(sched), dtype=float)
    if areas.size != len(sched.entries):
        raise ValueError(
            f"measured {areas.size} areas for {len(sched.entries)} vectors")
    return TuningRun(f, target, areas, normalized_error(areas), sched)


def sweep_f(ctx: CalibrationContext, f_values, measure,
            p_nominal: float | None = None
            ) -> tuple[TuningRun, list[TuningRun]]:
    """Evaluate each candidate heat factor; return (best, full trace)."""
    f_values = list(f_values)
    if not f_values:
        raise ValueError("empty candidate list")
    runs = [evaluate_f(ctx, f, measure, p_nominal) for f in f_values]
    best = min(runs, key=lambda r: r.epsilon)
    return best, runs


@dataclass
class VirtualMachine:
    """Ground-truth stand-in: the same pipeline at a hidden heat factor.

    Replaying a schedule yields the melt areas that machine would produce,
    i.e. the analytical area at each applied power and the replay's own
    subsurface temperatures.
    """

    ctx: CalibrationContext
    f_true: float

    def __call__(self, schedule: PowerSchedule) -> np.ndarray:
        model = self.ctx.make_model(self.f_true)
        sim = simulate_schedule(self.ctx.layers, model, schedule,
                                self.ctx.coeffs, self.ctx.dwell_time)
        return sim.areas


def schedule_measure(schedule: PowerSchedule) -> np.ndarray:
    """Self-consistency source: the controller's own predictions."""
    return schedule.areas


# ---------------------------------------------------------------------------
# CSV interfaces

def write_areas_csv(path, schedule: PowerSchedule) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# meltctl-csv 1\n")
        w = csv.writer(fh)
        w.writerow(["vector_id", "area_mm2"])
        for e in schedule.entries:
            w.writerow([e.vector_id, f"{e.area * 1e6:.9f}"])


def read_areas_csv(path) -> dict[int, float]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if not reader.fieldnames or "vector_id" not in reader.fieldnames \
            or "area_mm2" not in reader.fieldnames:
        raise ValueError("areas csv needs vector_id and area_mm2 columns")
    return {int(r["vector_id"]): float(r["area_mm2"]) * 1e-6 for r in reader}


def file_measure(path):
    """Measurement source backed by an areas CSV keyed by vector id."""
    table = read_areas_csv(path)

    def measure(schedule: PowerSchedule) -> np.ndarray:
        missing = [e.vector_id for e in schedule.entries
                   if e.vector_id not in table]
        if missing:
            raise ValueError(f"areas csv missing vectors {missing[:5]}")
        return np.array([table[e.vector_id] for e in schedule.entries])

    return measure


def write_tuning_csv(path, runs: list[TuningRun]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# meltctl-csv 1\n")
        w = csv.writer(fh)
        w.writerow(["f", "Ac_target_mm2", "epsilon"])
        for r in runs:
            w.writerow([f"{r.f:.6g}", f"{r.area_target * 1e6:.9f}",
                        f"{r.epsilon:.9g}"])
