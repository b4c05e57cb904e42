"""Per-vector feedforward power control.

Before each mark vector the thermal model supplies the subsurface
temperature; the melt-pool model then gives the area as
A(P) = a*P**1.5 + b*P, which is strictly increasing, and the controller
picks the power where A meets the target.  The solve runs on u = sqrt(P)
(making the residual a cubic) with a Newton iteration safeguarded by the
bracket [0, (target/a)**(1/3)].  Powers are clamped to laser limits; a
clamped vector keeps its achievable area in the schedule.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .meltpool import MIN_SUPERHEAT, MeltPoolCoefficients, area_coefficients
from .scanpath import LayerScan
from .thermal import BuildThermalModel


@dataclass(frozen=True)
class ControlConfig:
    area_target: float          # m^2
    power_min: float = 0.0      # W
    power_max: float = 500.0    # W
    power_nominal: float | None = None
    rel_tol: float = 1e-10      # on the area residual
    max_iter: int = 100

    def __post_init__(self):
        if self.area_target <= 0:
            raise ValueError("area_target must be positive")
        if not 0 <= self.power_min < self.power_max:
            raise ValueError("need 0 <= power_min < power_max")


def solve_power(t_sub: float, speed: float, cfg: ControlConfig,
                coeffs: MeltPoolCoefficients, mat) -> tuple[float, float, bool]:
    """Power whose predicted melt area hits cfg.area_target at this speed
    and subsurface temperature.  Returns (power, achieved area, clamped)."""
    a, b = area_coefficients(speed, t_sub, coeffs, mat)
    return solve_power_from_coeffs(a, b, cfg.area_target, cfg)


def solve_power_from_coeffs(a: float, b: float, target: float,
                            cfg: ControlConfig) -> tuple[float, float, bool]:
    """Root of a*P**1.5 + b*P = target, clamped to the power bounds.

    The unclamped root is found to cfg.rel_tol relative residual; clamping
    to [power_min, power_max] reports the area actually reachable at the
    clamp.
    """
    if a <= 0 or b < 0 or target <= 0:
        raise ValueError("need a > 0, b >= 0, target > 0")

    def area_of(u):
        return (a * u + b) * u * u

    lo, hi = 0.0, (target / a) ** (1.0 / 3.0)
    u = hi
    for _ in range(cfg.max_iter):
        f = area_of(u) - target
        if abs(f) <= cfg.rel_tol * target:
            break
        df = 3.0 * a * u * u + 2.0 * b * u
        if f > 0:
            hi = u
        else:
            lo = u
        step_ok = df > 0
        if step_ok:
            u_new = u - f / df
            step_ok = lo < u_new < hi
        u = u_new if step_ok else 0.5 * (lo + hi)

    power = u * u
    clamped = False
    if power > cfg.power_max:
        power, clamped = cfg.power_max, True
    elif power < cfg.power_min:
        power, clamped = cfg.power_min, True
    if clamped:
        u = power ** 0.5
    return power, area_of(u), clamped


@dataclass
class ScheduleEntry:
    vector_id: int
    layer_index: int
    region_tag: str
    t_sub: float       # K
    power: float       # W
    area: float        # m^2, predicted at the applied power
    clamped: bool


@dataclass
class PowerSchedule:
    entries: list[ScheduleEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def powers(self) -> np.ndarray:
        return np.array([e.power for e in self.entries])

    @property
    def areas(self) -> np.ndarray:
        return np.array([e.area for e in self.entries])

    def by_id(self) -> dict[int, ScheduleEntry]:
        return {e.vector_id: e for e in self.entries}

    def layer_slice(self, layer_index: int) -> list[ScheduleEntry]:
        return [e for e in self.entries if e.layer_index == layer_index]

    def region_slice(self, tag: str) -> list[ScheduleEntry]:
        return [e for e in self.entries if e.region_tag == tag]


CSV_FORMAT_COMMENT = "# meltctl-csv 1"
SCHEDULE_COLUMNS = ["layer", "vector_id", "x0_mm", "y0_mm", "x1_mm", "y1_mm",
                    "speed_mm_s", "power_W", "Tb_K", "Ac_mm2", "clamped",
                    "region"]
LAYER_POWER_COLUMNS = ["layer", "mean_power_W", "min_power_W", "max_power_W",
                       "n_vectors"]


def open_csv(path, columns):
    fh = open(path, "w", newline="")
    fh.write(CSV_FORMAT_COMMENT + "\n")
    w = csv.writer(fh)
    w.writerow(columns)
    return fh, w


def read_csv_rows(path):
    """DictReader over a CSV whose leading '#' comment lines are skipped."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    rows = list(reader)
    return rows, reader.fieldnames


def write_schedule_csv(path, schedule: PowerSchedule,
                       vectors_by_id: dict[int, object]) -> None:
    fh, w = open_csv(path, SCHEDULE_COLUMNS)
    with fh:
        for e in schedule.entries:
            v = vectors_by_id[e.vector_id]
            w.writerow([e.layer_index, e.vector_id,
                        f"{v.start.x * 1e3:.6f}", f"{v.start.y * 1e3:.6f}",
                        f"{v.end.x * 1e3:.6f}", f"{v.end.y * 1e3:.6f}",
                        f"{v.speed * 1e3:.3f}", f"{e.power:.6f}",
                        f"{e.t_sub:.6f}", f"{e.area * 1e6:.9f}",
                        int(e.clamped), e.region_tag])


def read_schedule_csv(path) -> PowerSchedule:
    rows, fields = read_csv_rows(path)
    missing = [c for c in SCHEDULE_COLUMNS if c not in (fields or [])]
    if missing:
        raise ValueError(f"schedule csv missing columns: {missing}")
    sched = PowerSchedule()
    for row in rows:
        sched.entries.append(ScheduleEntry(
            int(row["vector_id"]), int(row["layer"]), row["region"],
            float(row["Tb_K"]), float(row["power_W"]),
            float(row["Ac_mm2"]) * 1e-6, bool(int(row["clamped"]))))
    return sched


def write_layer_power_csv(path, schedule: PowerSchedule) -> None:
    """Per-layer power summary, one row per layer in build order."""
    fh, w = open_csv(path, LAYER_POWER_COLUMNS)
    with fh:
        seen: dict[int, list[float]] = {}
        for e in schedule.entries:
            seen.setdefault(e.layer_index, []).append(e.power)
        for layer in sorted(seen):
            p = np.array(seen[layer])
            w.writerow([layer, f"{p.mean():.6f}", f"{p.min():.6f}",
                        f"{p.max():.6f}", p.size])


def run_feedforward(layers: Sequence[LayerScan], model: BuildThermalModel,
                    coeffs: MeltPoolCoefficients, cfg: ControlConfig,
                    dwell_time: float,
                    on_layer: Callable[[int, int], None] | None = None
                    ) -> PowerSchedule:
    """Drive the whole build, choosing each mark vector's power just before
    stepping it.  Returns the resulting schedule."""
    sched = PowerSchedule()
    n = len(layers)
    for pos, layer in enumerate(layers):
        model.start_layer(layer.layer_index)
        for vec in layer.vectors:
            if not vec.is_mark:
                model.step_vector(vec, 0.0)
                continue
            t_sub = model.subsurface_temperature(vec)
            if t_sub >= model.mat.melting_temp - MIN_SUPERHEAT:
                # Substrate already molten: any positive power overshoots the
                # target, so the bounded inversion sits at the lower bound.
                power, clamped = cfg.power_min, True
                area = 0.0 if power == 0.0 else float("nan")
            else:
                a, b = area_coefficients(vec.speed, t_sub, coeffs, model.mat)
                power, area, clamped = solve_power_from_coeffs(a, b, cfg.area_target, cfg)
            sched.entries.append(ScheduleEntry(
                vec.id, vec.layer_index, vec.region_tag,
                t_sub, power, area, clamped))
            model.step_vector(vec, power)
        model.finish_layer(dwell_time)
        if on_layer is not None:
            on_layer(pos + 1, n)
    return sched


def simulate_schedule(layers: Sequence[LayerScan], model: BuildThermalModel,
                      powers: dict[int, float] | PowerSchedule,
                      coeffs: MeltPoolCoefficients, dwell_time: float,
                      on_layer: Callable[[int, int], None] | None = None
                      ) -> PowerSchedule:
    """Replay fixed per-vector powers and report the areas they produce.

    ``coeffs`` here plays the machine's role: the melt pool that power and
    the replayed subsurface temperature would really make.
    """
    if isinstance(powers, PowerSchedule):
        powers = {e.vector_id: e.power for e in powers.entries}
    out = PowerSchedule()
    n = len(layers)
    for pos, layer in enumerate(layers):
        model.start_layer(layer.layer_index)
        for vec in layer.vectors:
            if not vec.is_mark:
                model.step_vector(vec, 0.0)
                continue
            if vec.id not in powers:
                raise KeyError(f"no scheduled power for vector {vec.id}")
            power = powers[vec.id]
            t_sub = model.subsurface_temperature(vec)
            if t_sub >= model.mat.melting_temp - MIN_SUPERHEAT:
                area = 0.0 if power == 0.0 else float("nan")
            else:
                a, b = area_coefficients(vec.speed, t_sub, coeffs, model.mat)
                u = max(power, 0.0) ** 0.5
                area = (a * u + b) * u * u
            out.entries.append(ScheduleEntry(
                vec.id, vec.layer_index, vec.region_tag,
                t_sub, power, area, False))
            model.step_vector(vec, power)
        model.finish_layer(dwell_time)
        if on_layer is not None:
            on_layer(pos + 1, n)
    return out
