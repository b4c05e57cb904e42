"""Analytical melt-pool dimension model and its least-squares calibration.

A moving point source on a semi-infinite solid gives pool width and length

    W = c_w * sqrt(P / ((T_melt - T_sub) * v))
    L = c_l * P / (T_melt - T_sub)

and the cross-sectional area is approximated by half an ellipse capped with
a half-disc:

    A = W * L / 2 + pi * W^2 / 8

All public functions take SI units (W, m/s, K) and return metres.  The
widely quoted fit constants are expressed in a micrometre-output convention;
``MeltPoolCoefficients.from_paper_units`` converts them.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .materials import MaterialProps

MIN_SUPERHEAT = 1.0  # K; refuse evaluation when T_sub is this close to melting


class MeltPoolDomainError(ValueError):
    """Subsurface temperature at or above the melting point."""


@dataclass(frozen=True)
class MeltPoolCoefficients:
    """Fit constants in SI output units (metres).

    c_width has units m * sqrt(K s / W) pre-multiplied so that
    width = c_width * sqrt(P / (dT * v)); c_length likewise for
    length = c_length * P / dT.
    """

    c_width: float
    c_length: float
    units: str = "SI (P in W, v in m/s, T in K, dimensions in m)"

    @classmethod
    def from_paper_units(cls, c_width_um: float, c_length_um: float) -> "MeltPoolCoefficients":
        """Convert constants quoted with micrometre outputs (inputs W, m/s, K)."""
        return cls(c_width_um * 1e-6, c_length_um * 1e-6,
                   units=f"converted from um-output convention "
                         f"(c_w={c_width_um:g}, c_l={c_length_um:g})")

    def to_paper_units(self) -> tuple[float, float]:
        return self.c_width * 1e6, self.c_length * 1e6


def _superheat(t_sub: float, mat: MaterialProps) -> float:
    d = mat.melting_temp - t_sub
    if d < MIN_SUPERHEAT:
        raise MeltPoolDomainError(
            f"subsurface temperature {t_sub:.1f} K is within {MIN_SUPERHEAT} K of melting "
            f"({mat.melting_temp:.1f} K)")
    return d


def width(power: float, speed: float, t_sub: float,
          coeffs: MeltPoolCoefficients, mat: MaterialProps) -> float:
    """Melt-pool width (m)."""
    if power < 0 or speed <= 0:
        raise ValueError("power must be >= 0 and speed > 0")
    return coeffs.c_width * math.sqrt(power / (_superheat(t_sub, mat) * speed))


def length(power: float, t_sub: float,
           coeffs: MeltPoolCoefficients, mat: MaterialProps) -> float:
    """Melt-pool length (m)."""
    if power < 0:
        raise ValueError("power must be >= 0")
    return coeffs.c_length * power / _superheat(t_sub, mat)


def area(power: float, speed: float, t_sub: float,
         coeffs: MeltPoolCoefficients, mat: MaterialProps) -> float:
    """Melt-pool cross-sectional area (m^2): W*L/2 + pi*W^2/8."""
    w = width(power, speed, t_sub, coeffs, mat)
    l = length(power, t_sub, coeffs, mat)
    return 0.5 * w * l + math.pi / 8.0 * w * w


def area_coefficients(speed: float, t_sub: float,
                      coeffs: MeltPoolCoefficients, mat: MaterialProps) -> tuple[float, float]:
    """Return (a, b) so that area(P) = a * P**1.5 + b * P.

    Both are positive, so the area is strictly increasing in P; the power
    controller exploits this for its bounded inverse.
    """
    d = _superheat(t_sub, mat)
    a = 0.5 * coeffs.c_width * coeffs.c_length / (d ** 1.5 * math.sqrt(speed))
    b = math.pi / 8.0 * coeffs.c_width ** 2 / (d * speed)
    return a, b


# ---------------------------------------------------------------------------
# calibration

@dataclass
class SingleTrackRecord:
    power: float      # W
    speed: float      # m/s
    t_sub: float      # K
    width: float      # m (measured)
    length: float     # m (measured)
    source: str = "synthetic"   # "synthetic" | "camera" | "crossection"


def fit_coefficients(records: list[SingleTrackRecord], mat: MaterialProps,
                     source: str | None = None):
    """Through-origin least squares for c_width and c_length.

    Regressors: x_w = sqrt(P/(dT*v)) against measured width, x_l = P/dT
    against measured length.  Returns (coefficients, r2_width, r2_length).
    R^2 is taken against the dataset mean; a single record gives R^2 = 1 by
    convention.  ``source`` filters the records first.
    """
    if source is not None:
        records = [r for r in records if r.source == source]
    if not records:
        raise ValueError("no single-track records to fit")
    p = np.array([r.power for r in records])
    v = np.array([r.speed for r in records])
    t = np.array([r.t_sub for r in records])
    w = np.array([r.width for r in records])
    l = np.array([r.length for r in records])
    d = mat.melting_temp - t
    if np.any(d < MIN_SUPERHEAT):
        raise MeltPoolDomainError("record with subsurface temperature at/above melting")

    x_w = np.sqrt(p / (d * v))
    x_l = p / d
    c_w = float(np.dot(x_w, w) / np.dot(x_w, x_w))
    c_l = float(np.dot(x_l, l) / np.dot(x_l, x_l))
    r2_w = _r_squared(w, c_w * x_w)
    r2_l = _r_squared(l, c_l * x_l)
    return MeltPoolCoefficients(c_w, c_l), r2_w, r2_l


def _r_squared(y: np.ndarray, y_pred: np.ndarray) -> float:
    if y.size < 2:
        return 1.0
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0
    ss_res = float(np.sum((y - y_pred) ** 2))
    return 1.0 - ss_res / ss_tot


def generate_sweep_design(power_range=(100.0, 40.0, 420.0),
                          speed_range_mm_s=(500.0, 150.0, 1850.0),
                          t_sub_values_C=(50.0, 200.0, 300.0, 433.0)):
    """Cartesian single-track design: inclusive start/step/end power and
    speed ranges crossed with a list of subsurface temperatures (deg C).
    Returns SI (P_W, v_m_s, T_K) tuples; defaults give 9*10*4 = 360 points.
    """
    powers = _inclusive_range(*power_range)
    speeds = [s * 1e-3 for s in _inclusive_range(*speed_range_mm_s)]
    temps = [t + 273.15 for t in t_sub_values_C]
    return [(p, v, t) for p in powers for v in speeds for t in temps]


def _inclusive_range(start: float, step: float, end: float) -> list[float]:
    if step <= 0:
        raise ValueError("step must be positive")
    n = int(math.floor((end - start) / step + 1e-9)) + 1
    return [start + i * step for i in range(n)]


def make_synthetic_records(design, coeffs: MeltPoolCoefficients, mat: MaterialProps,
                           repeats: int = 1, noise: float = 0.0,
                           seed: int = 0, source: str = "synthetic"):
    """Evaluate the model over a sweep design, optionally with multiplicative
    Gaussian noise of relative scale ``noise``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(repeats):
        for p, v, t in design:
            w = width(p, v, t, coeffs, mat)
            l = length(p, t, coeffs, mat)
            if noise > 0:
                w *= 1.0 + noise * rng.standard_normal()
                l *= 1.0 + noise * rng.standard_normal()
            out.append(SingleTrackRecord(p, v, t, w, l, source=source))
    return out


# ---------------------------------------------------------------------------
# measurement file I/O

MEASUREMENT_COLUMNS = ["P_W", "v_mm_s", "Tb_C", "width_um", "length_um", "source"]


def load_measurements_csv(path) -> list[SingleTrackRecord]:
    """Read single-track measurements; see MEASUREMENT_COLUMNS for the schema."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise ValueError(f"{path}: empty measurement file")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in MEASUREMENT_COLUMNS if c not in header]
    if missing:
        raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
    col = {c: header.index(c) for c in MEASUREMENT_COLUMNS}
    records = []
    for ln, row in enumerate(rows[1:], start=2):
        try:
            records.append(SingleTrackRecord(
                power=float(row[col["P_W"]]),
                speed=float(row[col["v_mm_s"]]) * 1e-3,
                t_sub=float(row[col["Tb_C"]]) + 273.15,
                width=float(row[col["width_um"]]) * 1e-6,
                length=float(row[col["length_um"]]) * 1e-6,
                source=row[col["source"]].strip()))
        except (ValueError, IndexError):
            raise ValueError(f"{path} row {ln}: malformed measurement row") from None
    return records


def write_measurements_csv(path, records: list[SingleTrackRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# meltctl-csv 1\n")
        wr = csv.writer(fh)
        wr.writerow(MEASUREMENT_COLUMNS)
        for r in records:
            wr.writerow([f"{r.power:.6g}", f"{r.speed * 1e3:.6g}",
                         f"{r.t_sub - 273.15:.6g}", f"{r.width * 1e6:.9g}",
                         f"{r.length * 1e6:.9g}", r.source])
