"""Figure rendering for run reports.  Everything draws to files via the
Agg backend; no window is ever opened."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .materials import MaterialProps
from .meltpool import MeltPoolCoefficients, SingleTrackRecord

_META = {"Software": "meltctl"}


def _save(fig, path):
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def fit_figure(path, records: list[SingleTrackRecord],
               coeffs: MeltPoolCoefficients, mat: MaterialProps) -> None:
    """Measured width/length against the fitted through-origin lines."""
    dt = np.array([mat.melting_temp - r.t_sub for r in records])
    xw = np.sqrt(np.array([r.power for r in records]) / dt
                 / np.array([r.speed for r in records]))
    xl = np.array([r.power for r in records]) / dt
    w_um = np.array([r.width for r in records]) * 1e6
    l_um = np.array([r.length for r in records]) * 1e6

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.plot(xw, w_um, ".", ms=4, alpha=0.6)
    xs = np.linspace(0, xw.max() * 1.05, 50)
    ax1.plot(xs, coeffs.c_width * xs * 1e6, "-", lw=1)
    ax1.set_xlabel(r"$\sqrt{P/(\Delta T\, v)}$")
    ax1.set_ylabel("width [um]")
    ax2.plot(xl, l_um, ".", ms=4, alpha=0.6)
    xs = np.linspace(0, xl.max() * 1.05, 50)
    ax2.plot(xs, coeffs.c_length * xs * 1e6, "-", lw=1)
    ax2.set_xlabel(r"$P/\Delta T$")
    ax2.set_ylabel("length [um]")
    fig.tight_layout()
    _save(fig, path)


def power_trace_figure(path, schedule) -> None:
    powers = schedule.powers
    idx = np.arange(powers.size)
    clamped = np.array([e.clamped for e in schedule.entries], dtype=bool)
    fig, ax = plt.subplots(figsize=(9, 3.5))
    ax.plot(idx, powers, lw=0.8)
    if clamped.any():
        ax.plot(idx[clamped], powers[clamped], "r.", ms=4, label="clamped")
        ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("mark vector")
    ax.set_ylabel("power [W]")
    fig.tight_layout()
    _save(fig, path)


def area_trace_figure(path, schedule, target: float | None = None) -> None:
    areas = schedule.areas * 1e6
    fig, ax = plt.subplots(figsize=(9, 3.5))
    ax.plot(np.arange(areas.size), areas, lw=0.8)
    if target is not None:
        ax.axhline(target * 1e6, color="k", ls="--", lw=0.8)
    ax.set_xlabel("mark vector")
    ax.set_ylabel("melt area [mm$^2$]")
    fig.tight_layout()
    _save(fig, path)


def epsilon_figure(path, runs) -> None:
    """Error-vs-heat-factor trace with the minimum highlighted."""
    fs = np.array([r.f for r in runs])
    eps = np.array([r.epsilon for r in runs])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(fs, eps, "o-", lw=1)
    best = int(np.argmin(eps))
    ax.plot(fs[best], eps[best], "r*", ms=12)
    ax.set_xlabel("heat factor f")
    ax.set_ylabel("normalized area error")
    fig.tight_layout()
    _save(fig, path)
