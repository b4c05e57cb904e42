"""Interlayer cooling solved analytically, column by column.

During the recoat dwell the laser is off, so each vertical line of part
cells is treated as a 1D transient-conduction domain with a piecewise-linear
initial condition.  Four boundary pairings occur (z = 0 is the segment
bottom, z = L its top):

    case 1  bottom held at T_0 (build plate), top convecting to T_inf
    case 2  bottom insulated (powder below), top convecting
    case 3  both ends insulated (powder above and below)
    case 4  bottom held at T_0, top insulated (powder above)

Each case has a separable series solution; projection of the initial
profile onto the eigenfunctions is done in closed form per linear element.
After the 1D pass, in-plane spreading over the dwell is approximated by a
discrete Gaussian blur of each layer image with sigma = sqrt(2*alpha*t)
(expressed in cells), powder pixels being represented at half the layer's
average temperature.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .materials import MaterialProps

MAX_MODES = 500
COEFF_TOL = 1e-9      # series amplitude cutoff, relative to profile range
DECAY_TOL = 1e-15     # exp(-lam^2 alpha t) cutoff


@dataclass(frozen=True)
class BoundarySpec:
    """Boundary data for one 1D segment."""

    case: int               # 1..4, see module docstring
    length: float           # m
    t_fixed: float = 0.0    # K, Dirichlet value at z = 0 (cases 1, 4)
    t_ambient: float = 0.0  # K, convection sink (cases 1, 2)
    h: float = 0.0          # W/(m^2 K) (cases 1, 2)
    k: float = 1.0          # W/(m K)   (cases 1, 2)

    def __post_init__(self):
        if self.case not in (1, 2, 3, 4):
            raise ValueError(f"unknown boundary case {self.case}")
        if self.length <= 0:
            raise ValueError("segment length must be positive")
        if self.case in (1, 2) and (self.h <= 0 or self.k <= 0):
            raise ValueError(f"case {self.case} requires positive h and k")


@dataclass
class PiecewiseLinearProfile:
    """Initial condition: node positions (ascending, within [0, L]) and
    temperatures, linear in between."""

    z: np.ndarray
    temps: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.temps = np.asarray(self.temps, dtype=float)
        if self.z.ndim != 1 or self.z.shape != self.temps.shape or self.z.size < 2:
            raise ValueError("profile needs >= 2 matching z/temps nodes")
        if np.any(np.diff(self.z) <= 0):
            raise ValueError("profile z nodes must be strictly increasing")

    @property
    def value_range(self) -> float:
        return float(self.temps.max() - self.temps.min())


@dataclass
class SeriesSolution:
    spec: BoundarySpec
    eigenvalues: np.ndarray    # rad/m
    coefficients: np.ndarray   # mode amplitudes C_n
    c0: float = 0.0            # constant mode (case 3): the profile mean
    k_slope: float = 0.0       # steady gradient (case 1)

    @property
    def n_modes(self) -> int:
        return int(self.eigenvalues.size)


# ---------------------------------------------------------------------------
# eigenvalues

def eigenvalue_residual(spec: BoundarySpec, lam: np.ndarray) -> np.ndarray:
    """Scale-free residual of each case's eigenvalue rule (0 at a root)."""
    lam = np.asarray(lam, dtype=float)
    x = lam * spec.length
    if spec.case == 1:
        bi = spec.h * spec.length / spec.k
        return np.abs(x * np.cos(x) + bi * np.sin(x)) / (np.abs(x) + bi)
    if spec.case == 2:
        bi = spec.h * spec.length / spec.k
        return np.abs(x * np.sin(x) - bi * np.cos(x)) / (np.abs(x) + bi)
    if spec.case == 3:
        n = np.round(x / math.pi)
        return np.abs(x - n * math.pi) / np.maximum(np.abs(x), 1.0)
    n = np.round(x / math.pi - 0.5)
    return np.abs(x - (2 * n + 1) * math.pi / 2) / np.maximum(np.abs(x), 1.0)


def solve_eigenvalues(spec: BoundarySpec, m: int) -> np.ndarray:
    """First m eigenvalues of the case's transcendental rule, ascending.

    Cases 3 and 4 are closed-form; cases 1 and 2 are found by bisection on a
    pole-free restatement of the rule inside each (n*pi, (n+1)*pi) bracket,
    polished with Newton steps.  Case 3's n = 0 constant mode is carried in
    SeriesSolution.c0, not here.
    """
    if m < 1:
        raise ValueError("need m >= 1 modes")
    length = spec.length
    if spec.case == 3:
        return np.arange(1, m + 1) * math.pi / length
    if spec.case == 4:
        return (2 * np.arange(m) + 1) * math.pi / (2 * length)

    bi = spec.h * length / spec.k
    if spec.case == 1:
        # roots of x*cos(x) + bi*sin(x), one in each (n*pi, (n+1)*pi)
        def g(x):
            return x * np.cos(x) + bi * np.sin(x)

        def dg(x):
            return (1 + bi) * np.cos(x) - x * np.sin(x)
    else:
        # roots of x*sin(x) - bi*cos(x)
        def g(x):
            return x * np.sin(x) - bi * np.cos(x)

        def dg(x):
            return (1 + bi) * np.sin(x) + x * np.cos(x)

    roots = np.empty(m)
    for n in range(m):
        lo = n * math.pi + 1e-12
        hi = (n + 1) * math.pi
        if n == 0:
            # limits at 0+: case 1 -> 0 from above, case 2 -> -bi
            flo = 1.0 if spec.case == 1 else -1.0
        else:
            flo = g(lo)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            fm = g(mid)
            if fm == 0.0:
                lo = hi = mid
                break
            if (fm > 0) == (flo > 0):
                lo, flo = mid, fm
            else:
                hi, fhi = mid, fm
            if hi - lo < 1e-12 * hi:
                break
        x = 0.5 * (lo + hi)
        for _ in range(8):  # Newton polish
            d = dg(x)
            if d == 0:
                break
            step = g(x) / d
            x_new = x - step
            if not (n * math.pi < x_new < (n + 1) * math.pi):
                break
            x = x_new
            if abs(step) < 1e-16 * x:
                break
        roots[n] = x / length
    return roots


# ---------------------------------------------------------------------------
# projection

def _element_arrays(profile: PiecewiseLinearProfile):
    z1 = profile.z[:-1]
    z2 = profile.z[1:]
    t1 = profile.temps[:-1]
    t2 = profile.temps[1:]
    slope = (t2 - t1) / (z2 - z1)
    return z1, z2, t1, slope


def _sin_integrals(lam, z1, z2, t1, slope, offset, extra_slope=0.0):
    """Sum over elements of integral (C0*z + C1) * sin(lam*z) dz, where
    C0 = slope - extra_slope and C1 = t1 - slope*z1 - offset."""
    lam = lam[:, None]
    c0 = (slope - extra_slope)[None, :]
    c1 = (t1 - slope * z1 - offset)[None, :]
    a1, a2 = lam * z1[None, :], lam * z2[None, :]
    term_z = (z1[None, :] * np.cos(a1) - z2[None, :] * np.cos(a2)) / lam \
        + (np.sin(a2) - np.sin(a1)) / lam ** 2
    term_c = (np.cos(a1) - np.cos(a2)) / lam
    return np.sum(c0 * term_z + c1 * term_c, axis=1)


def _cos_integrals(lam, z1, z2, t1, slope, offset):
    """Sum over elements of integral (C0*z + C1) * cos(lam*z) dz, where
    C0 = slope and C1 = t1 - slope*z1 - offset."""
    lam = lam[:, None]
    c0 = slope[None, :]
    c1 = (t1 - slope * z1 - offset)[None, :]
    a1, a2 = lam * z1[None, :], lam * z2[None, :]
    term_z = (z2[None, :] * np.sin(a2) - z1[None, :] * np.sin(a1)) / lam \
        + (np.cos(a2) - np.cos(a1)) / lam ** 2
    term_c = (np.sin(a2) - np.sin(a1)) / lam
    return np.sum(c0 * term_z + c1 * term_c, axis=1)


def project_profile(profile: PiecewiseLinearProfile, spec: BoundarySpec,
                    eigenvalues: np.ndarray) -> SeriesSolution:
    """Closed-form projection of the piecewise-linear initial condition onto
    the case's eigenfunctions (steady part subtracted first)."""
    lam = np.asarray(eigenvalues, dtype=float)
    z1, z2, t1, slope = _element_arrays(profile)
    length = spec.length

    if spec.case == 1:
        k_slope = spec.h * (spec.t_ambient - spec.t_fixed) / (spec.h * length + spec.k)
        num = _sin_integrals(lam, z1, z2, t1, slope, spec.t_fixed, extra_slope=k_slope)
        norm = length - np.sin(2 * lam * length) / (2 * lam)
        return SeriesSolution(spec, lam, 2.0 * num / norm, k_slope=k_slope)
    if spec.case == 2:
        num = _cos_integrals(lam, z1, z2, t1, slope, spec.t_ambient)
        norm = length + np.sin(2 * lam * length) / (2 * lam)
        return SeriesSolution(spec, lam, 2.0 * num / norm)
    if spec.case == 3:
        t2 = profile.temps[1:]
        c0 = float(np.sum(0.5 * (t1 + t2) * (z2 - z1)) / length)
        num = _cos_integrals(lam, z1, z2, t1, slope, 0.0)
        return SeriesSolution(spec, lam, 2.0 * num / length, c0=c0)
    num = _sin_integrals(lam, z1, z2, t1, slope, spec.t_fixed)
    return SeriesSolution(spec, lam, 2.0 * num / length)


def evaluate_series(sol: SeriesSolution, alpha: float, t: float, z) -> np.ndarray:
    """Temperature at positions z (m) after time t (s)."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    spec = sol.spec
    decay = np.exp(-sol.eigenvalues ** 2 * alpha * t) * sol.coefficients
    phase = np.outer(z, sol.eigenvalues)
    if spec.case in (1, 4):
        series = np.sin(phase) @ decay
        base = spec.t_fixed + (sol.k_slope * z if spec.case == 1 else 0.0)
    else:
        series = np.cos(phase) @ decay
        base = spec.t_ambient if spec.case == 2 else sol.c0
    return base + series


# ---------------------------------------------------------------------------
# helpers shared with the thermal model

def half_temperature(ref, ambient: float, absolute: bool = False):
    """Half-rule temperature for freshly spread or powder cells: halfway
    between ambient and the reference by default, or literally half the
    reference when ``absolute``."""
    if absolute:
        return 0.5 * np.asarray(ref) if isinstance(ref, np.ndarray) else 0.5 * ref
    return ambient + 0.5 * (np.asarray(ref) - ambient) if isinstance(ref, np.ndarray) \
        else ambient + 0.5 * (ref - ambient)


def gaussian_sigma_cells(alpha: float, dwell_time: float, hatch: float) -> float:
    """Blur radius sqrt(2*alpha*t) expressed in cell units."""
    return math.sqrt(2.0 * alpha * dwell_time) / hatch


def blur_layer(image: np.ndarray, sigma_cells: float, mode: str = "nearest") -> np.ndarray:
    """Discrete normalized Gaussian blur; sigma 0 is the identity."""
    if sigma_cells <= 0:
        return image.copy()
    return gaussian_filter(image, sigma_cells, mode=mode)


# ---------------------------------------------------------------------------
# full-part dwell

def _segment_runs(column: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True in a bool column: list of (k_start, k_end)."""
    runs = []
    k = 0
    n = column.size
    while k < n:
        if column[k]:
            k0 = k
            while k + 1 < n and column[k + 1]:
                k += 1
            runs.append((k0, k))
        k += 1
    return runs


def _segment_spec(k_a: int, k_b: int, n_layers: int, dz: float,
                  mat: MaterialProps, h: float) -> BoundarySpec:
    exposed = (k_b == n_layers - 1)   # top of the current build: convecting
    on_plate = (k_a == 0)             # resting on the build plate: fixed T
    length = (k_b - k_a + 1) * dz
    if exposed and on_plate:
        return BoundarySpec(1, length, t_fixed=mat.baseplate_temp,
                            t_ambient=mat.ambient_temp, h=h, k=mat.conductivity)
    if exposed:
        return BoundarySpec(2, length, t_ambient=mat.ambient_temp,
                            h=h, k=mat.conductivity)
    if on_plate:
        return BoundarySpec(4, length, t_fixed=mat.baseplate_temp)
    return BoundarySpec(3, length)


def _pick_mode_count(spec: BoundarySpec, alpha: float, t: float) -> int:
    """Smallest mode count whose slowest discarded mode has decayed below
    DECAY_TOL, capped at MAX_MODES."""
    lam_cut = math.sqrt(-math.log(DECAY_TOL) / (alpha * t))
    m = int(math.ceil(lam_cut * spec.length / math.pi)) + 2
    return min(max(m, 4), MAX_MODES)


def _trim_modes(sol: SeriesSolution, value_range: float) -> SeriesSolution:
    """Amplitude-based truncation: stop once three consecutive coefficients
    fall below COEFF_TOL * range (single small modes occur systematically in
    symmetric profiles, hence the run-of-three guard)."""
    if value_range <= 0:
        cut = min(3, sol.n_modes)
        return SeriesSolution(sol.spec, sol.eigenvalues[:cut], sol.coefficients[:cut],
                              c0=sol.c0, k_slope=sol.k_slope)
    small = np.abs(sol.coefficients) < COEFF_TOL * value_range
    run = 0
    for n, s in enumerate(small):
        run = run + 1 if s else 0
        if run >= 3:
            cut = n + 1
            return SeriesSolution(sol.spec, sol.eigenvalues[:cut], sol.coefficients[:cut],
                                  c0=sol.c0, k_slope=sol.k_slope)
    return sol


def solve_segment(temps: np.ndarray, spec: BoundarySpec, dz: float,
                  alpha: float, t: float,
                  eig_cache: dict | None = None) -> np.ndarray:
    """Advance one part segment (cell-center temperatures bottom-to-top) by
    time t; returns the new cell-center temperatures."""
    n = temps.size
    centers = (np.arange(n) + 0.5) * dz
    # constant end extension keeps the profile spanning [0, L] and makes the
    # case-3 constant mode the exact mean of the cell values
    z_nodes = np.concatenate(([0.0], centers, [spec.length]))
    t_nodes = np.concatenate(([temps[0]], temps, [temps[-1]]))
    profile = PiecewiseLinearProfile(z_nodes, t_nodes)
    m = _pick_mode_count(spec, alpha, t)
    key = (spec.case, n, m)
    if eig_cache is not None and key in eig_cache:
        lam = eig_cache[key]
    else:
        lam = solve_eigenvalues(spec, m)
        if eig_cache is not None:
            eig_cache[key] = lam
    sol = _trim_modes(project_profile(profile, spec, lam), profile.value_range)
    return evaluate_series(sol, alpha, t, centers)


def apply_interlayer_dwell(stack: np.ndarray, occupancy: np.ndarray,
                           dwell_time: float, dz: float, hatch: float,
                           mat: MaterialProps, *, h: float | None = None,
                           half_rule_absolute: bool = False,
                           threads: int = 1,
                           blur_mode: str = "nearest") -> np.ndarray:
    """Cool the whole built part over one recoat dwell.

    stack: (n_layers, ny, nx) temperatures for every layer built so far;
    occupancy: matching bool part mask.  Returns a new stack in which part
    cells carry the post-dwell temperatures and powder cells the synthesized
    half-rule value after blurring (useful for spreading the next layer).
    """
    stack = np.asarray(stack, dtype=float)
    n_layers, ny, nx = stack.shape
    occ = np.asarray(occupancy[:n_layers], dtype=bool)
    if occ.shape != (n_layers, ny, nx):
        raise ValueError(f"occupancy {np.shape(occupancy)} does not cover "
                         f"the {stack.shape} stack")
    out = stack.copy()
    if dwell_time <= 0:
        return out

    alpha = mat.diffusivity
    h_eff = mat.convection_coeff if h is None else h
    eig_cache: dict = {}
    cols = [(j, i) for j in range(ny) for i in range(nx) if occ[:, j, i].any()]

    def run_columns(chunk):
        for j, i in chunk:
            column = occ[:, j, i]
            for k_a, k_b in _segment_runs(column):
                spec = _segment_spec(k_a, k_b, n_layers, dz, mat, h_eff)
                out[k_a:k_b + 1, j, i] = solve_segment(
                    stack[k_a:k_b + 1, j, i], spec, dz, alpha, dwell_time, eig_cache)

    if threads > 1 and len(cols) > 1:
        # deterministic: disjoint writes, per-column arithmetic is unchanged
        chunks = [cols[c::threads] for c in range(threads)]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(run_columns, chunks))
    else:
        run_columns(cols)

    sigma = gaussian_sigma_cells(alpha, dwell_time, hatch)
    for k in range(n_layers):
        img = out[k]
        part = occ[k]
        if part.any():
            layer_mean = float(img[part].mean())
        else:
            layer_mean = mat.ambient_temp
        synth = half_temperature(layer_mean, mat.ambient_temp, half_rule_absolute)
        img = np.where(part, img, synth)
        out[k] = blur_layer(img, sigma, mode=blur_mode)
    return out
