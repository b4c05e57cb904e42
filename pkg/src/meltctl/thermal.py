"""Coarse explicit conduction model of the growing part.

The part is voxelized on the scan grid (cell = hatch x hatch x layer
thickness) and only the most recent layers are stepped explicitly; deeper
layers are frozen at their last post-dwell state and act as a Dirichlet
ghost under the window.  Powder cells do not conduct: part/powder faces are
insulated and powder rows are identity rows, so the matrix stays fixed for
a whole layer.

One step is T <- A T + u followed by an additive heat deposit.  The deposit
integrates a Gaussian ellipsoid source over each cell volume (products of
erf differences per axis), normalized so a single application injects
exactly heat_factor * absorptivity * P * dt regardless of beam position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import erf

from .dwell import apply_interlayer_dwell, half_temperature
from .materials import BeamParams, MaterialProps
from .scanpath import ScanVector, VoxelGrid, map_vector_to_elements


class SimulationError(RuntimeError):
    """Numerical precondition violated (stability, ordering, bounds)."""


def stable_timestep(mat: MaterialProps, dx: float, dy: float, dz: float,
                    safety: float = 0.5) -> float:
    """Largest stable explicit step scaled by ``safety``."""
    limit = 1.0 / (2.0 * mat.diffusivity * (1 / dx ** 2 + 1 / dy ** 2 + 1 / dz ** 2))
    return safety * limit


def check_stability(mat: MaterialProps, dx: float, dy: float, dz: float,
                    dt: float) -> None:
    limit = stable_timestep(mat, dx, dy, dz, safety=1.0)
    if dt > limit * (1 + 1e-12):
        raise SimulationError(
            f"dt={dt:g}s exceeds explicit stability bound {limit:g}s")


@dataclass(frozen=True)
class ThermalConfig:
    dt: float
    window_layers: int = 30
    top_boundary: str = "convection"   # convection | insulated
    bottom_boundary: str = "auto"      # auto | dirichlet | insulated
    source_truncation: float = 4.0     # deposit cut radius, in beam radii
    half_rule_absolute: bool = False
    dwell_h: float | None = None       # None: material convection_coeff
    dwell_threads: int = 1
    blur_mode: str = "nearest"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.window_layers < 1:
            raise ValueError("window_layers must be >= 1")
        if self.top_boundary not in ("convection", "insulated", "dirichlet"):
            raise ValueError(f"bad top_boundary {self.top_boundary!r}")
        if self.bottom_boundary not in ("auto", "dirichlet", "insulated"):
            raise ValueError(f"bad bottom_boundary {self.bottom_boundary!r}")


@dataclass
class StepOperator:
    """One explicit conduction step: x -> matrix @ x + forcing."""

    matrix: sparse.csr_matrix
    forcing: np.ndarray
    shape: tuple[int, int, int]   # (layers, ny, nx)

    def step(self, x: np.ndarray) -> np.ndarray:
        return self.matrix.dot(x) + self.forcing


def assemble_operator(occ: np.ndarray, dx: float, dy: float, dz: float,
                      dt: float, mat: MaterialProps, *,
                      top_boundary: str = "convection",
                      top_temps=None,
                      ghost_temps: np.ndarray | None = None,
                      ghost_solid: np.ndarray | None = None) -> StepOperator:
    """Build the step for a window whose part mask is ``occ`` (nk, ny, nx).

    Conduction couples part-part face pairs only.  The top window layer's
    part cells lose heat to gas by convection, are held against a fixed
    ghost at ``top_temps`` ("dirichlet"), or are insulated.  Below the
    window bottom sits a ghost layer: where ``ghost_solid`` is True the
    face exchanges with the fixed ``ghost_temps`` value at spacing dz,
    elsewhere it is insulated.  Pass ghost_solid=None for a fully insulated
    bottom.
    """
    occ = np.asarray(occ, dtype=bool)
    nk, ny, nx = occ.shape
    n = nk * ny * nx
    fx = mat.diffusivity * dt / dx ** 2
    fy = mat.diffusivity * dt / dy ** 2
    fz = mat.diffusivity * dt / dz ** 2

    diag = np.ones(n)
    forcing = np.zeros(n)
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []

    def couple(mask: np.ndarray, stride: int, f: float):
        p = np.flatnonzero(mask)
        q = p + stride
        np.add.at(diag, p, -f)
        np.add.at(diag, q, -f)
        rows.extend((p, q))
        cols.extend((q, p))
        vals.extend((np.full(p.size, f), np.full(p.size, f)))

    pad = np.zeros((nk, ny, nx), dtype=bool)
    m = pad.copy(); m[:, :, :-1] = occ[:, :, :-1] & occ[:, :, 1:]
    couple(m.ravel(), 1, fx)
    m = pad.copy(); m[:, :-1, :] = occ[:, :-1, :] & occ[:, 1:, :]
    couple(m.ravel(), nx, fy)
    m = pad.copy(); m[:-1, :, :] = occ[:-1, :, :] & occ[1:, :, :]
    couple(m.ravel(), nx * ny, fz)

    if top_boundary == "convection":
        c = mat.convection_coeff * dt / (mat.volumetric_heat_capacity * dz)
        p = np.flatnonzero(occ[-1]) + (nk - 1) * ny * nx
        diag[p] -= c
        forcing[p] += c * mat.ambient_temp
    elif top_boundary == "dirichlet":
        t_top = np.broadcast_to(
            mat.ambient_temp if top_temps is None else np.asarray(top_temps, dtype=float),
            (ny, nx)).ravel()
        p = np.flatnonzero(occ[-1])
        diag[p + (nk - 1) * ny * nx] -= fz
        forcing[p + (nk - 1) * ny * nx] += fz * t_top[p]

    if ghost_solid is not None:
        gmask = occ[0] & np.asarray(ghost_solid, dtype=bool)
        p = np.flatnonzero(gmask)
        diag[p] -= fz
        forcing[p] += fz * np.asarray(ghost_temps, dtype=float).ravel()[p]

    if np.any(diag < -1e-12):
        raise SimulationError("unstable step: negative diagonal entries")

    idx = np.arange(n)
    rows.append(idx)
    cols.append(idx)
    vals.append(diag)
    matrix = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n)).tocsr()
    return StepOperator(matrix, forcing, (nk, ny, nx))


# ---------------------------------------------------------------------------
# heat deposit

def deposit_source(field: np.ndarray, occ: np.ndarray, grid: VoxelGrid,
                   k_lo: int, z_peak: float, laser_x: float, laser_y: float,
                   power: float, dt: float, mat: MaterialProps,
                   beam: BeamParams, trunc: float = 4.0) -> None:
    """Add one step's heat into ``field`` (window layers, ny, nx), in place.

    The per-cell share is the product of erf differences across the cell
    faces along each axis, with the depth axis renormalized so the column
    sum over the part is 1 (the source peak sits at z_peak, the top cell
    center, so half a cell of the nominal profile lies above the material).
    Only part cells receive energy.
    """
    if power <= 0:
        return
    nk, ny, nx = field.shape
    dx, dy, dz = grid.dx, grid.dy, grid.dz
    ox, oy = grid.origin.x, grid.origin.y
    cut = trunc * max(beam.r_x, beam.r_y, beam.r_z)

    i0 = max(0, int(math.floor((laser_x - cut - ox) / dx)))
    i1 = min(nx - 1, int(math.ceil((laser_x + cut - ox) / dx)))
    j0 = max(0, int(math.floor((laser_y - cut - oy) / dy)))
    j1 = min(ny - 1, int(math.ceil((laser_y + cut - oy) / dy)))
    if i1 < i0 or j1 < j0:
        return
    depth_cells = int(math.ceil(cut / dz)) + 1
    k1 = nk - 1                      # window top = current layer
    k0 = max(0, k1 - depth_cells)

    sq3 = math.sqrt(3.0)
    # face positions relative to the beam axis keep whole-cell shifts exact
    xf = np.arange(i0, i1 + 2) * dx + (ox - laser_x)
    yf = np.arange(j0, j1 + 2) * dy + (oy - laser_y)
    # global z faces; z_peak is the top cell center
    zf = (np.arange(k0, k1 + 2) + k_lo) * dz - z_peak
    ex = np.diff(erf(sq3 * xf / beam.r_x))
    ey = np.diff(erf(sq3 * yf / beam.r_y))
    ez = np.diff(erf(sq3 * zf / beam.r_z))
    s_z = 1.0 + erf(sq3 * dz / (2.0 * beam.r_z))

    cell_volume = dx * dy * dz
    coef = dt * beam.heat_factor * mat.absorptivity * power \
        / (mat.volumetric_heat_capacity * cell_volume)
    share = (ez[:, None, None] / s_z) * (ey[None, :, None] / 2.0) \
        * (ex[None, None, :] / 2.0)
    box = occ[k0:k1 + 1, j0:j1 + 1, i0:i1 + 1]
    field[k0:k1 + 1, j0:j1 + 1, i0:i1 + 1] += coef * np.where(box, share, 0.0)


def powder_subsurface_temperature(t_node: float, t_far: float, dz: float,
                                  alpha_powder: float, elapsed: float,
                                  terms: int = 51) -> float:
    """Temperature one cell below a surface node resting on loose powder.

    1D slab of powder, surface held at t_node, initially at t_far, evaluated
    at depth dz of a 4*dz-deep domain (insulated far end).  At elapsed = 0
    this returns t_far; for long dwells it relaxes to t_node.
    """
    m = np.arange(terms)
    odd = 2 * m + 1
    lam = math.pi * odd / (4.0 * dz)
    series = np.sum(((-1.0) ** m / odd)
                    * np.exp(-lam ** 2 * alpha_powder * elapsed)
                    * np.cos(math.pi * odd / 4.0))
    return t_node + (4.0 * (t_far - t_node) / math.pi) * float(series)


# ---------------------------------------------------------------------------
# build-level driver

class BuildThermalModel:
    """Steps the build layer by layer: spread, mark vectors, dwell.

    Layers must be started in order.  ``stack`` holds the last known image
    of every built layer; the explicit window covers the newest
    window_layers of them and is written back at each dwell.
    """

    def __init__(self, grid: VoxelGrid, mat: MaterialProps, beam: BeamParams,
                 cfg: ThermalConfig):
        check_stability(mat, grid.dx, grid.dy, grid.dz, cfg.dt)
        self.grid = grid
        self.mat = mat
        self.beam = beam
        self.cfg = cfg
        self.stack = np.zeros((0, grid.ny, grid.nx))
        self.k_top = -1
        self._k_lo = 0
        self._x: np.ndarray | None = None
        self._op: StepOperator | None = None

    # -- window bookkeeping

    @property
    def window(self) -> np.ndarray:
        """Live (layers, ny, nx) view of the explicit field."""
        nk = self.k_top - self._k_lo + 1
        return self._x.reshape(nk, self.grid.ny, self.grid.nx)

    def layer_image(self, k: int) -> np.ndarray:
        if k < 0 or k > self.k_top:
            raise SimulationError(f"layer {k} not built yet")
        if k >= self._k_lo and self._x is not None:
            return self.window[k - self._k_lo]
        return self.stack[k]

    def _plate_image(self) -> np.ndarray:
        return np.full((self.grid.ny, self.grid.nx), self.mat.baseplate_temp)

    def seed_substrate(self, n_layers: int) -> None:
        """Install ``n_layers`` of long-cooled material at the plate
        temperature before any scanning, standing in for a previously built
        stub the fixture is scanned on."""
        if self.k_top != -1:
            raise SimulationError("substrate must be seeded before scanning")
        if n_layers > self.grid.nz:
            raise SimulationError("substrate taller than the voxel grid")
        ny, nx = self.grid.ny, self.grid.nx
        self.stack = np.full((n_layers, ny, nx), self.mat.baseplate_temp)
        self.k_top = n_layers - 1
        self._k_lo = max(0, n_layers - self.cfg.window_layers)

    def start_layer(self, layer_index: int) -> None:
        """Spread layer ``layer_index``: new cells take the half-rule value
        of the image below, then the window operator is rebuilt."""
        if layer_index != self.k_top + 1:
            raise SimulationError(
                f"layers must be built in order: got {layer_index}, "
                f"expected {self.k_top + 1}")
        if layer_index >= self.grid.nz:
            raise SimulationError("layer outside the voxel grid")
        below = self.stack[-1] if self.k_top >= 0 else self._plate_image()
        fresh = half_temperature(below, self.mat.ambient_temp,
                                 self.cfg.half_rule_absolute)
        self.stack = np.concatenate((self.stack, fresh[None, :, :]))
        self.k_top = layer_index
        self._k_lo = max(0, self.k_top - self.cfg.window_layers + 1)
        self._x = self.stack[self._k_lo:].reshape(-1).copy()
        self._op = self._assemble()

    def _assemble(self) -> StepOperator:
        occ = self.grid.occupancy[self._k_lo:self.k_top + 1]
        ghost_temps = ghost_solid = None
        if self.cfg.bottom_boundary == "dirichlet" or \
                (self.cfg.bottom_boundary == "auto" and self._k_lo == 0):
            ghost_temps = self._plate_image()
            ghost_solid = np.ones((self.grid.ny, self.grid.nx), dtype=bool)
        elif self.cfg.bottom_boundary == "auto":
            ghost_temps = self.stack[self._k_lo - 1]
            ghost_solid = self.grid.occupancy[self._k_lo - 1]
        return assemble_operator(occ, self.grid.dx, self.grid.dy, self.grid.dz,
                                 self.cfg.dt, self.mat,
                                 top_boundary=self.cfg.top_boundary,
                                 ghost_temps=ghost_temps,
                                 ghost_solid=ghost_solid)

    # -- marking

    def step_vector(self, vec: ScanVector, power: float) -> None:
        """Advance the field over one vector at constant applied power."""
        if vec.layer_index != self.k_top:
            raise SimulationError("vector layer does not match current layer")
        if self._op is None:
            raise SimulationError("start_layer must be called first")
        dt = self.cfg.dt
        z_peak = (self.k_top + 0.5) * self.grid.dz
        occ = self.grid.occupancy[self._k_lo:self.k_top + 1]
        deposit = vec.is_mark and power > 0
        dx_vec = vec.end.x - vec.start.x
        dy_vec = vec.end.y - vec.start.y
        length = vec.length
        for m in range(vec.n_steps):
            self._x = self._op.step(self._x)
            if deposit:
                s = min(vec.speed * (m + 0.5) * dt, length)
                frac = s / length if length > 0 else 0.0
                deposit_source(self.window, occ, self.grid, self._k_lo,
                               z_peak, vec.start.x + frac * dx_vec,
                               vec.start.y + frac * dy_vec,
                               power, dt, self.mat, self.beam,
                               trunc=self.cfg.source_truncation)
        if not np.isfinite(self._x).all():
            raise SimulationError(
                f"non-finite field after vector {vec.id} "
                f"(steps {vec.start_step}..{vec.start_step + vec.n_steps - 1})")

    def subsurface_temperature(self, vec: ScanVector,
                               elapsed: float | None = None) -> float:
        """Temperature one layer below the vector, averaged over the cells
        it traverses, evaluated on the current field.

        Vectors over powder instead use the 1D powder response with the
        surface node at the traversed cells' own mean temperature.
        ``elapsed`` is the lag between this prediction and the scanning of
        the vector's nodes; it defaults to half the vector duration, the
        mean lag over the nodes.  Layer 0 rests on the plate.
        """
        cells = map_vector_to_elements(vec, self.grid)
        if vec.region_tag == "overhang":
            own = self.layer_image(vec.layer_index)
            t_node = float(np.mean([own[j, i] for i, j, _ in cells]))
            if elapsed is None:
                elapsed = 0.5 * vec.duration
            return powder_subsurface_temperature(
                t_node, self.mat.baseplate_temp, self.grid.dz,
                self.mat.powder_diffusivity, elapsed)
        if vec.layer_index == 0:
            return self.mat.baseplate_temp
        k_below = vec.layer_index - 1
        occ_below = self.grid.occupancy[k_below]
        below = self.layer_image(k_below)
        vals = [below[j, i] for i, j, _ in cells if occ_below[j, i]]
        if not vals:
            return self.mat.baseplate_temp
        return float(np.mean(vals))

    # -- recoat

    def finish_layer(self, dwell_time: float) -> None:
        """Write the window back and cool the whole part over the dwell."""
        if self._x is None:
            raise SimulationError("no layer in progress")
        self.stack[self._k_lo:] = self.window
        self.stack = apply_interlayer_dwell(
            self.stack, self.grid.occupancy, dwell_time,
            self.grid.dz, self.grid.dx, self.mat,
            h=self.cfg.dwell_h,
            half_rule_absolute=self.cfg.half_rule_absolute,
            threads=self.cfg.dwell_threads,
            blur_mode=self.cfg.blur_mode)
        self._x = self.stack[self._k_lo:].reshape(-1).copy()
