"""Scan-path ingestion: text-format parsing, voxel grid construction,
supercover line traversal, and occupancy-driven vector subdivision.

File format (lengths in mm, speeds in mm/s, powers in W):

    # comment
    layer <n> z <z_mm>
    mark <x0> <y0> <x1> <y1> <speed_mm_s> [power_W]
    jump [duration_ms]

``layer`` numbers are 1-based and must be strictly increasing.  ``jump``
records the laser-off time between marks; with no argument the configured
skywrite time is used.  Marks not separated by a jump run back to back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

MM = 1e-3
# ceil() guard against float quotients landing epsilon above an integer
_CEIL_EPS = 1e-9


class ScanPathError(ValueError):
    """Malformed scan-path file or geometry inconsistent with the grid."""


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float  # m, scan plane height (top of the vector's layer)


@dataclass
class ScanVector:
    """One laser segment: a mark (laser on) or a jump/skywrite (laser off)."""

    id: int
    layer_index: int          # global layer number, 0-based, substrate included
    start: Point3
    end: Point3
    speed: float              # m/s, > 0 for marks, 0 for jumps
    power_nominal: float      # W, file value or configured default
    is_mark: bool
    duration: float           # s; length/speed for marks, timed for jumps
    n_steps: int = 0          # thermal steps assigned to this vector
    start_step: int = 0       # cumulative step offset within the layer
    region_tag: str = "bulk"  # "bulk" | "overhang" | "subdivided_turnaround"
    parent_id: int | None = None

    @property
    def length(self) -> float:
        return math.hypot(self.end.x - self.start.x, self.end.y - self.start.y)


@dataclass
class LayerScan:
    layer_index: int          # global 0-based index (includes substrate offset)
    z_height: float           # m, scan plane
    vectors: list[ScanVector]
    hatch_angle: float = 0.0  # degrees, metadata only
    file_layer: int = 0       # layer number as written in the file (1-based)


@dataclass(frozen=True)
class GridConfig:
    """Discretization shared by the parser, thermal model, and controller."""

    dt: float                       # s, thermal step
    hatch: float = 90e-6            # m, in-plane cell size == hatch spacing
    layer_thickness: float = 40e-6  # m
    skywrite_time: float = 1.8e-3   # s, default jump duration
    margin_cells: int = 3           # padding added around the scanned bbox
    substrate_layers: int = 0       # solid layers pre-existing below layer 1
    bounds: tuple | None = None     # ((xmin, xmax), (ymin, ymax)) in m, optional
    merge_fraction: float = 0.25    # fragments shorter than this * hatch merge

    def __post_init__(self):
        if self.dt <= 0:
            raise ScanPathError("dt must be positive")
        if self.hatch <= 0 or self.layer_thickness <= 0:
            raise ScanPathError("hatch and layer_thickness must be positive")


@dataclass
class VoxelGrid:
    dx: float
    dy: float
    dz: float
    origin: Point3                # min corner of cell (0, 0, 0)
    dims: tuple[int, int, int]    # (nx, ny, nz)
    occupancy: np.ndarray         # bool, shape (nz, ny, nx); True = part

    @property
    def nx(self) -> int:
        return self.dims[0]

    @property
    def ny(self) -> int:
        return self.dims[1]

    @property
    def nz(self) -> int:
        return self.dims[2]

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        i = _cell_index((x - self.origin.x) / self.dx, self.nx)
        j = _cell_index((y - self.origin.y) / self.dy, self.ny)
        return i, j

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        return (self.origin.x + (i + 0.5) * self.dx,
                self.origin.y + (j + 0.5) * self.dy)

    def contains(self, x: float, y: float) -> bool:
        return (self.origin.x <= x <= self.origin.x + self.nx * self.dx
                and self.origin.y <= y <= self.origin.y + self.ny * self.dy)

    def solid_below(self, layer_k: int, i: int, j: int) -> bool:
        """Is the support under (i, j) at layer_k solid?  The build plate
        under layer 0 counts as solid."""
        if layer_k == 0:
            return True
        return bool(self.occupancy[layer_k - 1, j, i])


def _ceil_steps(duration: float, dt: float) -> int:
    return max(1, int(math.ceil(duration / dt - _CEIL_EPS)))


def _cell_index(u: float, n: int) -> int:
    i = int(math.floor(u))
    return min(max(i, 0), n - 1)


# ---------------------------------------------------------------------------
# parsing

def load_scanpath(path, cfg: GridConfig) -> list[LayerScan]:
    """Parse a scan-path file into per-layer vector lists.

    Jumps are materialized as laser-off vectors spanning the gap between the
    surrounding marks.  Step counts and step offsets are assigned against
    cfg.dt.  Returns [] for an empty file.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    return parse_scanpath_lines(lines, cfg, name=str(path))


def parse_scanpath_lines(lines, cfg: GridConfig, name: str = "<memory>") -> list[LayerScan]:
    layers: list[LayerScan] = []
    # records of the current layer: ("mark", x0, y0, x1, y1, v, P) / ("jump", dur)
    records: list[tuple] = []
    current: dict | None = None
    last_file_layer = 0

    def flush():
        if current is None:
            return
        layers.append(_materialize_layer(current, records, cfg, name))
        records.clear()

    for ln, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        tok = text.split()
        kind = tok[0]
        if kind in ("mark", "jump") and current is None:
            raise ScanPathError(f"{name} line {ln}: {kind} record before any layer header")
        if kind == "layer":
            if len(tok) != 4 or tok[2] != "z":
                raise ScanPathError(f"{name} line {ln}: expected 'layer <n> z <mm>'")
            flush()
            try:
                n_file = int(tok[1])
                z_mm = float(tok[3])
            except ValueError:
                raise ScanPathError(f"{name} line {ln}: bad layer header numbers") from None
            if n_file <= last_file_layer:
                raise ScanPathError(
                    f"{name} line {ln}: layer numbers must increase (got {n_file} after {last_file_layer})")
            last_file_layer = n_file
            k = cfg.substrate_layers + (n_file - 1)
            z = z_mm * MM + cfg.substrate_layers * cfg.layer_thickness
            if abs(z - (k + 1) * cfg.layer_thickness) > 1e-9:
                raise ScanPathError(
                    f"{name} line {ln}: z={z_mm} mm is not layer {n_file} * "
                    f"{cfg.layer_thickness / MM} mm within 1e-9")
            current = {"k": k, "z": z, "file_layer": n_file}
        elif kind == "mark":
            if len(tok) not in (6, 7):
                raise ScanPathError(f"{name} line {ln}: expected 'mark x0 y0 x1 y1 speed [power]'")
            try:
                vals = [float(t) for t in tok[1:]]
            except ValueError:
                raise ScanPathError(f"{name} line {ln}: bad mark numbers") from None
            if vals[4] <= 0:
                raise ScanPathError(f"{name} line {ln}: mark speed must be positive")
            power = vals[5] if len(vals) == 6 else math.nan
            records.append(("mark", ln, vals[0] * MM, vals[1] * MM, vals[2] * MM,
                            vals[3] * MM, vals[4] * MM, power))
        elif kind == "jump":
            if len(tok) > 2:
                raise ScanPathError(f"{name} line {ln}: expected 'jump [duration_ms]'")
            if len(tok) == 2:
                try:
                    dur = float(tok[1]) * 1e-3
                except ValueError:
                    raise ScanPathError(f"{name} line {ln}: bad jump duration") from None
            else:
                dur = cfg.skywrite_time
            if dur < 0:
                raise ScanPathError(f"{name} line {ln}: jump duration must be >= 0")
            records.append(("jump", ln, dur))
        else:
            raise ScanPathError(f"{name} line {ln}: unknown record {kind!r}")
    flush()
    return layers


def _materialize_layer(header: dict, records: list, cfg: GridConfig, name: str) -> LayerScan:
    k, z = header["k"], header["z"]
    vectors: list[ScanVector] = []
    pending_jumps: list[float] = []
    last_end: Point3 | None = None

    for rec in records:
        if rec[0] == "jump":
            pending_jumps.append(rec[2])
            continue
        _, ln, x0, y0, x1, y1, speed, power = rec
        start = Point3(x0, y0, z)
        end = Point3(x1, y1, z)
        for dur in pending_jumps:
            j_start = last_end if last_end is not None else start
            vectors.append(ScanVector(
                id=-1, layer_index=k, start=j_start, end=start, speed=0.0,
                power_nominal=0.0, is_mark=False, duration=dur))
        pending_jumps.clear()
        length = math.hypot(x1 - x0, y1 - y0)
        vectors.append(ScanVector(
            id=-1, layer_index=k, start=start, end=end, speed=speed,
            power_nominal=power, is_mark=True, duration=length / speed))
        last_end = end
    # trailing jumps: dwell in place at the last mark's end
    for dur in pending_jumps:
        anchor = last_end if last_end is not None else Point3(0.0, 0.0, z)
        vectors.append(ScanVector(
            id=-1, layer_index=k, start=anchor, end=anchor, speed=0.0,
            power_nominal=0.0, is_mark=False, duration=dur))

    layer = LayerScan(layer_index=k, z_height=z, vectors=vectors,
                      file_layer=header["file_layer"])
    return layer


def assign_timeline(layers: list[LayerScan], cfg: GridConfig, start_id: int = 0) -> int:
    """Assign sequential ids, per-vector step counts, and per-layer step
    offsets.  Returns the next unused id."""
    vid = start_id
    for layer in layers:
        step = 0
        for v in layer.vectors:
            v.id = vid
            vid += 1
            v.n_steps = _ceil_steps(v.duration, cfg.dt)
            v.start_step = step
            step += v.n_steps
    return vid


# ---------------------------------------------------------------------------
# grid construction

def build_grid(layers: list[LayerScan], cfg: GridConfig) -> VoxelGrid:
    """Build the voxel grid covering all vectors (plus margin) and rasterize
    per-layer occupancy from the mark centerlines.  Substrate layers are
    solid across the whole footprint."""
    h = cfg.hatch
    if cfg.bounds is not None:
        (xmin, xmax), (ymin, ymax) = cfg.bounds
    else:
        xs, ys = [], []
        for layer in layers:
            for v in layer.vectors:
                if v.is_mark:
                    xs += [v.start.x, v.end.x]
                    ys += [v.start.y, v.end.y]
        if not xs:
            xs, ys = [0.0], [0.0]
        # Half-cell shift keeps hatch-aligned tracks on cell centers; lines
        # landing exactly on cell boundaries rasterize unpredictably.
        m = cfg.margin_cells * h + 0.5 * h
        xmin, xmax = min(xs) - m, max(xs) + m
        ymin, ymax = min(ys) - m, max(ys) + m
    nx = max(1, int(math.ceil((xmax - xmin) / h - _CEIL_EPS)))
    ny = max(1, int(math.ceil((ymax - ymin) / h - _CEIL_EPS)))
    top_k = max((layer.layer_index for layer in layers), default=cfg.substrate_layers - 1)
    nz = max(top_k + 1, cfg.substrate_layers, 1)

    occupancy = np.zeros((nz, ny, nx), dtype=bool)
    occupancy[:cfg.substrate_layers] = True
    grid = VoxelGrid(dx=h, dy=h, dz=cfg.layer_thickness,
                     origin=Point3(xmin, ymin, 0.0), dims=(nx, ny, nz),
                     occupancy=occupancy)

    for layer in layers:
        for v in layer.vectors:
            if not v.is_mark:
                continue
            for x, y in ((v.start.x, v.start.y), (v.end.x, v.end.y)):
                if not grid.contains(x, y):
                    raise ScanPathError(
                        f"vector endpoint ({x / MM:.3f}, {y / MM:.3f}) mm outside grid bounds")
            for i, j in traverse_cells(grid, v.start.x, v.start.y, v.end.x, v.end.y):
                occupancy[layer.layer_index, j, i] = True
    return grid


# ---------------------------------------------------------------------------
# supercover traversal

def traverse_cells(grid: VoxelGrid, x0: float, y0: float, x1: float, y1: float) -> list[tuple[int, int]]:
    """Ordered distinct (i, j) cells touched by the segment (supercover:
    exact corner crossings include both side cells).  Zero-length segments
    map to their single containing cell."""
    ax = (x0 - grid.origin.x) / grid.dx
    ay = (y0 - grid.origin.y) / grid.dy
    bx = (x1 - grid.origin.x) / grid.dx
    by = (y1 - grid.origin.y) / grid.dy
    nx, ny = grid.nx, grid.ny

    # Endpoints exactly on a cell boundary (subdivision cuts land there)
    # must resolve to the segment's own side, so pull both ends inward a hair.
    seg = math.hypot(bx - ax, by - ay)
    if seg > 1e-9:
        e = min(1e-7 / seg, 0.25)
        ax, ay, bx, by = (ax + e * (bx - ax), ay + e * (by - ay),
                          bx - e * (bx - ax), by - e * (by - ay))

    i, j = _cell_index(ax, nx), _cell_index(ay, ny)
    cells = [(i, j)]
    dxs, dys = bx - ax, by - ay
    if math.hypot(dxs, dys) < 1e-12:
        return cells

    si = 1 if dxs > 0 else -1
    sj = 1 if dys > 0 else -1
    inv_x = abs(1.0 / dxs) if dxs != 0 else math.inf
    inv_y = abs(1.0 / dys) if dys != 0 else math.inf
    # parameter of the first gridline crossing along each axis
    if dxs > 0:
        tx = ((i + 1) - ax) * inv_x
    elif dxs < 0:
        tx = (ax - i) * inv_x
    else:
        tx = math.inf
    if dys > 0:
        ty = ((j + 1) - ay) * inv_y
    elif dys < 0:
        ty = (ay - j) * inv_y
    else:
        ty = math.inf

    eps = 1e-12
    end_t = 1.0 - 1e-9
    while True:
        t_next = min(tx, ty)
        if t_next >= end_t:
            break
        if abs(tx - ty) <= 1e-9:
            # corner crossing: the segment touches both side cells
            for ci, cj in ((i + si, j), (i, j + sj)):
                if 0 <= ci < nx and 0 <= cj < ny:
                    cells.append((ci, cj))
            i += si
            j += sj
            tx += inv_x
            ty += inv_y
        elif tx < ty:
            i += si
            tx += inv_x
        else:
            j += sj
            ty += inv_y
        if not (0 <= i < nx and 0 <= j < ny):
            break
        cells.append((i, j))

    seen = set()
    out = []
    for c in cells:
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


def map_vector_to_elements(v: ScanVector, grid: VoxelGrid) -> list[tuple[int, int, int]]:
    """Voxels (i, j, k) the vector passes over at its own layer."""
    k = v.layer_index
    return [(i, j, k) for i, j in traverse_cells(grid, v.start.x, v.start.y, v.end.x, v.end.y)]


def _cell_intervals(grid: VoxelGrid, x0, y0, x1, y1) -> list[tuple[float, float, int, int]]:
    """Partition [0, 1] along the segment into intervals each lying inside a
    single cell; returns (t0, t1, i, j) tuples.  Corner-touch side cells get
    no interval (zero measure)."""
    ax = (x0 - grid.origin.x) / grid.dx
    ay = (y0 - grid.origin.y) / grid.dy
    bx = (x1 - grid.origin.x) / grid.dx
    by = (y1 - grid.origin.y) / grid.dy
    dxs, dys = bx - ax, by - ay
    ts = {0.0, 1.0}
    for a, d in ((ax, dxs), (ay, dys)):
        if d == 0:
            continue
        lo, hi = (a, a + d) if d > 0 else (a + d, a)
        u = math.floor(lo) + 1
        while u < hi:
            t = (u - a) / d
            if 1e-12 < t < 1 - 1e-12:
                ts.add(t)
            u += 1
    ts = sorted(ts)
    out = []
    for t0, t1 in zip(ts[:-1], ts[1:]):
        if t1 - t0 < 1e-12:
            continue
        tm = 0.5 * (t0 + t1)
        i = _cell_index(ax + tm * dxs, grid.nx)
        j = _cell_index(ay + tm * dys, grid.ny)
        out.append((t0, t1, i, j))
    return out


# ---------------------------------------------------------------------------
# subdivision

def subdivide_vectors(layers: list[LayerScan], grid: VoxelGrid, cfg: GridConfig) -> list[LayerScan]:
    """Split mark vectors wherever the support class (solid vs powder) of the
    layer below changes, and tag each fragment bulk/overhang.

    Fragments shorter than cfg.merge_fraction * hatch are merged into the
    following fragment (preceding one at the vector end), so the operation is
    idempotent up to float round-off.  Laser-off vectors pass through.
    Total marked length per vector is preserved.
    """
    out_layers: list[LayerScan] = []
    for layer in layers:
        new_vectors: list[ScanVector] = []
        for v in layer.vectors:
            if not v.is_mark:
                new_vectors.append(replace(v))
                continue
            new_vectors.extend(_subdivide_one(v, grid, cfg))
        out_layers.append(LayerScan(
            layer_index=layer.layer_index, z_height=layer.z_height,
            vectors=new_vectors, hatch_angle=layer.hatch_angle,
            file_layer=layer.file_layer))
    assign_timeline(out_layers, cfg)
    return out_layers


def _subdivide_one(v: ScanVector, grid: VoxelGrid, cfg: GridConfig) -> list[ScanVector]:
    k = v.layer_index
    if k >= grid.nz:
        raise ScanPathError(f"vector {v.id}: occupancy missing for layer {k}")
    intervals = _cell_intervals(grid, v.start.x, v.start.y, v.end.x, v.end.y)
    if not intervals:
        return [replace(v)]

    # class per interval, then merge equal-class runs
    spans: list[list] = []  # [t0, t1, solid]
    for t0, t1, i, j in intervals:
        solid = grid.solid_below(k, i, j)
        if spans and spans[-1][2] == solid:
            spans[-1][1] = t1
        else:
            spans.append([t0, t1, solid])
    spans[0][0] = 0.0
    spans[-1][1] = 1.0
    if len(spans) == 1:
        tag = "bulk" if spans[0][2] else "overhang"
        return [replace(v, region_tag=tag)]

    # absorb sub-voxel fragments into a neighbor (keeps subdivision idempotent)
    min_len = cfg.merge_fraction * grid.dx
    seg_len = v.length
    while len(spans) > 1:
        lengths = [(t1 - t0) * seg_len for t0, t1, _ in spans]
        idx = min(range(len(spans)), key=lambda m: lengths[m])
        if lengths[idx] >= min_len:
            break
        if idx + 1 < len(spans):
            spans[idx + 1][0] = spans[idx][0]
        else:
            spans[idx - 1][1] = spans[idx][1]
        del spans[idx]

    frags = []
    for t0, t1, solid in spans:
        p0 = _lerp_point(v, t0)
        p1 = _lerp_point(v, t1)
        length = math.hypot(p1.x - p0.x, p1.y - p0.y)
        frags.append(ScanVector(
            id=-1, layer_index=k, start=p0, end=p1, speed=v.speed,
            power_nominal=v.power_nominal, is_mark=True,
            duration=length / v.speed,
            region_tag="bulk" if solid else "overhang",
            parent_id=v.id if v.parent_id is None else v.parent_id))
    return frags


def _lerp_point(v: ScanVector, t: float) -> Point3:
    if t <= 0.0:
        return v.start
    if t >= 1.0:
        return v.end
    return Point3(v.start.x + t * (v.end.x - v.start.x),
                  v.start.y + t * (v.end.y - v.start.y), v.start.z)


def load_build(path, cfg: GridConfig):
    """Convenience: parse, grid, subdivide, timeline.  Returns (layers, grid)."""
    layers = load_scanpath(path, cfg)
    grid = build_grid(layers, cfg)
    layers = subdivide_vectors(layers, grid, cfg)
    return layers, grid
