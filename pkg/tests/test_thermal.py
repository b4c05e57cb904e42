"""Explicit conduction operator, moving heat deposit, powder response,
and the layered build driver."""
import math

import numpy as np
import pytest
from scipy.special import erf

from conftest import DT, build_from_lines, grid_config
from meltctl.materials import IN718, BeamParams
from meltctl.scanpath import Point3, ScanVector, VoxelGrid
from meltctl.thermal import (BuildThermalModel, SimulationError,
                             ThermalConfig, assemble_operator, check_stability,
                             deposit_source, powder_subsurface_temperature,
                             stable_timestep)

DX = DY = 90e-6
DZ = 40e-6


def hand_grid(nx, ny, nz, occ=None):
    if occ is None:
        occ = np.ones((nz, ny, nx), dtype=bool)
    return VoxelGrid(dx=DX, dy=DY, dz=DZ, origin=Point3(0.0, 0.0, 0.0),
                     dims=(nx, ny, nz), occupancy=occ)


def make_model(grid, **cfg_kw):
    cfg_kw.setdefault("dt", DT)
    return BuildThermalModel(grid, IN718, BeamParams(), ThermalConfig(**cfg_kw))


# ------------------------------------------------------------- stability

def test_stable_timestep_value():
    # 1 / (2 * alpha * (1/dx^2 + 1/dy^2 + 1/dz^2)) for the standard cell
    limit = stable_timestep(IN718, DX, DY, DZ, safety=1.0)
    alpha = IN718.conductivity / (IN718.density * IN718.heat_capacity)
    expect = 1.0 / (2.0 * alpha * (1 / DX**2 + 1 / DY**2 + 1 / DZ**2))
    assert limit == pytest.approx(expect, rel=1e-12)
    assert limit == pytest.approx(1.7263e-4, rel=1e-3)
    assert DT == pytest.approx(0.5 * limit, rel=1e-12)


def test_unstable_step_rejected():
    with pytest.raises(SimulationError, match="stab"):
        check_stability(IN718, DX, DY, DZ, 2e-4)
    check_stability(IN718, DX, DY, DZ, 1.7e-4)  # inside the bound


def test_operator_rejects_unstable_dt():
    occ = np.ones((2, 3, 3), dtype=bool)
    with pytest.raises(SimulationError):
        assemble_operator(occ, DX, DY, DZ, 5e-4, IN718,
                          top_boundary="insulated")


# ----------------------------------------------------------- pure stepping

def test_uniform_field_is_fixed_point_when_insulated():
    rng = np.random.default_rng(3)
    occ = rng.random((5, 12, 14)) > 0.4
    occ[2, 6, 7] = True
    op = assemble_operator(occ, DX, DY, DZ, DT, IN718,
                           top_boundary="insulated")
    x = np.full(occ.size, 777.0)
    for _ in range(50):
        x = op.step(x)
    assert np.max(np.abs(x - 777.0)) < 1e-9


def test_column_relaxes_to_linear_profile():
    # plate at 293 below, fixed 693 above: steady state is linear through
    # the ghost values
    n = 8
    occ = np.ones((n, 1, 1), dtype=bool)
    op = assemble_operator(occ, DX, DY, DZ, DT, IN718,
                           top_boundary="dirichlet", top_temps=693.0,
                           ghost_temps=np.full((1, 1), 293.0),
                           ghost_solid=np.ones((1, 1), dtype=bool))
    x = np.full(n, 293.0)
    for _ in range(4000):
        x = op.step(x)
    expect = 293.0 + (np.arange(n) + 1) / (n + 1) * 400.0
    assert np.max(np.abs(x - expect)) < 1e-6


def test_insulated_step_conserves_heat():
    rng = np.random.default_rng(8)
    occ = np.ones((4, 9, 9), dtype=bool)
    op = assemble_operator(occ, DX, DY, DZ, DT, IN718,
                           top_boundary="insulated")
    x = rng.uniform(400.0, 900.0, occ.size)
    total = x.sum()
    for _ in range(100):
        x = op.step(x)
        assert x.sum() == pytest.approx(total, rel=1e-12)


def test_powder_cells_hold_their_value():
    occ = np.ones((3, 5, 5), dtype=bool)
    occ[:, 2, 2] = False
    op = assemble_operator(occ, DX, DY, DZ, DT, IN718,
                           top_boundary="convection")
    x = np.full(occ.size, 600.0)
    x3 = x.reshape(3, 5, 5)
    x3[:, 2, 2] = 450.0
    for _ in range(25):
        x = op.step(x)
    assert np.all(x.reshape(3, 5, 5)[:, 2, 2] == 450.0)


def test_convection_pulls_top_toward_ambient():
    occ = np.ones((3, 4, 4), dtype=bool)
    op = assemble_operator(occ, DX, DY, DZ, DT, IN718,
                           top_boundary="convection")
    x = np.full(occ.size, 800.0)
    prev = 800.0
    for _ in range(200):
        x = op.step(x)
        cur = x.max()
        assert cur <= prev + 1e-12
        prev = cur
    assert prev < 800.0
    assert x.min() >= IN718.ambient_temp - 1e-9


# ------------------------------------------------------------ heat deposit

def wide_flat_grid(nx=40, ny=40, nz=1):
    return hand_grid(nx, ny, nz)


def test_zero_power_deposits_nothing():
    grid = wide_flat_grid()
    field = np.zeros((1, 40, 40))
    deposit_source(field, grid.occupancy, grid, 0, 0.5 * DZ,
                   1.8e-3, 1.8e-3, 0.0, DT, IN718, BeamParams())
    assert not field.any()


def test_single_layer_column_share_matches_closed_form():
    # top cell spans z_peak +/- dz/2, so the depth share is
    # 2*erf(sqrt(3)dz/(2 r_z)) renormalized by 1 + erf(sqrt(3)dz/(2 r_z))
    grid = wide_flat_grid()
    beam = BeamParams()
    field = np.zeros((1, 40, 40))
    deposit_source(field, grid.occupancy, grid, 0, 0.5 * DZ,
                   1.8e-3, 1.8e-3, 200.0, DT, IN718, beam)
    xq = math.sqrt(3.0) * DZ / (2.0 * beam.r_z)
    share_z = 2.0 * erf(xq) / (1.0 + erf(xq))
    injected = field.sum() * IN718.volumetric_heat_capacity * DX * DY * DZ
    expect = DT * beam.heat_factor * IN718.absorptivity * 200.0 * share_z
    assert injected == pytest.approx(expect, rel=1e-9)


def test_deep_part_absorbs_full_power():
    grid = hand_grid(30, 30, 8)
    beam = BeamParams(heat_factor=2.5)
    field = np.zeros((8, 30, 30))
    deposit_source(field, grid.occupancy, grid, 0, 7.5 * DZ,
                   1.35e-3, 1.35e-3, 180.0, DT, IN718, beam)
    injected = field.sum() * IN718.volumetric_heat_capacity * DX * DY * DZ
    expect = DT * 2.5 * IN718.absorptivity * 180.0
    assert injected == pytest.approx(expect, rel=1e-9)


def test_whole_cell_shift_moves_pattern_exactly():
    grid = hand_grid(30, 30, 8)
    f1 = np.zeros((8, 30, 30))
    f2 = np.zeros((8, 30, 30))
    x0, y0 = 1.08e-3, 1.26e-3
    deposit_source(f1, grid.occupancy, grid, 0, 7.5 * DZ, x0, y0,
                   220.0, DT, IN718, BeamParams())
    deposit_source(f2, grid.occupancy, grid, 0, 7.5 * DZ, x0 + 3 * DX,
                   y0 - 2 * DY, 220.0, DT, IN718, BeamParams())
    assert np.allclose(np.roll(f1, (3, -2), axis=(2, 1)), f2,
                       rtol=1e-9, atol=1e-12)


def test_sub_voxel_shift_conserves_total():
    grid = hand_grid(30, 30, 8)
    rng = np.random.default_rng(12)
    totals = []
    for _ in range(25):
        field = np.zeros((8, 30, 30))
        deposit_source(field, grid.occupancy, grid, 0, 7.5 * DZ,
                       1.08e-3 + rng.uniform(0, DX),
                       1.26e-3 + rng.uniform(0, DY),
                       220.0, DT, IN718, BeamParams())
        totals.append(field.sum())
    totals = np.asarray(totals)
    assert np.ptp(totals) <= 1e-9 * totals.mean()


def test_powder_cells_receive_no_heat():
    occ = np.ones((1, 40, 40), dtype=bool)
    occ[0, :, 20:] = False
    grid = hand_grid(40, 40, 1, occ)
    field = np.zeros((1, 40, 40))
    deposit_source(field, occ, grid, 0, 0.5 * DZ, 1.8e-3, 1.8e-3,
                   200.0, DT, IN718, BeamParams())
    assert not field[0, :, 20:].any()
    assert field[0, :, :20].any()


# --------------------------------------------------------- powder response

ALPHA_P = IN718.powder_diffusivity


def test_powder_diffusivity_uses_packing_factors():
    expect = (IN718.conductivity * 0.10) / (IN718.density * 0.48
                                            * IN718.heat_capacity)
    assert ALPHA_P == pytest.approx(expect, rel=1e-12)


def test_powder_series_reference_values():
    # frozen from a 50-digit evaluation of the same 51-term series
    got = powder_subsurface_temperature(700.0, 293.0, DZ, ALPHA_P, 2e-4)
    assert got == pytest.approx(299.59893205690618, rel=1e-12)
    got = powder_subsurface_temperature(700.0, 293.0, DZ, ALPHA_P, 1e-3)
    assert got == pytest.approx(408.41414054527135, rel=1e-12)


def test_powder_series_limits():
    # at zero lag the node has not yet felt the surface: far-field value
    # (to truncation error of the 51-term sum)
    t0 = powder_subsurface_temperature(700.0, 293.0, DZ, ALPHA_P, 0.0)
    assert abs(t0 - 293.0) <= 1e-3 * (700.0 - 293.0)
    # long lag: fully relaxed to the node temperature
    t_inf = powder_subsurface_temperature(700.0, 293.0, DZ, ALPHA_P, 10.0)
    assert t_inf == pytest.approx(700.0, abs=1e-9)


def test_powder_series_monotone_in_elapsed():
    times = np.linspace(0.0, 5e-3, 30)
    vals = [powder_subsurface_temperature(700.0, 293.0, DZ, ALPHA_P, t)
            for t in times]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))


# ------------------------------------------------------------ build driver

def test_first_layer_reads_baseplate_exactly():
    layers, grid = build_from_lines(
        ["layer 1 z 0.04", "mark 0 0 1 0 1000"], grid_config())
    model = make_model(grid)
    model.start_layer(0)
    vec = layers[0].vectors[0]
    assert model.subsurface_temperature(vec) == IN718.baseplate_temp


def test_subsurface_mean_skips_powder_cells():
    occ = np.ones((2, 1, 6), dtype=bool)
    occ[0, 0, 2:4] = False
    grid = hand_grid(6, 1, 2, occ)
    model = make_model(grid)
    model.start_layer(0)
    model.stack[0][0] = [300.0, 310.0, 320.0, 330.0, 340.0, 350.0]
    model.start_layer(1)
    vec = ScanVector(id=0, layer_index=1,
                     start=Point3(0.5 * DX, 0.5 * DY, 2 * DZ),
                     end=Point3(5.5 * DX, 0.5 * DY, 2 * DZ),
                     speed=1.0, power_nominal=float("nan"), is_mark=True,
                     duration=5 * DX)
    got = model.subsurface_temperature(vec)
    assert got == pytest.approx(np.mean([300.0, 310.0, 340.0, 350.0]),
                                rel=1e-12)


def test_overhang_uses_powder_series_with_half_duration_lag():
    occ = np.ones((2, 1, 6), dtype=bool)
    occ[0] = False          # nothing solid below: pure overhang geometry
    grid = hand_grid(6, 1, 2, occ)
    model = make_model(grid)
    model.start_layer(0)
    model.start_layer(1)
    model.window[1, 0, :] = 640.0
    vec = ScanVector(id=0, layer_index=1,
                     start=Point3(0.5 * DX, 0.5 * DY, 2 * DZ),
                     end=Point3(5.5 * DX, 0.5 * DY, 2 * DZ),
                     speed=1.0, power_nominal=float("nan"), is_mark=True,
                     duration=4.5e-4, region_tag="overhang")
    got = model.subsurface_temperature(vec)
    expect = powder_subsurface_temperature(
        640.0, IN718.baseplate_temp, DZ, ALPHA_P, 0.5 * vec.duration)
    assert got == pytest.approx(expect, rel=1e-12)
    # explicit lag overrides the half-duration default
    later = model.subsurface_temperature(vec, elapsed=5e-3)
    assert later > got


def test_step_vector_matches_manual_loop_bitwise():
    lines = ["layer 1 z 0.04",
             "mark 0 0 1 0 1000",
             "mark 1 0.09 0 0.09 1000"]
    cfg = grid_config(substrate_layers=1)
    layers, grid = build_from_lines(lines, cfg)
    vec = layers[0].vectors[0]

    models = []
    for _ in range(2):
        m = make_model(grid)
        m.seed_substrate(1)
        m.start_layer(vec.layer_index)
        models.append(m)
    a, b = models

    a.step_vector(vec, 180.0)

    occ = grid.occupancy[b._k_lo:b.k_top + 1]
    z_peak = (b.k_top + 0.5) * grid.dz
    for m in range(vec.n_steps):
        b._x = b._op.step(b._x)
        s = min(vec.speed * (m + 0.5) * b.cfg.dt, vec.length)
        frac = s / vec.length
        deposit_source(b.window, occ, grid, b._k_lo, z_peak,
                       vec.start.x + frac * (vec.end.x - vec.start.x),
                       vec.start.y + frac * (vec.end.y - vec.start.y),
                       180.0, b.cfg.dt, b.mat, b.beam,
                       trunc=b.cfg.source_truncation)
    assert np.array_equal(a._x, b._x)


def test_zero_power_vector_leaves_ambient_field_alone():
    lines = ["layer 1 z 0.04", "mark 0 0 1 0 1000"]
    layers, grid = build_from_lines(lines, grid_config())
    model = make_model(grid)
    model.start_layer(0)
    vec = layers[0].vectors[0]
    model.step_vector(vec, 0.0)
    assert np.max(np.abs(model._x - 293.0)) < 1e-9


def test_skywrite_only_cools():
    cfg = grid_config(substrate_layers=1)
    lines = ["layer 1 z 0.04", "mark 0 0 1 0 1000", "jump",
             "mark 1 0.09 0 0.09 1000"]
    layers, grid = build_from_lines(lines, cfg)
    model = make_model(grid)
    model.seed_substrate(1)
    model.start_layer(layers[0].layer_index)
    mark, sky = layers[0].vectors[0], layers[0].vectors[1]
    model.step_vector(mark, 220.0)
    hot = model._x.max()
    model.step_vector(sky, 220.0)  # power ignored on skywrites
    assert model._x.max() < hot
    assert model._x.min() >= 293.0 - 1e-9


def test_layers_must_start_in_order():
    grid = hand_grid(4, 4, 3)
    model = make_model(grid)
    with pytest.raises(SimulationError, match="order"):
        model.start_layer(1)
    model.start_layer(0)
    with pytest.raises(SimulationError, match="order"):
        model.start_layer(2)


def test_start_layer_beyond_grid_rejected():
    grid = hand_grid(4, 4, 2)
    model = make_model(grid)
    model.start_layer(0)
    model.start_layer(1)
    with pytest.raises(SimulationError, match="grid"):
        model.start_layer(2)


def test_substrate_seeding_rules():
    grid = hand_grid(4, 4, 3)
    model = make_model(grid)
    with pytest.raises(SimulationError, match="taller"):
        model.seed_substrate(4)
    model.seed_substrate(2)
    assert model.k_top == 1
    assert np.all(model.stack == IN718.baseplate_temp)
    with pytest.raises(SimulationError, match="before"):
        model.seed_substrate(1)


def test_fresh_layer_half_rule():
    grid = hand_grid(3, 3, 2)
    model = make_model(grid)
    model.start_layer(0)
    model.stack[0][:] = 800.0
    model.start_layer(1)
    assert np.allclose(model.window[1], 0.5 * (800.0 + 293.0))

    absolute = make_model(grid, half_rule_absolute=True)
    absolute.start_layer(0)
    absolute.stack[0][:] = 800.0
    absolute.start_layer(1)
    assert np.allclose(absolute.window[1], 400.0)


def test_window_eviction_after_thirty_layers():
    grid = hand_grid(2, 2, 32)
    model = make_model(grid)
    for k in range(30):
        model.start_layer(k)
    assert model._k_lo == 0           # whole part still resolved
    model.start_layer(30)
    assert model._k_lo == 1           # oldest layer dropped from the window
    assert model.window.shape[0] == 30
    # evicted layer still readable from the stored stack
    assert model.layer_image(0).shape == (2, 2)


def test_non_finite_field_aborts_with_vector_id():
    lines = ["layer 1 z 0.04", "mark 0 0 1 0 1000"]
    layers, grid = build_from_lines(lines, grid_config())
    model = make_model(grid)
    model.start_layer(0)
    vec = layers[0].vectors[0]
    with np.errstate(invalid="ignore"), \
            pytest.raises(SimulationError, match=f"vector {vec.id}"):
        model.step_vector(vec, 1e308)


def test_finish_layer_requires_layer_in_progress():
    grid = hand_grid(3, 3, 2)
    model = make_model(grid)
    with pytest.raises(SimulationError):
        model.finish_layer(10.0)
