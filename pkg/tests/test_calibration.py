"""Heat-factor recovery loop: target tuning against a nominal power,
candidate scoring, and the virtual machine used as ground truth."""
import math

import numpy as np
import pytest

from conftest import DT, build_from_lines, grid_config, preset_coeffs
from meltctl.calibration import (CalibrationContext, VirtualMachine,
                                 evaluate_f, file_measure, normalized_error,
                                 read_areas_csv, schedule_measure, sweep_f,
                                 tune_target, write_areas_csv,
                                 write_tuning_csv)
from meltctl.controller import ControlConfig
from meltctl.fixtures import pyramid_bulk_window, stepped_pyramid_lines
from meltctl.materials import IN718, BeamParams
from meltctl.meltpool import area
from meltctl.thermal import ThermalConfig

C = preset_coeffs("IN718")


# --------------------------------------------------------------- the score

def test_normalized_error_hand_value():
    # areas {1, 1, 4}: mean 2, ||dev|| = sqrt(1 + 1 + 4) -> sqrt(6)/2
    assert normalized_error([1.0, 1.0, 4.0]) == pytest.approx(
        math.sqrt(6.0) / 2.0, rel=1e-12)


def test_normalized_error_zero_for_uniform():
    assert normalized_error([3.25, 3.25, 3.25]) == 0.0


def test_normalized_error_scale_and_order_invariant():
    rng = np.random.default_rng(1)
    a = rng.uniform(0.5, 2.0, 40)
    base = normalized_error(a)
    assert normalized_error(7.7 * a) == pytest.approx(base, rel=1e-12)
    assert normalized_error(np.flip(a)) == pytest.approx(base, rel=1e-12)


def test_normalized_error_input_validation():
    with pytest.raises(ValueError, match="no areas"):
        normalized_error([])
    with pytest.raises(ValueError, match="positive"):
        normalized_error([1.0, 0.0])


# ------------------------------------------------------------ tiny fixtures

def make_context(lines, substrate_layers, bulk_window, p_nominal,
                 dwell_time=10.0):
    cfg = grid_config(substrate_layers=substrate_layers)
    layers, grid = build_from_lines(lines, cfg)
    return CalibrationContext(
        layers=layers, grid=grid, mat=IN718, beam=BeamParams(),
        coeffs=C, control=ControlConfig(area_target=0.0164e-6),
        thermal=ThermalConfig(dt=DT), dwell_time=dwell_time,
        substrate_layers=substrate_layers, bulk_window=bulk_window,
        power_nominal=p_nominal)


@pytest.fixture(scope="module")
def tiny_pyramid():
    lines = stepped_pyramid_lines(widths_mm=(3.0, 2.0, 1.0),
                                  vectors_per_width=5)
    return make_context(lines, substrate_layers=5,
                        bulk_window=pyramid_bulk_window(5),
                        p_nominal=100.0)


def single_vector_context():
    return make_context(["layer 1 z 0.04", "mark 0 0 1 0 1000"],
                        substrate_layers=0, bulk_window=(-1e-3, 2e-3),
                        p_nominal=220.0)


# ------------------------------------------------------------ target tuning

def test_tune_single_plate_vector_is_exact():
    ctx = single_vector_context()
    target = tune_target(ctx, f=4.0)
    # t_sub is pinned at the plate, so the initial guess already holds
    assert target == area(220.0, 1.0, IN718.baseplate_temp, C, IN718)
    sched = ctx.run(4.0, target)
    assert sched.powers[0] == pytest.approx(220.0, rel=1e-9)


def test_tune_target_grows_with_nominal_power():
    ctx = single_vector_context()
    t220 = tune_target(ctx, f=4.0)
    t300 = tune_target(ctx, f=4.0, p_nominal=300.0)
    assert t300 > t220


def test_tune_then_run_hits_nominal_mean(tiny_pyramid):
    ctx = tiny_pyramid
    target = tune_target(ctx, f=2.5)
    sched = ctx.run(2.5, target)
    bulk = ctx.bulk_ids()
    mean_p = np.mean([e.power for e in sched if e.vector_id in bulk])
    assert mean_p == pytest.approx(100.0, rel=1e-3)


def test_tune_rejects_out_of_bounds_nominal(tiny_pyramid):
    with pytest.raises(ValueError, match="bounds"):
        tune_target(tiny_pyramid, f=2.5, p_nominal=600.0)


def test_tune_requires_nominal_somewhere():
    ctx = single_vector_context()
    ctx.power_nominal = None
    with pytest.raises(ValueError, match="nominal"):
        tune_target(ctx, f=4.0)


def test_bulk_window_must_contain_vectors():
    ctx = single_vector_context()
    ctx.bulk_window = (5e-3, 6e-3)
    with pytest.raises(ValueError, match="bulk window"):
        ctx.bulk_ids()
    ctx.bulk_window = None
    with pytest.raises(ValueError, match="bulk window"):
        ctx.bulk_ids()


# ------------------------------------------------------------- candidates

def test_evaluate_f_self_consistent_measure(tiny_pyramid):
    run = evaluate_f(tiny_pyramid, 2.5, schedule_measure)
    # the controller's own predictions sit on the tuned target
    assert run.epsilon < 1e-8
    assert run.areas.size == 15
    assert run.schedule is not None


def test_evaluate_f_input_validation(tiny_pyramid):
    with pytest.raises(ValueError, match="positive"):
        evaluate_f(tiny_pyramid, 0.0, schedule_measure)
    with pytest.raises(ValueError, match="areas for"):
        evaluate_f(tiny_pyramid, 2.5, lambda sched: np.ones(3))


def test_sweep_empty_candidates_rejected(tiny_pyramid):
    with pytest.raises(ValueError, match="empty"):
        sweep_f(tiny_pyramid, [], schedule_measure)


def test_sweep_recovers_hidden_heat_factor(tiny_pyramid):
    machine = VirtualMachine(tiny_pyramid, f_true=2.4)
    best, runs = sweep_f(tiny_pyramid, [1.5, 2.0, 2.5, 3.0], machine)
    eps = [r.epsilon for r in runs]
    assert best.f == 2.5            # nearest grid point to 2.4
    assert abs(best.f - 2.4) <= 0.5
    # the mismatch score dips at the recovered value
    assert eps[2] == min(eps)
    assert np.all(np.isfinite(best.areas)) and np.all(best.areas > 0)


def test_virtual_machine_at_controller_f_reproduces_predictions(tiny_pyramid):
    ctx = tiny_pyramid
    target = tune_target(ctx, 2.5)
    sched = ctx.run(2.5, target)
    machine = VirtualMachine(ctx, f_true=2.5)
    measured = machine(sched)
    assert np.allclose(measured, sched.areas, rtol=1e-12)


# --------------------------------------------------------------------- csv

def test_areas_csv_round_trip(tmp_path, tiny_pyramid):
    target = tune_target(tiny_pyramid, 2.5)
    sched = tiny_pyramid.run(2.5, target)
    path = tmp_path / "areas.csv"
    write_areas_csv(path, sched)
    table = read_areas_csv(path)
    assert set(table) == {e.vector_id for e in sched}
    for e in sched:
        assert table[e.vector_id] == pytest.approx(e.area, rel=1e-6)

    measure = file_measure(path)
    got = measure(sched)
    assert np.allclose(got, sched.areas, rtol=1e-6)


def test_areas_csv_errors(tmp_path, tiny_pyramid):
    bad = tmp_path / "bad.csv"
    bad.write_text("vector_id,area\n0,1.0\n")
    with pytest.raises(ValueError, match="area_mm2"):
        read_areas_csv(bad)

    target = tune_target(tiny_pyramid, 2.5)
    sched = tiny_pyramid.run(2.5, target)
    partial = tmp_path / "partial.csv"
    write_areas_csv(partial, sched)
    lines = partial.read_text().splitlines()
    partial.write_text("\n".join(lines[:-1]) + "\n")  # drop the last vector
    measure = file_measure(partial)
    with pytest.raises(ValueError, match="missing vectors"):
        measure(sched)


def test_tuning_csv_format(tmp_path, tiny_pyramid):
    run = evaluate_f(tiny_pyramid, 2.5, schedule_measure)
    path = tmp_path / "tune_report.csv"
    write_tuning_csv(path, [run])
    lines = path.read_text().splitlines()
    assert lines[0] == "# meltctl-csv 1"
    assert lines[1] == "f,Ac_target_mm2,epsilon"
    row = lines[2].split(",")
    assert float(row[0]) == 2.5
    assert float(row[1]) == pytest.approx(run.area_target * 1e6, rel=1e-6)
