"""Shared builders for the test suite: grid configs, tiny scan paths, and
an in-process CLI runner."""
import pytest

from meltctl.materials import IN718, PROCESS_PRESETS
from meltctl.meltpool import MeltPoolCoefficients
from meltctl.scanpath import (GridConfig, build_grid, parse_scanpath_lines,
                              subdivide_vectors)
from meltctl.thermal import stable_timestep

# default explicit step for the standard 90/40 um cell, half the bound
DT = stable_timestep(IN718, 90e-6, 90e-6, 40e-6)


def grid_config(**kw) -> GridConfig:
    kw.setdefault("dt", DT)
    return GridConfig(**kw)


def build_from_lines(lines, cfg):
    """parse -> grid -> subdivide, like load_build but from memory."""
    layers = parse_scanpath_lines(lines, cfg)
    grid = build_grid(layers, cfg)
    return subdivide_vectors(layers, grid, cfg), grid


def preset_coeffs(name: str = "IN718") -> MeltPoolCoefficients:
    p = PROCESS_PRESETS[name]
    return MeltPoolCoefficients.from_paper_units(p["c_width"], p["c_length"])


@pytest.fixture
def run_cli(tmp_path, monkeypatch, capsys):
    """Call the CLI entry point in-process from a temp working directory;
    returns (exit_code, stdout, stderr)."""
    from meltctl.cli import main

    def run(*argv, cwd=None):
        monkeypatch.chdir(cwd or tmp_path)
        code = main(list(argv))
        captured = capsys.readouterr()
        return code, captured.out, captured.err

    return run
