"""Vector-level feedforward laser power control for powder bed fusion.

A coarse explicit conduction model tracks the part layer by layer; an
analytical melt-pool model maps power, speed, and subsurface temperature to
melt area; the controller inverts that map per scan vector to hold the
area at a target.  Calibration utilities fit the melt-pool constants from
single-track data and recover the thermal model's heat factor from print
(or virtual-machine) measurements.
"""

__version__ = "0.1.0"

from .materials import MATERIALS, BeamParams, MaterialProps, get_material
from .meltpool import MeltPoolCoefficients, area, fit_coefficients
from .scanpath import GridConfig, load_build, load_scanpath
from .thermal import BuildThermalModel, SimulationError, ThermalConfig
from .controller import ControlConfig, PowerSchedule, run_feedforward
from .dwell import apply_interlayer_dwell
from .calibration import normalized_error, sweep_f, tune_target

__all__ = [
    "MATERIALS", "BeamParams", "MaterialProps", "get_material",
    "MeltPoolCoefficients", "area", "fit_coefficients",
    "GridConfig", "load_build", "load_scanpath",
    "BuildThermalModel", "SimulationError", "ThermalConfig",
    "ControlConfig", "PowerSchedule", "run_feedforward",
    "apply_interlayer_dwell",
    "normalized_error", "sweep_f", "tune_target",
    "__version__",
]
