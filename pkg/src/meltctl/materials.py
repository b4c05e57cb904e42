"""Thermophysical constants, beam parameters, and per-alloy process presets."""
from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class MaterialProps:
    """Bulk solid properties plus the powder knock-down factors.

    Powder is modeled with 48% of the solid density and 10% of the solid
    conductivity; everything else is shared with the solid.
    """

    name: str
    density: float            # kg/m^3
    heat_capacity: float      # J/(kg K)
    conductivity: float       # W/(m K)
    convection_coeff: float   # W/(m^2 K), top-surface film coefficient
    melting_temp: float       # K
    ambient_temp: float       # K
    baseplate_temp: float     # K
    absorptivity: float       # laser absorptivity, dimensionless
    powder_density_factor: float = 0.48
    powder_conductivity_factor: float = 0.10

    @property
    def diffusivity(self) -> float:
        """Thermal diffusivity alpha = k / (rho * c_p), m^2/s."""
        return self.conductivity / (self.density * self.heat_capacity)

    @property
    def volumetric_heat_capacity(self) -> float:
        """rho * c_p, J/(m^3 K)."""
        return self.density * self.heat_capacity

    @property
    def powder_diffusivity(self) -> float:
        """Diffusivity of loose powder, m^2/s."""
        k_p = self.powder_conductivity_factor * self.conductivity
        rho_p = self.powder_density_factor * self.density
        return k_p / (rho_p * self.heat_capacity)

    def validate(self) -> None:
        for name in ("density", "heat_capacity", "conductivity", "melting_temp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"material {self.name}: {name} must be positive")
        if self.convection_coeff < 0:
            raise ValueError(f"material {self.name}: convection_coeff must be >= 0")
        if not (0 < self.absorptivity <= 1):
            raise ValueError(f"material {self.name}: absorptivity must be in (0, 1]")
        if self.melting_temp <= self.ambient_temp:
            raise ValueError(f"material {self.name}: melting_temp must exceed ambient_temp")


@dataclass
class BeamParams:
    """Gaussian heat-source geometry and the calibrated heat input factor."""

    spot_size: float = 78e-6       # m, full spot diameter
    heat_factor: float = 1.0       # multiplies absorbed power fed to the grid
    r_x: float = field(default=0.0)
    r_y: float = field(default=0.0)
    r_z: float = field(default=0.0)

    def __post_init__(self):
        r = 0.5 * self.spot_size
        if self.r_x <= 0:
            self.r_x = r
        if self.r_y <= 0:
            self.r_y = r
        if self.r_z <= 0:
            self.r_z = r
        if self.heat_factor <= 0:
            raise ValueError("heat_factor must be positive")


IN718 = MaterialProps(
    name="IN718",
    density=8260.0,
    heat_capacity=543.0,
    conductivity=14.90,
    convection_coeff=20.0,
    melting_temp=1610.0,
    ambient_temp=293.0,
    baseplate_temp=293.0,
    absorptivity=0.33,
)

SS316L = MaterialProps(
    name="316LSS",
    density=7900.0,
    heat_capacity=434.0,
    conductivity=13.96,
    convection_coeff=20.0,
    melting_temp=1710.0,
    ambient_temp=293.0,
    baseplate_temp=293.0,
    absorptivity=0.33,
)

MATERIALS = {"IN718": IN718, "316LSS": SS316L}

# Bulk process settings per alloy: nominal power (W), scan speed (mm/s),
# melt-pool fit constants in the micrometre-output convention, heat factor,
# and the common melt-pool area target (mm^2).
PROCESS_PRESETS = {
    "IN718": {
        "power_nominal_W": 220.0,
        "speed_mm_s": 1000.0,
        "c_width": 261.0,
        "c_length": 499.0,
        "heat_factor": 4.0,
        "area_target_mm2": 0.0164,
    },
    "316LSS": {
        "power_nominal_W": 290.0,
        "speed_mm_s": 1200.0,
        "c_width": 256.0,
        "c_length": 529.0,
        "heat_factor": 2.5,
        "area_target_mm2": 0.0164,
    },
}


def get_material(name: str) -> MaterialProps:
    try:
        return MATERIALS[name]
    except KeyError:
        raise KeyError(f"unknown material {name!r}; choose from {sorted(MATERIALS)}") from None
