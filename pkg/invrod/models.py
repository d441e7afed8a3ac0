import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Stiffness = float | list[float]
Vec3 = tuple[float, float, float]


class MaterialParams(BaseModel):
    """Cross-section stiffnesses, density and geometry of a rod or net.

    Stiffnesses are scalars (uniform) or per-edge lists.
    """

    model_config = ConfigDict(frozen=True)

    youngs_modulus: float = Field(gt=0, description="Young's modulus E (Pa)")
    radius: float = Field(gt=0, description="Cross-section radius (m)")
    density: float = Field(gt=0, description="Mass density (kg/m^3)")
    EA: Stiffness = Field(description="Stretching stiffness (N)")
    EI1: Stiffness = Field(description="Bending stiffness about the first director (N m^2)")
    EI2: Stiffness = Field(description="Bending stiffness about the second director (N m^2)")
    GJ: Stiffness = Field(description="Twisting stiffness (N m^2)")

    @field_validator("EA", "EI1", "EI2", "GJ")
    @classmethod
    def positive_stiffness(cls, value: Stiffness) -> Stiffness:
        values = value if isinstance(value, list) else [value]
        if not values or min(values) <= 0:
            raise ValueError("stiffness must be positive")
        return value

    @classmethod
    def circular(cls, youngs_modulus: float, radius: float, density: float, poisson: float = 0.5) -> "MaterialParams":
        area = math.pi * radius**2
        inertia = math.pi * radius**4 / 4
        shear_modulus = youngs_modulus / (2 * (1 + poisson))
        return cls(
            youngs_modulus=youngs_modulus,
            radius=radius,
            density=density,
            EA=youngs_modulus * area,
            EI1=youngs_modulus * inertia,
            EI2=youngs_modulus * inertia,
            GJ=shear_modulus * 2 * inertia,
        )

    @property
    def area(self) -> float:
        return math.pi * self.radius**2

    @property
    def polar_moment(self) -> float:
        return math.pi * self.radius**4 / 2

    def per_edge(self, name: str, edge_count: int) -> np.ndarray:
        value = getattr(self, name)
        if isinstance(value, list):
            if len(value) != edge_count:
                raise ValueError(f"{name} has {len(value)} entries for {edge_count} edges")
            return np.asarray(value, dtype=float)
        return np.full(edge_count, float(value))

    def scaled(self, **factors: float) -> "MaterialParams":
        """Copy with stiffness fields multiplied by the given factors"""
        updates = {}
        for name, factor in factors.items():
            value = getattr(self, name)
            updates[name] = [v * factor for v in value] if isinstance(value, list) else value * factor
        return self.model_copy(update=updates)


class CurveSpec(BaseModel):
    kind: str = Field(description="spherical, conical, hyperbolic, helix or hyperbolic_surface")
    sample_count: int = Field(default=500, ge=2)
    s0: float | None = Field(default=None, description="Parameter range start (default: the curve's own range)")
    s1: float | None = Field(default=None, description="Parameter range end (default: the curve's own range)")
    scale: float = Field(default=1.0, gt=0, description="Uniform scale (m)")

    @model_validator(mode="after")
    def ordered_range(self) -> "CurveSpec":
        if self.s0 is not None and self.s1 is not None and self.s1 <= self.s0:
            raise ValueError("s1 must be greater than s0")
        return self


class ScenarioSpec(BaseModel):
    """One row of the simulation parameter table"""

    model_config = ConfigDict(frozen=True)

    key: str = Field(description="Short name used on the command line")
    name: str
    characteristic_length: float = Field(gt=0, description="m")
    radius: float = Field(gt=0, description="m")
    modulus: float = Field(gt=0, description="Pa")
    density: float = Field(gt=0, description="kg/m^3")
    gravity: Vec3 | None = Field(default=None, description="m/s^2")
    magnetization: Vec3 | None = Field(default=None, description="A/m")
    field: Vec3 | None = Field(default=None, description="mT")
    curve: str | None = Field(default=None, description="Parametric curve kind")
    fixture: str | None = Field(default=None, description="Net fixture file name")
    verified_intensity: float | None = Field(
        default=1.0, gt=0, description="Load scale at which the round trip is verified, None when unverified"
    )

    @property
    def material(self) -> MaterialParams:
        return MaterialParams.circular(youngs_modulus=self.modulus, radius=self.radius, density=self.density)

    @property
    def field_tesla(self) -> np.ndarray | None:
        return None if self.field is None else np.asarray(self.field, dtype=float) * 1e-3


class StepStats(BaseModel):
    step: int
    residual: float
    newton_iterations: int
    ms: float
    Es: float
    Eb: float
    Et: float
    external: float = Field(default=0.0, description="External work potential")

    @property
    def elastic(self) -> float:
        return self.Es + self.Eb + self.Et


class BenchRow(BaseModel):
    case: str
    vertices: int
    edges: int
    bends: int
    steps: int
    forward_total_s: float
    forward_ms_per_step: float
    inverse_total_s: float
    inverse_ms_per_step: float
    reference_forward_ms: float | None = None
    reference_inverse_ms: float | None = None

    @property
    def ratio(self) -> float:
        if self.forward_ms_per_step <= 0:
            return math.inf
        return self.inverse_ms_per_step / self.forward_ms_per_step
