"""Request/response schemas of the HTTP API.

Wire format notes: fields are flattened time-major, covariances travel
either as a variance vector (``cov_diag``) or a full row-major matrix
(``cov_full``), exactly one of the two. Floats round-trip exactly through
JSON (shortest-repr encoding), which the deterministic-output guarantees
rely on.
"""

from __future__ import annotations

from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..errors import ShapeError
from ..experiment import ExperimentConfig, KernelSpec
from ..fields import ContextSet, GaussianField
from ..grids import Grid
from ..pdes import PdeFamily

QuadratureName = Literal["trapezoid", "left_riemann", "right_riemann"]


class GridModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    times: list[float] = Field(min_length=1)
    positions: list[float] = Field(min_length=2)

    def to_grid(self) -> Grid:
        return Grid(times=np.asarray(self.times), positions=np.asarray(self.positions))

    @classmethod
    def from_grid(cls, grid: Grid) -> "GridModel":
        return cls(times=[float(t) for t in grid.times], positions=[float(x) for x in grid.positions])


class FieldModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid: GridModel
    mean: list[float]
    cov_diag: Optional[list[float]] = None
    cov_full: Optional[list[list[float]]] = None

    @model_validator(mode="after")
    def _one_covariance(self):
        if (self.cov_diag is None) == (self.cov_full is None):
            raise ValueError("provide exactly one of cov_diag or cov_full")
        return self

    def to_field(self) -> GaussianField:
        grid = self.grid.to_grid()
        cov = (
            np.asarray(self.cov_diag, dtype=float)
            if self.cov_diag is not None
            else np.asarray(self.cov_full, dtype=float)
        )
        try:
            return GaussianField(grid=grid, mean=np.asarray(self.mean, dtype=float), cov=cov)
        except ShapeError as exc:
            raise ValueError(str(exc)) from exc

    @classmethod
    def from_field(cls, field: GaussianField) -> "FieldModel":
        grid = GridModel.from_grid(field.grid)
        mean = [float(v) for v in field.mean]
        if field.is_diagonal:
            return cls(grid=grid, mean=mean, cov_diag=[float(v) for v in field.cov])
        return cls(grid=grid, mean=mean, cov_full=[[float(v) for v in row] for row in field.cov])


class ContextModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    t: list[float]
    x: list[float]
    u: list[float]
    noise_std: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def _equal_lengths(self):
        if not len(self.t) == len(self.x) == len(self.u):
            raise ValueError("t, x, u must have equal lengths")
        return self

    def to_context(self) -> ContextSet:
        return ContextSet(
            points=np.column_stack([np.asarray(self.t, float), np.asarray(self.x, float)])
            if self.t
            else np.empty((0, 2)),
            values=np.asarray(self.u, dtype=float),
            noise_std=self.noise_std,
        )


class HealthResponse(BaseModel):
    status: str
    version: str


class PdeEvaluateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    family: PdeFamily
    param: float
    t_max: Optional[float] = None
    grid: GridModel


class PdeEvaluateResponse(BaseModel):
    values: list[float]
    mass: list[float]
    shock_positions: list[Optional[float]]


class ApplyConstraintRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    field: FieldModel
    quadrature: QuadratureName = "trapezoid"
    values: list[float]
    sigma_g: float = Field(default=0.0, ge=0.0)


class UpdateReportModel(BaseModel):
    residual_in_norm: float
    residual_out_norm: float
    sigma_g: Optional[float]
    condition_estimate: float
    jitter: float


class ApplyConstraintResponse(BaseModel):
    field: FieldModel
    report: UpdateReportModel


class ProjectRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid: GridModel
    mean: list[float]
    quadrature: QuadratureName = "trapezoid"
    values: list[float]


class ProjectResponse(BaseModel):
    mean: list[float]


class GpFitPredictRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    context: ContextModel
    grid: GridModel
    kernel: Optional[KernelSpec] = None
    fit: bool = True
    prior_only: bool = False


class GpFitPredictResponse(BaseModel):
    field: FieldModel
    kernel: KernelSpec


class RunRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: ExperimentConfig
    seed_override: Optional[int] = None
    paper_scale: bool = False

    def resolved_config(self) -> ExperimentConfig:
        config = self.config
        if self.seed_override is not None:
            config = config.model_copy(update={"master_seed": self.seed_override})
        if self.paper_scale:
            config = config.with_paper_scale()
        return config


class VerifyRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_instances: int = Field(default=50, ge=1)
    seed: int = 0
    max_dim: int = Field(default=40, ge=8)
    include_gp_instance: bool = True


class VerifyPart(BaseModel):
    name: str
    description: str
    passed: bool
    worst_violation: float
    n_checked: int


class VerifyResponse(BaseModel):
    all_passed: bool
    n_instances: int
    gp_instance_included: bool
    elapsed_seconds: float
    parts: list[VerifyPart]
