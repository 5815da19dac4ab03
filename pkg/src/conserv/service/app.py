"""FastAPI application exposing the core operations.

Every endpoint is stateless request/response over the library; the CLI is a
thin client of this app (in-process by default, remote with ``--server``).
Domain failures surface as 400s with the library's error message; malformed
payloads are FastAPI's usual 422 validation errors.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..errors import ConservError
from ..experiment import (
    DatasetOutput,
    RunOutput,
    SweepOutput,
    generate_dataset,
    run_experiment,
    sweep_sigma,
)
from ..gp import KernelConfig, fit_hyperparameters, gp_fit_predict
from ..grids import QUADRATURE_BUILDERS, LinearConstraint
from ..pdes import PdeInstance, conserved_mass, eval_exact, shock_position_exact
from ..trace import PART_NAMES, run_convergence_suite
from ..update import apply_constraint, hard_projection
from ..experiment import KernelSpec
from .models import (
    ApplyConstraintRequest,
    ApplyConstraintResponse,
    FieldModel,
    GpFitPredictRequest,
    GpFitPredictResponse,
    HealthResponse,
    PdeEvaluateRequest,
    PdeEvaluateResponse,
    ProjectRequest,
    ProjectResponse,
    RunRequest,
    UpdateReportModel,
    VerifyPart,
    VerifyRequest,
    VerifyResponse,
)

app = FastAPI(
    title="conserv",
    version=__version__,
    description="Conservation-constrained probabilistic field estimation",
)


def _bad_request(exc: ConservError) -> HTTPException:
    return HTTPException(status_code=400, detail=f"{type(exc).__name__}: {exc}")


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


@app.post("/pde/evaluate", response_model=PdeEvaluateResponse)
def pde_evaluate(request: PdeEvaluateRequest) -> PdeEvaluateResponse:
    try:
        instance = PdeInstance.canonical(request.family, request.param, request.t_max)
        grid = request.grid.to_grid()
        pts = grid.flat_points()
        values = np.asarray(eval_exact(instance, pts[:, 0], pts[:, 1]), dtype=float)
        mass = [float(conserved_mass(instance, t)) for t in grid.times]
        shocks = [shock_position_exact(instance, float(t)) for t in grid.times]
    except ConservError as exc:
        raise _bad_request(exc) from exc
    return PdeEvaluateResponse(
        values=[float(v) for v in values], mass=mass, shock_positions=shocks
    )


@app.post("/constraint/apply", response_model=ApplyConstraintResponse)
def constraint_apply(request: ApplyConstraintRequest) -> ApplyConstraintResponse:
    try:
        field = request.field.to_field()
        g = QUADRATURE_BUILDERS[request.quadrature](field.grid)
        constraint = LinearConstraint(
            matrix=g, values=np.asarray(request.values, float), sigma_g=request.sigma_g
        )
        updated, report = apply_constraint(field, constraint)
    except ConservError as exc:
        raise _bad_request(exc) from exc
    return ApplyConstraintResponse(
        field=FieldModel.from_field(updated),
        report=UpdateReportModel(
            residual_in_norm=report.residual_in_norm,
            residual_out_norm=report.residual_out_norm,
            sigma_g=report.sigma_g,
            condition_estimate=report.condition_estimate,
            jitter=report.jitter,
        ),
    )


@app.post("/constraint/project", response_model=ProjectResponse)
def constraint_project(request: ProjectRequest) -> ProjectResponse:
    try:
        grid = request.grid.to_grid()
        g = QUADRATURE_BUILDERS[request.quadrature](grid)
        projected = hard_projection(
            np.asarray(request.mean, float), g, np.asarray(request.values, float)
        )
    except ConservError as exc:
        raise _bad_request(exc) from exc
    return ProjectResponse(mean=[float(v) for v in projected])


@app.post("/gp/fit-predict", response_model=GpFitPredictResponse)
def gp_fit_predict_endpoint(request: GpFitPredictRequest) -> GpFitPredictResponse:
    try:
        context = request.context.to_context()
        grid = request.grid.to_grid()
        if request.kernel is not None:
            kernel = request.kernel.to_kernel()
        elif request.fit and not request.prior_only:
            kernel = fit_hyperparameters(context)
        else:
            kernel = KernelConfig()
        field = gp_fit_predict(context, grid, kernel, prior_only=request.prior_only)
    except ConservError as exc:
        raise _bad_request(exc) from exc
    return GpFitPredictResponse(
        field=FieldModel.from_field(field),
        kernel=KernelSpec(
            lengthscale_t=kernel.lengthscale_t,
            lengthscale_x=kernel.lengthscale_x,
            signal_variance=kernel.signal_variance,
            noise_variance=kernel.noise_variance,
        ),
    )


@app.post("/experiment/run", response_model=RunOutput)
def experiment_run(request: RunRequest) -> RunOutput:
    try:
        return run_experiment(request.resolved_config())
    except ConservError as exc:
        raise _bad_request(exc) from exc


@app.post("/experiment/sweep-sigma", response_model=SweepOutput)
def experiment_sweep(request: RunRequest) -> SweepOutput:
    try:
        return sweep_sigma(request.resolved_config())
    except ConservError as exc:
        raise _bad_request(exc) from exc


@app.post("/experiment/generate", response_model=DatasetOutput)
def experiment_generate(request: RunRequest) -> DatasetOutput:
    try:
        return generate_dataset(request.resolved_config())
    except ConservError as exc:
        raise _bad_request(exc) from exc


@app.post("/theorem/verify", response_model=VerifyResponse)
def theorem_verify(request: VerifyRequest) -> VerifyResponse:
    report = run_convergence_suite(
        n_instances=request.n_instances,
        seed=request.seed,
        max_dim=request.max_dim,
        include_gp_instance=request.include_gp_instance,
    )
    parts = [
        VerifyPart(
            name=name,
            description=PART_NAMES[name],
            passed=data["passed"],
            worst_violation=data["worst_violation"],
            n_checked=data["n_checked"],
        )
        for name, data in report.parts.items()
    ]
    return VerifyResponse(
        all_passed=report.all_passed,
        n_instances=report.n_instances,
        gp_instance_included=report.gp_instance_included,
        elapsed_seconds=report.elapsed_seconds,
        parts=parts,
    )
