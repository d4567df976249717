"""Quantization solvers.

Three routes to low-bit codes for one layer:

* rtn_quantize (in pmq.quant): per-entry nearest-grid rounding.
* gptq_solve: sequential column rounding with second-order error
  compensation against a curvature matrix H, toward a target weight.
* epmq_solve: builds the expert-guided anchored statistics
  H_E = sum_i H_i + lam*I and R = sum_i W_i H_i + lam*W_m, computes the
  continuous optimizer W* = R inv(H_E), and runs the sequential solver
  toward W* under curvature H_E. The anchored objective
  sum_i ||Q X_i - W_i X_i||_F^2 + lam*||Q - W_m||_F^2 differs from
  ||(Q - W*) L||_F^2 (with L L^T = H_E) only by a constant, so one rounding
  solver serves both routes.

brute_force_optimum enumerates every code assignment on the fitted grid
(rows are independent because the objective has no cross-row terms) and is
the test oracle for optimality-gap checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .calib import LayerCalibStats, anchor_lambda
from .linalg import (
    SingularMatrixError,
    as_matrix,
    check_symmetric,
    cholesky_inverse_upper,
    cholesky_solve,
    frobenius_sq,
    matmul,
)
from .quant import (
    QuantConfig,
    QuantizedLayer,
    dequantize_values,
    fit_layer_grids,
    quantize_values,
)


@dataclass
class SolverProblem:
    """One layer-rounding problem: quantize toward `target` under `curvature`.

    `curvature` is the pre-damping quadratic form; grids are fitted from
    `grid_source_weight` before any column is touched.
    """

    target: np.ndarray
    curvature: np.ndarray
    grid_source_weight: np.ndarray
    cfg: QuantConfig

    def __post_init__(self):
        self.target = as_matrix(self.target, "target")
        self.curvature = check_symmetric(self.curvature, "curvature")
        self.grid_source_weight = as_matrix(self.grid_source_weight, "grid_source_weight")
        d = self.target.shape[1]
        if self.curvature.shape != (d, d):
            raise ValueError(
                f"curvature shape {self.curvature.shape} does not match target width {d}"
            )
        if self.grid_source_weight.shape != self.target.shape:
            raise ValueError("grid source weight must match the target shape")


@dataclass
class SolveReport:
    """Outcome of one layer solve."""

    quantized: QuantizedLayer
    objective: float | None
    lam: float
    damping: float
    per_column_comp_norms: np.ndarray
    solver: str
    damped_fallback: bool = False

    def to_json_dict(self) -> dict:
        return {
            "objective": self.objective,
            "lambda": self.lam,
            "damping": self.damping,
            "damped": self.damped_fallback,
            "per_column_comp_norms": [float(v) for v in self.per_column_comp_norms],
            "bits": self.quantized.bits,
            "group_size": self.quantized.group_size,
            "solver": self.solver,
        }


def quadratic_objective(q: np.ndarray, target: np.ndarray, curvature: np.ndarray) -> float:
    """trace((Q - T) H (Q - T)^T), the reconstruction error under H."""
    e = as_matrix(q) - as_matrix(target)
    return float(np.einsum("ij,jk,ik->", e, curvature, e))


def epmq_objective(
    q: np.ndarray,
    expert_weights: Sequence[np.ndarray],
    merged_weight: np.ndarray,
    stats: LayerCalibStats,
    lam: float,
) -> float:
    """Full anchored objective: sum_i ||(Q - W_i) X_i||_F^2 + lam*||Q - W_m||_F^2."""
    total = 0.0
    for w_i, h_i in zip(expert_weights, stats.hessians):
        total += quadratic_objective(q, w_i, h_i)
    total += lam * frobenius_sq(as_matrix(q) - as_matrix(merged_weight))
    return total


def build_epmq_statistics(
    expert_weights: Sequence[np.ndarray],
    merged_weight: np.ndarray,
    stats: LayerCalibStats,
    alpha: float,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Effective curvature and right-hand side of the anchored problem.

    H_E = sum_i H_i + lam*I and R = sum_i W_i H_i + lam*W_m, where
    lam = (alpha / d) * sum_i ||X_i||_F^2.
    """
    merged_weight = as_matrix(merged_weight, "merged_weight")
    if len(expert_weights) != stats.num_tasks:
        raise ValueError(
            f"{len(expert_weights)} expert weights for {stats.num_tasks} task statistics"
        )
    d = stats.d
    if merged_weight.shape[1] != d:
        raise ValueError(f"merged weight width {merged_weight.shape[1]} != stats dim {d}")
    lam = anchor_lambda(stats, alpha)
    h_e = np.zeros((d, d))
    r = np.zeros_like(merged_weight)
    for w_i, h_i in zip(expert_weights, stats.hessians):
        w_i = as_matrix(w_i, "expert weight")
        if w_i.shape != merged_weight.shape:
            raise ValueError(
                f"expert weight shape {w_i.shape} != merged shape {merged_weight.shape}"
            )
        h_e = h_e + h_i
        r = r + matmul(w_i, h_i)
    h_e = h_e + lam * np.eye(d)
    r = r + lam * merged_weight
    return h_e, r, lam


def continuous_solution(h_e: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Minimizer of the relaxed quadratic: Q such that Q H_E = R.

    Requires H_E positive definite; callers damp first when the anchor is
    zero and the pooled curvature is singular. One step of iterative
    refinement keeps the stationary residual near machine precision even
    for poorly conditioned instances.
    """
    q = cholesky_solve(h_e, r)
    residual = r - matmul(q, h_e)
    norm_r = np.sqrt(frobenius_sq(r))
    if np.sqrt(frobenius_sq(residual)) > 1e-10 * (1.0 + norm_r):
        q = q + cholesky_solve(h_e, residual)
    return q


def _damping_for(h: np.ndarray, percdamp: float) -> float:
    mean_diag = float(np.mean(np.diag(h))) if h.size else 0.0
    damp = percdamp * mean_diag
    return damp if damp > 0 else percdamp


def gptq_solve(problem: SolverProblem) -> SolveReport:
    """Sequential error-compensated rounding toward the problem target.

    Steps: damp the curvature by percdamp of its mean diagonal; factor the
    damped inverse and keep its upper Cholesky factor U; fit grids per group
    from the grid-source weight; then for each column j in natural order,
    round column j, divide the rounding error by U[j, j], and subtract the
    weighted error from all not-yet-quantized columns via U[j, j+1:].
    The reported objective is recomputed from scratch on the final codes
    against the pre-damping curvature.
    """
    cfg = problem.cfg
    target = problem.target
    d_out, d = target.shape
    damp = _damping_for(problem.curvature, cfg.percdamp)
    damped = problem.curvature + damp * np.eye(d)
    try:
        u = cholesky_inverse_upper(damped, context="damped curvature")
    except SingularMatrixError as exc:
        raise SingularMatrixError(
            f"curvature is singular even after damping {damp:g} "
            f"(pivot {exc.pivot}); increase percdamp",
            pivot=exc.pivot,
        ) from exc

    scales, zeros = fit_layer_grids(problem.grid_source_weight, cfg.bits, cfg.group_size)
    col_group = np.minimum(np.arange(d) // cfg.group_size, scales.shape[1] - 1)

    work = target.copy()
    codes = np.empty((d_out, d), dtype=np.uint8)
    comp_norms = np.zeros(d)
    for j in range(d):
        g = col_group[j]
        cj = quantize_values(work[:, j], scales[:, g], zeros[:, g], cfg.bits)
        qj = dequantize_values(cj, scales[:, g], zeros[:, g])
        err = (work[:, j] - qj) / u[j, j]
        comp_norms[j] = float(np.sqrt(np.dot(err, err)))
        codes[:, j] = cj
        if j + 1 < d:
            work[:, j + 1 :] -= np.outer(err, u[j, j + 1 :])

    quantized = QuantizedLayer(
        codes=codes,
        scales=scales,
        zeros=zeros,
        bits=cfg.bits,
        group_size=cfg.group_size,
    )
    objective = quadratic_objective(quantized.dequantize(), target, problem.curvature)
    return SolveReport(
        quantized=quantized,
        objective=objective,
        lam=0.0,
        damping=damp,
        per_column_comp_norms=comp_norms,
        solver="gptq",
    )


def epmq_solve(
    expert_weights: Sequence[np.ndarray],
    merged_weight: np.ndarray,
    stats: LayerCalibStats,
    cfg: QuantConfig,
) -> SolveReport:
    """Expert-guided anchored solve for one layer.

    Builds (H_E, R, lam), computes the continuous target W* = R inv(H_E)
    (damping H_E and retrying when the anchor is zero and the pooled
    curvature is singular), then rounds toward W* under curvature H_E.
    The reported objective is the full anchored objective of the final
    codes, experts and anchor included.
    """
    merged_weight = as_matrix(merged_weight, "merged_weight")
    h_e, r, lam = build_epmq_statistics(expert_weights, merged_weight, stats, cfg.alpha)
    fallback = False
    try:
        w_star = continuous_solution(h_e, r)
    except SingularMatrixError:
        fallback = True
        extra = _damping_for(h_e, cfg.percdamp)
        w_star = continuous_solution(h_e + extra * np.eye(stats.d), r)
    grid_source = w_star if cfg.grid_source == "target" else merged_weight
    problem = SolverProblem(
        target=w_star, curvature=h_e, grid_source_weight=grid_source, cfg=cfg
    )
    report = gptq_solve(problem)
    report.solver = "epmq"
    report.lam = lam
    report.damped_fallback = fallback
    report.objective = epmq_objective(
        report.quantized.dequantize(), expert_weights, merged_weight, stats, lam
    )
    return report


def brute_force_optimum(
    problem: SolverProblem, max_assignments: int = 10_000_000
) -> tuple[np.ndarray, float]:
    """Exact minimizer of the problem quadratic over the fitted grid.

    Enumerates all (2^bits)^d code assignments per output row (rows are
    separable) and returns (codes, total objective). The objective matches
    quadratic_objective on the pre-damping curvature, so solver objectives
    can never fall below the value returned here.
    """
    cfg = problem.cfg
    target = problem.target
    d_out, d = target.shape
    levels = 1 << cfg.bits
    if levels**d > max_assignments:
        raise ValueError(
            f"search space {levels}^{d} exceeds the {max_assignments} assignment budget"
        )
    scales, zeros = fit_layer_grids(problem.grid_source_weight, cfg.bits, cfg.group_size)
    col_group = np.minimum(np.arange(d) // cfg.group_size, scales.shape[1] - 1)

    assignments = np.array(list(np.ndindex(*([levels] * d))), dtype=np.uint8)
    best_codes = np.empty((d_out, d), dtype=np.uint8)
    total = 0.0
    for row in range(d_out):
        row_scales = scales[row, col_group]
        row_zeros = zeros[row, col_group]
        values = row_scales * (assignments.astype(np.float64) - row_zeros)
        err = values - target[row]
        objectives = np.einsum("aj,jk,ak->a", err, problem.curvature, err)
        idx = int(np.argmin(objectives))
        best_codes[row] = assignments[idx]
        total += float(objectives[idx])
    return best_codes, total
