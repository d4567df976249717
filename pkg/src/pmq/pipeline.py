"""Forward-order layer-wise quantization with trajectory-consistent calibration.

The driver walks the layers front to back. For each layer it collects the
per-task input activations from the current partially quantized model
(advancing a per-task activation cache through each freshly quantized layer,
which for sequential models is exactly equivalent to re-running the forward
pass), solves for low-bit codes, and swaps the layer in place before moving
on. Deviation diagnostics decompose the held-out output error of each
quantized layer into the quantization part (Q X - W_m X) and the
expert-relative merging part (W_m X - W_i X), whose sum telescopes to the
combined deviation Q X - W_i X.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .calib import CalibSet, collect_layer_stats
from .checkpoint import Checkpoint, ManifestError
from .linalg import matmul
from .model import Model, forward, forward_to_layer, propagate_through_layer
from .quant import QuantConfig, rtn_quantize
from .solver import SolverProblem, SolveReport, epmq_solve, gptq_solve, quadratic_objective


@dataclass
class LayerReport:
    layer_id: str
    solve: SolveReport
    trajectory_checksum: str

    def to_json_dict(self) -> dict:
        out = {"layer_id": self.layer_id, "trajectory_checksum": self.trajectory_checksum}
        out.update(self.solve.to_json_dict())
        return out


@dataclass
class PmqRun:
    """Everything produced by one quantization run."""

    merged: Checkpoint
    experts: list[Checkpoint]
    calib: CalibSet | None
    cfg: QuantConfig
    layer_reports: list[LayerReport]
    model: Model
    method: str
    wall_time_s: float = 0.0

    @property
    def damped_fallback(self) -> bool:
        return any(rep.solve.damped_fallback for rep in self.layer_reports)

    def total_objective(self) -> float:
        return float(sum(rep.solve.objective or 0.0 for rep in self.layer_reports))


@dataclass
class DeviationRow:
    layer_id: str
    task_id: int
    quant_norm: float
    merge_norm: float
    combined_norm: float
    identity_max_abs: float


@dataclass
class DeviationReport:
    rows: list[DeviationRow] = field(default_factory=list)

    def max_identity_error(self) -> float:
        return max((r.identity_max_abs for r in self.rows), default=0.0)


@dataclass
class EvalResult:
    per_task_mse: dict[int, float]
    macro_mse: float


def _init_cache(calib: CalibSet) -> dict[int, np.ndarray]:
    return {batch.task_id: batch.inputs for batch in calib.batches}


def _quantize_forward_order(
    merged: Checkpoint,
    experts: list[Checkpoint],
    calib: CalibSet | None,
    cfg: QuantConfig,
    method: str,
    recompute_trajectory: bool = False,
    quantized_trajectory: bool = True,
) -> PmqRun:
    model = Model.from_checkpoint(merged)
    reference = Model.from_checkpoint(merged) if not quantized_trajectory else None
    cache = _init_cache(calib) if calib is not None else None
    reports: list[LayerReport] = []
    start = time.perf_counter()
    for layer_index in range(1, model.num_layers + 1):
        layer_id = model.layers[layer_index - 1].spec.id
        merged_w = merged.layers[layer_index - 1].weight
        try:
            if calib is not None:
                source = reference if reference is not None else model
                checksum = source.state_checksum()
                stats, acts = collect_layer_stats(
                    source, calib, layer_index, cached=None if recompute_trajectory else cache
                )
            else:
                checksum = model.state_checksum()
                stats, acts = None, None

            if method == "epmq":
                solve = epmq_solve(
                    [e.layers[layer_index - 1].weight for e in experts],
                    merged_w,
                    stats,
                    cfg,
                )
            elif method == "gptq":
                problem = SolverProblem(
                    target=merged_w,
                    curvature=stats.pooled_hessian(),
                    grid_source_weight=merged_w,
                    cfg=cfg,
                )
                solve = gptq_solve(problem)
            elif method == "rtn":
                quantized = rtn_quantize(merged_w, cfg)
                objective = None
                if stats is not None:
                    objective = quadratic_objective(
                        quantized.dequantize(), merged_w, stats.pooled_hessian()
                    )
                solve = SolveReport(
                    quantized=quantized,
                    objective=objective,
                    lam=0.0,
                    damping=0.0,
                    per_column_comp_norms=np.zeros(merged_w.shape[1]),
                    solver="rtn",
                )
            else:
                raise ValueError(f"unknown method '{method}'")

            # the collected activations must describe the exact state we mutate
            source = reference if reference is not None else model
            if calib is not None and source.state_checksum() != checksum:
                raise RuntimeError(
                    f"layer '{layer_id}': model state changed between collection and replacement"
                )
            model.replace_layer(layer_index, solve.quantized)
            if cache is not None and not recompute_trajectory:
                advance_through = (
                    reference.layers[layer_index - 1]
                    if reference is not None
                    else model.layers[layer_index - 1]
                )
                if layer_index < model.num_layers:
                    cache = {
                        task_id: propagate_through_layer(acts[task_id], advance_through)
                        for task_id in sorted(acts)
                    }
        except Exception as exc:
            exc.args = (f"layer '{layer_id}': {exc}",)
            raise
        reports.append(
            LayerReport(layer_id=layer_id, solve=solve, trajectory_checksum=checksum)
        )
    elapsed = time.perf_counter() - start
    return PmqRun(
        merged=merged,
        experts=list(experts),
        calib=calib,
        cfg=cfg,
        layer_reports=reports,
        model=model,
        method=method,
        wall_time_s=elapsed,
    )


def run_epmq(
    merged: Checkpoint,
    experts: list[Checkpoint],
    calib: CalibSet,
    cfg: QuantConfig,
    recompute_trajectory: bool = False,
) -> PmqRun:
    """Expert-guided anchored quantization of every layer, in forward order."""
    if cfg.solver != "epmq":
        raise ValueError(f"run_epmq requires solver='epmq', got '{cfg.solver}'")
    if not experts:
        raise ValueError("run_epmq requires at least one expert")
    for expert in experts:
        if expert.manifest != merged.manifest:
            raise ManifestError("experts and merged checkpoint do not share a manifest")
    if calib.num_tasks != len(experts):
        raise ValueError(
            f"{calib.num_tasks} calibration tasks for {len(experts)} experts"
        )
    return _quantize_forward_order(
        merged, experts, calib, cfg, "epmq", recompute_trajectory=recompute_trajectory
    )


def run_naive_ptq(
    merged: Checkpoint,
    calib: CalibSet | None,
    cfg: QuantConfig,
    experts: list[Checkpoint] | None = None,
    recompute_trajectory: bool = False,
    quantized_trajectory: bool = True,
) -> PmqRun:
    """Direct quantization of the merged model (rtn or gptq).

    gptq pools the per-task curvatures (sum_i H_i) so both routes consume the
    same calibration data; rtn ignores calibration for the codes and only
    uses it to report objectives. By default activations follow the
    partially quantized trajectory; quantized_trajectory=False freezes them
    to the full-precision model.
    """
    if cfg.solver not in ("rtn", "gptq"):
        raise ValueError(f"run_naive_ptq requires solver in (rtn, gptq), got '{cfg.solver}'")
    if cfg.solver == "gptq" and calib is None:
        raise ValueError("gptq requires a calibration set")
    return _quantize_forward_order(
        merged,
        experts or [],
        calib,
        cfg,
        cfg.solver,
        recompute_trajectory=recompute_trajectory,
        quantized_trajectory=quantized_trajectory,
    )


def deviation_diagnostics(
    run: PmqRun, heldout: CalibSet, identity_tol: float = 1e-9
) -> DeviationReport:
    """Layer/task deviation norms on held-out activations of the quantized model.

    For each layer and task: the quantization deviation Q X - W_m X, the
    expert-relative merging deviation W_m X - W_i X, and the combined
    deviation Q X - W_i X, which must equal their sum elementwise.
    """
    if not run.experts:
        raise ValueError("deviation diagnostics requires the run to carry experts")
    report = DeviationReport()
    for layer_index in range(1, run.model.num_layers + 1):
        layer_id = run.model.layers[layer_index - 1].spec.id
        q_w = run.model.layers[layer_index - 1].weight
        m_w = run.merged.layers[layer_index - 1].weight
        for expert_idx, expert in enumerate(run.experts, start=1):
            batch = heldout.task(expert_idx)
            x = forward_to_layer(run.model, batch.inputs, layer_index)
            e_w = expert.layers[layer_index - 1].weight
            qx = matmul(q_w, x)
            mx = matmul(m_w, x)
            ex = matmul(e_w, x)
            quant_dev = qx - mx
            merge_dev = mx - ex
            combined = qx - ex
            identity_gap = float(np.abs(combined - (quant_dev + merge_dev)).max(initial=0.0))
            if identity_gap > identity_tol:
                raise ArithmeticError(
                    f"layer '{layer_id}' task {expert_idx}: deviation decomposition "
                    f"violated by {identity_gap:g}"
                )
            report.rows.append(
                DeviationRow(
                    layer_id=layer_id,
                    task_id=expert_idx,
                    quant_norm=float(np.sqrt(np.sum(quant_dev**2))),
                    merge_norm=float(np.sqrt(np.sum(merge_dev**2))),
                    combined_norm=float(np.sqrt(np.sum(combined**2))),
                    identity_max_abs=identity_gap,
                )
            )
    return report


def evaluate(model: Model, heldout: CalibSet) -> EvalResult:
    """Per-task mean squared error against held-out targets, plus the macro mean."""
    per_task: dict[int, float] = {}
    for batch in heldout.batches:
        if batch.targets is None:
            raise ValueError(f"held-out task {batch.task_id} carries no targets")
        outputs = forward(model, batch.inputs)
        per_task[batch.task_id] = float(np.mean((outputs - batch.targets) ** 2))
    macro = float(np.mean(list(per_task.values())))
    return EvalResult(per_task_mse=per_task, macro_mse=macro)


def run_to_json_dict(run: PmqRun, config: dict | None = None) -> dict:
    return {
        "method": run.method,
        "solver": run.cfg.solver,
        "damped": run.damped_fallback,
        "total_objective": run.total_objective(),
        "config": config or {},
        "layers": [rep.to_json_dict() for rep in run.layer_reports],
    }


RUN_JSON_SCHEMA = {
    "type": "object",
    "required": ["method", "solver", "damped", "total_objective", "config", "layers"],
    "additionalProperties": True,
    "properties": {
        "method": {"type": "string", "enum": ["rtn", "gptq", "epmq"]},
        "solver": {"type": "string", "enum": ["rtn", "gptq", "epmq"]},
        "damped": {"type": "boolean"},
        "total_objective": {"type": "number"},
        "config": {"type": "object"},
        "layers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": [
                    "layer_id",
                    "trajectory_checksum",
                    "objective",
                    "lambda",
                    "damping",
                    "damped",
                    "per_column_comp_norms",
                    "bits",
                    "group_size",
                    "solver",
                ],
                "properties": {
                    "layer_id": {"type": "string"},
                    "trajectory_checksum": {"type": "string"},
                    "objective": {"type": ["number", "null"]},
                    "lambda": {"type": "number"},
                    "damping": {"type": "number"},
                    "damped": {"type": "boolean"},
                    "per_column_comp_norms": {"type": "array", "items": {"type": "number"}},
                    "bits": {"type": "integer", "minimum": 2, "maximum": 8},
                    "group_size": {"type": "integer", "minimum": 1},
                    "solver": {"type": "string", "enum": ["rtn", "gptq", "epmq"]},
                },
            },
        },
    },
}
