"""Per-task calibration data and layer-wise second-order statistics.

For each task i and layer l the pipeline needs the layer inputs X_i
(d x n_i), the unnormalized curvature H_i = X_i X_i^T, the activation energy
e_i = ||X_i||_F^2, and the token count. The adaptive anchor for a layer is
lam = (alpha / d) * sum_i e_i, which equals (alpha / d) * trace(sum_i H_i).

Also hosts the synthetic-task generator: a random base model, per-task input
distributions, per-task teacher targets, and experts produced by a fixed
budget of full-batch gradient steps from the base (or, in "perturb" mode,
by taking the teacher directly).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, LayerWeights, ModelManifest, LayerSpec
from .linalg import ShapeError, frobenius_sq, matmul
from .model import (
    Batch,
    Model,
    activation_grad,
    apply_activation,
    forward,
    forward_to_layer,
)
from .tensorfile import read_tensor_file, write_tensor_file

# forward/accumulation chunk: 32 calibration samples at a time
CALIB_CHUNK = 32


@dataclass
class CalibSet:
    """Per-task batches, task ids covering 1..K."""

    batches: list[Batch]
    samples_per_task: int
    seed: int | None = None

    def __post_init__(self):
        ids = sorted(b.task_id for b in self.batches)
        if ids != list(range(1, len(self.batches) + 1)):
            raise ValueError(f"task ids must cover 1..K exactly once, got {ids}")
        self.batches = sorted(self.batches, key=lambda b: b.task_id)

    @property
    def num_tasks(self) -> int:
        return len(self.batches)

    def task(self, task_id: int) -> Batch:
        return self.batches[task_id - 1]


@dataclass
class LayerCalibStats:
    """Curvatures, energies, and token counts for one layer, per task."""

    hessians: list[np.ndarray]
    energies: list[float]
    counts: list[int]
    d: int

    @property
    def num_tasks(self) -> int:
        return len(self.hessians)

    def pooled_hessian(self) -> np.ndarray:
        acc = self.hessians[0].copy()
        for h in self.hessians[1:]:
            acc = acc + h
        return acc

    def total_energy(self) -> float:
        total = 0.0
        for e in self.energies:
            total += e
        return total


def accumulate_stats(x: np.ndarray, chunk: int = CALIB_CHUNK) -> tuple[np.ndarray, float, int]:
    """(H, energy, count) for one activation matrix, accumulated per chunk."""
    d, n = x.shape
    h = np.zeros((d, d))
    energy = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(0, n, chunk):
            xc = x[:, s : s + chunk]
            h += matmul(xc, xc.T)
            energy += frobenius_sq(xc)
    if not np.isfinite(h).all():
        raise FloatingPointError("calibration statistics overflowed (non-finite curvature)")
    return h, energy, n


def collect_layer_stats(
    model: Model,
    calib: CalibSet,
    layer_index: int,
    cached: dict[int, np.ndarray] | None = None,
) -> tuple[LayerCalibStats, dict[int, np.ndarray]]:
    """Layer-l input activations and their statistics for every task.

    `cached`, when given, must hold the layer-l inputs per task under the
    current model state (the pipeline maintains this incrementally); without
    it each task is forwarded from scratch.
    """
    d = model.layers[layer_index - 1].spec.d_in
    hessians, energies, counts = [], [], []
    activations: dict[int, np.ndarray] = {}
    for batch in calib.batches:
        if cached is not None:
            x = cached[batch.task_id]
            if x.shape[0] != d:
                raise ShapeError(
                    f"cached activations for task {batch.task_id} have {x.shape[0]} rows, "
                    f"layer {layer_index} expects {d}"
                )
        else:
            x = forward_to_layer(model, batch.inputs, layer_index)
        h, e, n = accumulate_stats(x)
        hessians.append(h)
        energies.append(e)
        counts.append(n)
        activations[batch.task_id] = x
    return LayerCalibStats(hessians=hessians, energies=energies, counts=counts, d=d), activations


def anchor_lambda(stats: LayerCalibStats, alpha: float) -> float:
    """Adaptive anchor strength: (alpha / d) * total activation energy."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return (alpha / stats.d) * stats.total_energy()


# ---------------------------------------------------------------------------
# synthetic task generation


@dataclass
class SyntheticProblem:
    base: Checkpoint
    experts: list[Checkpoint]
    calib: CalibSet
    heldout: CalibSet


def _random_checkpoint(rng: np.random.Generator, manifest: ModelManifest) -> Checkpoint:
    layers = []
    for spec in manifest.layers:
        weight = rng.normal(0.0, 1.0 / np.sqrt(spec.d_in), size=(spec.d_out, spec.d_in))
        bias = rng.normal(0.0, 0.05, size=spec.d_out) if spec.has_bias else None
        layers.append(LayerWeights(id=spec.id, weight=weight, bias=bias))
    return Checkpoint(layers=layers, manifest=manifest)


def _perturb_checkpoint(
    rng: np.random.Generator, base: Checkpoint, scale: float
) -> Checkpoint:
    layers = []
    for lw, spec in zip(base.layers, base.manifest.layers):
        delta = rng.normal(0.0, scale / np.sqrt(spec.d_in), size=lw.weight.shape)
        bias = None
        if lw.bias is not None:
            bias = lw.bias + rng.normal(0.0, 0.02, size=lw.bias.shape)
        layers.append(LayerWeights(id=lw.id, weight=lw.weight + delta, bias=bias))
    return Checkpoint(layers=layers, manifest=base.manifest)


def _train_expert(
    base: Checkpoint, inputs: np.ndarray, targets: np.ndarray, steps: int, lr: float
) -> Checkpoint:
    """Full-batch gradient descent on mean squared loss, from the base weights."""
    weights = [lw.weight.copy() for lw in base.layers]
    biases = [None if lw.bias is None else lw.bias.copy() for lw in base.layers]
    acts = [spec.activation for spec in base.manifest.layers]
    for _ in range(steps):
        # forward with taps
        a = inputs
        taps = [a]
        pres = []
        for w, b, act in zip(weights, biases, acts):
            z = matmul(w, a)
            if b is not None:
                z = z + b[:, None]
            pres.append(z)
            a = apply_activation(act, z)
            taps.append(a)
        # backward
        g = 2.0 * (a - targets) / a.size
        for idx in range(len(weights) - 1, -1, -1):
            gz = g * activation_grad(acts[idx], pres[idx])
            dw = matmul(gz, taps[idx].T)
            if biases[idx] is not None:
                biases[idx] = biases[idx] - lr * gz.sum(axis=1)
            if idx > 0:
                g = matmul(weights[idx].T, gz)
            weights[idx] = weights[idx] - lr * dw
    layers = [
        LayerWeights(id=lw.id, weight=w, bias=b)
        for lw, w, b in zip(base.layers, weights, biases)
    ]
    return Checkpoint(layers=layers, manifest=base.manifest)


def make_synthetic_tasks(
    seed: int,
    num_tasks: int,
    dims: list[int],
    samples_per_task: int = 256,
    *,
    heldout_samples: int = 256,
    train_samples: int = 256,
    train_steps: int = 100,
    learning_rate: float = 0.1,
    teacher_scale: float = 0.25,
    input_mean_scale: float = 1.0,
    input_spread: tuple[float, float] = (0.6, 1.4),
    expert_mode: str = "train",
    hidden_activation: str = "relu",
) -> SyntheticProblem:
    """Deterministic desk-scale stand-in for a fleet of fine-tuned experts.

    Draws a random base model over the layer chain `dims`; per task draws a
    Gaussian input distribution (task-specific mean and diagonal spread) and
    a teacher network (base plus a task-specific delta) whose outputs serve
    as targets. Experts start from the base and take `train_steps` full-batch
    gradient steps toward their teacher ("train" mode) or are the teacher
    itself ("perturb" mode). Calibration and held-out sets are disjoint
    draws; held-out batches carry teacher targets for evaluation.
    """
    if num_tasks < 1:
        raise ValueError(f"need at least one task, got {num_tasks}")
    if len(dims) < 2:
        raise ValueError(f"dims must chain at least one layer, got {dims}")
    if expert_mode not in ("train", "perturb"):
        raise ValueError(f"unknown expert_mode '{expert_mode}'")
    rng = np.random.default_rng(seed)
    specs = []
    for idx in range(len(dims) - 1):
        activation = hidden_activation if idx < len(dims) - 2 else "identity"
        specs.append(
            LayerSpec(
                id=f"layer{idx + 1}",
                d_in=dims[idx],
                d_out=dims[idx + 1],
                activation=activation,
                has_bias=True,
            )
        )
    manifest = ModelManifest(layers=tuple(specs), dtype="f64")
    base = _random_checkpoint(rng, manifest)

    d0 = dims[0]
    experts = []
    calib_batches = []
    heldout_batches = []
    for task_id in range(1, num_tasks + 1):
        mean = rng.normal(0.0, input_mean_scale, size=(d0, 1))
        spread = rng.uniform(input_spread[0], input_spread[1], size=(d0, 1))
        teacher = _perturb_checkpoint(rng, base, teacher_scale)
        teacher_model = Model.from_checkpoint(teacher)

        def draw(n: int) -> np.ndarray:
            return mean + spread * rng.normal(0.0, 1.0, size=(d0, n))

        train_x = draw(train_samples)
        train_y = forward(teacher_model, train_x)
        if expert_mode == "perturb":
            expert = teacher
        else:
            expert = _train_expert(base, train_x, train_y, train_steps, learning_rate)
        experts.append(expert)

        calib_x = draw(samples_per_task)
        heldout_x = draw(heldout_samples)
        heldout_y = forward(teacher_model, heldout_x)
        calib_batches.append(Batch(inputs=calib_x, task_id=task_id))
        heldout_batches.append(Batch(inputs=heldout_x, task_id=task_id, targets=heldout_y))

    calib = CalibSet(batches=calib_batches, samples_per_task=samples_per_task, seed=seed)
    heldout = CalibSet(batches=heldout_batches, samples_per_task=heldout_samples, seed=seed)
    return SyntheticProblem(base=base, experts=experts, calib=calib, heldout=heldout)


# ---------------------------------------------------------------------------
# calibration set files: one tensor file per task plus an index JSON


def save_calib_set(calib: CalibSet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for batch in calib.batches:
        tensors = {"inputs": batch.inputs}
        if batch.targets is not None:
            tensors["targets"] = batch.targets
        write_tensor_file(directory / f"task{batch.task_id}.safetensors", tensors)
    index = {
        "K": calib.num_tasks,
        "samples_per_task": calib.samples_per_task,
        "seed": calib.seed,
    }
    (directory / "index.json").write_text(
        json.dumps(index, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )


def load_calib_set(directory) -> CalibSet:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text(encoding="utf-8"))
    batches = []
    for task_id in range(1, int(index["K"]) + 1):
        tensors, _ = read_tensor_file(directory / f"task{task_id}.safetensors")
        batches.append(
            Batch(
                inputs=tensors["inputs"],
                task_id=task_id,
                targets=tensors.get("targets"),
            )
        )
    return CalibSet(
        batches=batches,
        samples_per_task=int(index["samples_per_task"]),
        seed=None if index.get("seed") is None else int(index["seed"]),
    )
