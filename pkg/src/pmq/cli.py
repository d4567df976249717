"""Command-line harness.

    pmq gen|merge|quantize|eval|sweep --config cfg.json --out DIR [--set k=v]...

One JSON config file drives everything; --set applies dotted-path overrides
(values parsed as JSON when possible) so sweep definitions stay reproducible
artifacts. PMQ_SEED overrides the config seed. Exit codes: 0 success,
2 config error, 3 numeric failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .calib import CalibSet, load_calib_set, make_synthetic_tasks, save_calib_set
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .linalg import SingularMatrixError
from .merge import MergeSpec, apply_merge
from .model import load_model, save_model
from .pipeline import (
    PmqRun,
    deviation_diagnostics,
    evaluate,
    run_epmq,
    run_naive_ptq,
    run_to_json_dict,
)
from .quant import QuantConfig
from .tensorfile import TensorFileError

SWEEP_AXES = ("bits", "alpha", "samples")


class ConfigError(ValueError):
    """Bad or inconsistent run configuration."""


@dataclass
class RunConfig:
    seed: int = 0
    k: int = 2
    dims: list[int] = field(default_factory=lambda: [8, 16, 12, 6])
    samples_per_task: int = 256
    heldout_samples: int = 256
    merge: MergeSpec = field(default_factory=MergeSpec)
    quant: QuantConfig = field(default_factory=QuantConfig)
    train_steps: int = 100
    train_samples: int = 256
    learning_rate: float = 0.1
    teacher_scale: float = 0.25
    expert_mode: str = "train"
    hidden_activation: str = "relu"
    recompute_trajectory: bool = False
    sweep_bits: list[int] = field(default_factory=lambda: [3, 4, 5, 6, 7, 8])
    sweep_alpha: list[float] = field(default_factory=lambda: [0.0, 0.01, 0.1, 1.0, 10.0])
    sweep_samples: list[int] = field(default_factory=lambda: [64, 128, 256])
    sweep_methods: list[str] = field(default_factory=lambda: ["epmq", "gptq"])

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if len(self.dims) < 2 or any(d < 1 for d in self.dims):
            raise ConfigError(f"dims must be a chain of positive sizes, got {self.dims}")
        if self.samples_per_task < 1 or self.heldout_samples < 1:
            raise ConfigError("sample counts must be >= 1")
        if self.expert_mode not in ("train", "perturb"):
            raise ConfigError(f"unknown expert_mode '{self.expert_mode}'")
        for m in self.sweep_methods:
            if m not in ("rtn", "gptq", "epmq"):
                raise ConfigError(f"unknown sweep method '{m}'")

    def to_json_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["merge"] = dataclasses.asdict(self.merge)
        out["quant"] = dataclasses.asdict(self.quant)
        return out


_TOP_KEYS = {f.name for f in dataclasses.fields(RunConfig)}
_MERGE_KEYS = {f.name for f in dataclasses.fields(MergeSpec)}
_QUANT_KEYS = {f.name for f in dataclasses.fields(QuantConfig)}


def config_from_dict(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(obj) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(obj)
    try:
        if "merge" in kwargs:
            merge_obj = kwargs["merge"]
            bad = set(merge_obj) - _MERGE_KEYS
            if bad:
                raise ConfigError(f"unknown merge keys: {sorted(bad)}")
            kwargs["merge"] = MergeSpec(**merge_obj)
        if "quant" in kwargs:
            quant_obj = kwargs["quant"]
            bad = set(quant_obj) - _QUANT_KEYS
            if bad:
                raise ConfigError(f"unknown quant keys: {sorted(bad)}")
            kwargs["quant"] = QuantConfig(**quant_obj)
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str, overrides: list[str], env: dict | None = None) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: config is not valid JSON: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = obj
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"--set path '{key}' does not address an object")
        target[parts[-1]] = value
    env = os.environ if env is None else env
    if "PMQ_SEED" in env:
        try:
            obj["seed"] = int(env["PMQ_SEED"])
        except ValueError as exc:
            raise ConfigError(f"PMQ_SEED must be an integer, got '{env['PMQ_SEED']}'") from exc
    return config_from_dict(obj)


# ---------------------------------------------------------------------------
# commands


def _expert_paths(out: Path, k: int) -> list[Path]:
    return [out / f"expert{i}.safetensors" for i in range(1, k + 1)]


def _generate_problem(cfg: RunConfig):
    return make_synthetic_tasks(
        seed=cfg.seed,
        num_tasks=cfg.k,
        dims=cfg.dims,
        samples_per_task=cfg.samples_per_task,
        heldout_samples=cfg.heldout_samples,
        train_samples=cfg.train_samples,
        train_steps=cfg.train_steps,
        learning_rate=cfg.learning_rate,
        teacher_scale=cfg.teacher_scale,
        expert_mode=cfg.expert_mode,
        hidden_activation=cfg.hidden_activation,
    )


def cmd_gen(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    problem = _generate_problem(cfg)
    save_checkpoint(problem.base, out / "base.safetensors")
    for path, expert in zip(_expert_paths(out, cfg.k), problem.experts):
        save_checkpoint(expert, path)
    save_calib_set(problem.calib, out / "calib")
    save_calib_set(problem.heldout, out / "heldout")


def cmd_merge(cfg: RunConfig, out: Path) -> None:
    base = load_checkpoint(out / "base.safetensors")
    experts = [load_checkpoint(p) for p in _expert_paths(out, cfg.k)]
    merged = apply_merge(cfg.merge, base, experts)
    save_checkpoint(merged, out / "merged.safetensors")


def _run_quantize(cfg: RunConfig, merged: Checkpoint, experts: list[Checkpoint],
                  calib: CalibSet | None) -> PmqRun:
    if cfg.quant.solver == "epmq":
        if calib is None:
            raise ConfigError("epmq requires calibration data; run `pmq gen` first")
        return run_epmq(
            merged, experts, calib, cfg.quant, recompute_trajectory=cfg.recompute_trajectory
        )
    return run_naive_ptq(
        merged,
        calib,
        cfg.quant,
        experts=experts,
        recompute_trajectory=cfg.recompute_trajectory,
    )


def cmd_quantize(cfg: RunConfig, out: Path) -> None:
    merged = load_checkpoint(out / "merged.safetensors")
    calib_dir = out / "calib"
    calib = load_calib_set(calib_dir) if (calib_dir / "index.json").exists() else None
    expert_files = _expert_paths(out, cfg.k)
    experts = (
        [load_checkpoint(p) for p in expert_files]
        if all(p.exists() for p in expert_files)
        else []
    )
    run = _run_quantize(cfg, merged, experts, calib)
    save_model(run.model, out / "quantized.safetensors")
    blob = json.dumps(
        run_to_json_dict(run, config=cfg.to_json_dict()), sort_keys=True, separators=(",", ":")
    )
    (out / "run.json").write_text(blob + "\n", encoding="utf-8")


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    model = load_model(out / "quantized.safetensors")
    heldout = load_calib_set(out / "heldout")
    result = evaluate(model, heldout)
    rows = [
        {
            "task": task_id,
            "method": cfg.quant.solver,
            "bits": cfg.quant.bits,
            "alpha": cfg.quant.alpha,
            "samples": cfg.samples_per_task,
            "mse": repr(mse),
        }
        for task_id, mse in sorted(result.per_task_mse.items())
    ]
    rows.append(
        {
            "task": "macro",
            "method": cfg.quant.solver,
            "bits": cfg.quant.bits,
            "alpha": cfg.quant.alpha,
            "samples": cfg.samples_per_task,
            "mse": repr(result.macro_mse),
        }
    )
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["task", "method", "bits", "alpha", "samples", "mse"])
        writer.writeheader()
        writer.writerows(rows)

    run_path = out / "run.json"
    expert_files = _expert_paths(out, cfg.k)
    if run_path.exists() and all(p.exists() for p in expert_files):
        merged = load_checkpoint(out / "merged.safetensors")
        experts = [load_checkpoint(p) for p in expert_files]
        run = PmqRun(
            merged=merged,
            experts=experts,
            calib=None,
            cfg=cfg.quant,
            layer_reports=[],
            model=model,
            method=cfg.quant.solver,
        )
        deviation = deviation_diagnostics(run, heldout)
        obj = json.loads(run_path.read_text(encoding="utf-8"))
        obj["deviation"] = [
            {
                "layer_id": row.layer_id,
                "task": row.task_id,
                "quant_norm": row.quant_norm,
                "merge_norm": row.merge_norm,
                "combined_norm": row.combined_norm,
            }
            for row in deviation.rows
        ]
        run_path.write_text(
            json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
        )


def _sweep_point(cfg_dict: dict, axis: str, value, method: str, subdir: str) -> dict:
    """One sweep point: regenerate, merge, quantize, evaluate. Returns a CSV row."""
    cfg = config_from_dict(cfg_dict)
    row: dict = {"axis": axis, "axis_value": value, "method": method, "error": ""}
    try:
        quant = dataclasses.asdict(cfg.quant)
        quant["solver"] = method
        samples = cfg.samples_per_task
        if axis == "bits":
            quant["bits"] = int(value)
        elif axis == "alpha":
            quant["alpha"] = float(value)
        elif axis == "samples":
            samples = int(value)
        else:
            raise ConfigError(f"unknown sweep axis '{axis}'")
        point_cfg = dataclasses.replace(
            cfg, quant=QuantConfig(**quant), samples_per_task=samples
        )
        problem = _generate_problem(point_cfg)
        merged = apply_merge(point_cfg.merge, problem.base, problem.experts)
        start = time.perf_counter()
        run = _run_quantize(point_cfg, merged, problem.experts, problem.calib)
        wall = time.perf_counter() - start
        result = evaluate(run.model, problem.heldout)
        subpath = Path(subdir)
        subpath.mkdir(parents=True, exist_ok=True)
        save_model(run.model, subpath / "quantized.safetensors")
        blob = json.dumps(
            run_to_json_dict(run, config=point_cfg.to_json_dict()),
            sort_keys=True,
            separators=(",", ":"),
        )
        (subpath / "run.json").write_text(blob + "\n", encoding="utf-8")
        for task_id, mse in sorted(result.per_task_mse.items()):
            row[f"mse_task{task_id}"] = repr(mse)
        row["macro_mse"] = repr(result.macro_mse)
        row["wall_time_s"] = repr(wall)
        row["damped"] = str(run.damped_fallback).lower()
    except Exception as exc:  # record the failure, keep sweeping
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def cmd_sweep(cfg: RunConfig, out: Path, axis: str, jobs: int = 1) -> None:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got '{axis}'")
    values = {
        "bits": cfg.sweep_bits,
        "alpha": cfg.sweep_alpha,
        "samples": cfg.sweep_samples,
    }[axis]
    if not values:
        raise ConfigError(f"sweep axis '{axis}' has no values configured")
    out.mkdir(parents=True, exist_ok=True)
    cfg_dict = cfg.to_json_dict()
    points = [
        (value, method, str(out / "sweep" / f"{axis}={value}" / method))
        for value in values
        for method in cfg.sweep_methods
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(
                pool.map(
                    _sweep_point,
                    [cfg_dict] * len(points),
                    [axis] * len(points),
                    [p[0] for p in points],
                    [p[1] for p in points],
                    [p[2] for p in points],
                )
            )
    else:
        rows = [_sweep_point(cfg_dict, axis, v, m, s) for v, m, s in points]

    fieldnames = ["axis", "axis_value", "method"]
    fieldnames += [f"mse_task{i}" for i in range(1, cfg.k + 1)]
    fieldnames += ["macro_mse", "wall_time_s", "damped", "error"]
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, restval="")
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("gen", "generate base/expert checkpoints and calibration data"),
        ("merge", "merge experts into a single checkpoint"),
        ("quantize", "quantize the merged checkpoint"),
        ("eval", "evaluate a quantized checkpoint on held-out data"),
        ("sweep", "sweep one axis and emit a CSV"),
    ):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted-path config override (value parsed as JSON when possible)",
        )
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=SWEEP_AXES)
            p.add_argument("--jobs", type=int, default=1, help="parallel sweep points")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        out = Path(args.out)
        if args.command == "gen":
            cmd_gen(cfg, out)
        elif args.command == "merge":
            cmd_merge(cfg, out)
        elif args.command == "quantize":
            cmd_quantize(cfg, out)
        elif args.command == "eval":
            cmd_eval(cfg, out)
        elif args.command == "sweep":
            cmd_sweep(cfg, out, args.axis, jobs=args.jobs)
        return 0
    except ConfigError as exc:
        print(f"pmq: config error: {exc}", file=sys.stderr)
        return 2
    except (SingularMatrixError, ArithmeticError, FloatingPointError) as exc:
        print(f"pmq: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (TensorFileError, OSError) as exc:
        print(f"pmq: i/o failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
