from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional
import copy
import csv
import hashlib
import logging

import numpy as np
from pydantic import BaseModel
from tqdm import tqdm

from core import __version__
from core import analyze, data, engine, unet
from core.engine import RegistrationConfig, RegistrationResult

logger = logging.getLogger("pipeline")


class RunManifest(BaseModel):
    """Everything needed to reproduce one output directory."""
    version: str = __version__
    command: str = "register"
    config: RegistrationConfig
    seed: int
    inputs: Dict[str, str] = {}
    digests: Dict[str, str] = {}
    started_at: str
    finished_at: Optional[str] = None


@dataclass
class RunContext:
    out_dir: Path
    config: Optional[RegistrationConfig] = None
    base_settings: Dict[str, Any] = field(default_factory=dict)
    overrides: Dict[str, Any] = field(default_factory=dict)
    moving_path: Optional[Path] = None
    fixed_path: Optional[Path] = None
    labels_path: Optional[Path] = None
    save_params: bool = False
    progress: bool = False
    moving: Optional[np.ndarray] = None
    fixed: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    result: Optional[RegistrationResult] = None
    metrics: Dict[str, float] = field(default_factory=dict)
    baseline: Dict[str, float] = field(default_factory=dict)
    folds: Optional[analyze.FoldReport] = None
    digests: Dict[str, str] = field(default_factory=dict)
    started_at: str = field(default_factory=lambda: _now())


class Pipeline:
    """Named steps run in order over a shared context."""

    def __init__(self, progress: bool = False):
        self.steps: List[Callable] = []
        self.progress = progress

    def add(self, func: Callable):
        self.steps.append(func)
        return self

    def run(self, ctx: RunContext) -> RunContext:
        logger.info(f"Starting pipeline with {len(self.steps)} steps")
        for step in tqdm(self.steps, desc="Pipeline", unit="step", disable=not self.progress):
            step_name = getattr(step, "__name__", str(step))
            logger.debug(f"Executing step: {step_name}")
            try:
                ctx = step(ctx)
            except Exception as e:
                logger.error(f"Step {step_name} failed: {e}")
                raise
        logger.info("Pipeline completed")
        return ctx


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# --- steps ---

def load_inputs(ctx: RunContext) -> RunContext:
    ctx.moving = data.read_image(ctx.moving_path)
    ctx.fixed = data.read_image(ctx.fixed_path)
    ctx.digests = {"moving": file_digest(ctx.moving_path), "fixed": file_digest(ctx.fixed_path)}
    if ctx.labels_path is not None:
        ctx.labels = data.read_labels(ctx.labels_path)
        ctx.digests["labels"] = file_digest(ctx.labels_path)
    logger.info(f"Loaded {ctx.moving_path} -> {ctx.fixed_path} ({ctx.moving.shape[1]}x{ctx.moving.shape[0]})")
    return ctx


def resolve_config(base_settings: Dict[str, Any], overrides: Dict[str, Any], size: int) -> RegistrationConfig:
    """Overlay dotted-key overrides (e.g. "similarity.kind") on base settings and fill size defaults."""
    settings = copy.deepcopy(base_settings)
    for key, value in overrides.items():
        target = settings
        *parents, leaf = key.split(".")
        for parent in parents:
            target = target.setdefault(parent, {})
        target[leaf] = value
    return RegistrationConfig.defaults_for(size, **settings)


def configure(ctx: RunContext) -> RunContext:
    if ctx.config is None:
        ctx.config = resolve_config(ctx.base_settings, ctx.overrides, ctx.moving.shape[0])
    logger.debug(f"Resolved config: {ctx.config.model_dump_json()}")
    return ctx


def register_pair(ctx: RunContext) -> RunContext:
    ctx.result = engine.register(ctx.moving, ctx.fixed, ctx.config, labels=ctx.labels, progress=ctx.progress)
    return ctx


def analyze_result(ctx: RunContext) -> RunContext:
    result = ctx.result
    ssim_value, mse_value = analyze.eval_metrics(result.deformed, ctx.fixed)
    ctx.folds = analyze.fold_report(result.field)
    ctx.metrics = {
        "ssim": ssim_value,
        "mse_255": mse_value,
        "fold_count": ctx.folds.fold_count,
        "fold_percent": ctx.folds.fold_percent,
        "iterations": result.iterations_run,
        "final_loss": result.final_loss,
        "seed": ctx.config.seed,
    }
    base_ssim, base_mse = analyze.eval_metrics(ctx.moving, ctx.fixed)
    ctx.baseline = {
        "ssim": base_ssim,
        "mse_255": base_mse,
        "mse_reduction_percent": 100.0 * (1.0 - mse_value / base_mse) if base_mse > 0 else 0.0,
        **analyze.displacement_stats(result.field),
    }
    logger.info(f"SSIM {base_ssim:.4f} -> {ssim_value:.4f}, MSE {base_mse:.3f} -> {mse_value:.3f}, "
                f"folds {ctx.folds.fold_count}")
    return ctx


def write_loss_trace(trace, path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "total", "similarity", "regularizer"])
        for i, (total, sim, reg) in enumerate(trace):
            writer.writerow([i, repr(total), repr(sim), repr(reg)])


def write_outputs(ctx: RunContext) -> RunContext:
    out = ctx.out_dir
    out.mkdir(parents=True, exist_ok=True)
    result = ctx.result
    data.write_image(result.deformed, out / "warped.png")
    data.write_field(result.field, out / "field.dfld")
    if result.deformed_labels is not None:
        data.write_labels(result.deformed_labels, out / "warped_labels.png")
    data.write_image(analyze.render_grid(result.field), out / "grid.png")
    data.write_json(ctx.metrics, out / "metrics.json")
    data.write_json(ctx.baseline, out / "baseline.json")
    write_loss_trace(result.loss_trace, out / "loss_trace.csv")
    if ctx.save_params and result.params is not None:
        unet.save_params(result.params, out / "params.unpw")
    inputs = {k: str(v) for k, v in
              (("moving", ctx.moving_path), ("fixed", ctx.fixed_path), ("labels", ctx.labels_path)) if v is not None}
    manifest = RunManifest(config=ctx.config, seed=ctx.config.seed, inputs=inputs, digests=ctx.digests,
                           started_at=ctx.started_at, finished_at=_now())
    data.write_json(manifest, out / "manifest.json")
    logger.info(f"Outputs written to {out}")
    return ctx


def build_register_pipeline(progress: bool = False) -> Pipeline:
    return (
        Pipeline(progress)
        .add(load_inputs)
        .add(configure)
        .add(register_pair)
        .add(analyze_result)
        .add(write_outputs)
    )


def build_cell_pipeline() -> Pipeline:
    """For sweep cells: inputs are already loaded and registered."""
    return Pipeline().add(analyze_result).add(write_outputs)
